# metrics are in nats; per-layer arrays have n_layer + 1 entries, index 0 is the embedding state
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
import numpy.typing as npt

from engine import tensor_ops
from engine.checkpoint_io import CheckpointBundle
from engine.model_runtime import ResidualTrace, project_residual
from engine.tensor_ops import ContractError
from engine.tokenizer import BpeTokenizer

TargetKind = Literal["sampled", "gold"]

_PROB_TOLERANCE = 1e-6


@dataclass(frozen=True)
class TargetSpec:
    kind: TargetKind
    token_id: int


@dataclass(frozen=True, eq=False)
class LensProfile:
    sampled_token: int
    gold_token: int | None
    ce_vs_sampled: tuple[float, ...]
    ce_vs_gold: tuple[float, ...] | None
    kl_vs_output_logits: tuple[float, ...]
    kl_vs_sampled_onehot: tuple[float, ...]
    cosine_vs_sampled_embedding: tuple[float, ...]
    cosine_vs_gold_embedding: tuple[float, ...] | None
    top_token: tuple[int, ...]
    top_token_prob: tuple[float, ...]
    residual_logits: np.ndarray | None = None

    @property
    def n_layer(self) -> int:
        return len(self.ce_vs_sampled) - 1

    @property
    def output_ce(self) -> float:
        return self.ce_vs_sampled[-1]

    @property
    def correct(self) -> bool | None:
        if self.gold_token is None:
            return None
        return self.sampled_token == self.gold_token

    def series(self, metric: str) -> tuple[float, ...] | None:
        return getattr(self, metric)

    def target(self, kind: TargetKind) -> TargetSpec | None:
        if kind == "sampled":
            return TargetSpec("sampled", self.sampled_token)
        if self.gold_token is None:
            return None
        return TargetSpec("gold", self.gold_token)


def _check_token(token_id: int, vocab_size: int) -> int:
    token_id = int(token_id)
    if not 0 <= token_id < vocab_size:
        raise ContractError(f"target token {token_id} outside vocabulary of {vocab_size}")
    return token_id


def residual_prediction(bundle: CheckpointBundle, e: npt.ArrayLike) -> np.ndarray:
    return project_residual(bundle, np.asarray(e, dtype=np.float32))


def cross_entropy_onehot(logits: npt.ArrayLike, target: int) -> float:
    logits = np.asarray(logits)
    target = _check_token(target, logits.shape[-1])
    return float(-tensor_ops.log_softmax(logits)[target])


def onehot(token_id: int, size: int) -> npt.NDArray[np.float64]:
    p = np.zeros(size, dtype=np.float64)
    p[_check_token(token_id, size)] = 1.0
    return p


def kl_divergence(candidate_logits: npt.ArrayLike, target_probs: npt.ArrayLike) -> float:
    # KL(p || softmax(candidate)), 0 log 0 = 0
    p = np.asarray(target_probs, dtype=np.float64)
    log_q = tensor_ops.log_softmax(candidate_logits)
    if p.shape != log_q.shape:
        raise ContractError(f"distribution shapes differ: {p.shape} vs {log_q.shape}")
    if (p < 0).any() or abs(float(p.sum()) - 1.0) > _PROB_TOLERANCE:
        raise ContractError("target_probs is not a probability vector")
    support = p > 0
    ps = p[support]
    # rounding can push an exact zero slightly negative
    return max(0.0, float(np.sum(ps * (np.log(ps) - log_q[support]))))


def build_profile(
    bundle: CheckpointBundle,
    trace: ResidualTrace,
    gold: int | None = None,
    keep_logits: bool = False,
) -> LensProfile:
    cfg = bundle.config
    if trace.n_layer != cfg.n_layer:
        raise ContractError(f"trace has {trace.n_layer} layers, model has {cfg.n_layer}")
    if gold is not None:
        gold = _check_token(gold, cfg.vocab_size)

    # layer k reuses the model's own logits so the final row is bit-identical to the output
    inner = residual_prediction(bundle, np.stack(trace.states[:-1]))
    all_logits = np.vstack([inner, trace.output_logits[None, :]])

    sampled = tensor_ops.argmax(trace.output_logits)
    p_out = tensor_ops.softmax(trace.output_logits)
    p_sampled = onehot(sampled, cfg.vocab_size)
    sampled_row = bundle.wte[sampled]
    gold_row = bundle.wte[gold] if gold is not None else None

    ce_s: list[float] = []
    ce_g: list[float] = []
    kl_out: list[float] = []
    kl_hot: list[float] = []
    cos_s: list[float] = []
    cos_g: list[float] = []
    top: list[int] = []
    top_prob: list[float] = []
    for state, logits in zip(trace.states, all_logits):
        ce_s.append(cross_entropy_onehot(logits, sampled))
        kl_out.append(kl_divergence(logits, p_out))
        kl_hot.append(kl_divergence(logits, p_sampled))
        cos_s.append(tensor_ops.cosine(state, sampled_row))
        best = tensor_ops.argmax(logits)
        top.append(best)
        top_prob.append(float(np.exp(-cross_entropy_onehot(logits, best))))
        if gold is not None:
            ce_g.append(cross_entropy_onehot(logits, gold))
            cos_g.append(tensor_ops.cosine(state, gold_row))

    return LensProfile(
        sampled_token=sampled,
        gold_token=gold,
        ce_vs_sampled=tuple(ce_s),
        ce_vs_gold=tuple(ce_g) if gold is not None else None,
        kl_vs_output_logits=tuple(kl_out),
        kl_vs_sampled_onehot=tuple(kl_hot),
        cosine_vs_sampled_embedding=tuple(cos_s),
        cosine_vs_gold_embedding=tuple(cos_g) if gold is not None else None,
        top_token=tuple(top),
        top_token_prob=tuple(top_prob),
        residual_logits=all_logits if keep_logits else None,
    )


def profile_delta(profile: LensProfile, target: TargetKind = "gold") -> list[float]:
    ce = profile.ce_vs_gold if target == "gold" else profile.ce_vs_sampled
    if ce is None:
        raise ContractError("profile carries no gold-target cross-entropy")
    return [ce[i] - ce[i - 1] for i in range(1, len(ce))]


def layer_top_tokens(profile: LensProfile, tokenizer: BpeTokenizer) -> list[str]:
    return [tokenizer.token_text(t) for t in profile.top_token]


def series_names(include_gold: bool = True) -> Sequence[str]:
    names = ["ce_vs_sampled", "kl_vs_output_logits", "kl_vs_sampled_onehot", "cosine_vs_sampled_embedding"]
    if include_gold:
        names[1:1] = ["ce_vs_gold"]
        names.append("cosine_vs_gold_embedding")
    return names

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Literal, Sequence

import numpy as np

from engine import tensor_ops
from engine.checkpoint_io import CheckpointBundle, LayerWeights
from engine.tensor_ops import ContractError, Matrix

_log = logging.getLogger(__name__)

SamplerMode = Literal["greedy", "temperature"]


class ContextOverflowError(ContractError):
    pass


class TokenRangeError(ContractError):
    pass


@dataclass(frozen=True, eq=False)
class KVCache:
    keys: tuple[np.ndarray, ...]
    values: tuple[np.ndarray, ...]

    @property
    def length(self) -> int:
        if not self.keys:
            return 0
        return int(self.keys[0].shape[1])


@dataclass(frozen=True, eq=False)
class ResidualTrace:
    states: tuple[np.ndarray, ...]
    output_logits: np.ndarray
    updates: tuple[np.ndarray, ...] | None = None

    @property
    def n_layer(self) -> int:
        return len(self.states) - 1


@dataclass(frozen=True, eq=False)
class ForwardResult:
    logits: np.ndarray
    trace: ResidualTrace
    kv_cache: KVCache | None
    position: int


@dataclass(frozen=True)
class SamplerConfig:
    seed: int = 42
    temperature: float = 0.8
    max_tokens: int = 50
    mode: SamplerMode = "temperature"

    def __post_init__(self) -> None:
        if self.mode not in ("greedy", "temperature"):
            raise ContractError(f"unknown sampler mode {self.mode!r}")
        if self.seed < 0:
            raise ContractError(f"seed must be unsigned, got {self.seed}")
        if self.max_tokens < 0:
            raise ContractError(f"max_tokens must be >= 0, got {self.max_tokens}")
        if self.mode == "temperature" and not (self.temperature > 0 and math.isfinite(self.temperature)):
            raise ContractError(f"temperature must be positive, got {self.temperature}")


@dataclass(frozen=True, eq=False)
class GenerationStep:
    token_id: int
    result: ForwardResult


@dataclass(frozen=True, eq=False)
class GenerationResult:
    prompt: tuple[int, ...]
    steps: tuple[GenerationStep, ...]
    truncated: bool

    @property
    def token_ids(self) -> list[int]:
        return [step.token_id for step in self.steps]


def final_norm(bundle: CheckpointBundle, e: np.ndarray) -> Matrix:
    return tensor_ops.layer_norm(e, bundle.ln_f_g, bundle.ln_f_b, bundle.config.layer_norm_epsilon)


def unembed(bundle: CheckpointBundle, h: np.ndarray) -> Matrix:
    # tied weights: the token embedding table doubles as the output head
    return tensor_ops.linear(h, bundle.wte.T)


def project_residual(bundle: CheckpointBundle, e: np.ndarray) -> Matrix:
    e = np.asarray(e, dtype=np.float32)
    if e.shape[-1] != bundle.config.n_embd:
        raise ContractError(f"residual width {e.shape[-1]} != n_embd {bundle.config.n_embd}")
    return unembed(bundle, final_norm(bundle, e))


def _split_heads(x: np.ndarray, n_head: int) -> np.ndarray:
    t, d = x.shape
    return x.reshape(t, n_head, d // n_head).transpose(1, 0, 2)


def _attention(
    layer: LayerWeights,
    h: np.ndarray,
    n_head: int,
    past_k: np.ndarray | None,
    past_v: np.ndarray | None,
) -> tuple[Matrix, np.ndarray, np.ndarray]:
    d = h.shape[-1]
    qkv = tensor_ops.linear(h, layer.c_attn_w, layer.c_attn_b)
    q, k, v = (_split_heads(part, n_head) for part in np.split(qkv, 3, axis=-1))
    if past_k is not None:
        k = np.concatenate([past_k, k], axis=1)
        v = np.concatenate([past_v, v], axis=1)
    t_new, t_all = q.shape[1], k.shape[1]
    past = t_all - t_new
    scores = np.matmul(q, k.transpose(0, 2, 1), dtype=np.float64) / math.sqrt(d // n_head)
    keep = np.arange(t_all)[None, :] <= (past + np.arange(t_new))[:, None]
    probs = tensor_ops.masked_softmax(scores, keep[None, :, :])
    ctx = np.matmul(probs, v, dtype=np.float64).astype(np.float32)
    ctx = ctx.transpose(1, 0, 2).reshape(t_new, d)
    out = tensor_ops.linear(ctx, layer.attn_proj_w, layer.attn_proj_b)
    return out, np.ascontiguousarray(k), np.ascontiguousarray(v)


def _mlp(layer: LayerWeights, h: np.ndarray) -> Matrix:
    hidden = tensor_ops.gelu(tensor_ops.linear(h, layer.c_fc_w, layer.c_fc_b))
    return tensor_ops.linear(hidden, layer.mlp_proj_w, layer.mlp_proj_b)


def forward(
    bundle: CheckpointBundle,
    tokens: Sequence[int],
    cache: KVCache | None = None,
    record_updates: bool = False,
) -> ForwardResult:
    cfg = bundle.config
    tokens = [int(t) for t in tokens]
    past = cache.length if cache is not None else 0
    if not tokens:
        raise ContractError("forward needs at least one token")
    if past + len(tokens) > cfg.n_ctx:
        raise ContextOverflowError(f"{past + len(tokens)} positions exceed n_ctx={cfg.n_ctx}")
    bad = [t for t in tokens if not 0 <= t < cfg.vocab_size]
    if bad:
        raise TokenRangeError(f"token id {bad[0]} outside vocabulary of {cfg.vocab_size}")

    x = bundle.wte[tokens] + bundle.wpe[past : past + len(tokens)]
    states = [x[-1].copy()]
    updates: list[np.ndarray] = []
    keys: list[np.ndarray] = []
    values: list[np.ndarray] = []
    eps = cfg.layer_norm_epsilon
    for i, layer in enumerate(bundle.layers):
        past_k = cache.keys[i] if cache is not None else None
        past_v = cache.values[i] if cache is not None else None
        attn_out, k, v = _attention(
            layer, tensor_ops.layer_norm(x, layer.ln_1_g, layer.ln_1_b, eps), cfg.n_head, past_k, past_v
        )
        x = x + attn_out
        mlp_out = _mlp(layer, tensor_ops.layer_norm(x, layer.ln_2_g, layer.ln_2_b, eps))
        x = x + mlp_out
        keys.append(k)
        values.append(v)
        states.append(x[-1].copy())
        if record_updates:
            updates.append(attn_out[-1] + mlp_out[-1])

    logits = project_residual(bundle, states[-1])
    trace = ResidualTrace(
        states=tuple(states),
        output_logits=logits,
        updates=tuple(updates) if record_updates else None,
    )
    return ForwardResult(
        logits=logits,
        trace=trace,
        kv_cache=KVCache(keys=tuple(keys), values=tuple(values)),
        position=past + len(tokens) - 1,
    )


def sampled_token(result: ForwardResult) -> int:
    return tensor_ops.argmax(result.logits)


def _choose(logits: np.ndarray, cfg: SamplerConfig, rng: np.random.Generator) -> int:
    if cfg.mode == "greedy":
        return tensor_ops.argmax(logits)
    probs = tensor_ops.softmax(logits, cfg.temperature)
    return int(rng.choice(probs.shape[-1], p=probs))


def generate(bundle: CheckpointBundle, prompt: Sequence[int], cfg: SamplerConfig) -> GenerationResult:
    prompt = tuple(int(t) for t in prompt)
    if not prompt:
        raise ContractError("generate needs a non-empty prompt")
    if cfg.max_tokens == 0:
        return GenerationResult(prompt=prompt, steps=(), truncated=False)

    rng = np.random.default_rng(cfg.seed)
    n_ctx = bundle.config.n_ctx
    steps: list[GenerationStep] = []
    truncated = False
    result = forward(bundle, prompt)
    while True:
        token = _choose(result.logits, cfg, rng)
        # the cache is only needed for the next step; drop it from the stored record
        steps.append(GenerationStep(token_id=token, result=replace(result, kv_cache=None)))
        if len(steps) >= cfg.max_tokens:
            break
        if result.position + 1 >= n_ctx:
            truncated = True
            _log.warning("Generation truncated at n_ctx=%d after %d tokens", n_ctx, len(steps))
            break
        result = forward(bundle, [token], result.kv_cache)
    return GenerationResult(prompt=prompt, steps=tuple(steps), truncated=truncated)

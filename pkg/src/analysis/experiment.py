from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Literal, Sequence

from tqdm import tqdm

from analysis.idiom_dataset import IdiomSample
from analysis.lens_metrics import LensProfile, TargetKind, build_profile, cross_entropy_onehot, series_names
from analysis.statistics import (
    DEFAULT_THRESHOLD,
    BoxStats,
    DeltaLossTable,
    FitSummary,
    RocResult,
    ThresholdReport,
    UndefinedAucError,
    delta_loss_table,
    fit_distributions,
    layer_aggregates,
    roc_auc,
    threshold_report,
)
from engine.checkpoint_io import CheckpointBundle
from engine.model_runtime import SamplerConfig, forward, generate, sampled_token
from engine.tensor_ops import ContractError
from engine.tokenizer import BpeTokenizer
from util.timefmt import fmt_duration

_log = logging.getLogger(__name__)

FlagTarget = Literal["argmax", "drawn"]


@dataclass(frozen=True)
class ExperimentOptions:
    workers: int = 4
    threshold: float = DEFAULT_THRESHOLD
    delta_target: TargetKind = "gold"
    metrics: tuple[str, ...] = tuple(series_names())
    keep_logits: bool = False
    progress: bool = True


@dataclass(frozen=True, eq=False)
class SampleOutcome:
    sample: IdiomSample
    profile: LensProfile


@dataclass(frozen=True)
class SampleFailure:
    source_index: int
    reason: str


@dataclass(frozen=True, eq=False)
class IdiomRunResult:
    outcomes: tuple[SampleOutcome, ...]
    failures: tuple[SampleFailure, ...]
    aggregates: dict[tuple[str, str], list[BoxStats | None]]
    delta_table: DeltaLossTable
    roc: RocResult | None
    roc_undefined: str | None
    fits: FitSummary
    threshold: ThresholdReport
    elapsed_seconds: float = field(default=0.0, compare=False)

    @property
    def profiles(self) -> list[LensProfile]:
        return [o.profile for o in self.outcomes]

    @property
    def correct_scores(self) -> list[float]:
        return [o.profile.output_ce for o in self.outcomes if o.profile.correct]

    @property
    def incorrect_scores(self) -> list[float]:
        return [o.profile.output_ce for o in self.outcomes if o.profile.correct is False]


def profile_sample(
    bundle: CheckpointBundle,
    tokenizer: BpeTokenizer,
    sample: IdiomSample,
    keep_logits: bool = False,
) -> LensProfile:
    tokens = tokenizer.encode(sample.prompt)
    result = forward(bundle, tokens)
    return build_profile(bundle, result.trace, gold=sample.target_token, keep_logits=keep_logits)


def _profile_all(
    bundle: CheckpointBundle,
    tokenizer: BpeTokenizer,
    samples: Sequence[IdiomSample],
    options: ExperimentOptions,
) -> tuple[list[SampleOutcome], list[SampleFailure]]:
    outcomes: list[SampleOutcome] = []
    failures: list[SampleFailure] = []
    with ThreadPoolExecutor(max_workers=max(1, options.workers)) as pool:
        futures = {
            pool.submit(profile_sample, bundle, tokenizer, sample, options.keep_logits): sample for sample in samples
        }
        bar = tqdm(total=len(futures), desc="idioms", unit="prompt", disable=not options.progress)
        for future in as_completed(futures):
            sample = futures[future]
            try:
                outcomes.append(SampleOutcome(sample=sample, profile=future.result()))
            except Exception as exc:
                _log.warning("Sample %d failed: %s", sample.source_index, exc)
                failures.append(SampleFailure(source_index=sample.source_index, reason=str(exc) or type(exc).__name__))
            bar.update(1)
        bar.close()
    # ordered reduce so results never depend on scheduling
    outcomes.sort(key=lambda o: o.sample.source_index)
    failures.sort(key=lambda f: f.source_index)
    return outcomes, failures


def run_idiom_experiment(
    bundle: CheckpointBundle,
    tokenizer: BpeTokenizer,
    samples: Sequence[IdiomSample],
    options: ExperimentOptions | None = None,
) -> IdiomRunResult:
    options = options or ExperimentOptions()
    if not samples:
        raise ContractError("run_idiom_experiment needs at least one sample")
    started = time.monotonic()
    outcomes, failures = _profile_all(bundle, tokenizer, samples, options)
    profiles = [o.profile for o in outcomes]

    correct = [p.output_ce for p in profiles if p.correct]
    incorrect = [p.output_ce for p in profiles if p.correct is False]
    roc: RocResult | None = None
    roc_undefined: str | None = None
    try:
        roc = roc_auc(correct, incorrect)
    except UndefinedAucError as exc:
        roc_undefined = str(exc)
        _log.warning("ROC not computed: %s", exc)

    result = IdiomRunResult(
        outcomes=tuple(outcomes),
        failures=tuple(failures),
        aggregates=layer_aggregates(profiles, options.metrics),
        delta_table=delta_loss_table(profiles, options.delta_target),
        roc=roc,
        roc_undefined=roc_undefined,
        fits=fit_distributions(correct, incorrect, options.threshold),
        threshold=threshold_report(correct, incorrect, options.threshold),
        elapsed_seconds=time.monotonic() - started,
    )
    _log.info(
        "Idiom run: %d profiled (%d correct, %d incorrect), %d failed, AUC=%s in %s",
        len(outcomes),
        len(correct),
        len(incorrect),
        len(failures),
        f"{roc.auc:.4f}" if roc else "undefined",
        fmt_duration(result.elapsed_seconds),
    )
    return result


def extreme_samples(
    outcomes: Sequence[SampleOutcome],
    n: int,
) -> tuple[list[SampleOutcome], list[SampleOutcome]]:
    ranked = sorted(outcomes, key=lambda o: (o.profile.output_ce, o.sample.source_index))
    n = max(0, min(n, len(ranked)))
    lowest = ranked[:n]
    highest = sorted(outcomes, key=lambda o: (-o.profile.output_ce, o.sample.source_index))[:n]
    return lowest, highest


@dataclass(frozen=True)
class TokenRecord:
    index: int
    token_id: int
    token_text: str
    argmax_token_id: int
    ce_vs_argmax: float
    ce_vs_sampled: float
    flagged: bool


@dataclass(frozen=True)
class ScanResult:
    records: tuple[TokenRecord, ...]
    truncated: bool
    prompt_tokens: int


def generation_scan(
    bundle: CheckpointBundle,
    tokenizer: BpeTokenizer,
    prompt: str,
    cfg: SamplerConfig,
    threshold: float = DEFAULT_THRESHOLD,
    flag_target: FlagTarget = "argmax",
) -> ScanResult:
    if not prompt:
        raise ContractError("generation_scan needs a non-empty prompt")
    prompt_ids = tokenizer.encode(prompt)
    if cfg.max_tokens == 0:
        return ScanResult(records=(), truncated=False, prompt_tokens=len(prompt_ids))
    generation = generate(bundle, prompt_ids, cfg)
    records: list[TokenRecord] = []
    for index, step in enumerate(generation.steps):
        argmax_id = sampled_token(step.result)
        ce_argmax = cross_entropy_onehot(step.result.logits, argmax_id)
        ce_drawn = cross_entropy_onehot(step.result.logits, step.token_id)
        score = ce_argmax if flag_target == "argmax" else ce_drawn
        records.append(
            TokenRecord(
                index=index,
                token_id=step.token_id,
                token_text=tokenizer.token_text(step.token_id),
                argmax_token_id=argmax_id,
                ce_vs_argmax=ce_argmax,
                ce_vs_sampled=ce_drawn,
                flagged=score > threshold,
            )
        )
    flagged = sum(r.flagged for r in records)
    _log.info("Generated %d tokens, %d above CE threshold %.2f", len(records), flagged, threshold)
    return ScanResult(records=tuple(records), truncated=generation.truncated, prompt_tokens=len(prompt_ids))

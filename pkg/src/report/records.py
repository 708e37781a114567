from __future__ import annotations

import math
from typing import Any, Sequence

from analysis.experiment import IdiomRunResult, SampleOutcome, ScanResult, TokenRecord
from analysis.lens_metrics import LensProfile
from analysis.statistics import BoxStats, DeltaLossTable, RocResult
from engine.tokenizer import BpeTokenizer

VERSION = 1

PROFILE_FIELDS = (
    "v",
    "manifest_id",
    "source_index",
    "prompt",
    "target_word",
    "target_token",
    "sampled_token",
    "correct",
    "output_ce",
    "ce_vs_sampled",
    "ce_vs_gold",
    "kl_vs_output_logits",
    "kl_vs_sampled_onehot",
    "cosine_vs_sampled_embedding",
    "cosine_vs_gold_embedding",
    "top_token",
    "top_token_prob",
)
AGGREGATE_FIELDS = (
    "metric",
    "group",
    "layer",
    "n",
    "q1",
    "median",
    "q3",
    "whisker_low",
    "whisker_high",
    "n_outliers",
    "outliers",
)
DELTA_FIELDS = ("layer", "target", "correct", "incorrect", "all")
ROC_FIELDS = ("threshold", "fpr", "tpr")
EXTREME_FIELDS = (
    "rank",
    "kind",
    "source_index",
    "prompt",
    "target_word",
    "output_ce",
    "layer",
    "top_token",
    "top_token_text",
)
TOKEN_FIELDS = ("index", "token_id", "token_text", "argmax_token_id", "ce_vs_argmax", "ce_vs_sampled", "flagged")
TRACE_BASE_FIELDS = ("layer", "top_token", "top_token_text", "top_token_prob")
TRACE_METRIC_FIELDS = {
    "ce": ("ce_vs_sampled", "ce_vs_gold"),
    "kl": ("kl_vs_output_logits", "kl_vs_sampled_onehot"),
    "cosine": ("cosine_vs_sampled", "cosine_vs_gold"),
}
SUMMARY_FIELDS = (
    "v",
    "manifest_id",
    "counts",
    "auc",
    "u_statistic",
    "roc_undefined",
    "fits",
    "threshold_report",
    "delta_target",
)

# profile series selected by each --metric choice
METRIC_SERIES = {
    "ce": ("ce_vs_sampled", "ce_vs_gold"),
    "kl": ("kl_vs_output_logits", "kl_vs_sampled_onehot"),
    "cosine": ("cosine_vs_sampled_embedding", "cosine_vs_gold_embedding"),
}


class SchemaError(ValueError):
    pass


def metric_series(metric: str) -> tuple[str, ...]:
    if metric == "all":
        return tuple(s for group in METRIC_SERIES.values() for s in group)
    return METRIC_SERIES[metric]


def trace_fields(metric: str) -> tuple[str, ...]:
    if metric == "all":
        extra = tuple(f for group in TRACE_METRIC_FIELDS.values() for f in group)
    else:
        extra = TRACE_METRIC_FIELDS[metric]
    return TRACE_BASE_FIELDS + extra


def check_record(record: dict[str, Any], fields: Sequence[str]) -> dict[str, Any]:
    if tuple(record) != tuple(fields):
        raise SchemaError(f"record fields {tuple(record)} do not match schema {tuple(fields)}")
    return record


def _floats(values: Sequence[float] | None) -> list[float] | None:
    return None if values is None else [float(v) for v in values]


def build_profile_record(outcome: SampleOutcome, manifest_id: str) -> dict[str, Any]:
    p = outcome.profile
    s = outcome.sample
    return check_record(
        {
            "v": VERSION,
            "manifest_id": manifest_id,
            "source_index": s.source_index,
            "prompt": s.prompt,
            "target_word": s.target_word,
            "target_token": s.target_token,
            "sampled_token": p.sampled_token,
            "correct": p.correct,
            "output_ce": p.output_ce,
            "ce_vs_sampled": _floats(p.ce_vs_sampled),
            "ce_vs_gold": _floats(p.ce_vs_gold),
            "kl_vs_output_logits": _floats(p.kl_vs_output_logits),
            "kl_vs_sampled_onehot": _floats(p.kl_vs_sampled_onehot),
            "cosine_vs_sampled_embedding": _floats(p.cosine_vs_sampled_embedding),
            "cosine_vs_gold_embedding": _floats(p.cosine_vs_gold_embedding),
            "top_token": list(p.top_token),
            "top_token_prob": _floats(p.top_token_prob),
        },
        PROFILE_FIELDS,
    )


def _box_row(metric: str, group: str, layer: int, box: BoxStats) -> dict[str, Any]:
    return {
        "metric": metric,
        "group": group,
        "layer": layer,
        "n": box.n,
        "q1": box.q1,
        "median": box.median,
        "q3": box.q3,
        "whisker_low": box.whisker_low,
        "whisker_high": box.whisker_high,
        "n_outliers": len(box.outliers),
        "outliers": " ".join(repr(v) for v in box.outliers),
    }


def aggregate_rows(aggregates: dict[tuple[str, str], list[BoxStats | None]]) -> list[dict[str, Any]]:
    rows: list[dict[str, Any]] = []
    for (metric, group), boxes in aggregates.items():
        for layer, box in enumerate(boxes):
            if box is not None:
                rows.append(_box_row(metric, group, layer, box))
    return rows


def delta_rows(table: DeltaLossTable) -> list[dict[str, Any]]:
    return [
        {"layer": r.layer, "target": table.target, "correct": r.correct, "incorrect": r.incorrect, "all": r.all}
        for r in table.rows
    ]


def roc_rows(roc: RocResult | None) -> list[dict[str, Any]]:
    if roc is None:
        return []
    return [
        # the (0, 0) corner has no finite cutoff
        {"threshold": cutoff if math.isfinite(cutoff) else None, "fpr": fpr, "tpr": tpr}
        for cutoff, (fpr, tpr) in zip(roc.thresholds, roc.points)
    ]


def extreme_rows(
    lowest: Sequence[SampleOutcome],
    highest: Sequence[SampleOutcome],
    tokenizer: BpeTokenizer,
) -> list[dict[str, Any]]:
    rows: list[dict[str, Any]] = []
    for kind, group in (("lowest", lowest), ("highest", highest)):
        for rank, outcome in enumerate(group, start=1):
            for layer, token in enumerate(outcome.profile.top_token):
                rows.append(
                    {
                        "rank": rank,
                        "kind": kind,
                        "source_index": outcome.sample.source_index,
                        "prompt": outcome.sample.prompt,
                        "target_word": outcome.sample.target_word,
                        "output_ce": outcome.profile.output_ce,
                        "layer": layer,
                        "top_token": token,
                        "top_token_text": tokenizer.token_text(token),
                    }
                )
    return rows


def build_summary(result: IdiomRunResult, manifest_id: str) -> dict[str, Any]:
    roc = result.roc
    return check_record(
        {
            "v": VERSION,
            "manifest_id": manifest_id,
            "counts": {
                "samples": len(result.outcomes) + len(result.failures),
                "correct": len(result.correct_scores),
                "incorrect": len(result.incorrect_scores),
                "failed": len(result.failures),
            },
            "auc": roc.auc if roc else None,
            "u_statistic": roc.u_statistic if roc else None,
            "roc_undefined": result.roc_undefined,
            "fits": result.fits.to_dict(),
            "threshold_report": result.threshold.to_dict(),
            "delta_target": result.delta_table.target,
        },
        SUMMARY_FIELDS,
    )


def build_token_record(record: TokenRecord) -> dict[str, Any]:
    return check_record(
        {
            "index": record.index,
            "token_id": record.token_id,
            "token_text": record.token_text,
            "argmax_token_id": record.argmax_token_id,
            "ce_vs_argmax": record.ce_vs_argmax,
            "ce_vs_sampled": record.ce_vs_sampled,
            "flagged": record.flagged,
        },
        TOKEN_FIELDS,
    )


def token_records(scan: ScanResult) -> list[dict[str, Any]]:
    return [build_token_record(r) for r in scan.records]


def trace_rows(profile: LensProfile, tokenizer: BpeTokenizer, metric: str = "all") -> list[dict[str, Any]]:
    fields = trace_fields(metric)
    rows: list[dict[str, Any]] = []
    for layer in range(profile.n_layer + 1):
        full = {
            "layer": layer,
            "top_token": profile.top_token[layer],
            "top_token_text": tokenizer.token_text(profile.top_token[layer]),
            "top_token_prob": profile.top_token_prob[layer],
            "ce_vs_sampled": profile.ce_vs_sampled[layer],
            "ce_vs_gold": profile.ce_vs_gold[layer] if profile.ce_vs_gold else None,
            "kl_vs_output_logits": profile.kl_vs_output_logits[layer],
            "kl_vs_sampled_onehot": profile.kl_vs_sampled_onehot[layer],
            "cosine_vs_sampled": profile.cosine_vs_sampled_embedding[layer],
            "cosine_vs_gold": profile.cosine_vs_gold_embedding[layer] if profile.cosine_vs_gold_embedding else None,
        }
        rows.append(check_record({k: full[k] for k in fields}, fields))
    return rows

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import stats
from sklearn.metrics import auc as trapezoid_auc
from sklearn.metrics import roc_curve

from analysis.lens_metrics import LensProfile, TargetKind, profile_delta
from engine.tensor_ops import ContractError

GROUPS = ("correct", "incorrect", "all")
WHISKER_IQR = 1.5
DEFAULT_THRESHOLD = 1.5


class UndefinedAucError(ContractError):
    pass


@dataclass(frozen=True)
class BoxStats:
    n: int
    q1: float
    median: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: tuple[float, ...]


def box_stats(values: Iterable[float]) -> BoxStats | None:
    data = np.sort(np.asarray(list(values), dtype=np.float64))
    if data.size == 0:
        return None
    q1, median, q3 = (float(v) for v in np.percentile(data, [25, 50, 75]))
    iqr = q3 - q1
    low_fence = q1 - WHISKER_IQR * iqr
    high_fence = q3 + WHISKER_IQR * iqr
    inside = data[(data >= low_fence) & (data <= high_fence)]
    outliers = data[(data < low_fence) | (data > high_fence)]
    return BoxStats(
        n=int(data.size),
        q1=q1,
        median=median,
        q3=q3,
        whisker_low=float(inside.min()),
        whisker_high=float(inside.max()),
        outliers=tuple(float(v) for v in outliers),
    )


def _in_group(profile: LensProfile, group: str) -> bool:
    if group == "all":
        return True
    if profile.correct is None:
        return False
    return profile.correct if group == "correct" else not profile.correct


def layer_aggregates(
    profiles: Sequence[LensProfile],
    metrics: Sequence[str],
) -> dict[tuple[str, str], list[BoxStats | None]]:
    out: dict[tuple[str, str], list[BoxStats | None]] = {}
    for metric in metrics:
        for group in GROUPS:
            rows = [p.series(metric) for p in profiles if _in_group(p, group)]
            rows = [r for r in rows if r is not None]
            if not rows:
                continue
            matrix = np.asarray(rows, dtype=np.float64)
            out[(metric, group)] = [box_stats(matrix[:, layer]) for layer in range(matrix.shape[1])]
    return out


@dataclass(frozen=True)
class DeltaRow:
    layer: int
    correct: float | None
    incorrect: float | None
    all: float | None

    def value(self, group: str) -> float | None:
        return getattr(self, group)


@dataclass(frozen=True)
class DeltaLossTable:
    target: TargetKind
    rows: tuple[DeltaRow, ...]

    def column_sum(self, group: str) -> float | None:
        values = [row.value(group) for row in self.rows]
        if any(v is None for v in values):
            return None
        return float(sum(values))


def delta_loss_table(profiles: Sequence[LensProfile], target: TargetKind = "gold") -> DeltaLossTable:
    if not profiles:
        return DeltaLossTable(target=target, rows=())
    deltas = {g: [profile_delta(p, target) for p in profiles if _in_group(p, g)] for g in GROUPS}
    n_rows = len(profile_delta(profiles[0], target))
    means: dict[str, list[float | None]] = {}
    for group, rows in deltas.items():
        if rows:
            means[group] = [float(v) for v in np.asarray(rows, dtype=np.float64).mean(axis=0)]
        else:
            means[group] = [None] * n_rows
    return DeltaLossTable(
        target=target,
        rows=tuple(
            DeltaRow(layer=i + 1, correct=means["correct"][i], incorrect=means["incorrect"][i], all=means["all"][i])
            for i in range(n_rows)
        ),
    )


@dataclass(frozen=True)
class RocResult:
    points: tuple[tuple[float, float], ...]
    thresholds: tuple[float, ...]
    auc: float
    u_statistic: float
    n_correct: int
    n_incorrect: int


def mann_whitney_u(correct_scores: Sequence[float], incorrect_scores: Sequence[float]) -> float:
    # ties count one half
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        result = stats.mannwhitneyu(
            np.asarray(incorrect_scores, dtype=np.float64),
            np.asarray(correct_scores, dtype=np.float64),
            alternative="two-sided",
            method="asymptotic",
        )
    return float(result.statistic)


def roc_auc(correct_scores: Sequence[float], incorrect_scores: Sequence[float]) -> RocResult:
    # rule: score <= cutoff predicts correct
    n_correct, n_incorrect = len(correct_scores), len(incorrect_scores)
    if n_correct == 0 or n_incorrect == 0:
        raise UndefinedAucError(
            f"AUC undefined with {n_correct} correct and {n_incorrect} incorrect samples"
        )
    labels = np.concatenate([np.ones(n_correct), np.zeros(n_incorrect)])
    scores = np.concatenate([np.asarray(correct_scores, dtype=np.float64), np.asarray(incorrect_scores, dtype=np.float64)])
    fpr, tpr, thresholds = roc_curve(labels, -scores, drop_intermediate=False)
    if fpr[0] != 0.0 or tpr[0] != 0.0:
        fpr = np.concatenate([[0.0], fpr])
        tpr = np.concatenate([[0.0], tpr])
        thresholds = np.concatenate([[np.inf], thresholds])
    return RocResult(
        points=tuple((float(x), float(y)) for x, y in zip(fpr, tpr)),
        thresholds=tuple(float(-t) for t in thresholds),
        auc=float(trapezoid_auc(fpr, tpr)),
        u_statistic=mann_whitney_u(correct_scores, incorrect_scores),
        n_correct=n_correct,
        n_incorrect=n_incorrect,
    )


@dataclass(frozen=True)
class FitSummary:
    correct_mean: float | None
    correct_rate: float | None
    correct_ks: float | None
    incorrect_mean: float | None
    incorrect_std: float | None
    incorrect_ks: float | None
    threshold: float

    def to_dict(self) -> dict[str, float | None]:
        def clean(v: float | None) -> float | None:
            return None if v is None or not math.isfinite(v) else v

        return {
            "correct_exponential_mean": clean(self.correct_mean),
            "correct_exponential_rate": clean(self.correct_rate),
            "correct_ks_statistic": clean(self.correct_ks),
            "incorrect_normal_mean": clean(self.incorrect_mean),
            "incorrect_normal_std": clean(self.incorrect_std),
            "incorrect_ks_statistic": clean(self.incorrect_ks),
            "threshold": self.threshold,
        }


def fit_distributions(
    correct_scores: Sequence[float],
    incorrect_scores: Sequence[float],
    threshold: float = DEFAULT_THRESHOLD,
) -> FitSummary:
    correct = np.asarray(correct_scores, dtype=np.float64)
    incorrect = np.asarray(incorrect_scores, dtype=np.float64)
    c_mean = c_rate = c_ks = None
    i_mean = i_std = i_ks = None
    if correct.size:
        c_mean = float(correct.mean())
        if c_mean > 0:
            _, scale = stats.expon.fit(correct, floc=0)
            c_mean = float(scale)
            c_rate = 1.0 / c_mean
            c_ks = float(stats.kstest(correct, "expon", args=(0.0, c_mean)).statistic)
        else:
            c_rate = math.inf
    if incorrect.size:
        loc, scale = stats.norm.fit(incorrect)
        i_mean, i_std = float(loc), float(scale)
        if i_std > 0:
            i_ks = float(stats.kstest(incorrect, "norm", args=(i_mean, i_std)).statistic)
    return FitSummary(
        correct_mean=c_mean,
        correct_rate=c_rate,
        correct_ks=c_ks,
        incorrect_mean=i_mean,
        incorrect_std=i_std,
        incorrect_ks=i_ks,
        threshold=float(threshold),
    )


@dataclass(frozen=True)
class ThresholdReport:
    threshold: float
    flagged_incorrect: int
    flagged_correct: int
    missed_incorrect: int
    passed_correct: int

    @property
    def precision(self) -> float | None:
        flagged = self.flagged_incorrect + self.flagged_correct
        return self.flagged_incorrect / flagged if flagged else None

    @property
    def recall(self) -> float | None:
        total = self.flagged_incorrect + self.missed_incorrect
        return self.flagged_incorrect / total if total else None

    def to_dict(self) -> dict[str, float | int | None]:
        return {
            "threshold": self.threshold,
            "flagged_incorrect": self.flagged_incorrect,
            "flagged_correct": self.flagged_correct,
            "missed_incorrect": self.missed_incorrect,
            "passed_correct": self.passed_correct,
            "precision": self.precision,
            "recall": self.recall,
        }


def threshold_report(
    correct_scores: Sequence[float],
    incorrect_scores: Sequence[float],
    threshold: float = DEFAULT_THRESHOLD,
) -> ThresholdReport:
    flagged_incorrect = sum(1 for s in incorrect_scores if s > threshold)
    flagged_correct = sum(1 for s in correct_scores if s > threshold)
    return ThresholdReport(
        threshold=float(threshold),
        flagged_incorrect=flagged_incorrect,
        flagged_correct=flagged_correct,
        missed_incorrect=len(incorrect_scores) - flagged_incorrect,
        passed_correct=len(correct_scores) - flagged_correct,
    )

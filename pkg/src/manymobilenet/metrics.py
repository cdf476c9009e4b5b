"""Binary-classification metrics: confusion counts, rates, AUROC, AUPRC, selection and ranking scores.

Class 1 (gradable) is the positive class and a sample is predicted positive
when its score is ``>=`` the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MetricError

POSITIVE_CLASS = 1
DEFAULT_THRESHOLD = 0.5
SELECTION_METRICS = ("acc", "auc", "average")
# what the "average" selection metric averages; configurable per call
AVERAGE_COMPONENTS = ("accuracy", "auroc")

REPORT_KEYS = (
    "accuracy",
    "auroc",
    "auprc",
    "sensitivity",
    "specificity",
    "metric_kind",
    "metric_value",
    "tp",
    "fp",
    "tn",
    "fn",
)


def _as_scored(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise MetricError(f"{s.size} scores vs {y.size} labels")
    if s.size == 0:
        raise MetricError("no samples")
    if not np.isin(y, (0, 1)).all():
        raise MetricError("labels must be 0 or 1")
    if not np.isfinite(s).all():
        raise MetricError("scores must be finite")
    return s, y.astype(np.int64)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int
    threshold: float = DEFAULT_THRESHOLD

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.tn + self.fp


def confusion(scores, labels, threshold: float = DEFAULT_THRESHOLD) -> ConfusionCounts:
    s, y = _as_scored(scores, labels)
    pred = s >= threshold
    pos = y == 1
    return ConfusionCounts(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
        threshold=float(threshold),
    )


def binary_rates(c: ConfusionCounts) -> dict[str, float]:
    """Accuracy, sensitivity (TPR) and specificity (TNR); a zero denominator raises."""
    n = c.tp + c.fp + c.tn + c.fn
    if n == 0:
        raise MetricError("accuracy undefined for zero samples")
    if c.positives == 0:
        raise MetricError("sensitivity undefined without positives")
    if c.negatives == 0:
        raise MetricError("specificity undefined without negatives")
    return {
        "accuracy": (c.tp + c.tn) / n,
        "sensitivity": c.tp / c.positives,
        "specificity": c.tn / c.negatives,
    }


def _average_ranks(s: np.ndarray) -> np.ndarray:
    uniq, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    first = np.concatenate(([0], np.cumsum(counts)[:-1]))
    # 1-based mean rank of each tie group
    return (first + (counts + 1) / 2.0)[inverse]


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: (concordant pairs + 0.5 * tied pairs) / (P * N)."""
    s, y = _as_scored(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs at least one positive and one negative")
    rank_sum = _average_ranks(s)[y == 1].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision: sum over descending unique thresholds of (R_k - R_{k-1}) * P_k."""
    s, y = _as_scored(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("AUPRC needs at least one positive")
    uniq, inverse = np.unique(-s, return_inverse=True)
    pos_at = np.bincount(inverse, weights=(y == 1), minlength=uniq.size)
    all_at = np.bincount(inverse, minlength=uniq.size)
    tp = np.cumsum(pos_at)
    predicted = np.cumsum(all_at)
    precision = tp / predicted
    recall_step = pos_at / n_pos
    return float(np.sum(recall_step * precision))


def selection_value(kind: str, rates: dict, average_of=AVERAGE_COMPONENTS) -> float:
    """Checkpoint-selection score: ``acc``, ``auc`` or the mean of ``average_of``."""
    if kind == "acc":
        return rates["accuracy"]
    if kind == "auc":
        return rates["auroc"]
    if kind == "average":
        return float(sum(rates[k] for k in average_of) / len(average_of))
    raise MetricError(f"unknown selection metric {kind!r}; expected one of {SELECTION_METRICS}")


@dataclass
class MetricsReport:
    accuracy: float
    auroc: float
    auprc: float
    sensitivity: float
    specificity: float
    metric_kind: str
    metric_value: float
    tp: int
    fp: int
    tn: int
    fn: int
    threshold: float = DEFAULT_THRESHOLD
    ranking_score: float | None = None

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_KEYS}

    def to_text(self) -> str:
        """Flat ``key=value`` text; floats use shortest round-trip repr."""
        lines = [
            f"# positive_class={POSITIVE_CLASS}",
            f"# predict_positive=score>={self.threshold!r}",
        ]
        for k, v in self.as_dict().items():
            lines.append(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}")
        if self.ranking_score is not None:
            lines.append(f"# ranking_score={self.ranking_score!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        values = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            values[key] = value
        if set(values) != set(REPORT_KEYS):
            raise MetricError(f"metrics keys {sorted(values)} != {sorted(REPORT_KEYS)}")
        kw = {}
        for k, v in values.items():
            if k == "metric_kind":
                kw[k] = v
            elif k in ("tp", "fp", "tn", "fn"):
                kw[k] = int(v)
            else:
                kw[k] = float(v)
        return cls(**kw)


def evaluate(
    scores,
    labels,
    threshold: float = DEFAULT_THRESHOLD,
    metric: str = "average",
    average_of=AVERAGE_COMPONENTS,
) -> MetricsReport:
    """Full report for positive-class scores; needs both classes present."""
    c = confusion(scores, labels, threshold)
    rates = binary_rates(c)
    rates["auroc"] = auroc(scores, labels)
    rates["auprc"] = auprc(scores, labels)
    return MetricsReport(
        accuracy=rates["accuracy"],
        auroc=rates["auroc"],
        auprc=rates["auprc"],
        sensitivity=rates["sensitivity"],
        specificity=rates["specificity"],
        metric_kind=metric,
        metric_value=selection_value(metric, rates, average_of),
        tp=c.tp,
        fp=c.fp,
        tn=c.tn,
        fn=c.fn,
        threshold=c.threshold,
    )


RANKABLE = ("accuracy", "auroc", "auprc", "sensitivity", "specificity")


def ranking_score(report: MetricsReport, weights: dict[str, float]) -> float:
    """Weighted mean of report metrics.  Weights come from the caller; none are built in."""
    if not weights:
        raise MetricError("ranking weights are empty")
    total = 0.0
    for name, w in weights.items():
        if name not in RANKABLE:
            raise MetricError(f"unknown metric {name!r} in ranking weights")
        if w < 0:
            raise MetricError(f"negative weight for {name}")
        total += w
    if total <= 0:
        raise MetricError("ranking weights must sum to a positive value")
    return float(sum(w * getattr(report, name) for name, w in weights.items()) / total)

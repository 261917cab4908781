"""Evaluation metrics: ranking AUCs, ordinal agreement, and deviation in
hours for the stay-length task, plus a bootstrap CI and run comparison.

All functions are pure and operate on plain arrays. The test suite checks
each against a brute-force oracle (pair counting, exhaustive thresholds,
hand confusion matrices).
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field

import numpy as np


class UndefinedMetricError(ValueError):
    """The metric is undefined for this input (e.g. one class only)."""


# Remaining-stay buckets in hours: under a day, seven day-long buckets,
# over-a-week-but-under-two, and over two weeks. Right-open boundaries.
LOS_BUCKET_EDGES_HOURS = (24.0, 48.0, 72.0, 96.0, 120.0, 144.0, 168.0,
                          192.0, 336.0)
N_LOS_BUCKETS = len(LOS_BUCKET_EDGES_HOURS) + 1
# Midpoints per bucket; the open top bucket is represented by 720h (30 days).
LOS_BUCKET_REP_HOURS = (12.0, 36.0, 60.0, 84.0, 108.0, 132.0, 156.0,
                        180.0, 264.0, 720.0)


def los_bucket(remaining_hours: float) -> int:
    """Map nonnegative remaining hours to one of the 10 buckets."""
    if remaining_hours < 0:
        raise ValueError(f"remaining hours must be nonnegative, got {remaining_hours}")
    return int(np.searchsorted(LOS_BUCKET_EDGES_HOURS, remaining_hours,
                               side="right"))


def _validate_binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"scores and labels differ in length: "
                         f"{scores.size} vs {labels.size}")
    if scores.size == 0:
        raise UndefinedMetricError("empty input")
    uniq = np.unique(labels)
    if not np.isin(uniq, (0, 1)).all():
        raise ValueError(f"labels must be binary 0/1, got values {uniq}")
    if uniq.size < 2:
        raise UndefinedMetricError("AUC undefined: only one class present")
    return scores, labels.astype(np.int64)


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """Ranks starting at 1, ties sharing the mean of their positions."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc_roc(scores, labels) -> float:
    """Probability a positive outranks a negative, ties counting half.

    Equals the Mann-Whitney U statistic normalized by the number of
    positive-negative pairs.
    """
    scores, labels = _validate_binary(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    ranks = _average_ranks(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_pr(scores, labels) -> float:
    """Average precision: sum of precision-weighted recall increments over
    descending score thresholds."""
    scores, labels = _validate_binary(scores, labels)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    # thresholds sit at the last index of each tied-score run
    last_of_run = np.nonzero(np.diff(s, append=np.nan) != 0)[0]
    n_pos = tp[-1]
    recall = tp[last_of_run] / n_pos
    precision = tp[last_of_run] / (tp[last_of_run] + fp[last_of_run])
    prev_recall = np.concatenate(([0.0], recall[:-1]))
    return float(((recall - prev_recall) * precision).sum())


def kappa_linear(pred_buckets, true_buckets, n_buckets: int = N_LOS_BUCKETS) -> float:
    """Chance-corrected ordinal agreement with linear distance weights."""
    pred = np.asarray(pred_buckets, dtype=np.int64).ravel()
    true = np.asarray(true_buckets, dtype=np.int64).ravel()
    if pred.size == 0:
        raise UndefinedMetricError("empty input")
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.size} vs {true.size}")
    for name, arr in (("pred", pred), ("true", true)):
        if arr.min() < 0 or arr.max() >= n_buckets:
            raise ValueError(f"{name} bucket index out of [0, {n_buckets})")
    observed = np.zeros((n_buckets, n_buckets))
    np.add.at(observed, (true, pred), 1.0)
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0)) / pred.size
    idx = np.arange(n_buckets)
    weights = np.abs(idx[:, None] - idx[None, :]) / (n_buckets - 1)
    denom = (weights * expected).sum()
    if denom == 0.0:
        return 1.0
    return float(1.0 - (weights * observed).sum() / denom)


def mad_hours(pred_buckets, true_remaining_hours,
              representatives=LOS_BUCKET_REP_HOURS) -> float:
    """Median absolute deviation between each bucket's representative
    hours and the true remaining hours."""
    pred = np.asarray(pred_buckets, dtype=np.int64).ravel()
    true = np.asarray(true_remaining_hours, dtype=np.float64).ravel()
    if pred.size == 0:
        raise UndefinedMetricError("empty input")
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.size} vs {true.size}")
    reps = np.asarray(representatives, dtype=np.float64)
    return float(np.median(np.abs(reps[pred] - true)))


def macro_micro_auc(score_matrix, label_matrix) -> tuple[float, float]:
    """Per-label mean AUC (macro) and flattened AUC (micro) for multi-label
    scores. Single-class columns are skipped from the macro mean with a
    warning; if every column is single-class the metric is undefined."""
    scores = np.asarray(score_matrix, dtype=np.float64)
    labels = np.asarray(label_matrix)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ValueError(f"expected matching 2-D matrices, got {scores.shape} "
                         f"and {labels.shape}")
    per_label = []
    skipped = []
    for k in range(scores.shape[1]):
        col = labels[:, k]
        if np.unique(col).size < 2:
            skipped.append(k)
            continue
        per_label.append(auc_roc(scores[:, k], col))
    if skipped:
        warnings.warn(f"macro AUC skipped single-class columns {skipped}",
                      stacklevel=2)
    if not per_label:
        raise UndefinedMetricError("macro AUC undefined: every column single-class")
    macro = float(np.mean(per_label))
    micro = auc_roc(scores.ravel(), labels.ravel())
    return macro, micro


def bootstrap_ci(metric_fn, scores, labels, n_resamples: int = 1000,
                 seed: int = 0, alpha: float = 0.05) -> tuple[float, float]:
    """Percentile bootstrap over samples; resamples on which the metric is
    undefined are skipped. Endpoints are widened to include the point
    estimate so the interval always contains it."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    point = metric_fn(scores, labels)
    rng = np.random.default_rng(seed)
    stats = []
    for _ in range(n_resamples):
        idx = rng.integers(0, len(scores), size=len(scores))
        try:
            stats.append(metric_fn(scores[idx], labels[idx]))
        except UndefinedMetricError:
            continue
    if not stats:
        return (point, point)
    lo, hi = np.quantile(stats, [alpha / 2, 1 - alpha / 2])
    return (float(min(lo, point)), float(max(hi, point)))


@dataclass
class EvalResult:
    """A named bag of metric values for one run."""

    values: dict[str, float]
    n_samples: int
    ci: dict[str, tuple[float, float]] | None = None
    metadata: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        out = {"values": self.values, "n_samples": self.n_samples,
               "metadata": self.metadata}
        if self.ci is not None:
            out["ci"] = {k: list(v) for k, v in self.ci.items()}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)


def evaluate_task(task: str, probs: np.ndarray, labels,
                  remaining_hours=None, with_ci: bool = False,
                  seed: int = 0) -> EvalResult:
    """Compute the metric battery appropriate to a task.

    ``probs`` is (N, n_classes); binary tasks score on the positive-class
    column, the stay-length task on the argmax bucket, the phenotype task
    on per-label probabilities.
    """
    probs = np.asarray(probs, dtype=np.float64)
    meta = {"pr_convention": "average precision (step-wise)",
            "mad_representatives": list(LOS_BUCKET_REP_HOURS)}
    if task in ("ihm", "decompensation"):
        labels = np.asarray(labels).ravel()
        scores = probs[:, 1]
        values = {"auc_roc": auc_roc(scores, labels),
                  "auc_pr": auc_pr(scores, labels)}
        ci = None
        if with_ci:
            ci = {"auc_roc": bootstrap_ci(auc_roc, scores, labels, seed=seed),
                  "auc_pr": bootstrap_ci(auc_pr, scores, labels, seed=seed)}
        return EvalResult(values, len(labels), ci, meta)
    if task == "los":
        labels = np.asarray(labels).ravel()
        pred = probs.argmax(axis=1)
        values = {"kappa": kappa_linear(pred, labels),
                  "accuracy": float((pred == labels).mean())}
        if remaining_hours is not None:
            values["mad_hours"] = mad_hours(pred, remaining_hours)
        return EvalResult(values, len(labels), None, meta)
    if task == "phenotype":
        labels = np.asarray(labels)
        macro, micro = macro_micro_auc(probs, labels)
        return EvalResult({"macro_auc": macro, "micro_auc": micro},
                          labels.shape[0], None, meta)
    raise ValueError(f"unknown task {task!r}")


def compare_csv(results: dict[str, EvalResult]) -> str:
    """Render several runs side by side: one row per run, one column per
    metric (union across runs, blank when absent)."""
    metric_names = sorted({m for r in results.values() for m in r.values})
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["run", "n_samples", *metric_names])
    for name in results:
        r = results[name]
        writer.writerow([name, r.n_samples,
                         *[f"{r.values[m]:.6f}" if m in r.values else ""
                           for m in metric_names]])
    return buf.getvalue()

"""Rank-correlation and classification metrics with pinned tie conventions.

All metrics run in float64. Degenerate inputs (constant vectors, single-class
labels) yield NaN plus an "undefined" flag in the report rather than a silent
zero. The positive class for ROC/PR is always "blurry"; binary manifests use
the dataset convention 1 = in-focus, so evaluation inverts them (and says so
in the report notes).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

KIND_Z_LEVEL = "Z_LEVEL"
KIND_BINARY = "BINARY"

#: z-levels <= this count as sharp when binarizing (config knob; see README)
DEFAULT_SHARP_MAX_Z = 2


@dataclass(frozen=True)
class EvalReport:
    """Per-sample predictions plus the four aggregate metrics.

    Metrics that could not be computed are NaN and listed in `undefined`.
    `threshold` is the Youden-optimal blurry/sharp cut, None when the labels
    contain a single class.
    """

    ids: tuple[str, ...]
    predictions: np.ndarray
    labels: np.ndarray
    kind: str
    srcc: float
    plcc: float
    roc_auc: float
    pr_auc: float
    n_positive: int
    n_negative: int
    threshold: float | None
    undefined: tuple[str, ...]
    notes: tuple[str, ...]

    def summary(self) -> dict[str, object]:
        return {
            "kind": self.kind,
            "n_samples": len(self.ids),
            "srcc": self.srcc,
            "plcc": self.plcc,
            "roc_auc": self.roc_auc,
            "pr_auc": self.pr_auc,
            "n_positive": self.n_positive,
            "n_negative": self.n_negative,
            "threshold": self.threshold,
            "undefined": list(self.undefined),
            "notes": list(self.notes),
        }


def _as_float64(name: str, values: Sequence[float]) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D")
    return arr


def _check_pair(x: Sequence[float], y: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    xa = _as_float64("predictions", x)
    ya = _as_float64("labels", y)
    if len(xa) != len(ya):
        raise ValueError(f"length mismatch: {len(xa)} vs {len(ya)}")
    if len(xa) < 2:
        raise ValueError("need at least 2 samples")
    return xa, ya


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values receive the mean of their rank range."""
    arr = _as_float64("values", values)
    order = np.argsort(arr, kind="mergesort")
    sorted_vals = arr[order]
    new_group = np.r_[True, sorted_vals[1:] != sorted_vals[:-1]]
    group_ids = np.cumsum(new_group) - 1
    counts = np.bincount(group_ids)
    firsts = np.r_[0, np.cumsum(counts)[:-1]]
    group_rank = firsts + (counts - 1) / 2.0 + 1.0
    ranks = np.empty(len(arr))
    ranks[order] = group_rank[group_ids]
    return ranks


def plcc(predictions: Sequence[float], labels: Sequence[float]) -> float:
    """Pearson linear correlation; NaN when either side has zero variance."""
    x, y = _check_pair(predictions, labels)
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt((xc @ xc) * (yc @ yc))
    if denom == 0.0:
        return math.nan
    return float((xc @ yc) / denom)


def srcc(predictions: Sequence[float], labels: Sequence[float]) -> float:
    """Spearman rank correlation: Pearson on average ranks; NaN if degenerate."""
    x, y = _check_pair(predictions, labels)
    return plcc(average_ranks(x), average_ranks(y))


def _check_binary(labels: np.ndarray) -> None:
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("binary labels must be 0 or 1")


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Exact ROC area via the rank-sum (Mann-Whitney) statistic.

    Equals P(score_pos > score_neg) + 0.5 * P(equal) with 1 = blurry as the
    positive class. NaN when only one class is present.
    """
    s, l = _check_pair(scores, labels)
    _check_binary(l)
    pos = l == 1
    n_pos = int(pos.sum())
    n_neg = len(l) - n_pos
    if n_pos == 0 or n_neg == 0:
        return math.nan
    ranks = average_ranks(s)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def pr_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Average precision with tied scores collapsed into one threshold step.

    Processes distinct scores in descending order; each group contributes
    precision-after-group times the recall it adds. NaN when there are no
    positives.
    """
    s, l = _check_pair(scores, labels)
    _check_binary(l)
    n_pos = int((l == 1).sum())
    if n_pos == 0:
        return math.nan
    order = np.argsort(-s, kind="mergesort")
    s = s[order]
    l = l[order]
    ap = 0.0
    true_pos = 0
    i = 0
    n = len(s)
    while i < n:
        j = i
        while j < n and s[j] == s[i]:
            j += 1
        group_pos = int(l[i:j].sum())
        true_pos += group_pos
        if group_pos:
            ap += (true_pos / j) * (group_pos / n_pos)
        i = j
    return ap


def binarize_zlevels(
    z: Sequence[float], sharp_max: int = DEFAULT_SHARP_MAX_Z
) -> np.ndarray:
    """Map absolute z-levels to binary blur labels: z <= sharp_max -> 0 (sharp).

    The default boundary keeps z-levels 0, 1, 2 sharp.
    """
    arr = _as_float64("z", z)
    if np.any(arr < 0):
        raise ValueError("z-levels must be non-negative")
    return (arr > sharp_max).astype(np.int64)


def select_threshold(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Blurry/sharp cut maximizing Youden's J over midpoints of distinct scores.

    Samples scoring above the threshold are called blurry. Ties in J break
    toward the lower threshold. With a single distinct score any cut is
    equivalent; that score is returned (J = 0).
    """
    s, l = _check_pair(scores, labels)
    _check_binary(l)
    n_pos = int((l == 1).sum())
    n_neg = len(l) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes required to select a threshold")
    uniq = np.unique(s)
    if len(uniq) == 1:
        return float(uniq[0])
    pos_counts = np.array([(s[l == 1] == u).sum() for u in uniq], dtype=np.int64)
    neg_counts = np.array([(s[l == 0] == u).sum() for u in uniq], dtype=np.int64)
    # threshold i = midpoint of uniq[i], uniq[i+1]; blurry iff score > threshold
    tp = n_pos - np.cumsum(pos_counts)[:-1]
    tn = np.cumsum(neg_counts)[:-1]
    j_stat = tp / n_pos + tn / n_neg - 1.0
    best = int(np.argmax(j_stat))  # first occurrence = lowest threshold
    return float((uniq[best] + uniq[best + 1]) / 2.0)


def evaluate(
    ids: Sequence[str],
    predictions: Sequence[float],
    labels: Sequence[float],
    kind: str,
    sharp_max: int = DEFAULT_SHARP_MAX_Z,
) -> EvalReport:
    """Assemble the full report for one prediction run.

    Z_LEVEL: correlations against z, ROC/PR against binarized z.
    BINARY: labels arrive as 1 = in-focus and are inverted so the positive
    class is blurry; correlations against the inverted labels come with a
    caveat note since a binary target makes them coarse.
    """
    preds = _as_float64("predictions", predictions)
    labs = _as_float64("labels", labels)
    if not (len(ids) == len(preds) == len(labs)):
        raise ValueError("ids, predictions, labels must have equal lengths")
    notes: list[str] = []
    if kind == KIND_Z_LEVEL:
        corr_target = labs
        binary = binarize_zlevels(labs, sharp_max)
        notes.append(f"positive class: blurry (z > {sharp_max})")
    elif kind == KIND_BINARY:
        _check_binary(labs)
        binary = (1.0 - labs).astype(np.int64)  # manifest stores 1 = in-focus
        corr_target = binary.astype(np.float64)
        notes.append("positive class: blurry (manifest labels inverted; 1 = in-focus on disk)")
        notes.append("caveat: SRCC/PLCC computed against binary labels; treat as coarse")
    else:
        raise ValueError(f"unknown manifest kind {kind!r}")

    s = srcc(preds, corr_target)
    p = plcc(preds, corr_target)
    n_pos = int((binary == 1).sum())
    n_neg = int((binary == 0).sum())
    if n_pos and n_neg:
        roc = roc_auc(preds, binary)
        pr = pr_auc(preds, binary)
        threshold = select_threshold(preds, binary)
    else:
        roc = roc_auc(preds, binary)          # NaN, single class
        pr = pr_auc(preds, binary) if n_pos else math.nan
        threshold = None
        notes.append("single-class labels: ROC/PR/threshold undefined")

    named = {"srcc": s, "plcc": p, "roc_auc": roc, "pr_auc": pr}
    undefined = tuple(k for k, v in named.items() if math.isnan(v))
    return EvalReport(
        ids=tuple(ids),
        predictions=preds,
        labels=labs,
        kind=kind,
        srcc=s,
        plcc=p,
        roc_auc=roc,
        pr_auc=pr,
        n_positive=n_pos,
        n_negative=n_neg,
        threshold=threshold,
        undefined=undefined,
        notes=tuple(notes),
    )


def write_report_csv(report: EvalReport, path: str | Path, comment: str = "") -> None:
    """Per-sample rows as CSV: id, prediction, label."""
    lines = []
    if comment:
        lines.append(f"# {comment}")
    lines.append("id,prediction,label")
    for i, sample_id in enumerate(report.ids):
        lines.append(f"{sample_id},{report.predictions[i]!r},{report.labels[i]!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_report_summary(report: EvalReport, path: str | Path, comment: str = "") -> None:
    """Key=value summary block; NaN metrics are written as 'undefined'."""
    lines = []
    if comment:
        lines.append(f"# {comment}")
    for key, value in report.summary().items():
        if isinstance(value, float) and math.isnan(value):
            value = "undefined"
        elif isinstance(value, list):
            value = json.dumps(value)
        lines.append(f"{key}={value}")
    Path(path).write_text("\n".join(lines) + "\n")

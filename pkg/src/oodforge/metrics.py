"""Detection metrics over in/out score sets, and expected calibration error.

Scores follow the detector convention: higher means more in-distribution, and
a threshold ``delta`` labels ``score >= delta`` as positive (in).  Metric
functions take the two score arrays separately; :func:`split_records` turns a
list of :class:`~oodforge.detect.ScoreRecord` into that form.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

__all__ = [
    "DetectionReport",
    "CalibrationReport",
    "split_records",
    "tnr_at_tpr",
    "auroc",
    "aupr",
    "detection_accuracy",
    "roc_curve",
    "pr_curve",
    "evaluate_detection",
    "ece",
    "write_curve_csv",
]


def _pair(in_scores, out_scores) -> tuple[np.ndarray, np.ndarray]:
    s_in = np.asarray(in_scores, dtype=np.float64).ravel()
    s_out = np.asarray(out_scores, dtype=np.float64).ravel()
    if s_in.size == 0 or s_out.size == 0:
        raise ValueError("need at least one in-distribution and one out-of-distribution score")
    if not (np.all(np.isfinite(s_in)) and np.all(np.isfinite(s_out))):
        raise ValueError("scores must be finite")
    return s_in, s_out


def split_records(records) -> tuple[np.ndarray, np.ndarray]:
    s_in = [r.score for r in records if r.origin == "in"]
    s_out = [r.score for r in records if r.origin == "out"]
    return np.array(s_in, dtype=np.float64), np.array(s_out, dtype=np.float64)


def _rates(s_in, s_out, thresholds):
    """TPR and FPR of the rule ``score >= t`` for each threshold."""
    si, so = np.sort(s_in), np.sort(s_out)
    tp = len(si) - np.searchsorted(si, thresholds, side="left")
    fp = len(so) - np.searchsorted(so, thresholds, side="left")
    return tp, fp


def tnr_at_tpr(in_scores, out_scores, level: float = 0.95) -> float:
    """TNR at the largest threshold whose TPR reaches `level` (no interpolation)."""
    s_in, s_out = _pair(in_scores, out_scores)
    cands = np.unique(s_in)[::-1]
    tp, _ = _rates(s_in, s_out, cands)
    ok = np.nonzero(tp / len(s_in) >= level)[0]
    delta = cands[ok[0]]
    return float(np.mean(s_out < delta))


def auroc(in_scores, out_scores) -> float:
    """Mann-Whitney statistic: P(in > out) + 0.5 P(in = out)."""
    s_in, s_out = _pair(in_scores, out_scores)
    so = np.sort(s_out)
    below = np.searchsorted(so, s_in, side="left")
    ties = np.searchsorted(so, s_in, side="right") - below
    return float((below.sum() + 0.5 * ties.sum()) / (len(s_in) * len(s_out)))


def pr_curve(in_scores, out_scores, positive: str = "in"):
    """(threshold, recall, precision) arrays, one step per distinct score, high to low."""
    s_in, s_out = _pair(in_scores, out_scores)
    if positive == "in":
        pos, neg = s_in, s_out
    elif positive == "out":
        pos, neg = -s_out, -s_in
    else:
        raise ValueError("positive must be 'in' or 'out'")
    thr = np.unique(np.concatenate([pos, neg]))[::-1]
    tp, fp = _rates(pos, neg, thr)
    recall = tp / len(pos)
    precision = tp / (tp + fp)
    return thr, recall, precision


def aupr(in_scores, out_scores, positive: str = "in") -> float:
    """Step-rule area ``sum_k (R_k - R_{k-1}) P_k`` over distinct-score thresholds."""
    _, recall, precision = pr_curve(in_scores, out_scores, positive)
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * precision))


def detection_accuracy(in_scores, out_scores) -> float:
    """``max_delta 1 - 0.5 P_in(q <= delta) - 0.5 P_out(q > delta)``."""
    s_in, s_out = _pair(in_scores, out_scores)
    cands = np.concatenate([[-np.inf], np.unique(np.concatenate([s_in, s_out])), [np.inf]])
    miss_in = np.searchsorted(np.sort(s_in), cands, side="right") / len(s_in)
    pass_out = 1.0 - np.searchsorted(np.sort(s_out), cands, side="right") / len(s_out)
    return float(np.max(1.0 - 0.5 * miss_in - 0.5 * pass_out))


def roc_curve(in_scores, out_scores):
    """(threshold, fpr, tpr) from ``+inf`` (0, 0) down to ``-inf`` (1, 1)."""
    s_in, s_out = _pair(in_scores, out_scores)
    thr = np.concatenate([[np.inf], np.unique(np.concatenate([s_in, s_out]))[::-1], [-np.inf]])
    tp, fp = _rates(s_in, s_out, thr)
    return thr, fp / len(s_out), tp / len(s_in)


def write_curve_csv(path, columns: tuple[str, str, str], thr, a, b) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for t, x, y in zip(thr, a, b):
            w.writerow([repr(float(t)), repr(float(x)), repr(float(y))])


@dataclass
class DetectionReport:
    tnr_at_tpr95: float
    auroc: float
    aupr_in: float
    aupr_out: float
    detection_accuracy: float
    n_in: int
    n_out: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def evaluate_detection(in_scores, out_scores) -> DetectionReport:
    s_in, s_out = _pair(in_scores, out_scores)
    return DetectionReport(
        tnr_at_tpr95=tnr_at_tpr(s_in, s_out, 0.95),
        auroc=auroc(s_in, s_out),
        aupr_in=aupr(s_in, s_out, "in"),
        aupr_out=aupr(s_in, s_out, "out"),
        detection_accuracy=detection_accuracy(s_in, s_out),
        n_in=int(s_in.size),
        n_out=int(s_out.size),
    )


@dataclass
class CalibrationReport:
    ece: float
    counts: list[int]
    accuracy: list[float]
    confidence: list[float]

    @property
    def n_bins(self) -> int:
        return len(self.counts)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"


def ece(confidences, correct, n_bins: int = 20) -> CalibrationReport:
    """Expected calibration error over bins ``((m-1)/M, m/M]``; confidence 0 joins bin 1.

    Empty bins report accuracy and confidence 0 and contribute nothing.
    """
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    hit = np.asarray(correct, dtype=bool).ravel()
    if conf.shape != hit.shape:
        raise ValueError("confidences and correctness flags differ in length")
    if n_bins < 1:
        raise ValueError("need at least one bin")
    if np.any((conf < 0) | (conf > 1)) or not np.all(np.isfinite(conf)):
        raise ValueError("confidences must lie in [0, 1]")
    edges = np.arange(n_bins + 1) / n_bins
    idx = np.maximum(np.searchsorted(edges, conf, side="left") - 1, 0)
    counts = np.bincount(idx, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=hit.astype(float), minlength=n_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    nz = counts > 0
    acc = np.zeros(n_bins)
    cbin = np.zeros(n_bins)
    acc[nz] = acc_sum[nz] / counts[nz]
    cbin[nz] = conf_sum[nz] / counts[nz]
    n = max(len(conf), 1)
    value = float(np.sum(counts / n * np.abs(acc - cbin)))
    return CalibrationReport(value, counts.tolist(), acc.tolist(), cbin.tolist())

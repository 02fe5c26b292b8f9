"""Masked normalized cross-correlation and biometric score-set metrics."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, MetricError

log = logging.getLogger("ridgealign.scorer")


@dataclass
class ScoreSet:
    genuine: list[float] = field(default_factory=list)
    impostor: list[float] = field(default_factory=list)


def ncc(img_a: np.ndarray, img_b: np.ndarray, mask: np.ndarray) -> float:
    """Normalized cross-correlation over the masked region.

    Means and sums are restricted to the mask. Returns 0 (with a warning)
    if either masked signal has zero variance.
    """
    if img_a.shape != img_b.shape or img_a.shape != mask.shape:
        raise DimensionError("ncc: image/mask dims disagree")
    m = mask.astype(bool)
    if m.sum() < 2:
        raise MetricError("ncc: mask selects fewer than 2 pixels")
    a = img_a[m].astype(np.float64)
    b = img_b[m].astype(np.float64)
    da = a - a.mean()
    db = b - b.mean()
    denom2 = (da * da).sum() * (db * db).sum()
    if denom2 <= 0.0:
        log.warning("ncc: zero masked variance, returning 0")
        return 0.0
    return float((da * db).sum() / np.sqrt(denom2))


def _rates(scores: ScoreSet):
    """FMR/FNMR over a deterministic threshold sweep.

    Thresholds are the observed score multiset plus +/- infinity endpoints;
    FMR(t) = fraction of impostor >= t, FNMR(t) = fraction of genuine < t.
    """
    gen = np.asarray(scores.genuine, dtype=np.float64)
    imp = np.asarray(scores.impostor, dtype=np.float64)
    if gen.size == 0 or imp.size == 0:
        raise MetricError("score set must contain genuine and impostor scores")
    thr = np.concatenate([[-np.inf], np.unique(np.concatenate([gen, imp])), [np.inf]])
    fmr = np.array([(imp >= t).mean() for t in thr])
    fnmr = np.array([(gen < t).mean() for t in thr])
    return thr, fmr, fnmr


def det_curve(scores: ScoreSet) -> list[tuple[float, float]]:
    """Sorted (FMR, FNMR) trade-off points."""
    _, fmr, fnmr = _rates(scores)
    pts = sorted(zip(fmr.tolist(), fnmr.tolist()))
    return pts


def eer(scores: ScoreSet) -> float:
    """Equal error rate: where FMR = FNMR, linearly interpolated between
    adjacent sweep points."""
    _, fmr, fnmr = _rates(scores)
    # thresholds ascend, so fmr is non-increasing and fnmr non-decreasing
    diff = fnmr - fmr
    for i in range(len(diff) - 1):
        if diff[i] <= 0.0 <= diff[i + 1]:
            if diff[i + 1] == diff[i]:
                return float((fmr[i] + fnmr[i]) / 2.0)
            t = -diff[i] / (diff[i + 1] - diff[i])
            return float((1 - t) * fmr[i] + t * fmr[i + 1])
    # fall back to the crossing with minimum |diff|
    i = int(np.argmin(np.abs(diff)))
    return float((fmr[i] + fnmr[i]) / 2.0)


def zero_fmr(scores: ScoreSet) -> float:
    """Lowest FNMR among thresholds with FMR exactly 0."""
    _, fmr, fnmr = _rates(scores)
    sel = fnmr[fmr == 0.0]
    return float(sel.min()) if sel.size else 1.0


def rank1(score_matrix: np.ndarray, gt_column: np.ndarray) -> float:
    """Fraction of query rows whose genuine score strictly beats every
    impostor score in the row (ties count as failure)."""
    s = np.asarray(score_matrix, dtype=np.float64)
    gt = np.asarray(gt_column, dtype=int)
    wins = 0
    for q in range(s.shape[0]):
        row = s[q]
        g = row[gt[q]]
        imp = np.delete(row, gt[q])
        if imp.size == 0 or g > imp.max():
            wins += 1
    return wins / s.shape[0]


def save_metrics_csv(path, metrics: dict[str, float]):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["metric", "value"])
        for k, v in metrics.items():
            wr.writerow([k, f"{v:.6f}"])


def save_det_csv(path, pts: list[tuple[float, float]]):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["fmr", "fnmr"])
        for fm, fn in pts:
            wr.writerow([f"{fm:.6f}", f"{fn:.6f}"])

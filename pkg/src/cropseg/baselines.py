"""Threshold-based vegetation masks (global Otsu and local-mean adaptive)."""
from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy import ndimage

N_BINS = 256
DEFAULT_WINDOW = 51
DEFAULT_OFFSET = 0.02
TIE_RTOL = 1e-9


class OtsuResult(NamedTuple):
    threshold: float
    mask: np.ndarray
    degenerate: bool


def histogram_edges(ch: np.ndarray, bins: int = N_BINS) -> np.ndarray:
    """Inner bin edges over the channel's min-max range (``bins - 1`` values)."""
    lo, hi = float(ch.min()), float(ch.max())
    return lo + (hi - lo) * np.arange(1, bins) / bins


def otsu_threshold(ch: np.ndarray, bins: int = N_BINS) -> OtsuResult:
    """Global threshold maximizing the between-class variance.

    Bins are right-closed, so a pixel falls in the foreground class exactly
    when its value is ``> threshold``; the returned mask is that comparison.
    A constant channel yields an all-background mask flagged as degenerate.
    """
    ch = np.asarray(ch, dtype=np.float64)
    lo, hi = float(ch.min()), float(ch.max())
    if hi <= lo:
        return OtsuResult(lo, np.zeros(ch.shape, dtype=bool), True)
    edges = histogram_edges(ch, bins)
    # bin index = number of inner edges strictly below the value
    idx = np.searchsorted(edges, ch.ravel(), side="left")
    counts = np.bincount(idx, minlength=bins).astype(np.float64)
    sums = np.bincount(idx, weights=ch.ravel(), minlength=bins)
    total, total_sum = counts.sum(), sums.sum()
    w0 = np.cumsum(counts)[:-1]            # background = bins [0, k)
    s0 = np.cumsum(sums)[:-1]
    w1 = total - w0
    valid = (w0 > 0) & (w1 > 0)
    mu0 = np.divide(s0, w0, out=np.zeros_like(s0), where=valid)
    mu1 = np.divide(total_sum - s0, w1, out=np.zeros_like(s0), where=valid)
    between = np.where(valid, w0 * w1 * (mu0 - mu1) ** 2, -1.0)
    # empty bins make neighbouring splits identical; take the first of the
    # maximal ones so the answer does not hinge on summation rounding
    best = between.max()
    k = int(np.flatnonzero(between >= best - TIE_RTOL * abs(best))[0])
    threshold = float(edges[k])
    return OtsuResult(threshold, ch > threshold, False)


def local_mean(ch: np.ndarray, window: int) -> np.ndarray:
    return ndimage.uniform_filter(np.asarray(ch, dtype=np.float64), size=window, mode="nearest")


def adaptive_threshold(ch: np.ndarray, window: int = DEFAULT_WINDOW,
                       offset: float = DEFAULT_OFFSET) -> np.ndarray:
    """Vegetation where the value exceeds its edge-replicated window mean plus ``offset``."""
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    ch = np.asarray(ch, dtype=np.float64)
    return ch > local_mean(ch, window) + offset


def vegetation_fraction(mask: np.ndarray) -> float:
    return float(np.count_nonzero(mask)) / mask.size

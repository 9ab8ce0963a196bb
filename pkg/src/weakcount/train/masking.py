"""Minimum-cycle-time handling of shot predictions.

Training uses :func:`mask_duplicates`: predictions that fall inside the
exclusion window of an earlier surviving shot are replaced by a certain
non-shot prediction and removed from backpropagation. Deployment uses
:func:`simple_post_filter`, which keeps the same set of shots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MaskedPredictions:
    preds: np.ndarray
    mask: np.ndarray
    substitute: np.ndarray

    @property
    def surviving_shots(self) -> list[int]:
        labels = self.preds.argmax(axis=1)
        return [int(i) for i in np.flatnonzero(self.mask & (labels != 0))]


def _check_sorted(timestamps: np.ndarray):
    if np.any(np.diff(timestamps) < 0):
        raise ValueError("timestamps must be sorted ascending")


def mask_duplicates(preds, timestamps, t_m: float) -> MaskedPredictions:
    preds = np.asarray(preds, dtype=np.float64)
    ts = np.asarray(timestamps, dtype=np.float64)
    _check_sorted(ts)
    n, n_cat = preds.shape
    labels = preds.argmax(axis=1)
    mask = np.ones(n, dtype=bool)
    for i in range(n):
        # a masked-out shot opens no window of its own
        if mask[i] and labels[i] != 0:
            lo = np.searchsorted(ts, ts[i], side="right")
            hi = np.searchsorted(ts, ts[i] + t_m, side="right")
            mask[lo:hi] = False
    e = np.zeros(n_cat)
    e[0] = 1.0
    out = np.where(mask[:, None], preds, e)
    return MaskedPredictions(out, mask, e)


def simple_post_filter(timestamps, categories, t_m: float) -> list[tuple[int, float, int]]:
    """Keep a shot, drop later shots within ``(t, t + t_m]``; kept shots re-open the window.

    ``categories`` holds each candidate's predicted category (0 = non-shot,
    ignored). Returns ``(candidate index, timestamp, category)`` of kept shots.
    """
    ts = np.asarray(timestamps, dtype=np.float64)
    _check_sorted(ts)
    kept: list[tuple[int, float, int]] = []
    for i, (t, c) in enumerate(zip(ts, categories)):
        if c == 0:
            continue
        if kept and kept[-1][1] < t <= kept[-1][1] + t_m:
            continue
        kept.append((i, float(t), int(c)))
    return kept


def count_shots(preds, timestamps, t_m: float, post_filter: bool = True) -> np.ndarray:
    """Per-category shot counts (length N-1) from per-candidate probabilities."""
    preds = np.asarray(preds, dtype=np.float64)
    n_cat = preds.shape[1] if preds.ndim == 2 else 0
    counts = np.zeros(max(n_cat - 1, 0), dtype=np.int64)
    if len(preds) == 0:
        return counts
    labels = preds.argmax(axis=1)
    if post_filter:
        labels_kept = [c for _, _, c in simple_post_filter(timestamps, labels, t_m)]
    else:
        labels_kept = [int(c) for c in labels if c != 0]
    for c in labels_kept:
        counts[c - 1] += 1
    return counts

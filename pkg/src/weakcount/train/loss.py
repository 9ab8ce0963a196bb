"""Bag-level proportion targets, aggregation and the proportion loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..signal import WeakLabel

LOG_FLOOR = 1e-12


class UnusableRecording(ValueError):
    """More labelled events than candidates: the metric missed events."""


@dataclass(frozen=True)
class ProportionTarget:
    p: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        if np.any(p < -1e-12) or np.any(p > 1 + 1e-12) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"not a proportion vector: {p}")
        object.__setattr__(self, "p", p)


def build_target(label: WeakLabel, n_candidates: int) -> ProportionTarget:
    """Shot components ``c_i / n``; the non-shot component takes the remainder."""
    if n_candidates < 1:
        raise UnusableRecording("recording produced no candidates")
    if label.total > n_candidates:
        raise UnusableRecording(f"{label.total} labelled events but only {n_candidates} candidates")
    shots = np.asarray(label.counts, dtype=np.float64) / n_candidates
    p = np.concatenate([[1.0 - shots.sum()], shots])
    # 1 - sum can land a rounding step below zero
    p[0] = max(p[0], 0.0)
    return ProportionTarget(p)


def aggregate(preds) -> np.ndarray:
    """Mean of the per-candidate probability vectors."""
    preds = np.asarray(preds, dtype=np.float64)
    if preds.ndim != 2 or len(preds) == 0:
        raise ValueError("aggregate needs a non-empty (n, N) array of predictions")
    return preds.mean(axis=0)


def _xlogy(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    nz = p > 0
    out[nz] = p[nz] * np.log(q[nz])
    return out


def proportion_loss(p, p_hat, zero_loss: bool = True) -> float:
    """Cross-entropy between target and predicted proportions.

    With ``zero_loss`` the target entropy is added back, making the value the
    KL divergence ``KL(p || p_hat)``, which is zero at a perfect prediction.
    """
    p = p.p if isinstance(p, ProportionTarget) else np.asarray(p, dtype=np.float64)
    q = np.maximum(np.asarray(p_hat, dtype=np.float64), LOG_FLOOR)
    loss = -_xlogy(p, q).sum()
    if zero_loss:
        loss += _xlogy(p, p).sum()
    return float(loss)


def proportion_loss_grad(p, p_hat) -> np.ndarray:
    """Gradient w.r.t. ``p_hat``; the entropy term is constant and contributes nothing."""
    p = p.p if isinstance(p, ProportionTarget) else np.asarray(p, dtype=np.float64)
    p_hat = np.asarray(p_hat, dtype=np.float64)
    g = np.zeros_like(p)
    live = (p > 0) & (p_hat >= LOG_FLOOR)
    g[live] = -p[live] / p_hat[live]
    return g

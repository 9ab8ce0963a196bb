"""Virtual adversarial training term.

One power iteration estimates the input direction that most changes the
prediction; the loss is the KL divergence between the clean prediction
(held constant) and the prediction at ``x + eps * d``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..model import ModelParameters, Quantizer, backward, forward

TINY = 1e-300


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise ``KL(p || q)`` with ``0 log 0 = 0``."""
    out = np.where(p > 0, p * (np.log(np.maximum(p, TINY)) - np.log(np.maximum(q, TINY))), 0.0)
    return out.sum(axis=-1)


def _unit_rows(v: np.ndarray) -> np.ndarray:
    norm = np.sqrt(np.sum(v * v, axis=-1, keepdims=True))
    # zero rows stay zero (constant-output network)
    return v / np.where(norm > 0, norm, 1.0)


@dataclass
class VatResult:
    loss: float
    grads: ModelParameters | None
    r_adv: np.ndarray


def adversarial_direction(params: ModelParameters, x: np.ndarray, p: np.ndarray, xi: float, k: int,
                          d0: np.ndarray, quantizer: Quantizer | None = None) -> np.ndarray:
    d = _unit_rows(d0)
    for _ in range(k):
        q, tape = forward(params, x + xi * d, quantizer, record=True)
        # d/dlogits of sum_j KL(p_j || q_j) is q - p
        _, dx = backward(params, tape, grad_logits=q - p)
        d = _unit_rows(dx)
    return d


def vat_loss(params: ModelParameters, x: np.ndarray, eps: float, xi: float = 1e-6, k: int = 1,
             alpha: float = 1.0, rng: np.random.Generator | None = None, p: np.ndarray | None = None,
             d0: np.ndarray | None = None, quantizer: Quantizer | None = None,
             with_grad: bool = True, r_adv: np.ndarray | None = None) -> VatResult:
    """Mean VAT loss over the rows of ``x`` and its parameter gradient.

    ``p`` (the clean prediction) and the perturbation are treated as
    constants. Pass ``r_adv`` to reuse a frozen perturbation.
    """
    if eps < 0 or xi <= 0 or k < 1:
        raise ValueError("need eps >= 0, xi > 0 and k >= 1")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = len(x)
    if p is None:
        p = forward(params, x, quantizer)
    if r_adv is None:
        if d0 is None:
            rng = rng if rng is not None else np.random.default_rng()
            d0 = rng.standard_normal(x.shape)
        r_adv = eps * adversarial_direction(params, x, p, xi, k, d0, quantizer)
    if not with_grad:
        q = forward(params, x + r_adv, quantizer)
        return VatResult(float(alpha * kl_rows(p, q).mean()), None, r_adv)
    q, tape = forward(params, x + r_adv, quantizer, record=True)
    loss = float(alpha * kl_rows(p, q).mean())
    grads, _ = backward(params, tape, grad_logits=alpha * (q - p) / n, need_input=False)
    return VatResult(loss, grads, r_adv)

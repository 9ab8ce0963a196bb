"""Independent oracles shared by the test modules."""

from __future__ import annotations

import numpy as np

from weakcount.model import ConvBlock, NetworkConfig, init_params
from weakcount.train import Bag, TrainConfig, bag_loss_and_grad, build_target
from weakcount.train.vat import adversarial_direction, vat_loss
from weakcount.model import forward
from weakcount.signal import WeakLabel

SMALL_NET = NetworkConfig(conv=(ConvBlock(9, 8, 2), ConvBlock(9, 8, 2), ConvBlock(9, 8, 2)), hidden=32)


def algorithm1_literal(preds, timestamps, t_m):
    """Line-by-line replay of the duplicate-removal pseudo-code.

    Returns (masked predictions, mask).
    """
    preds = [np.array(p, dtype=np.float64) for p in preds]
    n = len(preds)
    e = np.zeros(len(preds[0]))
    e[0] = 1.0
    y = [p.copy() for p in preds]
    m = [True] * n
    for i in range(n):
        if int(np.argmax(y[i])) != 0:
            for j in range(i + 1, n):
                if timestamps[i] < timestamps[j] <= timestamps[i] + t_m:
                    y[j] = e.copy()
                    m[j] = False
    return np.array(y), np.array(m)


def random_tiny_net(rng: np.random.Generator) -> NetworkConfig:
    n_blocks = int(rng.integers(1, 3))
    blocks = tuple(ConvBlock(int(rng.integers(2, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 3)))
                   for _ in range(n_blocks))
    return NetworkConfig(input_len=int(rng.integers(18, 30)), conv=blocks, hidden=int(rng.integers(2, 6)),
                         n_categories=int(rng.integers(2, 4)), clip=6.0 if rng.random() < 0.7 else None)


def random_bag(rng: np.random.Generator, cfg: NetworkConfig, n: int | None = None) -> Bag:
    n = int(rng.integers(3, 8)) if n is None else n
    x = rng.normal(0, 1.5, (n, cfg.input_len))
    t = np.cumsum(rng.uniform(0.005, 0.05, n))
    counts = rng.multinomial(int(rng.integers(0, n + 1)), np.ones(cfg.n_categories) / cfg.n_categories)[1:]
    label = WeakLabel(tuple(int(c) for c in counts))
    return Bag(x, t, np.asarray(label.counts), "bag", build_target(label, n).p)


def full_loss_fd_check(params, bag: Bag, cfg: TrainConfig, d0: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between the analytic full-loss gradient and central differences.

    The adversarial perturbation and the clean VAT prediction are frozen at
    the evaluation point, matching the gradient the trainer uses.
    """
    _, grads = bag_loss_and_grad(params, bag, cfg, d0=d0)
    p0 = forward(params, bag.x)
    r_adv = None
    if cfg.vat:
        r_adv = cfg.vat_eps * adversarial_direction(params, bag.x, p0, cfg.vat_xi, cfg.vat_k, d0)
    plain = TrainConfig(**{**cfg.to_dict(), "vat": False})

    def loss_at(theta):
        q = params.copy().assign_flat(theta)
        val, _ = bag_loss_and_grad(q, bag, plain, with_grad=False)
        if r_adv is not None:
            val += vat_loss(q, bag.x, cfg.vat_eps, cfg.vat_xi, cfg.vat_k, cfg.vat_alpha, p=p0, r_adv=r_adv,
                            with_grad=False).loss
        return val

    theta = params.flat()
    num = np.empty_like(theta)
    for i in range(len(theta)):
        tp = theta.copy()
        tm = theta.copy()
        tp[i] += h
        tm[i] -= h
        num[i] = (loss_at(tp) - loss_at(tm)) / (2 * h)
    ana = grads.flat()
    scale = np.maximum(np.abs(ana) + np.abs(num), 1e-6)
    return float(np.max(np.abs(ana - num) / scale))


def fresh_params(cfg: NetworkConfig, seed: int):
    return init_params(cfg, seed)


ACCEPTANCE_LINES: dict[int, str] = {}


def verdict(number: int, ok: bool, detail: str):
    """Record one acceptance line for the terminal summary, then assert."""
    ACCEPTANCE_LINES[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, detail

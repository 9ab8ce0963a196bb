"""Counting error rate, trivial baselines and the ablation ladder report.

Recordings without any true shot are scored separately as raw false
positives and never enter the error rate.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np


class UndefinedErrorRate(ValueError):
    """Raised when the true shot total is zero."""


@dataclass(frozen=True)
class CountReport:
    """Estimated and true counts, one row per recording and one column per shot category."""

    series_ids: tuple[str, ...]
    estimated: np.ndarray
    true: np.ndarray
    n_candidates: np.ndarray | None = None

    def __post_init__(self):
        est = np.atleast_2d(np.asarray(self.estimated, dtype=np.int64))
        tru = np.atleast_2d(np.asarray(self.true, dtype=np.int64))
        if est.shape != tru.shape:
            raise ValueError(f"estimated {est.shape} and true {tru.shape} shapes differ")
        if len(self.series_ids) != len(tru):
            raise ValueError("one series id per row required")
        if np.any(est < 0) or np.any(tru < 0):
            raise ValueError("counts must be non-negative")
        object.__setattr__(self, "estimated", est)
        object.__setattr__(self, "true", tru)
        if self.n_candidates is not None:
            object.__setattr__(self, "n_candidates", np.asarray(self.n_candidates, dtype=np.int64))

    @property
    def nonshot_only(self) -> np.ndarray:
        return self.true.sum(axis=1) == 0

    @property
    def shot_rows(self) -> "CountReport":
        keep = ~self.nonshot_only
        cands = self.n_candidates[keep] if self.n_candidates is not None else None
        return CountReport(tuple(s for s, k in zip(self.series_ids, keep) if k), self.estimated[keep],
                           self.true[keep], cands)

    @property
    def false_positives(self) -> int:
        return int(self.estimated[self.nonshot_only].sum())

    def error_rate(self, per_candidate: bool = False) -> float:
        return error_rate(self, per_candidate)

    def category_error_rates(self) -> np.ndarray:
        """E restricted to each shot category (NaN where that category has no true shots)."""
        rows = self.shot_rows
        tot = rows.true.sum(axis=0)
        diff = np.abs(rows.estimated - rows.true).sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(tot > 0, diff / np.maximum(tot, 1), math.nan)


def error_rate(report: CountReport, per_candidate: bool = False) -> float:
    """Summed absolute count differences over the summed true counts.

    With ``per_candidate`` the denominator is the number of candidates of the
    scored recordings instead.
    """
    rows = report.shot_rows
    diff = int(np.abs(rows.estimated - rows.true).sum())
    if per_candidate:
        if rows.n_candidates is None:
            raise ValueError("candidate counts are required for the per-candidate rate")
        denom = int(rows.n_candidates.sum())
    else:
        denom = int(rows.true.sum())
    if denom == 0:
        raise UndefinedErrorRate("no true shots; score false positives instead")
    return diff / denom


def count_error_rate(estimated, true) -> float:
    est = np.atleast_2d(np.asarray(estimated))
    return error_rate(CountReport(tuple(str(i) for i in range(len(est))), est, true))


def report_from_counts(series_ids, estimated, true, n_candidates=None) -> CountReport:
    return CountReport(tuple(series_ids), np.asarray(estimated), np.asarray(true),
                       None if n_candidates is None else np.asarray(n_candidates))


# -- baselines ---------------------------------------------------------------


def baseline_always_nonshot(true: np.ndarray) -> float:
    true = np.atleast_2d(np.asarray(true))
    return count_error_rate(np.zeros_like(true), true)


def always_shot_counts(n_candidates: np.ndarray, n_shot_categories: int) -> np.ndarray:
    """Every candidate counted as the first shot category."""
    est = np.zeros((len(n_candidates), n_shot_categories), dtype=np.int64)
    est[:, 0] = n_candidates
    return est


def baseline_always_shot(true: np.ndarray, n_candidates: np.ndarray) -> float:
    true = np.atleast_2d(np.asarray(true))
    return count_error_rate(always_shot_counts(np.asarray(n_candidates), true.shape[1]), true)


def shot_frequencies(learn_true: np.ndarray, learn_candidates: np.ndarray) -> np.ndarray:
    """Fraction of learning candidates belonging to each shot category, from weak labels only."""
    learn_true = np.atleast_2d(np.asarray(learn_true))
    n = int(np.sum(learn_candidates))
    if n == 0:
        raise ValueError("learning set has no candidates")
    return learn_true.sum(axis=0) / n


def baseline_weighted_random(learn_true: np.ndarray, learn_candidates: np.ndarray, eval_true: np.ndarray,
                             eval_candidates: np.ndarray, seed: int = 0, repetitions: int = 100) -> np.ndarray:
    """E of labeling each evaluation candidate at random with the learning-set class frequencies.

    Returns one error rate per repetition.
    """
    freq = shot_frequencies(learn_true, learn_candidates)
    probs = np.concatenate(([max(0.0, 1.0 - freq.sum())], freq))
    probs = probs / probs.sum()
    eval_true = np.atleast_2d(np.asarray(eval_true))
    eval_candidates = np.asarray(eval_candidates, dtype=np.int64)
    rng = np.random.default_rng(seed)
    out = np.empty(repetitions)
    for r in range(repetitions):
        est = np.stack([rng.multinomial(n, probs)[1:] for n in eval_candidates])
        out[r] = count_error_rate(est, eval_true)
    return out


# -- ablation ----------------------------------------------------------------

RUNGS = ("base", "+pretrain", "+zero_loss", "+relu6", "+post_filter", "+learned_post_filter", "+vat")
RUNG_SWITCHES = ("pretrain", "zero_loss", "relu6", "post_filter", "learned_post_filter", "vat")


def rung_switches(index: int) -> dict[str, bool]:
    """Switch settings of rung ``index``: the first ``index`` improvements on, the rest off."""
    if not 0 <= index < len(RUNGS):
        raise IndexError(index)
    return {name: i < index for i, name in enumerate(RUNG_SWITCHES)}


def score_run(e: float) -> float:
    """Runs that fail to converge (non-finite, or no better than counting nothing) score 100%."""
    if not np.isfinite(e) or e >= 1.0:
        return 1.0
    return float(e)


@dataclass
class AblationTable:
    rungs: tuple[str, ...]
    seeds: tuple[int, ...]
    errors: np.ndarray  # (rungs, seeds)
    raw: np.ndarray = field(default=None)

    def medians(self) -> np.ndarray:
        return np.median(self.errors, axis=1)

    def quantiles(self, qs=(0.0, 0.25, 0.5, 0.75, 1.0)) -> np.ndarray:
        return np.quantile(self.errors, qs, axis=1).T

    def non_increasing_steps(self) -> int:
        med = self.medians()
        return int(np.sum(med[1:] <= med[:-1]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rung", "seed", "error_rate"])
        for i, rung in enumerate(self.rungs):
            for j, s in enumerate(self.seeds):
                w.writerow([rung, s, repr(float(self.errors[i, j]))])
        return buf.getvalue()

    def quantiles_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rung", "min", "q25", "median", "q75", "max"])
        for rung, row in zip(self.rungs, self.quantiles()):
            w.writerow([rung, *(repr(float(v)) for v in row)])
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"{'rung':<22}{'median E':>10}{'q25':>9}{'q75':>9}"]
        for rung, q in zip(self.rungs, self.quantiles((0.25, 0.5, 0.75))):
            lines.append(f"{rung:<22}{100 * q[1]:>9.2f}%{100 * q[0]:>8.2f}%{100 * q[2]:>8.2f}%")
        return "\n".join(lines)


def ablation_report(data, net_cfg, base_cfg, seeds=20, rungs=None) -> AblationTable:
    """Train every rung over the same seeds and tabulate the validation error rates.

    ``data`` is a :class:`weakcount.train.PipelineData`; the pre-training
    rung uses its ``pre_learning`` bags when present.
    """
    from .train import train_member

    seed_list = tuple(range(seeds)) if isinstance(seeds, int) else tuple(seeds)
    idx = range(len(RUNGS)) if rungs is None else rungs
    raw = np.empty((len(idx), len(seed_list)))
    for r, i in enumerate(idx):
        cfg = base_cfg.with_switches(**rung_switches(i))
        for j, s in enumerate(seed_list):
            raw[r, j] = train_member(data, net_cfg, cfg, s).error_rate
    scored = np.vectorize(score_run)(raw) if raw.size else raw
    return AblationTable(tuple(RUNGS[i] for i in idx), seed_list, scored, raw)

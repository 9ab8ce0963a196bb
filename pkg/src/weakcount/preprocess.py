"""Rolling-energy metric and hysteresis candidate gating (offline form).

The metric at index ``t`` is ``(1/w) * sum(a[t+i+o]**2 for i in -w//2..w//2)``
with samples outside the recording taken as zero. Note the window holds
``2*(w//2) + 1`` samples while the divisor is ``w``; thresholds are tuned
against this exact definition.

The canonical evaluation is a difference of a float64 prefix sum of squared
samples. The streaming detector in :mod:`weakcount.rt` reproduces the same
operations in the same order, so both paths agree bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .signal import TimeSeries


@dataclass(frozen=True)
class MetricConfig:
    w: int = 32
    o: int = 0
    t_high: float = 30.0
    t_low: float = 10.0
    input_len: int = 232
    pre_trigger: int | None = None

    def __post_init__(self):
        if self.w < 1:
            raise ValueError("metric window w must be >= 1")
        if not self.t_high >= self.t_low > 0:
            raise ValueError(f"need t_high >= t_low > 0, got {self.t_high}, {self.t_low}")
        if self.input_len < 1:
            raise ValueError("input_len must be >= 1")
        if self.pre_trigger is None:
            object.__setattr__(self, "pre_trigger", min(self.w, self.input_len - 1))
        if not 0 <= self.pre_trigger < self.input_len:
            raise ValueError("pre_trigger must lie in [0, input_len)")

    @classmethod
    def from_ms(cls, window_ms: float = 5.0, sample_rate_hz: float = 6400.0, **kw) -> "MetricConfig":
        return cls(w=max(1, int(round(window_ms * 1e-3 * sample_rate_hz))), **kw)

    @property
    def half(self) -> int:
        return self.w // 2

    @property
    def lookahead(self) -> int:
        """Samples past ``t`` needed before ``m[t]`` is known."""
        return max(0, self.half + self.o)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Candidate:
    x: np.ndarray
    t: float
    series_id: str
    start: int
    trigger: int


def squared_prefix(samples: np.ndarray) -> np.ndarray:
    a = np.asarray(samples, dtype=np.float64)
    return np.cumsum(a * a)


def metric_from_prefix(prefix: np.ndarray, n: int, cfg: MetricConfig) -> np.ndarray:
    t = np.arange(n)
    hi_idx = np.minimum(t + cfg.half + cfg.o, n - 1)
    lo_idx = t - cfg.half - 1 + cfg.o
    hi = np.where(hi_idx >= 0, prefix[np.clip(hi_idx, 0, n - 1)], 0.0)
    lo = np.where(lo_idx >= 0, prefix[np.clip(lo_idx, 0, n - 1)], 0.0)
    # lo may exceed n - 1 for large positive offsets
    lo = np.where(lo_idx >= n, prefix[n - 1], lo)
    m = (hi - lo) / cfg.w
    # cancellation in the prefix difference can dip a hair below zero
    return np.maximum(m, 0.0)


def compute_metric(series: TimeSeries | np.ndarray, cfg: MetricConfig) -> np.ndarray:
    samples = series.samples if isinstance(series, TimeSeries) else np.asarray(series)
    if len(samples) == 0:
        raise ValueError("cannot compute the metric of an empty series")
    return metric_from_prefix(squared_prefix(samples), len(samples), cfg)


def naive_metric(samples: np.ndarray, cfg: MetricConfig) -> np.ndarray:
    """Direct O(n*w) evaluation; reference for tests."""
    a = np.asarray(samples, dtype=np.float64)
    n = len(a)
    out = np.zeros(n)
    for t in range(n):
        acc = 0.0
        for i in range(-cfg.half, cfg.half + 1):
            j = t + i + cfg.o
            if 0 <= j < n:
                acc += a[j] * a[j]
        out[t] = acc / cfg.w
    return out


def trigger_indices(metric: np.ndarray, t_high: float, t_low: float, armed: bool = True) -> np.ndarray:
    """Indices where an armed gate sees ``m >= t_high``; the gate re-arms once ``m < t_low``."""
    above = np.flatnonzero(metric >= t_high)
    below = np.flatnonzero(metric < t_low)
    out = []
    pos = 0
    if not armed:
        if len(below) == 0:
            return np.zeros(0, dtype=np.int64)
        pos = below[0]
    while True:
        i = np.searchsorted(above, pos)
        if i >= len(above):
            break
        k = int(above[i])
        out.append(k)
        j = np.searchsorted(below, k)
        if j >= len(below):
            break
        pos = int(below[j])
    return np.asarray(out, dtype=np.int64)


def slice_at(samples: np.ndarray, start: int, length: int) -> np.ndarray:
    """``samples[start:start+length]`` with zeros outside the recording."""
    out = np.zeros(length, dtype=np.float32)
    lo = max(start, 0)
    hi = min(start + length, len(samples))
    if hi > lo:
        out[lo - start:hi - start] = samples[lo:hi]
    return out


def generate_candidates(series: TimeSeries, metric: np.ndarray, cfg: MetricConfig) -> list[Candidate]:
    if len(metric) != len(series):
        raise ValueError("metric and series lengths differ")
    cands = []
    for k in trigger_indices(metric, cfg.t_high, cfg.t_low):
        start = int(k) - cfg.pre_trigger
        cands.append(Candidate(slice_at(series.samples, start, cfg.input_len), int(k) / series.sample_rate_hz,
                               series.series_id, start, int(k)))
    return cands


def extract_candidates(series: TimeSeries, cfg: MetricConfig) -> list[Candidate]:
    return generate_candidates(series, compute_metric(series, cfg), cfg)


def stack(cands: list[Candidate]) -> np.ndarray:
    if not cands:
        return np.zeros((0, 0))
    return np.stack([c.x for c in cands]).astype(np.float64)

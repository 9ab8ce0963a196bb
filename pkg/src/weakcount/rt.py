"""Streaming detector: per-sample metric, hysteresis gate, slice capture,
inference and exclusion-window counting.

The detector keeps a float64 running sum of squared samples and evaluates the
metric as a difference of two stored prefix values, exactly as
:func:`weakcount.preprocess.metric_from_prefix` does offline. Trigger indices
and accepted shots therefore match the offline pipeline bit for bit.

Candidates whose trigger falls inside the exclusion window of an accepted
shot are never classified; :attr:`DetectorState.suppressed` counts them.
All times come from the sample clock.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .model import ModelParameters, forward
from .preprocess import MetricConfig, extract_candidates, stack
from .quant import QuantizedModel, qforward
from .signal import TimeSeries, atomic_write_bytes
from .train.masking import simple_post_filter

STREAM_MAGIC = b"WCST"
STREAM_VERSION = 1
_HEADER = struct.Struct("<4sHdQ")


class StreamFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DetectionEvent:
    category: int
    timestamp: float
    trigger: int
    emitted_at: int

    @property
    def latency_samples(self) -> int:
        return self.emitted_at - self.trigger


@dataclass(frozen=True)
class DetectorReport:
    counts: tuple[int, ...]
    inferences: int
    suppressed: int
    candidates: int
    samples: int


def make_classifier(model) -> Callable[[np.ndarray], int]:
    """Category of one candidate; accepts a quantized model, float parameters or a callable."""
    if isinstance(model, QuantizedModel):
        return lambda x: int(np.argmax(qforward(model, x)))
    if isinstance(model, ModelParameters):
        return lambda x: int(np.argmax(forward(model, x)))
    if callable(model):
        return model
    raise TypeError(f"cannot classify with {type(model).__name__}")


def _n_categories(model, default: int) -> int:
    if isinstance(model, QuantizedModel):
        return model.config.n_categories
    if isinstance(model, ModelParameters):
        return model.config.n_categories
    return default


class DetectorState:
    """Fixed-size detector state; single producer only.

    ``n_categories`` counts the non-shot class, so there are
    ``n_categories - 1`` shot counters.
    """

    def __init__(self, cfg: MetricConfig, model, t_m: float = 0.040, sample_rate_hz: float = 6400.0,
                 n_categories: int = 2):
        if not t_m > 0:
            raise ValueError("t_m must be positive")
        if not sample_rate_hz > 0:
            raise ValueError("sample rate must be positive")
        self.cfg = cfg
        self.classify = make_classifier(model)
        self.t_m = float(t_m)
        self.rate = float(sample_rate_hz)
        n_cat = _n_categories(model, n_categories)
        if n_cat < 2:
            raise ValueError("need at least one shot category")
        la = cfg.lookahead
        # back distance from the newest sample to the oldest needed prefix value
        back = la + cfg.half + 1 - cfg.o
        self._psize = max(cfg.w + 2, back + 1)
        self._rsize = max(cfg.input_len, cfg.pre_trigger + la + 1, cfg.w + 1)
        self._qcap = cfg.input_len + la + 2
        self.ring = np.zeros(self._rsize, dtype=np.float32)
        self.prefix = np.zeros(self._psize, dtype=np.float64)
        self.pending = np.zeros(self._qcap, dtype=np.int64)
        self.counts = np.zeros(n_cat - 1, dtype=np.int64)
        self._slice = np.zeros(cfg.input_len, dtype=np.float64)
        self._q_head = 0
        self._q_len = 0
        self.acc = 0.0
        self.n = 0
        self.next_t = 0
        self.armed = True
        self.last_shot: float | None = None
        self.inferences = 0
        self.suppressed = 0
        self.candidates = 0
        self.finished = False

    # -- memory --------------------------------------------------------------

    def state_bytes(self) -> int:
        return self.ring.nbytes + self.prefix.nbytes + self.pending.nbytes + self.counts.nbytes + self._slice.nbytes

    def scratch_bytes(self, model=None) -> int:
        """State arrays plus the quantized model's activation scratch, if given."""
        extra = model.scratch_bytes() if isinstance(model, QuantizedModel) else 0
        return self.state_bytes() + extra

    # -- internals -----------------------------------------------------------

    def _p(self, j: int, last: int) -> float:
        if j < 0:
            return 0.0
        return float(self.prefix[min(j, last) % self._psize])

    def _metric(self, t: int, last: int) -> float:
        cfg = self.cfg
        hi = self._p(t + cfg.half + cfg.o, last)
        lo = self._p(t - cfg.half - 1 + cfg.o, last)
        return max((hi - lo) / cfg.w, 0.0)

    def _gate(self, t: int, m: float):
        if self.armed:
            if m >= self.cfg.t_high:
                self.armed = False
                self._enqueue(t)
        elif m < self.cfg.t_low:
            self.armed = True

    def _enqueue(self, k: int):
        if self._q_len == self._qcap:
            raise RuntimeError("pending slice queue overflow")
        self.pending[(self._q_head + self._q_len) % self._qcap] = k
        self._q_len += 1
        self.candidates += 1

    def _slice_end(self, k: int) -> int:
        return k - self.cfg.pre_trigger + self.cfg.input_len - 1

    def _fill_slice(self, k: int, last: int) -> np.ndarray:
        start = k - self.cfg.pre_trigger
        buf = self._slice
        buf[:] = 0.0
        lo = max(start, 0, last + 1 - self._rsize)
        hi = min(start + self.cfg.input_len, last + 1)
        for j in range(lo, hi):
            buf[j - start] = self.ring[j % self._rsize]
        return buf

    def _complete(self, last: int, force: bool = False) -> list[DetectionEvent]:
        events = []
        while self._q_len and (force or self._slice_end(self.pending[self._q_head]) <= last):
            k = int(self.pending[self._q_head])
            self._q_head = (self._q_head + 1) % self._qcap
            self._q_len -= 1
            ev = self._decide(k, last)
            if ev is not None:
                events.append(ev)
        return events

    def _decide(self, k: int, last: int) -> DetectionEvent | None:
        t = k / self.rate
        if self.last_shot is not None and self.last_shot < t <= self.last_shot + self.t_m:
            self.suppressed += 1
            return None
        self.inferences += 1
        cat = self.classify(self._fill_slice(k, last))
        if cat == 0:
            return None
        self.last_shot = t
        self.counts[cat - 1] += 1
        return DetectionEvent(cat, t, k, last)

    # -- public --------------------------------------------------------------

    def push_sample(self, a: float) -> DetectionEvent | None:
        if self.finished:
            raise RuntimeError("detector already finished")
        a = np.float32(a)
        cur = self.n
        self.ring[cur % self._rsize] = a
        v = float(a)
        self.acc = self.acc + v * v
        self.prefix[cur % self._psize] = self.acc
        self.n += 1
        la = self.cfg.lookahead
        while self.next_t + la <= cur:
            self._gate(self.next_t, self._metric(self.next_t, cur))
            self.next_t += 1
        events = self._complete(cur)
        return events[0] if events else None

    def push_block(self, block: np.ndarray) -> list[DetectionEvent]:
        """Vectorized equivalent of calling :meth:`push_sample` on every sample."""
        if self.finished:
            raise RuntimeError("detector already finished")
        a = np.asarray(block, dtype=np.float32).ravel()
        m = len(a)
        if m == 0:
            return []
        cfg = self.cfg
        n0 = self.n
        a64 = a.astype(np.float64)
        cum = np.cumsum(np.concatenate(([self.acc], a64 * a64)))[1:]
        # stored prefix values of indices [n0 - psize, n0) followed by the new ones
        hist = min(n0, self._psize)
        pidx = np.arange(n0 - hist, n0)
        work_p = np.concatenate((self.prefix[pidx % self._psize], cum))
        base_p = n0 - hist
        last = n0 + m - 1
        t = np.arange(self.next_t, last - cfg.lookahead + 1)
        events: list[DetectionEvent] = []
        if len(t):
            hi_i = t + cfg.half + cfg.o
            lo_i = t - cfg.half - 1 + cfg.o
            hi = np.where(hi_i >= 0, work_p[np.clip(hi_i - base_p, 0, None)], 0.0)
            lo = np.where(lo_i >= 0, work_p[np.clip(lo_i - base_p, 0, None)], 0.0)
            metric = np.maximum((hi - lo) / cfg.w, 0.0)
            triggers, self.armed = gate_block(metric, cfg.t_high, cfg.t_low, self.armed)
            triggers = triggers + self.next_t
            self.next_t = int(t[-1]) + 1
        else:
            triggers = np.zeros(0, dtype=np.int64)
        # store new samples and prefix values; slices may also need older ring content
        hist_r = min(n0, self._rsize)
        ridx = np.arange(n0 - hist_r, n0)
        work_r = np.concatenate((self.ring[ridx % self._rsize], a))
        base_r = n0 - hist_r
        keep_r = min(m, self._rsize)
        self.ring[np.arange(last + 1 - keep_r, last + 1) % self._rsize] = a[m - keep_r:]
        keep_p = min(m, self._psize)
        self.prefix[np.arange(last + 1 - keep_p, last + 1) % self._psize] = cum[m - keep_p:]
        self.acc = float(cum[-1])
        self.n = last + 1
        # resolve pending slices in trigger order; completion sample is known per trigger
        order = [int(self.pending[(self._q_head + i) % self._qcap]) for i in range(self._q_len)]
        self._q_len = 0
        self.candidates += len(triggers)
        order.extend(int(k) for k in triggers)
        for k in order:
            emit = max(self._slice_end(k), k + cfg.lookahead)
            if emit > last:
                self.candidates -= 1  # re-counted by _enqueue
                self._enqueue(k)
                continue
            ev = self._decide_from(k, work_r, base_r, emit)
            if ev is not None:
                events.append(ev)
        return events

    def _decide_from(self, k: int, work: np.ndarray, base: int, emit: int) -> DetectionEvent | None:
        t = k / self.rate
        if self.last_shot is not None and self.last_shot < t <= self.last_shot + self.t_m:
            self.suppressed += 1
            return None
        start = k - self.cfg.pre_trigger
        buf = self._slice
        buf[:] = 0.0
        lo = max(start, 0)
        hi = start + self.cfg.input_len
        if hi > lo:
            buf[lo - start:hi - start] = work[lo - base:hi - base]
        self.inferences += 1
        cat = self.classify(buf)
        if cat == 0:
            return None
        self.last_shot = t
        self.counts[cat - 1] += 1
        return DetectionEvent(cat, t, k, emit)

    def finish(self) -> list[DetectionEvent]:
        """End of stream: evaluate the remaining metric values and flush zero-padded slices."""
        if self.finished:
            return []
        self.finished = True
        if self.n == 0:
            return []
        last = self.n - 1
        events = []
        while self.next_t <= last:
            self._gate(self.next_t, self._metric(self.next_t, last))
            self.next_t += 1
            events.extend(self._complete(last))
        events.extend(self._complete(last, force=True))
        return events

    def report(self) -> DetectorReport:
        return DetectorReport(tuple(int(c) for c in self.counts), self.inferences, self.suppressed,
                              self.candidates, self.n)


def push_sample(state: DetectorState | None, a: float) -> DetectionEvent | None:
    if state is None:
        raise RuntimeError("detector state is not initialized")
    return state.push_sample(a)


def report(state: DetectorState) -> DetectorReport:
    return state.report()


def gate_block(metric: np.ndarray, t_high: float, t_low: float, armed: bool) -> tuple[np.ndarray, bool]:
    """Hysteresis gate over a block; returns trigger offsets and the final armed state."""
    from .preprocess import trigger_indices

    trig = trigger_indices(metric, t_high, t_low, armed)
    if len(trig):
        after = metric[trig[-1]:]
        return trig, bool(np.any(after < t_low))
    if armed:
        return trig, True
    return trig, bool(np.any(metric < t_low))


def run_stream(samples: np.ndarray, cfg: MetricConfig, model, t_m: float = 0.040, sample_rate_hz: float = 6400.0,
               block: int | None = 4096, n_categories: int = 2) -> tuple[list[DetectionEvent], DetectorReport]:
    """Feed a whole recording through a fresh detector (block-wise, or per sample if ``block`` is None)."""
    det = DetectorState(cfg, model, t_m, sample_rate_hz, n_categories)
    events: list[DetectionEvent] = []
    samples = np.asarray(samples, dtype=np.float32)
    if block is None:
        for a in samples:
            ev = det.push_sample(a)
            if ev is not None:
                events.append(ev)
    else:
        for i in range(0, len(samples), block):
            events.extend(det.push_block(samples[i:i + block]))
    events.extend(det.finish())
    return events, det.report()


@dataclass(frozen=True)
class OfflineDetection:
    triggers: np.ndarray
    accepted: list[tuple[int, int]]  # (trigger index, category)
    suppressed: int
    inferences: int


def offline_detect(series: TimeSeries, cfg: MetricConfig, model, t_m: float = 0.040) -> OfflineDetection:
    """Reference pipeline: offline candidates, batch classification, simple post-filter."""
    cands = extract_candidates(series, cfg)
    triggers = np.array([c.trigger for c in cands], dtype=np.int64)
    if not cands:
        return OfflineDetection(triggers, [], 0, 0)
    x = stack(cands)
    if isinstance(model, QuantizedModel):
        cats = np.argmax(qforward(model, x), axis=1)
    elif isinstance(model, ModelParameters):
        cats = np.argmax(forward(model, x), axis=1)
    else:
        cats = np.array([model(row) for row in x])
    ts = np.array([c.t for c in cands])
    kept = simple_post_filter(ts, cats, t_m)
    suppressed = window_suppressed(ts, [i for i, _, _ in kept], t_m)
    accepted = [(int(triggers[i]), c) for i, _, c in kept]
    return OfflineDetection(triggers, accepted, suppressed, len(cands) - suppressed)


def window_suppressed(timestamps: np.ndarray, kept: Iterable[int], t_m: float) -> int:
    """Candidates falling inside the exclusion window of the latest earlier kept shot."""
    kept = sorted(kept)
    count = 0
    j = 0
    last = None
    for i, t in enumerate(timestamps):
        while j < len(kept) and kept[j] < i:
            last = timestamps[kept[j]]
            j += 1
        if last is not None and last < t <= last + t_m:
            count += 1
    return count


# -- stream replay files -----------------------------------------------------


def dumps_stream(samples: np.ndarray, sample_rate_hz: float) -> bytes:
    a = np.asarray(samples, dtype="<f4")
    return _HEADER.pack(STREAM_MAGIC, STREAM_VERSION, float(sample_rate_hz), len(a)) + a.tobytes()


def loads_stream(data: bytes) -> tuple[np.ndarray, float]:
    if len(data) < _HEADER.size:
        raise StreamFormatError("stream file truncated")
    magic, version, rate, n = _HEADER.unpack_from(data)
    if magic != STREAM_MAGIC:
        raise StreamFormatError("not a stream replay file")
    if version != STREAM_VERSION:
        raise StreamFormatError(f"unsupported stream version {version}")
    if len(data) != _HEADER.size + 4 * n:
        raise StreamFormatError(f"expected {n} samples, file size disagrees")
    if not rate > 0:
        raise StreamFormatError("invalid sample rate")
    return np.frombuffer(data, dtype="<f4", offset=_HEADER.size).astype(np.float32), rate


def save_stream(path, samples: np.ndarray, sample_rate_hz: float):
    atomic_write_bytes(path, dumps_stream(samples, sample_rate_hz))


def load_stream(path) -> tuple[np.ndarray, float]:
    with open(path, "rb") as fh:
        return loads_stream(fh.read())


def format_events(events: Iterable[DetectionEvent]) -> str:
    buf = io.StringIO()
    for ev in events:
        buf.write(f"{ev.timestamp:.6f}\t{ev.category}\n")
    return buf.getvalue()

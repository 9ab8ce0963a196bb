"""Recordings, weak labels, the synthetic recording generator and dataset I/O.

A recording is a single-axis acceleration series (in g) together with the
combination of external-variable settings it was acquired under (its bin).
The only supervision is a :class:`WeakLabel`: how many events of each
countable category happened in the recording. Synthetic recordings also
carry a :class:`GroundTruth` used by tests; it never enters training.
"""

from __future__ import annotations

import io
import math
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

NON_SHOT = 0

BinKey = tuple[tuple[str, str], ...]


class PlanError(ValueError):
    """A shooting plan violates the generator profile."""


class DatasetFormatError(ValueError):
    """A dataset file is malformed, truncated or of an unsupported version."""


@dataclass(frozen=True)
class TimeSeries:
    samples: np.ndarray
    sample_rate_hz: float = 6400.0
    series_id: str = ""
    bin_key: BinKey = ()

    def __post_init__(self):
        if not self.sample_rate_hz > 0:
            raise ValueError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim != 1:
            raise ValueError("samples must be one-dimensional")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "bin_key", tuple(sorted((str(k), str(v)) for k, v in self.bin_key)))

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass(frozen=True)
class WeakLabel:
    """Per-category event counts; index 0 of ``counts`` is shot category 1."""

    counts: tuple[int, ...]

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if not counts:
            raise ValueError("a weak label needs at least one countable category")
        if any(c < 0 for c in counts):
            raise ValueError(f"counts must be non-negative, got {counts}")
        object.__setattr__(self, "counts", counts)

    @property
    def n_categories(self) -> int:
        return len(self.counts) + 1

    @property
    def total(self) -> int:
        return sum(self.counts)


@dataclass(frozen=True)
class GroundTruth:
    """Planted events as ``(onset sample index, category)``; category 0 is a non-shot event."""

    events: tuple[tuple[int, int], ...] = ()

    def counts(self, n_categories: int) -> tuple[int, ...]:
        hist = [0] * (n_categories - 1)
        for _, cat in self.events:
            if cat != NON_SHOT:
                hist[cat - 1] += 1
        return tuple(hist)

    def onsets(self, category: int | None = None) -> list[int]:
        if category is None:
            return [t for t, c in self.events if c != NON_SHOT]
        return [t for t, c in self.events if c == category]


@dataclass(frozen=True)
class Record:
    series: TimeSeries
    label: WeakLabel
    truth: GroundTruth | None = None


@dataclass
class Dataset:
    records: list[Record]
    category_names: tuple[str, ...] = ("non-shot", "shot")

    def __post_init__(self):
        self.category_names = tuple(self.category_names)
        n = len(self.category_names)
        if n < 2:
            raise ValueError("need at least two categories")
        for rec in self.records:
            if rec.label.n_categories != n:
                raise ValueError(
                    f"record {rec.series.series_id!r} has {rec.label.n_categories} categories, dataset has {n}"
                )

    @property
    def n_categories(self) -> int:
        return len(self.category_names)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def subset(self, records: Iterable[Record]) -> "Dataset":
        return Dataset(list(records), self.category_names)

    def total_counts(self) -> np.ndarray:
        return np.sum([r.label.counts for r in self.records], axis=0)


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Transient:
    """One decaying sinusoid of an event, placed ``delay_ms`` after the onset."""

    delay_ms: float
    rel_amp: float
    freq_hz: float
    tau_ms: float


@dataclass(frozen=True)
class EventTemplate:
    amp_range: tuple[float, float]
    transients: tuple[Transient, ...]
    freq_jitter: float = 0.08
    delay_jitter_ms: float = 1.0

    def __post_init__(self):
        lo, hi = self.amp_range
        if not 0 < lo <= hi:
            raise ValueError(f"amplitude range must be positive and ordered, got {self.amp_range}")
        if not self.transients:
            raise ValueError("an event template needs at least one transient")


@dataclass(frozen=True)
class SynthProfile:
    """Generator settings for one combination of external variables."""

    name: str
    shot_templates: tuple[EventTemplate, ...]
    confuser: EventTemplate
    noise_sigma: float = 0.3
    burst_len: tuple[int, int] = (1, 8)
    cycle_ms: tuple[float, float] = (60.0, 90.0)
    min_cycle_ms: float = 55.0
    amp_jitter: float = 0.15
    bin_key: BinKey = ()
    seed: int = 0

    def __post_init__(self):
        if not self.min_cycle_ms > 0:
            raise ValueError("min_cycle_ms must be positive")
        if self.cycle_ms[0] < self.min_cycle_ms:
            raise ValueError("cycle time distribution must respect the minimum cycle time")
        object.__setattr__(self, "bin_key", tuple(sorted((str(k), str(v)) for k, v in self.bin_key)))

    @property
    def n_categories(self) -> int:
        return len(self.shot_templates) + 1

    def template(self, category: int) -> EventTemplate:
        return self.confuser if category == NON_SHOT else self.shot_templates[category - 1]


@dataclass(frozen=True)
class Plan:
    """A shooting sequence: event times in seconds with their category (0 = non-shot event)."""

    duration_s: float
    events: tuple[tuple[float, int], ...] = ()


def _validate_plan(profile: SynthProfile, plan: Plan, sample_rate_hz: float):
    if plan.duration_s <= 0:
        raise PlanError("plan duration must be positive")
    min_gap = math.ceil(profile.min_cycle_ms * 1e-3 * sample_rate_hz - 1e-9)
    prev = None
    for t, cat in plan.events:
        if not 0 <= cat < profile.n_categories:
            raise PlanError(f"category {cat} not defined by profile {profile.name!r}")
        if not 0 <= t < plan.duration_s:
            raise PlanError(f"event at {t:.4f}s lies outside the {plan.duration_s}s recording")
        onset = int(round(t * sample_rate_hz))
        if prev is not None and onset - prev[1] < min_gap:
            gap_ms = (onset - prev[1]) / sample_rate_hz * 1e3
            raise PlanError(
                f"events at {prev[0]:.4f}s and {t:.4f}s are {gap_ms:.2f} ms apart, "
                f"below the minimum cycle time of {profile.min_cycle_ms} ms"
            )
        prev = (t, onset)


def _render_event(out: np.ndarray, onset: int, tmpl: EventTemplate, rate: float, amp_jitter: float,
                  rng: np.random.Generator):
    amp = rng.uniform(*tmpl.amp_range)
    n = len(out)
    for k, tr in enumerate(tmpl.transients):
        a = amp * tr.rel_amp * (1.0 + amp_jitter * rng.uniform(-1.0, 1.0))
        f = tr.freq_hz * (1.0 + tmpl.freq_jitter * rng.uniform(-1.0, 1.0))
        delay = tr.delay_ms
        if k > 0:
            delay += tmpl.delay_jitter_ms * rng.uniform(-1.0, 1.0)
        phase = rng.uniform(0.0, 2 * np.pi)
        sign = rng.choice((-1.0, 1.0))
        start = onset + int(round(delay * 1e-3 * rate))
        length = int(math.ceil(8 * tr.tau_ms * 1e-3 * rate))
        stop = min(start + length, n)
        if start >= n or stop <= 0:
            continue
        t = np.arange(max(start, 0), stop) - start
        t_s = t / rate
        out[max(start, 0):stop] += sign * a * np.exp(-t_s / (tr.tau_ms * 1e-3)) * np.sin(2 * np.pi * f * t_s + phase)


def synthesize_series(profile: SynthProfile, plan: Plan, seed: int, series_id: str = "",
                      sample_rate_hz: float = 6400.0) -> tuple[TimeSeries, WeakLabel, GroundTruth]:
    """Render ``plan`` with background noise; the label is the planted shot histogram."""
    _validate_plan(profile, plan, sample_rate_hz)
    rng = np.random.default_rng(seed)
    n = int(round(plan.duration_s * sample_rate_hz))
    out = rng.normal(0.0, profile.noise_sigma, n)
    events = []
    for t, cat in plan.events:
        onset = int(round(t * sample_rate_hz))
        _render_event(out, onset, profile.template(cat), sample_rate_hz, profile.amp_jitter, rng)
        events.append((onset, int(cat)))
    truth = GroundTruth(tuple(events))
    label = WeakLabel(truth.counts(profile.n_categories))
    series = TimeSeries(out.astype(np.float32), sample_rate_hz, series_id, profile.bin_key)
    return series, label, truth


def random_plan(profile: SynthProfile, rng: np.random.Generator, n_rounds: int, n_confusers: int = 0,
                category: int | Sequence[int] = 1, lead_s: float = 0.15, tail_s: float = 0.15) -> Plan:
    """Bursts of shots separated by pauses, with non-shot events dropped into the pauses.

    ``category`` may be a sequence, in which case each burst draws its category from it.
    """
    cats = [category] if isinstance(category, int) else list(category)
    # one millisecond of slack so sample rounding never breaks the minimum cycle time
    min_gap = (profile.min_cycle_ms + 1.0) * 1e-3
    shots: list[tuple[float, int]] = []
    t = lead_s
    remaining = n_rounds
    pauses = []
    while remaining > 0:
        burst = min(remaining, int(rng.integers(profile.burst_len[0], profile.burst_len[1] + 1)))
        cat = int(cats[int(rng.integers(len(cats)))])
        for k in range(burst):
            if k:
                t += max(rng.uniform(*profile.cycle_ms) * 1e-3, min_gap)
            shots.append((t, cat))
        remaining -= burst
        pause = rng.uniform(0.25, 0.6)
        pauses.append((t + min_gap, t + pause - min_gap))
        t += pause
    if not shots:
        pauses = [(lead_s, lead_s + 0.4 * max(n_confusers, 1))]
        t = pauses[0][1] + min_gap
    # confusers go into randomly chosen pauses, spaced by at least the minimum cycle time
    placed: list[tuple[float, int]] = []
    for _ in range(n_confusers):
        for _attempt in range(50):
            lo, hi = pauses[int(rng.integers(len(pauses)))]
            if hi <= lo:
                continue
            c = rng.uniform(lo, hi)
            if all(abs(c - p) >= min_gap for p, _ in placed):
                placed.append((c, NON_SHOT))
                break
    events = sorted(shots + placed)
    duration = t + tail_s
    return Plan(duration, tuple(events))


# ---------------------------------------------------------------------------
# Benchmark profiles
# ---------------------------------------------------------------------------

LIVE = EventTemplate(
    amp_range=(30.0, 48.0),
    transients=(
        Transient(0.0, 1.0, 1500.0, 1.5),
        Transient(10.0, 0.55, 700.0, 2.0),
        Transient(22.0, 0.45, 520.0, 2.4),
    ),
)

BLANK = EventTemplate(
    amp_range=(26.0, 42.0),
    transients=(
        Transient(0.0, 1.0, 1050.0, 1.7),
        Transient(13.0, 0.5, 650.0, 2.2),
    ),
)

CONFUSER = EventTemplate(
    amp_range=(14.0, 34.0),
    transients=(
        Transient(0.0, 1.0, 600.0, 2.6),
        Transient(28.0, 0.5, 450.0, 2.5),
    ),
    freq_jitter=0.15,
    delay_jitter_ms=4.0,
)

# mount -> (amplitude scale, frequency scale, damping scale)
MOUNTS = {
    "shoulder": (1.0, 1.0, 1.0),
    "bipod": (0.9, 1.05, 0.9),
    "waist": (1.1, 0.95, 1.1),
    "tripod": (0.9, 1.1, 0.9),
    "fixed": (1.25, 0.9, 1.2),
}
# accessory -> (amplitude scale, damping scale, sub-event delay shift ms)
ACCESSORIES = {
    "none": (1.0, 1.0, 0.0),
    "heavy": (0.85, 1.2, 2.0),
}


def _scaled(tmpl: EventTemplate, amp: float, freq: float, damp: float, shift_ms: float = 0.0) -> EventTemplate:
    trs = tuple(
        Transient(tr.delay_ms + (shift_ms if k else 0.0), tr.rel_amp, tr.freq_hz * freq, tr.tau_ms * damp)
        for k, tr in enumerate(tmpl.transients)
    )
    return EventTemplate((tmpl.amp_range[0] * amp, tmpl.amp_range[1] * amp), trs, tmpl.freq_jitter,
                         tmpl.delay_jitter_ms)


def benchmark_profiles(n_categories: int = 2, seed: int = 0) -> list[SynthProfile]:
    """Ten bins (five mounts x two accessory loads) of one weapon-like family.

    With ``n_categories=3`` the two shot categories are live and blank rounds,
    whose templates overlap in amplitude and timing.
    """
    if n_categories not in (2, 3):
        raise ValueError("benchmark profiles exist for 2 or 3 categories")
    shots = (LIVE,) if n_categories == 2 else (LIVE, BLANK)
    profiles = []
    for i, (mount, (ma, mf, md)) in enumerate(MOUNTS.items()):
        for j, (acc, (aa, ad, shift)) in enumerate(ACCESSORIES.items()):
            tmpls = tuple(_scaled(t, ma * aa, mf, md * ad, shift) for t in shots)
            conf = _scaled(CONFUSER, ma, mf, md * ad)
            profiles.append(SynthProfile(
                name=f"{mount}-{acc}",
                shot_templates=tmpls,
                confuser=conf,
                bin_key=(("mount", mount), ("accessory", acc)),
                seed=seed * 1000 + 10 * i + j,
            ))
    return profiles


def build_benchmark(n_categories: int = 2, recordings_per_bin: int = 14, rounds_per_recording: tuple[int, int] = (10, 19),
                    confusers_per_recording: tuple[int, int] = (2, 4), nonshot_recordings_per_bin: int = 1,
                    nonshot_events: tuple[int, int] = (6, 12), seed: int = 0,
                    profiles: Sequence[SynthProfile] | None = None) -> Dataset:
    """Synthesize a binned benchmark with planted ground truth.

    Defaults give roughly 2000 shots and 500 non-shot events over ten bins.
    """
    if profiles is None:
        profiles = benchmark_profiles(n_categories, seed)
    names = ("non-shot", "shot") if n_categories == 2 else ("non-shot", "live", "blank")
    rng = np.random.default_rng(seed)
    records = []
    for prof in profiles:
        shot_cats = list(range(1, prof.n_categories))
        for r in range(recordings_per_bin):
            n_rounds = int(rng.integers(rounds_per_recording[0], rounds_per_recording[1] + 1))
            n_conf = int(rng.integers(confusers_per_recording[0], confusers_per_recording[1] + 1))
            # single-category recordings, as acquired per ammunition box
            cat = shot_cats[r % len(shot_cats)]
            plan = random_plan(prof, rng, n_rounds, n_conf, category=cat)
            s, lab, gt = synthesize_series(prof, plan, int(rng.integers(2**31)), f"{prof.name}/{r:03d}")
            records.append(Record(s, lab, gt))
        for r in range(nonshot_recordings_per_bin):
            n_conf = int(rng.integers(nonshot_events[0], nonshot_events[1] + 1))
            plan = random_plan(prof, rng, 0, n_conf)
            s, lab, gt = synthesize_series(prof, plan, int(rng.integers(2**31)), f"{prof.name}/ns{r:02d}")
            records.append(Record(s, lab, gt))
    return Dataset(records, names)


# ---------------------------------------------------------------------------
# Split
# ---------------------------------------------------------------------------


def split_dataset(dataset: Dataset, fraction: float = 0.10, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Per-bin random split; each bin sends ceil(fraction * size) recordings to validation."""
    if len(dataset) == 0:
        raise ValueError("cannot split an empty dataset")
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    bins: dict[BinKey, list[int]] = {}
    for i, rec in enumerate(dataset.records):
        bins.setdefault(rec.series.bin_key, []).append(i)
    rng = np.random.default_rng(seed)
    val_idx = set()
    for key in sorted(bins):
        members = bins[key]
        # guard against 0.1 * 30 = 3.0000000000000004
        n_val = math.ceil(fraction * len(members) - 1e-9)
        chosen = rng.permutation(len(members))[:n_val]
        val_idx.update(members[c] for c in chosen)
    learning = [r for i, r in enumerate(dataset.records) if i not in val_idx]
    validation = [r for i, r in enumerate(dataset.records) if i in val_idx]
    return dataset.subset(learning), dataset.subset(validation)


# ---------------------------------------------------------------------------
# Container format
# ---------------------------------------------------------------------------

MAGIC = b"WCDS"
FORMAT_VERSION = 1


def _pack_str(buf: io.BytesIO, s: str):
    raw = s.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DatasetFormatError("unexpected end of file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DatasetFormatError("invalid UTF-8 string") from exc


def dumps_dataset(dataset: Dataset) -> bytes:
    """Serialize to the versioned little-endian container (CRC32 trailer)."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HHI", FORMAT_VERSION, dataset.n_categories, len(dataset)))
    for name in dataset.category_names:
        _pack_str(buf, name)
    for rec in dataset.records:
        s = rec.series
        _pack_str(buf, s.series_id)
        buf.write(struct.pack("<dH", s.sample_rate_hz, len(s.bin_key)))
        for k, v in s.bin_key:
            _pack_str(buf, f"{k}={v}")
        buf.write(struct.pack("<Q", len(s.samples)))
        buf.write(s.samples.astype("<f4").tobytes())
        buf.write(struct.pack(f"<{len(rec.label.counts)}I", *rec.label.counts))
        if rec.truth is None:
            buf.write(b"\x00")
        else:
            buf.write(b"\x01")
            buf.write(struct.pack("<I", len(rec.truth.events)))
            for onset, cat in rec.truth.events:
                buf.write(struct.pack("<qH", onset, cat))
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def loads_dataset(data: bytes) -> Dataset:
    if len(data) < len(MAGIC) + 4 or data[:4] != MAGIC:
        raise DatasetFormatError("not a dataset file (bad magic)")
    r = _Reader(data[:-4])
    r.take(4)
    version, n_cat, n_rec = r.unpack("<HHI")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported dataset format version {version} (expected {FORMAT_VERSION})")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise DatasetFormatError("checksum mismatch: file is truncated or corrupted")
    names = tuple(r.string() for _ in range(n_cat))
    records = []
    for _ in range(n_rec):
        sid = r.string()
        rate, n_bin = r.unpack("<dH")
        key = []
        for _ in range(n_bin):
            k, sep, v = r.string().partition("=")
            if not sep:
                raise DatasetFormatError("bin key entry without '='")
            key.append((k, v))
        (n_samp,) = r.unpack("<Q")
        samples = np.frombuffer(r.take(4 * n_samp), dtype="<f4").astype(np.float32)
        counts = r.unpack(f"<{n_cat - 1}I")
        (has_truth,) = r.unpack("<B")
        truth = None
        if has_truth:
            (n_ev,) = r.unpack("<I")
            truth = GroundTruth(tuple(r.unpack("<qH") for _ in range(n_ev)))
        records.append(Record(TimeSeries(samples, rate, sid, tuple(key)), WeakLabel(counts), truth))
    if r.pos != len(r.data):
        raise DatasetFormatError("trailing bytes after last record")
    return Dataset(records, names)


def atomic_write_bytes(path: str | os.PathLike, data: bytes):
    """Write via a temporary sibling file so a failure never leaves a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(dataset: Dataset, path: str | os.PathLike):
    atomic_write_bytes(path, dumps_dataset(dataset))


def load_dataset(path: str | os.PathLike) -> Dataset:
    return loads_dataset(Path(path).read_bytes())

"""File formats and run configuration.

Event files follow the FSL three-column convention (onset, duration,
amplitude; one condition per file).  Time-series files are a one-line
header ``tr=<s> t=<T> v=<V>`` followed by T whitespace-separated rows.
Configs are flat ``key = value`` lines with ``#`` comments.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ParseError(ValueError):
    """Malformed input file; message carries the offending line number."""


class ValidationError(ValueError):
    """Well-formed input that violates a domain invariant."""


@dataclass(frozen=True)
class RawEvent:
    onset: float
    duration: float
    amplitude: float
    condition: str

    def __post_init__(self):
        if not self.onset >= 0:
            raise ValidationError(f"negative onset {self.onset}")
        if not self.duration >= 0:
            raise ValidationError(f"negative duration {self.duration}")
        if not self.condition:
            raise ValidationError("empty condition label")


@dataclass
class EventSchedule:
    events: list
    vocab: dict
    tr: float

    def __post_init__(self):
        if not self.tr > 0:
            raise ValidationError(f"tr must be positive, got {self.tr}")
        ids = sorted(self.vocab.values())
        if ids != list(range(len(ids))):
            raise ValidationError(f"vocab ids must be contiguous from 0, got {ids}")
        for ev in self.events:
            if ev.condition not in self.vocab:
                raise ValidationError(f"condition {ev.condition!r} not in vocab")

    @classmethod
    def from_events(cls, events, tr, vocab=None):
        """Sort by (onset, condition) and build a sorted-label vocab if none given."""
        events = sorted(events, key=lambda e: (e.onset, e.condition))
        if vocab is None:
            vocab = {s: i for i, s in enumerate(sorted({e.condition for e in events}))}
        return cls(events=events, vocab=dict(vocab), tr=float(tr))

    def __len__(self):
        return len(self.events)


@dataclass(frozen=True)
class NormalizedEvent:
    onset_tr: float
    duration_tr: float
    amplitude_z: float
    condition_id: int


@dataclass
class TimeSeries:
    data: np.ndarray
    tr: float
    roi_names: list | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValidationError(f"time series must be 2-D (T x V), got shape {self.data.shape}")
        T, V = self.data.shape
        if T < 2 or V < 2:
            raise ValidationError(f"time series needs T >= 2 and V >= 2, got {T} x {V}")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("time series contains non-finite values")
        if not self.tr > 0:
            raise ValidationError(f"tr must be positive, got {self.tr}")
        if self.roi_names is not None and len(self.roi_names) != V:
            raise ValidationError(f"{len(self.roi_names)} roi names for {V} regions")

    @property
    def n_timepoints(self):
        return self.data.shape[0]

    @property
    def n_regions(self):
        return self.data.shape[1]


# ---------------------------------------------------------------------- events


def parse_event_file(text, condition, tr=None):
    """Parse a three-column event file into RawEvents tagged with ``condition``.

    ``tr`` is accepted for call-site symmetry with the schedule but timing
    stays in seconds here; conversion happens in ``normalize_events``.
    """
    events = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        cols = stripped.split()
        if len(cols) != 3:
            raise ParseError(f"line {lineno}: expected 3 columns, got {len(cols)}")
        try:
            onset, duration, amplitude = (float(c) for c in cols)
        except ValueError:
            raise ParseError(f"line {lineno}: non-numeric value in {stripped!r}") from None
        if not all(math.isfinite(v) for v in (onset, duration, amplitude)):
            raise ParseError(f"line {lineno}: non-finite value in {stripped!r}")
        try:
            events.append(RawEvent(onset, duration, amplitude, condition))
        except ValidationError as exc:
            raise ValidationError(f"line {lineno}: {exc}") from None
    return events


def format_event_file(events):
    return "".join(f"{e.onset!r} {e.duration!r} {e.amplitude!r}\n" for e in events)


def load_event_dir(path, tr, vocab=None):
    """Read every ``<condition>.ev`` file of a directory into one schedule.

    A missing directory is an empty schedule (rest-only generation).
    """
    path = Path(path)
    events = []
    if path.is_dir():
        for f in sorted(path.glob("*.ev")):
            events.extend(parse_event_file(f.read_text(), f.stem, tr))
    if vocab is not None:
        unknown = sorted({e.condition for e in events} - set(vocab))
        if unknown:
            raise ValidationError(f"unknown condition label(s): {', '.join(unknown)}")
    return EventSchedule.from_events(events, tr, vocab)


def save_event_dir(schedule, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for cond in sorted(schedule.vocab, key=schedule.vocab.get):
        evs = [e for e in schedule.events if e.condition == cond]
        (path / f"{cond}.ev").write_text(format_event_file(evs))


def normalize_events(schedule, vocab=None):
    """Timing in TR units, amplitudes z-scored over the whole schedule.

    Uses the population std; a zero-variance schedule gets all-zero
    amplitudes.  ``vocab`` remaps condition ids onto a model's vocabulary.
    """
    if not schedule.events:
        raise ValidationError("cannot normalize an empty schedule")
    vocab = schedule.vocab if vocab is None else vocab
    amps = np.array([e.amplitude for e in schedule.events], dtype=np.float64)
    std = amps.std()
    z = np.zeros_like(amps) if std == 0 else (amps - amps.mean()) / std
    out = []
    for e, a in zip(schedule.events, z):
        if e.condition not in vocab:
            raise ValidationError(f"unknown condition label: {e.condition}")
        out.append(NormalizedEvent(e.onset / schedule.tr, e.duration / schedule.tr, float(a), vocab[e.condition]))
    return out


# ----------------------------------------------------------------- time series


def format_timeseries(ts):
    T, V = ts.data.shape
    rows = [f"tr={ts.tr!r} t={T} v={V}"]
    rows.extend(" ".join(repr(float(x)) for x in row) for row in ts.data)
    return "\n".join(rows) + "\n"


def parse_timeseries(text, source="<string>"):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ParseError(f"{source}: empty file, missing header")
    header = {}
    for tok in lines[0].split():
        key, sep, val = tok.partition("=")
        if not sep:
            raise ParseError(f"{source}: line 1: malformed header token {tok!r}")
        header[key] = val
    if set(header) != {"tr", "t", "v"}:
        raise ParseError(f"{source}: line 1: header must be 'tr=<s> t=<T> v=<V>'")
    try:
        tr, T, V = float(header["tr"]), int(header["t"]), int(header["v"])
    except ValueError:
        raise ParseError(f"{source}: line 1: bad header values") from None
    body = lines[1:]
    if len(body) != T:
        raise ValidationError(f"{source}: header says t={T} but {len(body)} rows present")
    data = np.empty((T, V))
    for i, line in enumerate(body):
        cols = line.split()
        if len(cols) != V:
            raise ValidationError(f"{source}: line {i + 2}: expected {V} values, got {len(cols)}")
        try:
            data[i] = [float(c) for c in cols]
        except ValueError:
            raise ParseError(f"{source}: line {i + 2}: non-numeric value") from None
    if not np.all(np.isfinite(data)):
        raise ValidationError(f"{source}: non-finite values")
    return TimeSeries(data, tr)


def save_timeseries(ts, path):
    Path(path).write_text(format_timeseries(ts))


def load_timeseries(path):
    return parse_timeseries(Path(path).read_text(), source=str(path))


# ---------------------------------------------------------------------- config


@dataclass
class RunConfig:
    # encoder
    d_model: int = 64
    enc_layers: int = 2
    enc_heads: int = 4
    patch_len: int = 16
    max_patches: int = 64
    # prior
    rank_k: int = 8
    # events
    d_ev: int = 32
    event_hidden: int = 64
    use_events: bool = True
    # velocity
    d_time: int = 32
    time_freqs: int = 8
    vel_hidden: int = 128
    vel_layers: int = 2
    # losses
    lambda_fc: float = 1.0
    lambda_psd: float = 0.1
    band_lo: float = 0.01
    band_hi: float = 0.05
    # optimizer
    lr: float = 1e-3
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 50
    batch_size: int = 16
    # sampling / evaluation
    euler_steps: int = 50
    welch_seg_len: int = 64
    seed: int = 0
    train_frac: float = 0.7
    val_frac: float = 0.15
    test_frac: float = 0.15

    def __post_init__(self):
        self.validate()

    def validate(self, tr=None):
        positive = ["d_model", "enc_layers", "enc_heads", "patch_len", "max_patches", "rank_k",
                    "d_ev", "event_hidden", "d_time", "time_freqs", "vel_hidden", "vel_layers",
                    "batch_size", "euler_steps", "welch_seg_len", "lr"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.enc_heads:
            raise ValidationError(f"d_model={self.d_model} not divisible by enc_heads={self.enc_heads}")
        for name in ["lambda_fc", "lambda_psd", "weight_decay", "epochs", "seed"]:
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or not self.eps > 0:
            raise ValidationError("adam betas must lie in [0, 1) and eps > 0")
        if not 0 < self.band_lo < self.band_hi:
            raise ValidationError(f"band must satisfy 0 < band_lo < band_hi, got {self.band_lo}, {self.band_hi}")
        if tr is not None and not self.band_hi < 1.0 / (2.0 * tr):
            raise ValidationError(f"band_hi={self.band_hi} Hz is not below Nyquist {1.0 / (2.0 * tr)} Hz for tr={tr}")
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if min(fracs) < 0 or abs(sum(fracs) - 1.0) > 1e-9:
            raise ValidationError(f"split fractions must be nonnegative and sum to 1, got {fracs}")
        return self

    @property
    def band(self):
        return (self.band_lo, self.band_hi)

    @property
    def fractions(self):
        return (self.train_frac, self.val_frac, self.test_frac)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def _coerce(kind, raw, key):
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            f = float(raw)
            if f != int(f):
                raise ValueError(raw)
            return int(f)
        return kind(raw)
    except ValueError:
        raise ValidationError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_keyvalues(text, cls, source="<string>"):
    """Parse flat ``key = value`` text into dataclass ``cls``, defaults for missing keys."""
    kinds = {f.name: type(f.default) for f in dataclasses.fields(cls)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, sep, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ParseError(f"{source}: line {lineno}: expected 'key = value'")
        if key not in kinds:
            raise ValidationError(f"{source}: line {lineno}: unknown key {key!r}")
        values[key] = _coerce(kinds[key], raw, key)
    return cls(**values)


def format_keyvalues(obj):
    return "".join(f"{f.name} = {getattr(obj, f.name)!r}\n" for f in dataclasses.fields(obj))


def load_config(path):
    return parse_keyvalues(Path(path).read_text(), RunConfig, source=str(path))


def save_config(config, path):
    Path(path).write_text(format_keyvalues(config))


# ---------------------------------------------------------------------- splits


def split_subjects(subject_ids, fractions=(0.7, 0.15, 0.15), seed=0):
    """Seeded subject-disjoint split; val/test sizes rounded, train takes the rest."""
    ids = list(subject_ids)
    if len(set(ids)) != len(ids):
        dupes = sorted({str(s) for s in ids if ids.count(s) > 1})
        raise ValidationError(f"duplicate subject ids: {', '.join(dupes)}")
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValidationError(f"fractions must be three nonnegative values summing to 1, got {fractions}")
    n = len(ids)
    n_val = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    if n_val + n_test > n:
        n_test = n - n_val
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    n_train = n - n_val - n_test
    return shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:]

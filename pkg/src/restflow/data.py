"""Synthetic paired rest/task data with a known rest-to-task mapping.

Each subject gets a mixing matrix (shared base plus a subject jitter).
Rest and the task baseline are independent 1/f latent draws pushed through
that mixing; the task adds condition-specific spatial responses to boxcar
regressors smoothed by a truncated Gaussian kernel, then observation noise.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io import (
    EventSchedule,
    RawEvent,
    TimeSeries,
    ValidationError,
    load_event_dir,
    load_timeseries,
    parse_keyvalues,
    save_event_dir,
    save_timeseries,
)
from .prior import colored_noise


@dataclass
class SynthSpec:
    n_regions: int = 10
    t_rest: int = 128
    t_task: int = 128
    tr: float = 0.72
    n_subjects: int = 48
    n_conditions: int = 2
    events_per_run: int = 6
    event_duration_tr: int = 8
    mixing_seed: int = 0
    mixing_jitter: float = 0.3
    amplitude: float = 5.0
    response_amplitude: float = 3.0
    noise: float = 0.1
    kernel_width: float = 2.0

    def __post_init__(self):
        for name in ("n_regions", "t_rest", "t_task", "n_subjects", "n_conditions", "event_duration_tr"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_regions < 2 or self.t_rest < 4 or self.t_task < 4:
            raise ValidationError("need n_regions >= 2 and t_rest, t_task >= 4")
        if not self.tr > 0 or not self.kernel_width > 0:
            raise ValidationError("tr and kernel_width must be positive")
        for name in ("events_per_run", "mixing_jitter", "amplitude", "response_amplitude", "noise"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be nonnegative, got {getattr(self, name)}")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass
class SubjectPair:
    rest: TimeSeries
    task: TimeSeries
    schedule: EventSchedule
    subject_id: str
    baseline: np.ndarray | None = None


def load_synth_spec(path):
    return parse_keyvalues(Path(path).read_text(), SynthSpec, source=str(path))


def condition_labels(n):
    return [f"cond{i}" for i in range(n)]


def gaussian_kernel(width):
    half = int(np.ceil(3 * width))
    u = np.arange(-half, half + 1)
    k = np.exp(-0.5 * (u / width) ** 2)
    return k / k.sum()


def draw_onsets(n_events, duration, n_timepoints, rng):
    """Non-overlapping integer onsets (in TRs), sorted."""
    free = n_timepoints - n_events * duration
    if n_events and free < 0:
        raise ValidationError(
            f"infeasible schedule: {n_events} events of {duration} TRs exceed {n_timepoints} timepoints")
    if n_events == 0:
        return np.zeros(0, dtype=int)
    gaps = np.sort(rng.integers(0, free + 1, size=n_events))
    return gaps + duration * np.arange(n_events)


def event_regressors(schedule, n_timepoints, n_conditions, kernel):
    """(T, n_conditions) amplitude-weighted boxcars convolved with ``kernel``."""
    box = np.zeros((n_timepoints, n_conditions))
    for ev in schedule.events:
        lo = int(round(ev.onset / schedule.tr))
        hi = int(round((ev.onset + ev.duration) / schedule.tr))
        box[lo:hi, schedule.vocab[ev.condition]] += ev.amplitude
    return np.stack([np.convolve(box[:, c], kernel, mode="same") for c in range(n_conditions)], axis=1)


def population(spec):
    """Shared base mixing and per-condition spatial response patterns."""
    rng = np.random.default_rng(spec.mixing_seed)
    V = spec.n_regions
    base = rng.standard_normal((V, V)) / np.sqrt(V)
    patterns = rng.standard_normal((spec.n_conditions, V))
    return base, patterns


def gen_subject(spec, subject_id, rng, base, patterns):
    V = spec.n_regions
    mixing = base + spec.mixing_jitter * rng.standard_normal((V, V)) / np.sqrt(V)
    rest = spec.amplitude * colored_noise(spec.t_rest, V, rng) @ mixing.T
    baseline = spec.amplitude * colored_noise(spec.t_task, V, rng) @ mixing.T

    labels = condition_labels(spec.n_conditions)
    onsets = draw_onsets(spec.events_per_run, spec.event_duration_tr, spec.t_task, rng)
    conds = rng.integers(0, spec.n_conditions, size=len(onsets))
    amps = rng.uniform(0.5, 1.5, size=len(onsets))
    events = [RawEvent(float(o * spec.tr), float(spec.event_duration_tr * spec.tr), float(a), labels[c])
              for o, c, a in zip(onsets, conds, amps)]
    schedule = EventSchedule.from_events(events, spec.tr, {lab: i for i, lab in enumerate(labels)})

    regs = event_regressors(schedule, spec.t_task, spec.n_conditions, gaussian_kernel(spec.kernel_width))
    task = baseline + spec.response_amplitude * regs @ patterns
    task = task + spec.noise * rng.standard_normal(task.shape)
    return SubjectPair(TimeSeries(rest, spec.tr), TimeSeries(task, spec.tr), schedule, subject_id, baseline)


def gen_dataset(spec, seed=0):
    """Deterministic list of SubjectPair; subject k draws from its own substream."""
    base, patterns = population(spec)
    # fail fast on infeasible schedules before any subject is drawn
    draw_onsets(spec.events_per_run, spec.event_duration_tr, spec.t_task, np.random.default_rng(0))
    streams = np.random.SeedSequence(seed).spawn(spec.n_subjects)
    width = max(3, len(str(spec.n_subjects - 1)))
    return [gen_subject(spec, f"sub{k:0{width}d}", np.random.default_rng(ss), base, patterns)
            for k, ss in enumerate(streams)]


# --------------------------------------------------------------------- on disk


def write_dataset(pairs, root):
    """``<root>/<subject>/rest.ts``, ``task.ts`` and ``events/<condition>.ev``."""
    root = Path(root)
    for p in pairs:
        d = root / p.subject_id
        d.mkdir(parents=True, exist_ok=True)
        save_timeseries(p.rest, d / "rest.ts")
        save_timeseries(p.task, d / "task.ts")
        save_event_dir(p.schedule, d / "events")


def read_dataset(root):
    root = Path(root)
    pairs = []
    for d in sorted(x for x in root.iterdir() if x.is_dir()):
        if not (d / "rest.ts").exists() or not (d / "task.ts").exists():
            continue
        rest = load_timeseries(d / "rest.ts")
        task = load_timeseries(d / "task.ts")
        schedule = load_event_dir(d / "events", task.tr)
        pairs.append(SubjectPair(rest, task, schedule, d.name))
    if not pairs:
        raise ValidationError(f"no subjects with rest.ts and task.ts under {root}")
    return pairs


def collect_task_series(root):
    """Map subject id -> task TimeSeries from ``<sid>/task.ts`` or ``<sid>.ts``."""
    root = Path(root)
    out = {}
    for entry in sorted(root.iterdir()):
        if entry.is_dir() and (entry / "task.ts").exists():
            out[entry.name] = load_timeseries(entry / "task.ts")
        elif entry.is_file() and entry.suffix == ".ts":
            out[entry.stem] = load_timeseries(entry)
    return out

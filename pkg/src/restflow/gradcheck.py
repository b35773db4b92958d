"""Whole-pipeline gradient check on a micro model against central differences."""

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .flow import FlowModel, compute_losses
from .io import EventSchedule, RawEvent, normalize_events

COMPONENTS = ("fm", "fc", "psd", "total")


@dataclass
class GradcheckReport:
    errors: dict = field(default_factory=dict)   # (param, component) -> rel. error
    tolerance: float = 1e-4

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def worst(self):
        return max(self.errors, key=self.errors.get) if self.errors else None

    @property
    def passed(self):
        return self.max_error <= self.tolerance

    def by_param(self):
        out = {}
        for (name, _), err in self.errors.items():
            out[name] = max(out.get(name, 0.0), err)
        return out


def micro_config(config):
    """Shrink a run config to micro dimensions, keeping its loss settings."""
    return config.replace(d_model=8, enc_layers=2, enc_heads=2, patch_len=4, max_patches=4,
                          d_ev=4, event_hidden=6, d_time=4, time_freqs=2, vel_hidden=8, vel_layers=2,
                          rank_k=min(config.rank_k, 4))


def micro_problem(config, seed=0, n_regions=3, n_timepoints=8, batch=2):
    """Model, inputs and fixed draws for the check (2 events per item)."""
    cfg = micro_config(config)
    rng = np.random.default_rng(seed)
    # place DFT bin 1 at the band centre so the spectral term is non-empty
    tr = 1.0 / (n_timepoints * 0.5 * (cfg.band_lo + cfg.band_hi))
    vocab = {"a": 0, "b": 1}
    model = FlowModel.initialize(cfg, n_regions, vocab, tr, n_timepoints, rng)
    rests = [rng.standard_normal((n_timepoints, n_regions)) for _ in range(batch)]
    tasks = [rng.standard_normal((n_timepoints, n_regions)) for _ in range(batch)]
    normalized = []
    for _ in range(batch):
        onsets = np.sort(rng.uniform(0, n_timepoints * tr * 0.8, size=2))
        evs = [RawEvent(float(o), float(tr * rng.uniform(1, 3)), float(rng.uniform(0.5, 2)), lab)
               for o, lab in zip(onsets, ("a", "b"))]
        normalized.append(normalize_events(EventSchedule.from_events(evs, tr, vocab)))
    draws = {
        "eps": rng.standard_normal((batch, n_timepoints, n_regions)),
        "z": rng.standard_normal((batch, n_timepoints, cfg.rank_k)),
        "t": rng.uniform(0.1, 0.9, size=batch),
    }
    return model, rests, tasks, normalized, draws


def run_gradcheck(config, seed=0, h=1e-5, tolerance=1e-4, floor=1e-6):
    """Compare analytic and central-difference gradients of every loss term.

    Error per (parameter tensor, loss term) is ||g_a - g_fd|| divided by
    max(||g_a||, ||g_fd||, floor * ||G||), with G the term's full gradient.
    The floor keeps structurally zero gradients (key biases under softmax,
    output bias under the DC-free spectral loss) from scoring round-off.
    """
    model, rests, tasks, normalized, draws = micro_problem(config, seed)

    def losses():
        out = compute_losses(model, rests, tasks, normalized, None, draws=draws, aux_graph=True)
        return out.parts

    analytic = {}
    for comp in COMPONENTS:
        model.params.zero_grad()
        dc.backward(losses()[comp])
        analytic[comp] = {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                          for n, p in model.params.items()}
    model.params.zero_grad()

    global_norm = {comp: np.sqrt(sum(float(np.sum(g * g)) for g in analytic[comp].values()))
                   for comp in COMPONENTS}
    report = GradcheckReport(tolerance=tolerance)
    with dc.no_grad():
        for name, p in model.params.items():
            numeric = {comp: np.zeros_like(p.data) for comp in COMPONENTS}
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = {k: float(v.data) for k, v in losses().items()}
                flat[i] = orig - h
                down = {k: float(v.data) for k, v in losses().items()}
                flat[i] = orig
                for comp in COMPONENTS:
                    numeric[comp].reshape(-1)[i] = (up[comp] - down[comp]) / (2 * h)
            for comp in COMPONENTS:
                a, n = analytic[comp][name], numeric[comp]
                scale = max(np.linalg.norm(a), np.linalg.norm(n), floor * global_norm[comp])
                report.errors[(name, comp)] = 0.0 if scale == 0 else float(np.linalg.norm(a - n) / scale)
    return report

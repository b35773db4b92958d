"""Flow-matching training with connectivity/spectral regularisers and
fixed-step Euler sampling."""

from __future__ import annotations

import csv
import io as _io
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .encoder import encode_rest, init_encoder
from .events import embed_event_batch, init_events
from .io import (
    RunConfig,
    TimeSeries,
    ValidationError,
    format_keyvalues,
    normalize_events,
    parse_keyvalues,
)
from .prior import init_prior, sample_prior
from .velocity import init_velocity, predict_velocity

log = logging.getLogger(__name__)

POWER_FLOOR = 1e-12


# ---------------------------------------------------------------------- losses


def fm_loss(v_pred, v_star):
    """Mean squared error over every entry."""
    v_pred, v_star = dc.as_value(v_pred), dc.as_value(v_star)
    if v_pred.shape != v_star.shape:
        raise dc.ShapeError(f"fm_loss: shapes {v_pred.shape} and {v_star.shape} differ")
    return dc.mean(dc.square(dc.sub(v_pred, v_star)))


def one_step_x1(x_t, t, v_pred):
    """Euler extrapolation to t = 1: x_t + (1 - t) v_pred; t is scalar or (B,)."""
    x_t = dc.as_value(x_t)
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    step = 1.0 - t
    if step.ndim:
        step = step.reshape((-1,) + (1,) * (x_t.ndim - 1))
    return dc.add(x_t, dc.mul(v_pred, step))


def _as_batch(x):
    x = dc.as_value(x)
    return dc.reshape(x, (1,) + x.shape) if x.ndim == 2 else x


def _zero_var(ss, sq):
    return ss <= 1e-20 * np.maximum(sq, 1.0)


def pearson_graph(x):
    """Differentiable correlation matrices (B, V, V) and the zero-variance mask."""
    x = _as_batch(x)
    B, T, V = x.shape
    xc = dc.sub(x, dc.mean(x, axis=1, keepdims=True))
    ss = dc.vsum(dc.square(xc), axis=1, keepdims=True)
    zero = _zero_var(ss.data, (x.data**2).sum(axis=1, keepdims=True))
    xn = dc.div(xc, dc.sqrt(dc.add(ss, zero.astype(np.float64))))
    R = dc.matmul(dc.swap_last(xn), xn)
    valid = ~zero[:, 0, :]
    return R, valid[:, :, None] & valid[:, None, :]


def pearson_numpy(x):
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    xc = x - x.mean(axis=1, keepdims=True)
    ss = (xc**2).sum(axis=1, keepdims=True)
    zero = _zero_var(ss, (x**2).sum(axis=1, keepdims=True))
    xn = xc / np.sqrt(ss + zero)
    R = np.swapaxes(xn, -1, -2) @ xn
    valid = ~zero[:, 0, :]
    pair = valid[:, :, None] & valid[:, None, :]
    R = np.where(pair, R, 0.0)
    return R[0] if squeeze else R


def fc_loss(x_hat1, x1):
    """Connectivity loss: sum over i<j of |R1_ij|^2 (Rhat_ij - R1_ij)^2, batch-averaged.

    Pairs touching a zero-variance ROI in either input contribute 0.
    """
    x_hat1 = _as_batch(x_hat1)
    x1 = np.asarray(dc.as_value(x1).data)
    if x1.ndim == 2:
        x1 = x1[None]
    if x_hat1.shape != x1.shape:
        raise dc.ShapeError(f"fc_loss: shapes {x_hat1.shape} and {x1.shape} differ")
    B, T, V = x1.shape
    if T < 3:
        raise ValueError(f"fc_loss needs T >= 3, got {T}")
    R_hat, pair_hat = pearson_graph(x_hat1)
    R_true = pearson_numpy(x1)
    _, pair_true = pearson_graph(x1)
    pair = pair_hat & pair_true
    if not pair.all():
        warnings.warn("fc_loss: zero-variance ROI; its pairs contribute 0", RuntimeWarning, stacklevel=2)
    weight = np.where(pair, R_true**2, 0.0) * np.triu(np.ones((V, V)), k=1)
    diff = dc.sub(R_hat, R_true)
    return dc.scale(dc.vsum(dc.mul(dc.square(diff), weight)), 1.0 / B)


def band_bins(n_timepoints, tr, band):
    """DFT bin indices k with band[0] <= k / (T tr) <= band[1], k <= T/2."""
    k = np.arange(n_timepoints // 2 + 1)
    f = k / (n_timepoints * tr)
    lo, hi = band
    tol = 1e-12 * max(hi, 1.0)
    bins = k[(f >= lo - tol) & (f <= hi + tol)]
    if bins.size == 0:
        raise ValidationError(
            f"no DFT bins in band {lo}-{hi} Hz for T={n_timepoints}, tr={tr} "
            f"(resolution {1.0 / (n_timepoints * tr):.4g} Hz)")
    return bins


def _dft_basis(n_timepoints, bins):
    tau = np.arange(n_timepoints)
    ang = 2.0 * np.pi * np.outer(bins, tau) / n_timepoints
    return np.cos(ang), -np.sin(ang)


def band_power_numpy(x, tr, band):
    x = np.asarray(x, dtype=np.float64)
    T = x.shape[-2]
    C, S = _dft_basis(T, band_bins(T, tr, band))
    return np.maximum((C @ x) ** 2 + (S @ x) ** 2, POWER_FLOOR)


def psd_loss(x_hat1, x1, tr, band):
    """Sum over ROIs and in-band DFT bins of squared natural-log power ratios, batch-averaged."""
    x_hat1 = _as_batch(x_hat1)
    x1 = np.asarray(dc.as_value(x1).data)
    if x1.ndim == 2:
        x1 = x1[None]
    if x_hat1.shape != x1.shape:
        raise dc.ShapeError(f"psd_loss: shapes {x_hat1.shape} and {x1.shape} differ")
    B, T, V = x1.shape
    if T < 8:
        raise ValueError(f"psd_loss needs T >= 8, got {T}")
    C, S = _dft_basis(T, band_bins(T, tr, band))
    power = dc.add(dc.square(dc.matmul(C, x_hat1)), dc.square(dc.matmul(S, x_hat1)))
    log_hat = dc.log(dc.clip_min(power, POWER_FLOOR))
    log_true = np.log(band_power_numpy(x1, tr, band))
    return dc.scale(dc.vsum(dc.square(dc.sub(log_hat, log_true))), 1.0 / B)


@dataclass
class LossBreakdown:
    fm: float
    fc: float
    psd: float
    total: float
    graph: dc.Value | None = None
    parts: dict | None = None


# ----------------------------------------------------------------------- model


class FlowModel:
    """Parameters plus the metadata needed to run them (ROIs, vocab, tr, T)."""

    def __init__(self, config, params, n_regions, vocab, tr, n_timepoints):
        self.config = config
        self.params = params
        self.n_regions = int(n_regions)
        self.vocab = dict(vocab)
        self.tr = float(tr)
        self.n_timepoints = int(n_timepoints)

    @classmethod
    def initialize(cls, config, n_regions, vocab, tr, n_timepoints, rng):
        store = dc.ParamStore()
        init_encoder(store, n_regions, config, rng)
        init_prior(store, config.d_model, n_regions, config.rank_k, rng)
        init_events(store, len(vocab), config, rng)
        init_velocity(store, n_regions, config, rng)
        return cls(config, store, n_regions, vocab, tr, n_timepoints)

    def group(self, name):
        return self.params.group(name)

    def context(self, rests):
        """(B, d_model) contexts for a list of (T_rest, V) arrays."""
        rests = [np.asarray(r, dtype=np.float64) for r in rests]
        enc = self.group("encoder")
        if len({r.shape for r in rests}) == 1:
            return encode_rest(np.stack(rests), enc, self.config)
        return dc.concat([encode_rest(r[None], enc, self.config) for r in rests], axis=0)

    def normalize(self, schedule):
        if not self.config.use_events or schedule is None or not schedule.events:
            return []
        return normalize_events(schedule, self.vocab)

    def tokens(self, normalized_lists):
        if not self.config.use_events:
            normalized_lists = [[] for _ in normalized_lists]
        return embed_event_batch(normalized_lists, self.group("events"))

    def prior(self, c, n_timepoints, rng):
        return sample_prior(c, self.group("prior"), n_timepoints, rng, self.config.rank_k)

    def velocity(self, t, x, c, tokens):
        return predict_velocity(t, x, c, tokens, self.group("velocity"))


# -------------------------------------------------------------------- training


def _check_dataset(dataset):
    if not dataset:
        raise ValidationError("training set is empty")
    shapes = {np.shape(s.task.data) for s in dataset}
    if len(shapes) != 1:
        raise ValidationError(f"task series must share one (T, V) shape, got {sorted(shapes)}")
    T, V = shapes.pop()
    if any(s.rest.data.shape[1] != V for s in dataset):
        raise ValidationError("rest and task series must have the same number of ROIs")
    trs = {float(s.task.tr) for s in dataset}
    if len(trs) != 1:
        raise ValidationError(f"all series must share one tr, got {sorted(trs)}")
    return T, V, trs.pop()


def dataset_vocab(dataset):
    labels = set()
    for s in dataset:
        if s.schedule is not None:
            labels.update(s.schedule.vocab)
    return {lab: i for i, lab in enumerate(sorted(labels))}


def compute_losses(model, rests, tasks, normalized, rng, draws=None, aux_graph=False):
    """One flow-matching minibatch: encode, draw x0 and t, predict, score.

    ``draws`` may fix the noise as a dict with ``eps``, ``z`` and ``t``.
    Auxiliary terms with zero weight are computed for logging only unless
    ``aux_graph`` is set.  ``graph`` holds the total; ``parts`` every term.
    """
    cfg = model.config
    x1 = np.stack([np.asarray(x, dtype=np.float64) for x in tasks])
    B, T, _ = x1.shape
    c = model.context(rests)
    if draws is None:
        x0 = model.prior(c, T, rng).x0
        t = rng.uniform(0.0, 1.0, size=B)
    else:
        x0 = sample_prior(c, model.group("prior"), T, rng, cfg.rank_k, draws["eps"], draws["z"]).x0
        t = np.asarray(draws["t"], dtype=np.float64)
    tt = t[:, None, None]
    x_t = dc.add(dc.mul(x0, 1.0 - tt), x1 * tt)
    v_star = dc.sub(x1, x0)
    v = model.velocity(t, x_t, c, model.tokens(normalized))
    fm = fm_loss(v, v_star)
    x_hat = one_step_x1(x_t, t, v)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        if cfg.lambda_fc > 0 or aux_graph:
            fc = fc_loss(x_hat, x1)
        else:
            with dc.no_grad():
                fc = fc_loss(x_hat, x1)
        if cfg.lambda_psd > 0 or aux_graph:
            psd = psd_loss(x_hat, x1, model.tr, cfg.band)
        else:
            with dc.no_grad():
                psd = psd_loss(x_hat, x1, model.tr, cfg.band)
    total = fm
    if cfg.lambda_fc > 0:
        total = dc.add(total, dc.scale(fc, cfg.lambda_fc))
    if cfg.lambda_psd > 0:
        total = dc.add(total, dc.scale(psd, cfg.lambda_psd))
    return LossBreakdown(float(fm.data), float(fc.data), float(psd.data), float(total.data),
                         total, {"fm": fm, "fc": fc, "psd": psd, "total": total})


def train(dataset, config=None, callback=None):
    """Fit a FlowModel on (rest, task, schedule) items.

    Returns the model and a per-epoch history of mean loss components.
    Deterministic given ``config.seed``.
    """
    config = config or RunConfig()
    T, V, tr = _check_dataset(dataset)
    config.validate(tr)
    band_bins(T, tr, config.band)
    rng = np.random.default_rng(config.seed)
    vocab = dataset_vocab(dataset)
    model = FlowModel.initialize(config, V, vocab, tr, T, rng)
    normalized = [model.normalize(s.schedule) for s in dataset]
    history = []
    n = len(dataset)
    step = 0
    for epoch in range(1, config.epochs + 1):
        sums = np.zeros(4)
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            step += 1
            try:
                parts = compute_losses(
                    model,
                    [dataset[i].rest.data for i in idx],
                    [dataset[i].task.data for i in idx],
                    [normalized[i] for i in idx],
                    rng,
                )
            except dc.NumericalError as exc:
                raise dc.NumericalError(f"epoch {epoch}, step {step}: {exc}") from None
            for name in ("fm", "fc", "psd", "total"):
                if not np.isfinite(getattr(parts, name)):
                    raise dc.NumericalError(f"epoch {epoch}, step {step}: non-finite {name} loss")
            dc.backward(parts.graph)
            dc.adam_step(model.params, lr=config.lr, beta1=config.beta1, beta2=config.beta2,
                         eps=config.eps, weight_decay=config.weight_decay)
            sums += len(idx) * np.array([parts.fm, parts.fc, parts.psd, parts.total])
        row = dict(zip(("fm", "fc", "psd", "total"), sums / n), epoch=epoch)
        history.append(row)
        log.info("epoch %d fm=%.4f fc=%.4f psd=%.4f total=%.4f",
                 epoch, row["fm"], row["fc"], row["psd"], row["total"])
        if callback is not None:
            callback(row)
    return model, history


# -------------------------------------------------------------------- sampling


def integrate_euler(x0, field, steps):
    """x <- x + field(n / steps, x) / steps for n = 0 .. steps - 1."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    x = np.array(x0, dtype=np.float64)
    h = 1.0 / steps
    for n in range(steps):
        x = x + h * np.asarray(field(n / steps, x))
        if not np.all(np.isfinite(x)):
            raise dc.NumericalError(f"non-finite state at Euler step {n}")
    return x


def sample_batch(model, rests, schedules, steps=None, rng=None, n_timepoints=None):
    """Generate (B, T, V) task arrays for parallel lists of rests and schedules."""
    steps = model.config.euler_steps if steps is None else steps
    rng = np.random.default_rng(0) if rng is None else rng
    T = model.n_timepoints if n_timepoints is None else n_timepoints
    with dc.no_grad():
        c = model.context(rests)
        tokens = model.tokens([model.normalize(s) for s in schedules])
        x0 = model.prior(c, T, rng).x0.data
        B = x0.shape[0]

        def field(t, x):
            try:
                return model.velocity(np.full(B, t), x, c, tokens).data
            except dc.NumericalError as exc:
                raise dc.NumericalError(f"at t={t:.4f}: {exc}") from None

        return integrate_euler(x0, field, steps)


def sample(x_rest, schedule, model, steps=None, rng=None):
    """Synthesize one task series from a rest series and an event schedule."""
    rest = x_rest.data if isinstance(x_rest, TimeSeries) else np.asarray(x_rest)
    out = sample_batch(model, [rest], [schedule], steps, rng)[0]
    return TimeSeries(out, model.tr)


# ----------------------------------------------------------------- checkpoints


def format_history(history):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "fm", "fc", "psd", "total"])
    for row in history:
        w.writerow([row["epoch"]] + [repr(float(row[k])) for k in ("fm", "fc", "psd", "total")])
    return buf.getvalue()


def parse_history(text):
    rows = []
    for rec in csv.DictReader(_io.StringIO(text)):
        rows.append({"epoch": int(rec["epoch"]), **{k: float(rec[k]) for k in ("fm", "fc", "psd", "total")}})
    return rows


def save_checkpoint(model, history, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    model.params.save(path / "params.txt")
    (path / "config.txt").write_text(format_keyvalues(model.config))
    meta = [f"n_regions = {model.n_regions}", f"tr = {model.tr!r}", f"n_timepoints = {model.n_timepoints}"]
    meta += [f"condition = {label}" for label in sorted(model.vocab, key=model.vocab.get)]
    (path / "model.txt").write_text("\n".join(meta) + "\n")
    (path / "loss.csv").write_text(format_history(history))


def load_checkpoint(path):
    path = Path(path)
    config = parse_keyvalues((path / "config.txt").read_text(), RunConfig, source=str(path / "config.txt"))
    params = dc.ParamStore.load(path / "params.txt")
    meta, labels = {}, []
    for line in (path / "model.txt").read_text().splitlines():
        key, _, val = (s.strip() for s in line.partition("="))
        if key == "condition":
            labels.append(val)
        elif key:
            meta[key] = val
    model = FlowModel(config, params, int(meta["n_regions"]), {lab: i for i, lab in enumerate(labels)},
                      float(meta["tr"]), int(meta["n_timepoints"]))
    history = parse_history((path / "loss.csv").read_text()) if (path / "loss.csv").exists() else []
    return model, history


def untrained_model(dataset, config):
    """The initial-parameter model ``train`` would start from (epochs = 0)."""
    model, _ = train(dataset, config.replace(epochs=0))
    return model

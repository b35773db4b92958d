"""Evaluation metrics for generated ROI time series.

Subject-level: MAE, Welch log-PSD discrepancy, FC similarity and top-5%
edge recovery.  Population-level: Frechet distance between Gaussians fitted
to FC upper-triangle features.
"""

from __future__ import annotations

import csv
import io as _io
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .io import ValidationError

POWER_FLOOR = 1e-12
TOP_FRACTION = 0.05
CSV_HEADER = ["task", "n", "mae", "psd", "fc_sim", "p_at_5", "cfid"]


class MetricError(ValueError):
    """A metric is undefined for the given inputs."""


def _pair(x, y, name):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValidationError(f"{name}: shapes {x.shape} and {y.shape} differ")
    return x, y


def mae(x, y):
    x, y = _pair(x, y, "mae")
    return float(np.mean(np.abs(x - y)))


def welch_psd(x, tr, seg_len=None, overlap=0.5):
    """One-sided Welch PSD with a periodic Hann window and per-segment mean removal.

    ``x`` is (T,) or (T, V); powers have matching trailing shape.
    """
    x = np.asarray(x, dtype=np.float64)
    T = x.shape[0]
    seg_len = min(64, T) if seg_len is None else int(seg_len)
    if seg_len < 8:
        raise ValidationError(f"welch: seg_len must be >= 8, got {seg_len}")
    if seg_len > T:
        raise ValidationError(f"welch: seg_len={seg_len} exceeds series length {T}")
    step = seg_len - int(seg_len * overlap)
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(seg_len) / seg_len)
    fs = 1.0 / tr
    norm = fs * np.sum(window**2)
    starts = range(0, T - seg_len + 1, step)
    acc = 0.0
    for s in starts:
        seg = x[s:s + seg_len]
        seg = seg - seg.mean(axis=0)
        spec = np.fft.rfft(seg * (window if x.ndim == 1 else window[:, None]), axis=0)
        acc = acc + np.abs(spec) ** 2
    power = acc / (len(starts) * norm)
    last = -1 if seg_len % 2 == 0 else None
    power[1:last] *= 2.0
    freqs = np.fft.rfftfreq(seg_len, d=tr)
    return freqs, power


def _band_mask(freqs, band):
    lo, hi = band
    mask = (freqs >= lo) & (freqs <= hi)
    if not mask.any():
        raise ValidationError(f"no Welch bins in band {lo}-{hi} Hz")
    return mask


def psd_discrepancy(x_gen, x_real, tr, band=(0.01, 0.05), seg_len=None):
    """Mean |ln P_gen - ln P_real| over ROIs and in-band Welch bins."""
    x_gen, x_real = _pair(x_gen, x_real, "psd_discrepancy")
    freqs, p_gen = welch_psd(x_gen, tr, seg_len)
    _, p_real = welch_psd(x_real, tr, seg_len)
    m = _band_mask(freqs, band)
    lg = np.log(np.maximum(p_gen[m], POWER_FLOOR))
    lr = np.log(np.maximum(p_real[m], POWER_FLOOR))
    return float(np.mean(np.abs(lg - lr)))


def fc_matrix(x):
    """Pearson correlation across time, (V, V); zero-variance ROIs correlate 0.

    The diagonal is 1 by definition.
    """
    x = np.asarray(x, dtype=np.float64)
    T, V = x.shape
    if T < 3:
        raise ValidationError(f"fc_matrix needs T >= 3, got {T}")
    xc = x - x.mean(axis=0)
    ss = np.sum(xc**2, axis=0)
    zero = ss <= 1e-20 * np.maximum(np.sum(x**2, axis=0), 1.0)
    xn = xc / np.sqrt(np.where(zero, 1.0, ss))
    R = xn.T @ xn
    R[zero, :] = 0.0
    R[:, zero] = 0.0
    R = np.clip(0.5 * (R + R.T), -1.0, 1.0)
    np.fill_diagonal(R, 1.0)
    return R


def fc_feature(R):
    R = np.asarray(R)
    i, j = np.triu_indices(R.shape[0], k=1)
    return R[i, j]


def _pearson_vec(a, b):
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    if den == 0.0:
        raise MetricError("FC similarity undefined for a constant FC feature vector")
    return float(a @ b) / den


def fc_similarity(A, B):
    """Pearson correlation between two FC maps' upper triangles."""
    A, B = _pair(A, B, "fc_similarity")
    return _pearson_vec(fc_feature(A), fc_feature(B))


def top_edges(R, count):
    """Indices (i, j), i < j, of the ``count`` largest |R|; ties broken by (i, j)."""
    i, j = np.triu_indices(R.shape[0], k=1)
    strength = np.abs(R[i, j])
    order = np.lexsort((j, i, -strength))[:count]
    return set(zip(i[order].tolist(), j[order].tolist()))


def n_top_edges(n_regions):
    return math.ceil(TOP_FRACTION * n_regions * (n_regions - 1) / 2 - 1e-12)


def p_at_top5(A, B):
    """Fraction of A's strongest 5% edges that are among B's strongest 5%."""
    A, B = _pair(A, B, "p_at_top5")
    V = A.shape[0]
    if V < 7:
        raise ValidationError(f"p_at_top5 needs at least 7 ROIs, got {V}")
    k = n_top_edges(V)
    sa, sb = top_edges(A, k), top_edges(B, k)
    return len(sa & sb) / len(sa)


def _sqrtm_psd(M):
    w, Q = np.linalg.eigh(0.5 * (M + M.T))
    return (Q * np.sqrt(np.clip(w, 0.0, None))) @ Q.T


def cfid(real, gen, ridge=1e-6):
    """Frechet distance between Gaussians fitted to two sets of FC features."""
    real = np.asarray(real, dtype=np.float64)
    gen = np.asarray(gen, dtype=np.float64)
    if real.ndim != 2 or gen.ndim != 2 or real.shape[1] != gen.shape[1]:
        raise ValidationError(f"cfid: feature shapes {real.shape} and {gen.shape} incompatible")
    if len(real) < 2 or len(gen) < 2:
        raise MetricError(f"cfid needs >= 2 samples per set, got {len(real)} and {len(gen)}")
    d = real.shape[1]
    mu_r, mu_g = real.mean(axis=0), gen.mean(axis=0)
    cov_r = np.cov(real, rowvar=False).reshape(d, d) + ridge * np.eye(d)
    cov_g = np.cov(gen, rowvar=False).reshape(d, d) + ridge * np.eye(d)
    root_r = _sqrtm_psd(cov_r)
    cross = _sqrtm_psd(root_r @ cov_g @ root_r)
    diff = mu_r - mu_g
    return float(diff @ diff + np.trace(cov_r) + np.trace(cov_g) - 2.0 * np.trace(cross))


@dataclass
class MetricReport:
    mae: float
    psd_disc: float
    fc_sim: float
    p_at_5: float
    cfid: float
    n_subjects: int
    task: str = "task"
    flags: list = field(default_factory=list)

    def as_dict(self):
        return asdict(self)

    def csv_row(self):
        return [self.task, self.n_subjects] + [repr(float(v)) for v in
                                               (self.mae, self.psd_disc, self.fc_sim, self.p_at_5, self.cfid)]


def format_report_csv(reports):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in reports:
        w.writerow(r.csv_row())
    return buf.getvalue()


def evaluate(real_set, gen_set, tr, band=(0.01, 0.05), seg_len=None, task="task"):
    """Average subject-level metrics over pairs; cFID over the pooled FC features.

    Undefined metrics (constant FC maps, too few ROIs or subjects) are
    reported as NaN with a message in ``flags``.
    """
    real_set = [np.asarray(getattr(x, "data", x), dtype=np.float64) for x in real_set]
    gen_set = [np.asarray(getattr(x, "data", x), dtype=np.float64) for x in gen_set]
    if not real_set or len(real_set) != len(gen_set):
        raise ValidationError(f"evaluate needs equal-length nonempty sets, got {len(real_set)} and {len(gen_set)}")
    flags = []
    rows = {"mae": [], "psd": [], "fc_sim": [], "p5": []}
    feats_r, feats_g = [], []
    for xr, xg in zip(real_set, gen_set):
        Rr, Rg = fc_matrix(xr), fc_matrix(xg)
        feats_r.append(fc_feature(Rr))
        feats_g.append(fc_feature(Rg))
        rows["mae"].append(mae(xg, xr))
        rows["psd"].append(psd_discrepancy(xg, xr, tr, band, seg_len))
        try:
            rows["fc_sim"].append(fc_similarity(Rr, Rg))
        except MetricError as exc:
            rows["fc_sim"].append(math.nan)
            flags.append(str(exc))
        try:
            rows["p5"].append(p_at_top5(Rr, Rg))
        except ValidationError as exc:
            rows["p5"].append(math.nan)
            flags.append(str(exc))
    try:
        fid = cfid(np.array(feats_r), np.array(feats_g))
    except MetricError as exc:
        fid = math.nan
        flags.append(str(exc))
    for msg in dict.fromkeys(flags):
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return MetricReport(
        mae=float(np.mean(rows["mae"])),
        psd_disc=float(np.mean(rows["psd"])),
        fc_sim=float(np.mean(rows["fc_sim"])),
        p_at_5=float(np.mean(rows["p5"])),
        cfid=fid,
        n_subjects=len(real_set),
        task=task,
        flags=list(dict.fromkeys(flags)),
    )

"""Independent reference implementations used as test oracles.

They deliberately take different routes from the package: scipy's Welch,
numpy's corrcoef, explicit sorting for edge sets and either scipy's
general matrix square root or a 40-digit eigen-decomposition (mpmath) for
the Frechet distance.
"""

import math

import mpmath
import numpy as np
from scipy import linalg, signal


def welch_ref(x, tr, seg_len):
    return signal.welch(x, fs=1.0 / tr, window="hann", nperseg=seg_len, noverlap=seg_len // 2,
                        detrend="constant", axis=0)


def psd_disc_ref(gen, real, tr, band, seg_len):
    f, pg = welch_ref(gen, tr, seg_len)
    _, pr = welch_ref(real, tr, seg_len)
    m = (f >= band[0]) & (f <= band[1])
    total, count = 0.0, 0
    for v in range(gen.shape[1]):
        for k in np.flatnonzero(m):
            total += abs(math.log(max(pg[k, v], 1e-12)) - math.log(max(pr[k, v], 1e-12)))
            count += 1
    return total / count


def fc_ref(x):
    return np.corrcoef(np.asarray(x).T)


def upper(R):
    V = R.shape[0]
    return np.array([R[i, j] for i in range(V) for j in range(i + 1, V)])


def fc_sim_ref(x_real, x_gen):
    return float(np.corrcoef(upper(fc_ref(x_real)), upper(fc_ref(x_gen)))[0, 1])


def top_set_ref(R):
    V = R.shape[0]
    edges = [(i, j) for i in range(V) for j in range(i + 1, V)]
    k = math.ceil(0.05 * len(edges) - 1e-12)
    edges.sort(key=lambda e: (-abs(R[e]), e[0], e[1]))
    return set(edges[:k])


def p5_ref(R_real, R_gen):
    a, b = top_set_ref(R_real), top_set_ref(R_gen)
    return len(a & b) / len(a)


def cfid_ref(real, gen, ridge=1e-6, exact=False):
    real, gen = np.asarray(real), np.asarray(gen)
    d = real.shape[1]
    mr, mg = real.mean(0), gen.mean(0)
    cr = np.atleast_2d(np.cov(real.T)) + ridge * np.eye(d)
    cg = np.atleast_2d(np.cov(gen.T)) + ridge * np.eye(d)
    if exact:
        mpmath.mp.dps = 40
        eigs = mpmath.eig(mpmath.matrix(cr.tolist()) * mpmath.matrix(cg.tolist()), left=False, right=False)
        cross = float(sum(mpmath.sqrt(max(mpmath.re(e), 0)) for e in eigs))
    else:
        cross = float(np.trace(linalg.sqrtm(cr @ cg)).real)
    return float(np.sum((mr - mg) ** 2) + np.trace(cr) + np.trace(cg) - 2 * cross)


def evaluate_ref(real_set, gen_set, tr, band, seg_len, exact=False):
    n = len(real_set)
    mae = sum(float(np.mean(np.abs(g - r))) for r, g in zip(real_set, gen_set)) / n
    psd = sum(psd_disc_ref(g, r, tr, band, seg_len) for r, g in zip(real_set, gen_set)) / n
    sim = sum(fc_sim_ref(r, g) for r, g in zip(real_set, gen_set)) / n
    p5 = sum(p5_ref(fc_ref(r), fc_ref(g)) for r, g in zip(real_set, gen_set)) / n
    fid = cfid_ref([upper(fc_ref(r)) for r in real_set], [upper(fc_ref(g)) for g in gen_set], exact=exact)
    return {"mae": mae, "psd_disc": psd, "fc_sim": sim, "p_at_5": p5, "cfid": fid}

"""Rest-conditioned structured prior.

x0[t, v] = mu(c)[v] + sigma(c)[v] * eps[t, v] + (U(c) z_t)[v]

with eps independent 1/f noise per ROI and z_t ~ N(0, I_K) drawn per
timepoint.  Draws are kept so the sample is differentiable in the heads
with the noise held fixed.
"""

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .nn import apply_linear, init_linear


def colored_noise(n_timepoints, n_columns, rng):
    """Independent unit-variance 1/f (pink) noise columns, shape (T, V).

    Gaussian coefficients at positive frequencies are scaled by 1/sqrt(f),
    DC is zeroed, the inverse real FFT enforces Hermitian symmetry, and each
    column is standardised to mean 0 and variance 1.
    """
    T = int(n_timepoints)
    if T < 4:
        raise ValueError(f"colored noise needs at least 4 timepoints, got {T}")
    n_freq = T // 2 + 1
    coef = rng.standard_normal((n_freq, n_columns)) + 1j * rng.standard_normal((n_freq, n_columns))
    k = np.arange(n_freq, dtype=np.float64)
    shape = np.zeros(n_freq)
    shape[1:] = 1.0 / np.sqrt(k[1:])
    coef *= shape[:, None]
    if T % 2 == 0:
        coef[-1] = coef[-1].real
    x = np.fft.irfft(coef, n=T, axis=0)
    x -= x.mean(axis=0)
    return x / x.std(axis=0)


@dataclass
class PriorSample:
    x0: dc.Value
    eps: np.ndarray
    z: np.ndarray


def init_prior(store, d_context, n_regions, rank_k, rng, prefix="prior"):
    g = store.group(prefix)
    init_linear(g, "mu", d_context, n_regions, rng)
    init_linear(g, "sigma", d_context, n_regions, rng)
    init_linear(g, "factor", d_context, n_regions * rank_k, rng)
    return g


def prior_heads(c, params, rank_k):
    """mu (B, V), sigma (B, V) > 0 and U (B, V, K) from contexts (B, d_c)."""
    c = dc.as_value(c)
    mu = apply_linear(params, "mu", c)
    sigma = dc.softplus(apply_linear(params, "sigma", c))
    B, V = mu.shape
    U = dc.reshape(apply_linear(params, "factor", c), (B, V, rank_k))
    return mu, sigma, U


def draw_noise(batch, n_timepoints, n_regions, rank_k, rng):
    eps = np.stack([colored_noise(n_timepoints, n_regions, rng) for _ in range(batch)])
    z = rng.standard_normal((batch, n_timepoints, rank_k))
    return eps, z


def assemble_prior(mu, sigma, U, eps, z):
    """Combine head outputs with fixed draws: (B, T, V)."""
    B, V = mu.shape
    x0 = dc.add(dc.reshape(mu, (B, 1, V)), dc.mul(dc.reshape(sigma, (B, 1, V)), eps))
    return dc.add(x0, dc.matmul(z, dc.swap_last(U)))


def sample_prior(c, params, n_timepoints, rng, rank_k=None, eps=None, z=None):
    """Draw x0 of shape (B, T, V) for contexts ``c`` (B, d_c).

    Pre-drawn ``eps``/``z`` may be supplied to reuse a draw.
    """
    if n_timepoints < 4:
        raise ValueError(f"prior needs T >= 4, got {n_timepoints}")
    if rank_k is None:
        rank_k = params["factor.w"].shape[1] // params["mu.w"].shape[1]
    mu, sigma, U = prior_heads(c, params, rank_k)
    B, V = mu.shape
    if eps is None or z is None:
        eps, z = draw_noise(B, n_timepoints, V, rank_k, rng)
    if eps.shape != (B, n_timepoints, V) or z.shape != (B, n_timepoints, rank_k):
        raise ValueError(f"noise shapes {eps.shape}, {z.shape} do not match ({B}, {n_timepoints}, {V}/{rank_k})")
    return PriorSample(assemble_prior(mu, sigma, U, eps, z), eps, z)

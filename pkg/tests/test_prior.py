import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import welch

from conftest import fd_grad, rel_err
from restflow import diffcore as dc
from restflow.prior import assemble_prior, colored_noise, draw_noise, init_prior, prior_heads, sample_prior

V, K, D = 4, 3, 5


@pytest.fixture
def prior(rng):
    store = dc.ParamStore()
    g = init_prior(store, D, V, K, rng)
    return store, g


@settings(max_examples=20, deadline=None)
@given(st.integers(4, 300), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_colored_noise_standardized(T, cols, seed):
    x = colored_noise(T, cols, np.random.default_rng(seed))
    assert x.shape == (T, cols)
    assert np.all(np.abs(x.mean(axis=0)) <= 1e-9)
    assert np.all(np.abs(x.var(axis=0) - 1) <= 1e-9)


def test_colored_noise_deterministic():
    a = colored_noise(64, 3, np.random.default_rng(7))
    b = colored_noise(64, 3, np.random.default_rng(7))
    assert np.array_equal(a, b)


def test_colored_noise_short_series():
    with pytest.raises(ValueError):
        colored_noise(3, 2, np.random.default_rng(0))


def colored_noise_slope(seed):
    x = colored_noise(4096, 16, np.random.default_rng(seed))
    f, p = welch(x, axis=0, nperseg=512)
    return np.polyfit(np.log(f[1:]), np.log(p.mean(axis=1)[1:]), 1)[0]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_colored_noise_one_over_f_slope(seed):
    assert -1.15 <= colored_noise_slope(seed) <= -0.85


def test_colored_noise_columns_independent():
    x = colored_noise(4096, 4, np.random.default_rng(3))
    C = np.corrcoef(x.T)
    assert np.max(np.abs(C - np.eye(4))) < 0.2


def test_degenerate_prior_rows_equal_mu(rng):
    mu = rng.standard_normal((1, V))
    eps, z = draw_noise(1, 16, V, K, rng)
    x0 = assemble_prior(mu, np.zeros((1, V)), np.zeros((1, V, K)), eps, z).data[0]
    assert np.array_equal(x0, np.broadcast_to(mu, x0.shape))


def test_factor_only_prior_has_rank_at_most_k(rng):
    U = rng.standard_normal((1, V + 3, K))
    eps, z = draw_noise(1, 32, V + 3, K, rng)
    x0 = assemble_prior(np.zeros((1, V + 3)), np.zeros((1, V + 3)), U, eps, z).data[0]
    s = np.linalg.svd(x0, compute_uv=False)
    assert np.sum(s > 1e-10 * s[0]) <= K


def test_sigma_positive(prior, rng):
    _, g = prior
    c = 10 * rng.standard_normal((6, D))
    _, sigma, U = prior_heads(c, g, K)
    assert np.all(sigma.data > 0) and U.shape == (6, V, K)


def test_monte_carlo_mean(prior, rng):
    _, g = prior
    c = rng.standard_normal((1, D))
    mu = prior_heads(c, g, K)[0].data[0]
    n = 10_000
    with dc.no_grad():
        draws = sample_prior(np.repeat(c, n, axis=0), g, 8, rng).x0.data
    mean = draws.mean(axis=0)
    se = draws.std(axis=0) / np.sqrt(n)
    assert np.all(np.abs(mean - mu) <= 3 * se + 1e-12)


def test_spatial_covariance_identity(prior, rng):
    _, g = prior
    c = rng.standard_normal((1, D))
    mu, sigma, U = (a.data[0] for a in prior_heads(c, g, K))
    with dc.no_grad():
        x0 = sample_prior(c, g, 100_000, rng).x0.data[0]
    emp = np.cov(x0 - mu, rowvar=False)
    target = np.diag(sigma**2) + U @ U.T
    assert np.linalg.norm(emp - target) / np.linalg.norm(target) <= 0.1


def test_fixed_draws_reproduce_sample(prior, rng):
    _, g = prior
    c = rng.standard_normal((2, D))
    s1 = sample_prior(c, g, 10, np.random.default_rng(5))
    s2 = sample_prior(c, g, 10, None, eps=s1.eps, z=s1.z)
    assert np.array_equal(s1.x0.data, s2.x0.data)
    s3 = sample_prior(c, g, 10, np.random.default_rng(5))
    assert np.array_equal(s1.x0.data, s3.x0.data)


def test_gradient_through_prior(prior, rng):
    store, g = prior
    c = rng.standard_normal((2, D))
    eps, z = draw_noise(2, 8, V, K, rng)
    W = rng.standard_normal((2, 8, V))
    cv = dc.Value(c, requires_grad=True)

    def loss(cc):
        return dc.vsum(dc.square(dc.mul(sample_prior(cc, g, 8, None, eps=eps, z=z).x0, W)))

    dc.backward(loss(cv))

    def f():
        with dc.no_grad():
            return float(loss(c).data)

    assert rel_err(cv.grad, fd_grad(f, c)) <= 1e-4
    for name, p in store.items():
        assert rel_err(p.grad, fd_grad(f, p.data)) <= 1e-4, name


def test_noise_shape_mismatch(prior, rng):
    _, g = prior
    with pytest.raises(ValueError):
        sample_prior(np.zeros((1, D)), g, 8, None, eps=np.zeros((1, 8, V)), z=np.zeros((1, 8, K + 1)))

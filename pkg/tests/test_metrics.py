import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from restflow import metrics
from restflow.io import ValidationError
from restflow.metrics import (
    MetricError,
    cfid,
    evaluate,
    fc_feature,
    fc_matrix,
    fc_similarity,
    mae,
    n_top_edges,
    p_at_top5,
    psd_discrepancy,
    top_edges,
    welch_psd,
)

BAND = (0.01, 0.05)


def mixed(rng, T=128, V=10):
    return rng.standard_normal((T, V)) @ rng.standard_normal((V, V))


# ------------------------------------------------------------------------ mae


def test_mae_basic(rng):
    x = rng.standard_normal((4, 3))
    assert mae(x, x) == 0.0
    assert abs(mae(x, x + 1) - 1.0) <= 1e-12
    assert mae([[1.0, -2.0], [0.5, 3.0]], [[0.0, 1.0], [0.5, 1.0]]) == (1 + 3 + 0 + 2) / 4


def test_mae_shape_mismatch():
    with pytest.raises(ValidationError):
        mae(np.zeros((2, 2)), np.zeros((2, 3)))


# ---------------------------------------------------------------------- welch


@pytest.mark.parametrize("T,seg", [(128, 64), (100, 32), (64, 64), (97, 16), (50, 15)])
def test_welch_matches_scipy(rng, T, seg):
    x = rng.standard_normal((T, 3))
    f, p = welch_psd(x, 0.72, seg)
    fr, pr = oracles.welch_ref(x, 0.72, seg)
    assert np.allclose(f, fr, rtol=1e-14, atol=0)
    assert np.allclose(p, pr, rtol=1e-12, atol=1e-300)


def test_welch_vector_input(rng):
    x = rng.standard_normal(128)
    _, p = welch_psd(x, 1.0)
    _, pm = welch_psd(x[:, None], 1.0)
    assert np.allclose(p, pm[:, 0], rtol=1e-15)


@pytest.mark.parametrize("k", [3, 7, 12])
def test_welch_sine_peak_bin(k):
    tr, seg = 0.5, 64
    t = np.arange(512) * tr
    x = np.sin(2 * np.pi * k / (seg * tr) * t)
    _, p = welch_psd(x, tr, seg)
    assert int(np.argmax(p)) == k


def test_welch_zero_input():
    _, p = welch_psd(np.zeros((64, 2)), 1.0)
    assert np.all(p == 0)


def test_welch_white_noise_flat():
    tr = 0.5
    x = np.random.default_rng(0).standard_normal(8192)
    f, p = welch_psd(x, tr, 64)
    inner = p[1:-1]
    flat = 2.0 * tr  # one-sided density of unit-variance white noise
    assert abs(inner.mean() - flat) <= 0.2 * flat


def test_welch_bad_segment():
    with pytest.raises(ValidationError):
        welch_psd(np.zeros(32), 1.0, 64)
    with pytest.raises(ValidationError):
        welch_psd(np.zeros(32), 1.0, 4)


# --------------------------------------------------------------- psd discrep.


def test_psd_disc_identity_and_doubling(rng):
    x = mixed(rng)
    assert psd_discrepancy(x, x, 0.72, BAND) == 0.0
    assert abs(psd_discrepancy(2 * x, x, 0.72, BAND) - math.log(4)) <= 1e-12


def test_psd_disc_monotone_in_gain(rng):
    x = mixed(rng)
    vals = [psd_discrepancy(g * x, x, 0.72, BAND) for g in (1.0, 1.2, 1.5, 2.0, 3.0)]
    assert all(a < b for a, b in zip(vals, vals[1:]))


def test_psd_disc_monotone_in_smoothing(rng):
    x = mixed(rng, T=512)
    kernel = lambda w: np.ones(w) / w
    vals = []
    for w in (1, 3, 5, 9):
        y = np.stack([np.convolve(x[:, v], kernel(w), mode="same") for v in range(x.shape[1])], axis=1)
        vals.append(psd_discrepancy(y, x, 1.0, (0.05, 0.45)))
    assert all(a < b for a, b in zip(vals, vals[1:]))


def test_psd_disc_empty_band(rng):
    x = mixed(rng, T=64)
    with pytest.raises(ValidationError, match="band"):
        psd_discrepancy(x, x, 0.72, (0.001, 0.002), 16)


# ------------------------------------------------------------------ fc matrix


def test_fc_hand_cases():
    R = fc_matrix(np.array([[1.0, 1.0, 3.0], [2.0, 2.0, 2.0], [3.0, 3.0, 1.0]]))
    assert np.allclose(R, [[1, 1, -1], [1, 1, -1], [-1, -1, 1]], rtol=0, atol=1e-15)
    R2 = fc_matrix(np.array([[1.0, 1.0], [2.0, 3.0], [3.0, 2.0]]))
    assert abs(R2[0, 1] - 0.5) <= 1e-15


def test_fc_zero_variance_roi(rng):
    x = rng.standard_normal((20, 4))
    x[:, 2] = 5.0
    R = fc_matrix(x)
    assert np.all(R[2, [0, 1, 3]] == 0) and R[2, 2] == 1.0


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(3, 20), st.integers(2, 8)), elements=st.floats(-1e3, 1e3)))
def test_fc_matrix_invariants(x):
    R = fc_matrix(x)
    V = x.shape[1]
    assert R.shape == (V, V)
    assert np.array_equal(R, R.T)
    assert np.all(np.diag(R) == 1.0)
    assert np.all(np.abs(R) <= 1.0)
    assert len(fc_feature(R)) == V * (V - 1) // 2


def test_fc_matrix_matches_corrcoef(rng):
    x = mixed(rng)
    assert np.allclose(fc_matrix(x), oracles.fc_ref(x), rtol=0, atol=1e-14)


def test_fc_similarity(rng):
    A = fc_matrix(mixed(rng))
    assert abs(fc_similarity(A, A) - 1.0) <= 1e-12
    with pytest.raises(MetricError):
        fc_similarity(np.eye(5), A[:5, :5])


# ---------------------------------------------------------------------- P@5%


def test_edge_counts():
    assert n_top_edges(7) == 2   # 21 edges -> ceil(1.05)
    assert n_top_edges(10) == 3  # 45 edges -> ceil(2.25)
    assert n_top_edges(21) == 11  # 210 edges -> exactly 10.5 -> 11


def test_p5_identity_and_range(rng):
    A = fc_matrix(mixed(rng))
    assert p_at_top5(A, A) == 1.0


def test_p5_disjoint():
    V = 10
    A = np.eye(V)
    B = np.eye(V)
    for i, j in [(0, 1), (0, 2), (0, 3)]:
        A[i, j] = A[j, i] = 0.9
    for i, j in [(5, 6), (5, 7), (5, 8)]:
        B[i, j] = B[j, i] = 0.9
    assert p_at_top5(A, B) == 0.0


def test_p5_tie_break_lexicographic():
    R = np.eye(8)  # every off-diagonal |R| ties at 0
    assert top_edges(R, n_top_edges(8)) == {(0, 1), (0, 2)}


@pytest.mark.parametrize("seed", range(5))
def test_p5_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    A, B = fc_matrix(mixed(rng, 40)), fc_matrix(mixed(rng, 40))
    assert p_at_top5(A, B) == oracles.p5_ref(A, B)


def test_p5_too_few_rois():
    with pytest.raises(ValidationError, match="7"):
        p_at_top5(np.eye(6), np.eye(6))


# ----------------------------------------------------------------------- cFID


def test_cfid_identity(rng):
    feats = rng.standard_normal((10, 6))
    assert abs(cfid(feats, feats)) <= 1e-6


def test_cfid_1d_closed_form():
    a = 1 / math.sqrt(2)   # sample mean 0, sample variance 1
    real = np.array([[-a], [a]])
    assert abs(cfid(real, real + 1.0) - 1.0) <= 1e-6


def test_cfid_symmetric(rng):
    a, b = rng.standard_normal((12, 5)), 2 + rng.standard_normal((9, 5))
    assert abs(cfid(a, b) - cfid(b, a)) <= 1e-9


def test_cfid_matches_scipy(rng):
    a, b = rng.standard_normal((30, 6)), rng.standard_normal((25, 6)) @ rng.standard_normal((6, 6))
    assert abs(cfid(a, b) - oracles.cfid_ref(a, b)) <= 1e-9 * max(1.0, cfid(a, b))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_cfid_nonnegative(n, d, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((n, d)), rng.standard_normal((n, d))
    assert cfid(a, b) >= -1e-9
    assert abs(cfid(a, a)) <= 1e-6


def test_cfid_errors(rng):
    with pytest.raises(MetricError):
        cfid(rng.standard_normal((1, 3)), rng.standard_normal((4, 3)))
    with pytest.raises(ValidationError):
        cfid(rng.standard_normal((4, 3)), rng.standard_normal((4, 2)))


# ------------------------------------------------------------------- evaluate


def toy_set(seed, n=8):
    rng = np.random.default_rng(seed)
    real = [mixed(rng) for _ in range(n)]
    gen = [r + 0.8 * rng.standard_normal(r.shape) for r in real]
    return real, gen


def test_evaluate_identity_suite():
    real, _ = toy_set(0)
    rep = evaluate(real, real, 0.72, BAND, 64)
    assert rep.mae == 0 and rep.psd_disc == 0
    assert abs(rep.fc_sim - 1) <= 1e-12 and rep.p_at_5 == 1.0
    assert abs(rep.cfid) <= 1e-6 and rep.flags == []


def test_evaluate_matches_brute_force():
    real, gen = toy_set(1)
    rep = evaluate(real, gen, 0.72, BAND, 64)
    ref = oracles.evaluate_ref(real, gen, 0.72, BAND, 64)
    for key, val in ref.items():
        assert abs(getattr(rep, key) - val) <= 1e-9, key


def test_evaluate_single_pair_flags_cfid():
    real, gen = toy_set(2, n=1)
    with pytest.warns(RuntimeWarning, match="cfid"):
        rep = evaluate(real, gen, 0.72, BAND, 64)
    assert math.isnan(rep.cfid)
    assert all(math.isfinite(v) for v in (rep.mae, rep.psd_disc, rep.fc_sim, rep.p_at_5))
    assert any("cfid" in f for f in rep.flags)


def test_evaluate_roi_relabeling_invariant():
    real, gen = toy_set(3, n=4)
    perm = np.random.default_rng(0).permutation(10)
    a = evaluate(real, gen, 0.72, BAND, 64)
    b = evaluate([r[:, perm] for r in real], [g[:, perm] for g in gen], 0.72, BAND, 64)
    for key in ("mae", "psd_disc", "fc_sim", "p_at_5"):
        assert abs(getattr(a, key) - getattr(b, key)) <= 1e-9, key
    # 4 subjects give rank-3 covariances in 45 dims; ~42 eigenvalues near ridge**2
    # lose ~5e-11 each to the square root, so relabeling moves cfid by ~1e-9
    assert abs(a.cfid - b.cfid) <= 1e-8


def test_shift_invariance_of_psd_and_fc(rng):
    x, y = mixed(rng), mixed(rng)
    shift = rng.standard_normal(10)
    assert abs(psd_discrepancy(x + shift, y + shift, 0.72, BAND) - psd_discrepancy(x, y, 0.72, BAND)) <= 1e-9
    a = fc_similarity(fc_matrix(x), fc_matrix(y))
    b = fc_similarity(fc_matrix(x + shift), fc_matrix(y + shift))
    assert abs(a - b) <= 1e-12


def test_evaluate_rejects_unpaired():
    real, gen = toy_set(4, n=3)
    with pytest.raises(ValidationError):
        evaluate(real, gen[:2], 0.72)
    with pytest.raises(ValidationError):
        evaluate([], [], 0.72)


def test_report_csv():
    real, gen = toy_set(5, n=3)
    rep = evaluate(real, gen, 0.72, BAND, 64, task="motor")
    lines = metrics.format_report_csv([rep]).splitlines()
    assert lines[0] == "task,n,mae,psd,fc_sim,p_at_5,cfid"
    cells = lines[1].split(",")
    assert cells[:2] == ["motor", "3"]
    assert float(cells[4]) == rep.fc_sim

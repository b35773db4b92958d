import numpy as np
import pytest

from restflow.io import RunConfig

ACCEPTANCE_LINES = []


def fd_grad(f, arr, h=1e-5):
    """Central-difference gradient of scalar ``f()`` w.r.t. ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b, floor=0.0):
    """||a - b|| / max(||a||, ||b||, floor); ``floor`` absorbs structurally zero gradients."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro_cfg():
    return RunConfig(d_model=8, enc_layers=2, enc_heads=2, patch_len=4, max_patches=4, rank_k=3,
                     d_ev=4, event_hidden=6, d_time=4, time_freqs=2, vel_hidden=8, vel_layers=2)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

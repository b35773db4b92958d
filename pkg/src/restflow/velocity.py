"""Velocity field v(t, x_t, c, e).

Each timepoint's state row queries the event tokens through single-head
cross-attention; the attended context is concatenated with the state row,
the rest context and a learned time embedding, and a pointwise MLP maps
the result to a velocity row.
"""

import math

import numpy as np

from . import diffcore as dc
from .nn import apply_linear, init_linear


def init_velocity(store, n_regions, config, rng, prefix="velocity"):
    g = store.group(prefix)
    init_linear(g, "wq", n_regions, config.d_ev, rng, bias=False)
    init_linear(g, "wk", config.d_ev, config.d_ev, rng, bias=False)
    init_linear(g, "wv", config.d_ev, config.d_ev, rng, bias=False)
    init_linear(g, "time", 2 * config.time_freqs, config.d_time, rng)
    width = n_regions + config.d_model + config.d_time + config.d_ev
    for i in range(config.vel_layers):
        init_linear(g, f"mlp{i}", width, config.vel_hidden, rng)
        width = config.vel_hidden
    init_linear(g, "out", width, n_regions, rng)
    return g


def time_frequencies(n):
    return np.geomspace(0.5, 16.0, n) if n > 1 else np.ones(1)


def time_embedding(t, params):
    """psi(t): sinusoidal features of t in [0, 1] through a learned linear layer.

    ``t`` is a scalar, a (B,) array or a Value; returns (B, d_time).
    """
    t = dc.as_value(t)
    if np.any(t.data < 0) or np.any(t.data > 1):
        raise ValueError(f"time must lie in [0, 1], got {t.data}")
    t = dc.reshape(t, (-1, 1))
    n = params["time.w"].shape[0] // 2
    angle = dc.mul(t, 2.0 * np.pi * time_frequencies(n))
    feats = dc.concat([dc.sin(angle), dc.cos(angle)], axis=-1)
    return apply_linear(params, "time", feats)


def event_context(x_t, tokens, params):
    """Attended event context (B, T, d_ev) and attention weights (or None)."""
    B, T, _ = x_t.shape
    d_ev = params["wk.w"].shape[1]
    has_events = tokens.mask.any(axis=-1)
    if tokens.n_slots == 0 or not has_events.any():
        return dc.Value(np.zeros((B, T, d_ev))), None
    q = apply_linear(params, "wq", x_t)
    k = apply_linear(params, "wk", tokens.tokens)
    v = apply_linear(params, "wv", tokens.tokens)
    logits = dc.scale(dc.matmul(q, dc.swap_last(k)), 1.0 / math.sqrt(d_ev))
    mask = np.where(tokens.mask, 0.0, dc.MASK_VALUE)[:, None, :]
    attn = dc.softmax(logits, mask)
    ctx = dc.matmul(attn, v)
    if not has_events.all():
        # softmax over an empty set is undefined; event-free items get zeros
        ctx = dc.mul(ctx, has_events.astype(np.float64)[:, None, None])
    return ctx, attn


def predict_velocity(t, x_t, c, tokens, params):
    """Velocity (B, T, V) for states ``x_t`` (B, T, V) at times ``t`` (B,)."""
    x_t = dc.as_value(x_t)
    c = dc.as_value(c)
    B, T, V = x_t.shape
    if params["wq.w"].shape[0] != V:
        raise ValueError(f"velocity field expects {params['wq.w'].shape[0]} ROIs, got {V}")
    if c.shape[0] != B or tokens.mask.shape[0] != B:
        raise ValueError(f"batch mismatch: x_t {x_t.shape}, c {c.shape}, mask {tokens.mask.shape}")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    psi = time_embedding(t, params)
    ctx, _ = event_context(x_t, tokens, params)
    d_c, d_t = c.shape[1], psi.shape[1]
    h = dc.concat([
        x_t,
        dc.broadcast_to(dc.reshape(c, (B, 1, d_c)), (B, T, d_c)),
        dc.broadcast_to(dc.reshape(psi, (B, 1, d_t)), (B, T, d_t)),
        ctx,
    ], axis=-1)
    i = 0
    while f"mlp{i}.w" in params:
        h = dc.gelu(apply_linear(params, f"mlp{i}", h))
        i += 1
    return apply_linear(params, "out", h)

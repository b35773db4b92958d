"""Patch transformer mapping a resting-state series to a context vector.

The series is cut into non-overlapping patches of ``patch_len`` timepoints
(final patch zero-padded), each flattened and projected to ``d_model``.  A
learned CLS token is prepended, learned positional embeddings added, and
pre-LN transformer blocks applied; the final CLS row is the context.
"""

import math

import numpy as np

from . import diffcore as dc
from .nn import apply_layer_norm, apply_linear, init_layer_norm, init_linear, uniform

MLP_RATIO = 2


def init_encoder(store, n_regions, config, rng, prefix="encoder"):
    g = store.group(prefix)
    d = config.d_model
    init_linear(g, "patch", config.patch_len * n_regions, d, rng)
    g.add("cls", uniform(rng, (d,), d))
    g.add("pos", uniform(rng, (config.max_patches + 1, d), d))
    for i in range(config.enc_layers):
        blk = g.group(f"layer{i}")
        init_layer_norm(blk, "ln1", d)
        for name in ("q", "k", "v", "o"):
            init_linear(blk, name, d, d, rng)
        init_layer_norm(blk, "ln2", d)
        init_linear(blk, "fc1", d, MLP_RATIO * d, rng)
        init_linear(blk, "fc2", MLP_RATIO * d, d, rng)
    init_layer_norm(g, "ln_out", d)
    return g


def n_patches(n_timepoints, patch_len):
    return math.ceil(n_timepoints / patch_len)


def patchify(x, patch_len):
    """(B, T, V) -> (B, ceil(T/P), P*V), zero-padding the tail."""
    x = dc.as_value(x)
    B, T, V = x.shape
    n = n_patches(T, patch_len)
    pad = n * patch_len - T
    if pad:
        x = dc.concat([x, np.zeros((B, pad, V))], axis=1)
    return dc.reshape(x, (B, n, patch_len * V))


def _attention(blk, h, n_heads):
    B, S, d = h.shape
    dh = d // n_heads

    def heads(name):
        y = apply_linear(blk, name, h)
        return dc.transpose(dc.reshape(y, (B, S, n_heads, dh)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = dc.scale(dc.matmul(q, dc.swap_last(k)), 1.0 / math.sqrt(dh))
    ctx = dc.matmul(dc.softmax(scores), v)
    ctx = dc.reshape(dc.transpose(ctx, (0, 2, 1, 3)), (B, S, d))
    return apply_linear(blk, "o", ctx)


def encode_rest(x_rest, params, config):
    """Context embeddings (B, d_model) for rest series (B, T_rest, V) or (T_rest, V).

    ``params`` is the encoder parameter group.  ``x_rest`` may be a Value
    so gradients can flow back to the input.
    """
    x = dc.as_value(x_rest)
    if x.ndim == 2:
        x = dc.reshape(x, (1,) + x.shape)
    B, T, V = x.shape
    expected = params["patch.w"].shape[0] // config.patch_len
    if V != expected:
        raise ValueError(f"encoder expects {expected} ROIs, got {V}")
    n = n_patches(T, config.patch_len)
    if n > config.max_patches:
        raise ValueError(f"rest series of {T} timepoints needs {n} patches > max_patches={config.max_patches}")
    tokens = apply_linear(params, "patch", patchify(x, config.patch_len))
    cls = dc.broadcast_to(dc.reshape(params["cls"], (1, 1, -1)), (B, 1, config.d_model))
    h = dc.concat([cls, tokens], axis=1)
    h = dc.add(h, params["pos"][: n + 1])
    for i in range(config.enc_layers):
        blk = params.group(f"layer{i}")
        h = dc.add(h, _attention(blk, apply_layer_norm(blk, "ln1", h), config.enc_heads))
        m = dc.gelu(apply_linear(blk, "fc1", apply_layer_norm(blk, "ln2", h)))
        h = dc.add(h, apply_linear(blk, "fc2", m))
    h = apply_layer_norm(params, "ln_out", h)
    return h[:, 0, :]

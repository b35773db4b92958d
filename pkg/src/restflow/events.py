"""Event tokens: a timing MLP over (onset, duration, amplitude) plus a
per-condition embedding row, zero-padded with a validity mask."""

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .nn import apply_linear, init_linear, uniform


@dataclass
class EventTokens:
    tokens: dc.Value      # (B, K_ev, d_ev)
    mask: np.ndarray      # (B, K_ev) bool, True = real event

    @property
    def n_slots(self):
        return self.mask.shape[-1]


def init_events(store, n_conditions, config, rng, prefix="events"):
    g = store.group(prefix)
    init_linear(g, "timing1", 3, config.event_hidden, rng)
    init_linear(g, "timing2", config.event_hidden, config.d_ev, rng)
    g.add("table", uniform(rng, (max(n_conditions, 1), config.d_ev), config.d_ev))
    return g


def embed_event_batch(batch, params, pad_to=None):
    """Tokens for a batch of normalized-event lists, padded to a common length.

    ``pad_to`` defaults to the longest list in the batch.
    """
    table = params["table"]
    n_cond, d_ev = table.shape
    longest = max((len(evs) for evs in batch), default=0)
    K = longest if pad_to is None else int(pad_to)
    if longest > K:
        raise ValueError(f"{longest} events exceed pad_to={K}")
    B = len(batch)
    feats = np.zeros((B, K, 3))
    onehot = np.zeros((B, K, n_cond))
    mask = np.zeros((B, K), dtype=bool)
    for b, evs in enumerate(batch):
        for k, ev in enumerate(evs):
            if not 0 <= ev.condition_id < n_cond:
                raise ValueError(f"unknown condition id {ev.condition_id} (vocab size {n_cond})")
            feats[b, k] = (ev.onset_tr, ev.duration_tr, ev.amplitude_z)
            onehot[b, k, ev.condition_id] = 1.0
            mask[b, k] = True
    if K == 0:
        return EventTokens(dc.Value(np.zeros((B, 0, d_ev))), mask)
    h = dc.tanh(apply_linear(params, "timing1", feats))
    tok = dc.add(apply_linear(params, "timing2", h), dc.matmul(onehot, table))
    tok = dc.mul(tok, mask[..., None].astype(np.float64))
    return EventTokens(tok, mask)


def embed_events(normalized, params, pad_to=None):
    """Tokens (1, K_ev, d_ev) and mask (1, K_ev) for one schedule."""
    return embed_event_batch([list(normalized)], params, pad_to)

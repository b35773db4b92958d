"""Parameter initialisation and the few layer shapes shared by the model parts."""

import numpy as np

from . import diffcore as dc


def uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_linear(group, name, fan_in, fan_out, rng, bias=True):
    group.add(f"{name}.w", uniform(rng, (fan_in, fan_out), fan_in))
    if bias:
        group.add(f"{name}.b", np.zeros(fan_out))


def apply_linear(group, name, x):
    b = group[f"{name}.b"] if f"{name}.b" in group else None
    return dc.linear(x, group[f"{name}.w"], b)


def init_layer_norm(group, name, dim):
    group.add(f"{name}.gamma", np.ones(dim))
    group.add(f"{name}.beta", np.zeros(dim))


def apply_layer_norm(group, name, x):
    return dc.layer_norm(x, group[f"{name}.gamma"], group[f"{name}.beta"])

import numpy as np

from saaformer.model import named_parameters, _walk
from saaformer.numerics import Tensor


def randomize(params, rng, scale=0.5):
    """Move every parameter off its (often symmetric) initial value.

    Norm scales stay near 1 and running variances stay positive.
    """
    for name, obj, attr in _walk(params, ""):
        value = getattr(obj, attr)
        if isinstance(value, Tensor):
            noise = rng.normal(0.0, scale, value.shape)
            value.data = 1.0 + 0.5 * noise if name.endswith(".scale") else value.data + noise
        elif attr == "running_var":
            value[...] = rng.uniform(0.5, 2.0, value.shape)
        elif attr == "running_mean":
            value[...] = rng.normal(0.0, 0.3, value.shape)
    return params


def clone_arrays(params):
    return [t.data.copy() for _, t in named_parameters(params)]

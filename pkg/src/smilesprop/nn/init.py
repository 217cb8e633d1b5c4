"""Weight initializers (all take a numpy Generator)."""
import numpy as np


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def lecun_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(1.0 / fan_in)).astype(dtype)

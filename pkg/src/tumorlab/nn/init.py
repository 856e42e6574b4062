"""Weight initialization."""

from __future__ import annotations

import numpy as np

from .tensor import default_dtype


def fan_of(shape, fan_mode: str = "fan_in") -> int:
    """Fan of a linear (in, out) or conv (out, in, k, k, k) weight shape."""
    shape = tuple(shape)
    if len(shape) < 2:
        raise ValueError(f"cannot compute fan for shape {shape}")
    if len(shape) == 2:
        fan_in, fan_out = shape[0], shape[1]
    else:
        receptive = int(np.prod(shape[2:]))
        fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    if fan_mode == "fan_in":
        return fan_in
    if fan_mode == "fan_out":
        return fan_out
    raise ValueError(f"unknown fan_mode {fan_mode!r}")


def kaiming_init(shape, fan_mode: str = "fan_in", rng: np.random.Generator | None = None):
    """Zero-mean normal weights with variance 2/fan (ReLU gain)."""
    rng = rng if rng is not None else np.random.default_rng()
    std = float(np.sqrt(2.0 / fan_of(shape, fan_mode)))
    return rng.normal(0.0, std, size=tuple(shape)).astype(default_dtype())


def scaled_normal_init(shape, std: float = 0.02, rng: np.random.Generator | None = None):
    """Small-variance normal draws (token/positional embeddings)."""
    rng = rng if rng is not None else np.random.default_rng()
    return (std * rng.standard_normal(tuple(shape))).astype(default_dtype())

"""Tape-based reverse-mode autodiff on numpy arrays.

Forward operations append records to a module-level tape in execution
order; ``backward`` replays the tape in reverse, which is a valid
topological order, so every node's backward rule runs exactly once.
Values are float32 by default; a float64 mode exists for gradient
checking (see ``using_dtype``).
"""

from __future__ import annotations

import contextlib
import itertools

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_TAPE: list["TapeNode"] = []
_NODE_IDS = itertools.count()


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported default dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily switch the dtype new tensors are created with."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (used for inference and parameter updates)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class TapeNode:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    """N-dimensional value participating in the recorded computation.

    ``grad`` is populated by ``backward`` and has the same shape as
    ``data``; ``node_id`` identifies the tensor on the tape.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_NODE_IDS)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return (
            f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, "
            f"requires_grad={self.requires_grad})"
        )

    # Arithmetic operators are attached by tumorlab.nn.ops at import time
    # so that all forward/backward rules live in one module.


def record(out: Tensor, parents: tuple, backward_fn) -> Tensor:
    """Put one primitive application on the tape.

    ``backward_fn(grad_out)`` must accumulate into the parents that
    require gradients. Recording is skipped when no parent requires a
    gradient or recording is disabled, in which case the output is a
    plain constant.
    """
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _TAPE.append(TapeNode(out, parents, backward_fn))
    return out


def tape_length() -> int:
    return len(_TAPE)


def reset_tape():
    _TAPE.clear()


def backward(loss: Tensor):
    """Populate gradients of everything the scalar ``loss`` depends on.

    Consumes the tape: records are replayed newest-first and the tape is
    cleared afterwards, so each training step records a fresh graph.
    Leaves (tensors never produced by a recorded op) keep their ``grad``;
    intermediate gradients are dropped as soon as their node has run.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        reset_tape()
        raise ValueError("loss is not on the tape (nothing requires grad)")
    loss.grad = np.ones_like(loss.data)
    try:
        for node in reversed(_TAPE):
            g = node.out.grad
            if g is None:
                continue
            node.backward_fn(g)
            node.out.grad = None
    finally:
        reset_tape()

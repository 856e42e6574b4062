"""Minimal reverse-mode autodiff engine: tensors, layers, optimizers."""

from . import gradcheck, init, layers, ops, optim  # noqa: F401
from .init import kaiming_init  # noqa: F401
from .optim import OptimizerConfig, ScheduleSpec, build_optimizer, clip_grad_norm, schedule  # noqa: F401
from .tensor import (  # noqa: F401
    Tensor,
    backward,
    default_dtype,
    no_grad,
    reset_tape,
    set_default_dtype,
    tape_length,
    using_dtype,
)

"""Optimizers and learning-rate schedules.

Adam and AdamW share one update path so that their trajectories are
bit-identical at weight_decay = 0; AdamW decouples the decay from the
moment estimates, plain Adam folds it into the gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

OPTIMIZER_KINDS = ("adam", "adamw", "sgd_nesterov")
SCHEDULE_KINDS = ("cosine_annealing", "one_cycle", "poly_decay", "constant")


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    momentum: float = 0.99
    grad_clip_norm: float | None = None
    eps: float = 1e-8

    def validate(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        for b in self.betas:
            if not 0.0 <= b < 1.0:
                raise ValueError(f"betas must lie in [0, 1), got {self.betas}")
        return self


@dataclass
class ScheduleSpec:
    kind: str = "constant"
    eta_min: float = 1e-6
    eta_max: float = 1e-4
    total_steps: int = 1
    warmup_fraction: float = 0.1
    poly_power: float = 0.9

    def validate(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not (0.0 < self.eta_min <= self.eta_max):
            raise ValueError(f"need 0 < eta_min <= eta_max, got {self.eta_min}, {self.eta_max}")
        if not (0.0 <= self.warmup_fraction < 1.0):
            raise ValueError(f"warmup_fraction must lie in [0, 1), got {self.warmup_fraction}")
        return self


def schedule(spec: ScheduleSpec, t: int) -> float:
    """Learning rate at step ``t`` of ``spec.total_steps``."""
    spec.validate()
    total = max(int(spec.total_steps), 1)
    t = min(max(int(t), 0), total)
    if spec.kind == "constant":
        return spec.eta_max
    if spec.kind == "cosine_annealing":
        frac = t / total
        return spec.eta_min + 0.5 * (spec.eta_max - spec.eta_min) * (1.0 + np.cos(np.pi * frac))
    if spec.kind == "one_cycle":
        warm = spec.warmup_fraction * total
        if warm > 0 and t <= warm:
            return spec.eta_min + (spec.eta_max - spec.eta_min) * (t / warm)
        frac = (t - warm) / max(total - warm, 1e-12)
        return spec.eta_min + 0.5 * (spec.eta_max - spec.eta_min) * (1.0 + np.cos(np.pi * frac))
    # poly_decay: lr0 * (1 - t/T)^power
    return spec.eta_max * (1.0 - t / total) ** spec.poly_power


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most ``max_norm``."""
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.sum(p.grad.astype(np.float64) ** 2))
    total = float(np.sqrt(sq))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


class Optimizer:
    def __init__(self, params: list[Tensor], cfg: OptimizerConfig):
        self.params = list(params)
        self.cfg = cfg.validate()
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None):
        lr = self.cfg.lr if lr is None else float(lr)
        if lr <= 0:
            raise ValueError(f"lr must be > 0, got {lr}")
        if self.cfg.grad_clip_norm is not None:
            clip_grad_norm(self.params, self.cfg.grad_clip_norm)
        self.t += 1
        self._update(lr)

    def _update(self, lr: float):
        raise NotImplementedError

    def state_arrays(self):
        """Optimizer state arrays, for checkpoint metadata."""
        return []


class AdamLike(Optimizer):
    """Adam (kind='adam') and AdamW (kind='adamw') with bias correction."""

    def __init__(self, params, cfg: OptimizerConfig):
        super().__init__(params, cfg)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def _update(self, lr: float):
        b1, b2 = self.cfg.betas
        wd = self.cfg.weight_decay
        decoupled = self.cfg.kind == "adamw"
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if wd != 0.0 and not decoupled:
                g = g + wd * p.data
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            mhat = m / c1
            vhat = v / c2
            p.data -= lr * mhat / (np.sqrt(vhat) + self.cfg.eps)
            if wd != 0.0 and decoupled:
                p.data -= lr * wd * p.data

    def state_arrays(self):
        return [("m", m) for m in self.m] + [("v", v) for v in self.v]


class SGDNesterov(Optimizer):
    def __init__(self, params, cfg: OptimizerConfig):
        super().__init__(params, cfg)
        self.buf = [np.zeros_like(p.data) for p in self.params]

    def _update(self, lr: float):
        mu = self.cfg.momentum
        wd = self.cfg.weight_decay
        for p, buf in zip(self.params, self.buf):
            if p.grad is None:
                continue
            g = p.grad
            if wd != 0.0:
                g = g + wd * p.data
            buf *= mu
            buf += g
            p.data -= lr * (g + mu * buf)

    def state_arrays(self):
        return [("momentum", b) for b in self.buf]


def build_optimizer(params, cfg: OptimizerConfig) -> Optimizer:
    cfg.validate()
    if cfg.kind in ("adam", "adamw"):
        return AdamLike(params, cfg)
    return SGDNesterov(params, cfg)


def optimizer_step(opt: Optimizer, lr_t: float):
    """Functional alias: one update at the scheduled learning rate."""
    opt.step(lr_t)

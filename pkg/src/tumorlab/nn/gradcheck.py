"""Finite-difference verification of backward rules.

All checks run in float64; callers build their tensors/modules inside
``using_dtype(np.float64)``. The analytic gradient of a random scalar
projection of the output is compared against central differences.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor, backward, no_grad, reset_tape


def _scalarize(out: Tensor, proj: np.ndarray) -> Tensor:
    return ops.sum_(ops.mul(out, Tensor(proj)))


def numeric_gradient(f, wrt: Tensor, coords, h: float = 1e-4) -> np.ndarray:
    """Central differences of scalar-valued ``f`` at the given flat coords."""
    flat = wrt.data.reshape(-1)
    grad = np.zeros(len(coords), dtype=np.float64)
    with no_grad():
        for j, i in enumerate(coords):
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            grad[j] = (fp - fm) / (2.0 * h)
    return grad


def gradcheck(fn, wrt: list[Tensor], h: float = 1e-4, max_coords: int | None = None,
              rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and numeric gradients.

    ``fn()`` must rebuild the forward pass from the ``wrt`` tensors and
    return an output Tensor. When ``max_coords`` is set, a fixed random
    subset of coordinates is checked per tensor.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in wrt:
        t.requires_grad = True
        t.grad = None
    reset_tape()
    out = fn()
    proj = rng.standard_normal(out.data.shape)
    loss = _scalarize(out, proj)
    backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in wrt]

    def scalar_f():
        o = fn()
        return float(np.sum(o.data * proj))

    worst = 0.0
    for t, a in zip(wrt, analytic):
        n_el = t.data.size
        if max_coords is not None and n_el > max_coords:
            coords = rng.choice(n_el, size=max_coords, replace=False)
        else:
            coords = np.arange(n_el)
        num = numeric_gradient(scalar_f, t, coords, h=h)
        ana = a.reshape(-1)[coords]
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-6)
        worst = max(worst, float(np.max(np.abs(ana - num) / denom)) if len(coords) else 0.0)
    for t in wrt:
        t.grad = None
    return worst


def primitive_checks() -> list:
    """(name, runner) pairs for every differentiable primitive.

    Each runner returns the max relative gradient error; build shapes
    are small so the full coordinate set is checked.
    """
    checks = []

    def rand(rng, *shape):
        return Tensor(rng.standard_normal(shape), dtype=np.float64)

    def builder(name):
        def deco(f):
            def runner(seed: int = 0):
                rng = np.random.default_rng(seed)
                fn, wrt = f(rng)
                return gradcheck(fn, wrt, rng=rng)
            checks.append((name, runner))
            return f
        return deco

    @builder("add_broadcast")
    def _add(rng):
        a, b = rand(rng, 3, 4), rand(rng, 4)
        return (lambda: ops.add(a, b)), [a, b]

    @builder("sub")
    def _sub(rng):
        a, b = rand(rng, 2, 3), rand(rng, 2, 3)
        return (lambda: ops.sub(a, b)), [a, b]

    @builder("mul_broadcast")
    def _mul(rng):
        a, b = rand(rng, 2, 3, 4), rand(rng, 3, 1)
        return (lambda: ops.mul(a, b)), [a, b]

    @builder("div")
    def _div(rng):
        a = rand(rng, 3, 4)
        b = Tensor(rng.uniform(0.5, 2.0, (3, 4)), dtype=np.float64)
        return (lambda: ops.div(a, b)), [a, b]

    @builder("neg")
    def _neg(rng):
        a = rand(rng, 5)
        return (lambda: ops.neg(a)), [a]

    @builder("pow_scalar")
    def _pow(rng):
        a = Tensor(rng.uniform(0.5, 2.0, (3, 3)), dtype=np.float64)
        return (lambda: ops.pow_scalar(a, 3.0)), [a]

    @builder("exp")
    def _exp(rng):
        a = rand(rng, 4)
        return (lambda: ops.exp(a)), [a]

    @builder("log")
    def _log(rng):
        a = Tensor(rng.uniform(0.5, 3.0, (4,)), dtype=np.float64)
        return (lambda: ops.log(a)), [a]

    @builder("matmul")
    def _matmul(rng):
        a, b = rand(rng, 2, 3), rand(rng, 3, 4)
        return (lambda: ops.matmul(a, b)), [a, b]

    @builder("matmul_batched")
    def _matmul_b(rng):
        a, b = rand(rng, 2, 2, 3, 4), rand(rng, 2, 2, 4, 5)
        return (lambda: ops.matmul(a, b)), [a, b]

    @builder("matmul_broadcast_weight")
    def _matmul_w(rng):
        a, b = rand(rng, 2, 5, 3), rand(rng, 3, 4)
        return (lambda: ops.matmul(a, b)), [a, b]

    @builder("reshape")
    def _reshape(rng):
        a = rand(rng, 2, 6)
        return (lambda: ops.reshape(a, (3, 4))), [a]

    @builder("permute")
    def _permute(rng):
        a = rand(rng, 2, 3, 4)
        return (lambda: ops.permute(a, (2, 0, 1))), [a]

    @builder("getitem")
    def _getitem(rng):
        a = rand(rng, 4, 5)
        return (lambda: ops.getitem(a, (slice(1, 3), slice(None, None, 2)))), [a]

    @builder("concat")
    def _concat(rng):
        a, b = rand(rng, 2, 3), rand(rng, 2, 2)
        return (lambda: ops.concat([a, b], axis=1)), [a, b]

    @builder("sum_axis")
    def _sum(rng):
        a = rand(rng, 3, 4, 2)
        return (lambda: ops.sum_(a, axis=(0, 2))), [a]

    @builder("mean_keepdims")
    def _mean(rng):
        a = rand(rng, 3, 4)
        return (lambda: ops.mean(a, axis=1, keepdims=True)), [a]

    @builder("relu")
    def _relu(rng):
        # keep inputs away from the kink
        a = Tensor(rng.standard_normal((4, 4)) + np.sign(rng.standard_normal((4, 4))) * 0.5,
                   dtype=np.float64)
        return (lambda: ops.relu(a)), [a]

    @builder("gelu")
    def _gelu(rng):
        a = rand(rng, 4, 4)
        return (lambda: ops.gelu(a)), [a]

    @builder("sigmoid")
    def _sigmoid(rng):
        a = rand(rng, 4, 4)
        return (lambda: ops.sigmoid(a)), [a]

    @builder("softmax")
    def _softmax(rng):
        a = rand(rng, 3, 5)
        return (lambda: ops.softmax(a, axis=-1)), [a]

    @builder("conv3d_s1")
    def _conv1(rng):
        x, w, b = rand(rng, 2, 2, 4, 4, 4), rand(rng, 3, 2, 3, 3, 3), rand(rng, 3)
        return (lambda: ops.conv3d(x, w, b, stride=1, padding=1)), [x, w, b]

    @builder("conv3d_s2")
    def _conv2(rng):
        x, w, b = rand(rng, 1, 2, 6, 6, 6), rand(rng, 3, 2, 3, 3, 3), rand(rng, 3)
        return (lambda: ops.conv3d(x, w, b, stride=2, padding=1)), [x, w, b]

    @builder("conv3d_k1")
    def _conv3(rng):
        x, w, b = rand(rng, 2, 3, 3, 3, 3), rand(rng, 2, 3, 1, 1, 1), rand(rng, 2)
        return (lambda: ops.conv3d(x, w, b, stride=1, padding=0)), [x, w, b]

    @builder("upsample_nearest2x")
    def _ups(rng):
        x = rand(rng, 1, 2, 3, 3, 3)
        return (lambda: ops.upsample_nearest2x(x)), [x]

    @builder("batch_norm_train")
    def _bn(rng):
        x = rand(rng, 3, 2, 3, 3, 3)
        gamma = Tensor(rng.uniform(0.5, 1.5, 2), dtype=np.float64)
        beta = rand(rng, 2)
        state = ops.BatchNormState(2, dtype=np.float64)
        return (lambda: ops.batch_norm(x, gamma, beta, state, training=True)), [x, gamma, beta]

    @builder("batch_norm_eval")
    def _bn_eval(rng):
        x = rand(rng, 3, 2, 3, 3, 3)
        gamma = Tensor(rng.uniform(0.5, 1.5, 2), dtype=np.float64)
        beta = rand(rng, 2)
        state = ops.BatchNormState(2, dtype=np.float64)
        state.running_mean = rng.standard_normal(2)
        state.running_var = rng.uniform(0.5, 2.0, 2)
        state.num_updates = 1
        return (lambda: ops.batch_norm(x, gamma, beta, state, training=False)), [x, gamma, beta]

    @builder("layer_norm")
    def _ln(rng):
        x = rand(rng, 2, 3, 6)
        gamma = Tensor(rng.uniform(0.5, 1.5, 6), dtype=np.float64)
        beta = rand(rng, 6)
        return (lambda: ops.layer_norm(x, gamma, beta)), [x, gamma, beta]

    @builder("mse_loss")
    def _mse(rng):
        p = rand(rng, 2, 3, 3)
        t = rng.standard_normal((2, 3, 3))
        return (lambda: ops.mse_loss(p, t)), [p]

    @builder("masked_mse")
    def _mmse(rng):
        p = rand(rng, 4, 4)
        t = rng.standard_normal((4, 4))
        m = (rng.uniform(size=(4, 4)) > 0.4).astype(np.float64)
        m.reshape(-1)[0] = 1.0  # non-empty mask
        return (lambda: ops.masked_mse(p, t, m)), [p]

    return checks

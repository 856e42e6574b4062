"""Differentiable primitives: forward rules plus hand-derived backwards.

Every function takes/returns ``Tensor`` and registers its backward rule
on the tape. Backward closures skip gradient work for parents that do
not require it, which is what makes frozen-model calibration cheap.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .tensor import Tensor, record

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    out = Tensor(a.data + b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return record(out, (a, b), bwd)


def sub(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    out = Tensor(a.data - b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.data.shape))

    return record(out, (a, b), bwd)


def mul(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    out = Tensor(a.data * b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return record(out, (a, b), bwd)


def div(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    out = Tensor(a.data / b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return record(out, (a, b), bwd)


def neg(a: Tensor):
    out = Tensor(-a.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(-g)

    return record(out, (a,), bwd)


def pow_scalar(a: Tensor, exponent: float):
    exponent = float(exponent)
    out = Tensor(a.data ** exponent)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * exponent * a.data ** (exponent - 1.0))

    return record(out, (a,), bwd)


def exp(a: Tensor):
    out = Tensor(np.exp(a.data))

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * out.data)

    return record(out, (a,), bwd)


def log(a: Tensor):
    out = Tensor(np.log(a.data))

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g / a.data)

    return record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape):
    shape = tuple(shape)
    src_shape = a.data.shape
    out = Tensor(a.data.reshape(shape))

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(src_shape))

    return record(out, (a,), bwd)


def permute(a: Tensor, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(a.data, axes))

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.transpose(g, inv))

    return record(out, (a,), bwd)


def getitem(a: Tensor, key):
    out = Tensor(a.data[key])

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[key] += g
            a.accumulate_grad(full)

    return record(out, (a,), bwd)


def concat(tensors, axis: int = 0):
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        parts = np.split(g, splits, axis=axis)
        for t, p in zip(tensors, parts):
            if t.requires_grad:
                t.accumulate_grad(p)

    return record(out, tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False):
    axes = _norm_axis(axis, a.data.ndim)
    out = Tensor(a.data.sum(axis=axes, keepdims=keepdims))

    def bwd(g):
        if a.requires_grad:
            if not keepdims:
                g = np.expand_dims(g, axes)
            a.accumulate_grad(np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False))

    return record(out, (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False):
    axes = _norm_axis(axis, a.data.ndim)
    count = int(np.prod([a.data.shape[i] for i in axes]))
    out = Tensor(a.data.mean(axis=axes, keepdims=keepdims))

    def bwd(g):
        if a.requires_grad:
            if not keepdims:
                g = np.expand_dims(g, axes)
            a.accumulate_grad(np.broadcast_to(g / count, a.data.shape).astype(a.data.dtype, copy=False))

    return record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------

def relu(a: Tensor):
    out = Tensor(np.maximum(a.data, 0))

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > 0))

    return record(out, (a,), bwd)


def gelu(a: Tensor):
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor(x * phi)

    def bwd(g):
        if a.requires_grad:
            dens = _INV_SQRT2PI * np.exp(-0.5 * x * x)
            a.accumulate_grad(g * (phi + x * dens))

    return record(out, (a,), bwd)


def sigmoid(a: Tensor):
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = Tensor(s)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * s * (1.0 - s))

    return record(out, (a,), bwd)


def softmax(a: Tensor, axis: int = -1):
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def bwd(g):
        if a.requires_grad:
            dot = (g * s).sum(axis=axis, keepdims=True)
            a.accumulate_grad(s * (g - dot))

    return record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor):
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul needs ndim >= 2 operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate_grad(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate_grad(_unbroadcast(gb, b.data.shape))

    return record(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# 3D convolution (cross-correlation), im2col + GEMM
# ---------------------------------------------------------------------------

def _triple(v) -> tuple:
    if isinstance(v, (tuple, list)):
        if len(v) != 3:
            raise ValueError(f"expected 3 components, got {v}")
        return tuple(int(x) for x in v)
    return (int(v),) * 3


# im2col buffers above this many bytes are processed in batch chunks
_COL_BYTES_CAP = 192 * 1024 * 1024


def _out_spatial(in_sp, kernel, stride, padding):
    return tuple((n + 2 * p - k) // s + 1 for n, k, s, p in zip(in_sp, kernel, stride, padding))


def _pad_input(x, padding):
    if any(padding):
        return np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in padding))
    return x


def _offset_slices(kernel, stride, out_sp):
    slices = []
    for dx in range(kernel[0]):
        for dy in range(kernel[1]):
            for dz in range(kernel[2]):
                slices.append(tuple(
                    slice(d, d + s * (o - 1) + 1, s)
                    for d, s, o in zip((dx, dy, dz), stride, out_sp)
                ))
    return slices


def _im2col(xp, slices, out_sp):
    """Gather kernel-offset slabs into (B, Cin*k^3, P) with 27-ish big copies."""
    b, c = xp.shape[:2]
    p = out_sp[0] * out_sp[1] * out_sp[2]
    col = np.empty((b, c, len(slices), p), dtype=xp.dtype)
    for o, sl in enumerate(slices):
        np.copyto(col[:, :, o, :].reshape(b, c, *out_sp), xp[:, :, sl[0], sl[1], sl[2]])
    return col.reshape(b, c * len(slices), p)


def _chunk_size(batch, cin, k3, p, itemsize):
    per_sample = cin * k3 * p * itemsize
    return max(1, min(batch, _COL_BYTES_CAP // max(per_sample, 1)))


def _conv3d_forward(x: np.ndarray, w: np.ndarray, stride: tuple, padding: tuple) -> np.ndarray:
    batch, cin = x.shape[:2]
    cout = w.shape[0]
    kernel = w.shape[2:]
    k3 = kernel[0] * kernel[1] * kernel[2]
    out_sp = _out_spatial(x.shape[2:], kernel, stride, padding)
    p = out_sp[0] * out_sp[1] * out_sp[2]
    xp = _pad_input(x, padding)
    slices = _offset_slices(kernel, stride, out_sp)
    w2 = w.reshape(cout, cin * k3)
    out = np.empty((batch, cout) + out_sp, dtype=x.dtype)
    step = _chunk_size(batch, cin, k3, p, x.itemsize)
    for lo in range(0, batch, step):
        hi = min(lo + step, batch)
        col = _im2col(xp[lo:hi], slices, out_sp)
        for b in range(hi - lo):
            np.matmul(w2, col[b], out=out[lo + b].reshape(cout, p))
    return out


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0):
    """3D cross-correlation of (B, Cin, X, Y, Z) with (Cout, Cin, k, k, k)."""
    stride_t = _triple(stride)
    pad_t = _triple(padding)
    if x.data.ndim != 5 or weight.data.ndim != 5:
        raise ValueError(f"conv3d expects 5D input/weight, got {x.data.shape} and {weight.data.shape}")
    if x.data.shape[1] != weight.data.shape[1]:
        raise ValueError(
            f"conv3d channel mismatch: input {x.data.shape} vs weight {weight.data.shape}"
        )
    for ax in range(3):
        if x.data.shape[2 + ax] + 2 * pad_t[ax] < weight.data.shape[2 + ax]:
            raise ValueError(
                f"conv3d kernel {weight.data.shape[2:]} larger than padded input {x.data.shape[2:]}"
            )

    out_data = _conv3d_forward(x.data, weight.data, stride_t, pad_t)
    if bias is not None:
        out_data += bias.data.reshape(1, -1, 1, 1, 1)
    out = Tensor(out_data)

    def bwd(g):
        gx, gw, gb = conv3d_backward(
            x.data, weight.data, g, stride_t, pad_t,
            need_x=x.requires_grad, need_w=weight.requires_grad,
            need_b=bias is not None and bias.requires_grad,
        )
        if x.requires_grad:
            x.accumulate_grad(gx)
        if weight.requires_grad:
            weight.accumulate_grad(gw)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return record(out, parents, bwd)


def conv3d_backward(x, w, g, stride, padding, need_x=True, need_w=True, need_b=True):
    """Gradients of conv3d wrt input, weight, bias.

    grad-input is computed as a stride-1 correlation of the
    zero-dilated output gradient with the spatially flipped kernel, so
    all three pieces stay GEMM-bound.
    """
    stride = _triple(stride)
    padding = _triple(padding)
    batch, cin = x.shape[:2]
    cout = w.shape[0]
    kernel = w.shape[2:]
    gb = g.sum(axis=(0, 2, 3, 4)) if need_b else None

    gw = None
    if need_w:
        xp = np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in padding)) if any(padding) else x
        win = _windows(xp, kernel, stride)
        gw = np.zeros_like(w)
        for b in range(batch):
            # (Cout, P...) x (Cin, P..., k...) -> (Cout, Cin, k, k, k)
            gw += np.tensordot(g[b], win[b], axes=([1, 2, 3], [1, 2, 3]))

    gx = None
    if need_x:
        # dilate the output grad by the stride, then full-correlate
        out_sp = g.shape[2:]
        dil_sp = tuple((o - 1) * s + 1 for o, s in zip(out_sp, stride))
        if stride != (1, 1, 1):
            gd = np.zeros((batch, cout) + dil_sp, dtype=g.dtype)
            gd[:, :, ::stride[0], ::stride[1], ::stride[2]] = g
        else:
            gd = g
        pads = []
        for ax in range(3):
            lo = kernel[ax] - 1 - padding[ax]
            hi = x.shape[2 + ax] - 1 + kernel[ax] - lo - dil_sp[ax]
            if lo < 0 or hi < 0:
                raise ValueError("conv3d backward: padding exceeds kernel extent")
            pads.append((lo, hi))
        gdp = np.pad(gd, ((0, 0), (0, 0)) + tuple(pads))
        wt = np.ascontiguousarray(np.swapaxes(w, 0, 1)[:, :, ::-1, ::-1, ::-1])
        gx = _conv3d_forward(gdp, wt, (1, 1, 1), (0, 0, 0))
        if gx.shape != x.shape:
            raise AssertionError(f"conv3d backward shape {gx.shape} != input {x.shape}")
    return gx, gw, gb


# ---------------------------------------------------------------------------
# Up/down sampling
# ---------------------------------------------------------------------------

def upsample_nearest2x(a: Tensor):
    """Replicate every voxel 2x along each spatial axis of (B, C, X, Y, Z)."""
    x = a.data
    b, c, nx, ny, nz = x.shape
    out_data = np.broadcast_to(
        x[:, :, :, None, :, None, :, None], (b, c, nx, 2, ny, 2, nz, 2)
    ).reshape(b, c, 2 * nx, 2 * ny, 2 * nz).copy()
    out = Tensor(out_data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(b, c, nx, 2, ny, 2, nz, 2).sum(axis=(3, 5, 7)))

    return record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

class BatchNormState:
    """Running statistics for one batch-norm layer (per-channel)."""

    def __init__(self, channels: int, dtype=None):
        from .tensor import default_dtype

        dt = dtype if dtype is not None else default_dtype()
        self.running_mean = np.zeros(channels, dtype=dt)
        self.running_var = np.ones(channels, dtype=dt)
        self.num_updates = 0


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               training: bool, momentum: float = 0.1, eps: float = 1e-5):
    """Normalize (B, C, ...) over all axes but the channel axis.

    Training mode uses batch statistics (biased variance) and moves the
    running averages toward them with the given momentum; eval mode uses
    the running averages and requires at least one prior update.
    """
    data = x.data
    red_axes = (0,) + tuple(range(2, data.ndim))
    n = data.size // data.shape[1]
    shape_c = (1, -1) + (1,) * (data.ndim - 2)

    if training:
        mu = data.mean(axis=red_axes)
        var = data.var(axis=red_axes)
        state.running_mean = ((1.0 - momentum) * state.running_mean + momentum * mu).astype(
            state.running_mean.dtype, copy=False)
        state.running_var = ((1.0 - momentum) * state.running_var + momentum * var).astype(
            state.running_var.dtype, copy=False)
        state.num_updates += 1
    else:
        if state.num_updates == 0:
            raise RuntimeError("batch_norm eval mode with uninitialized running stats")
        mu = state.running_mean.astype(data.dtype, copy=False)
        var = state.running_var.astype(data.dtype, copy=False)

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (data - mu.reshape(shape_c)) * inv.reshape(shape_c)
    out = Tensor(gamma.data.reshape(shape_c) * xhat + beta.data.reshape(shape_c))

    def bwd(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=red_axes))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=red_axes))
        if x.requires_grad:
            gxh = g * gamma.data.reshape(shape_c)
            if training:
                s1 = gxh.sum(axis=red_axes, keepdims=True)
                s2 = (gxh * xhat).sum(axis=red_axes, keepdims=True)
                gx = (inv.reshape(shape_c) / n) * (n * gxh - s1 - xhat * s2)
            else:
                gx = gxh * inv.reshape(shape_c)
            x.accumulate_grad(gx.astype(data.dtype, copy=False))

    return record(out, (x, gamma, beta), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Normalize over the trailing (embedding) axis."""
    data = x.data
    n = data.shape[-1]
    mu = data.mean(axis=-1, keepdims=True)
    var = data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (data - mu) * inv
    out = Tensor(gamma.data * xhat + beta.data)

    red = tuple(range(data.ndim - 1))

    def bwd(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=red))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=red))
        if x.requires_grad:
            gxh = g * gamma.data
            s1 = gxh.sum(axis=-1, keepdims=True)
            s2 = (gxh * xhat).sum(axis=-1, keepdims=True)
            x.accumulate_grad(((inv / n) * (n * gxh - s1 - xhat * s2)).astype(data.dtype, copy=False))

    return record(out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def mse_loss(pred: Tensor, target):
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.data.dtype)
    if target.shape != pred.data.shape:
        raise ValueError(f"mse_loss shape mismatch: {pred.data.shape} vs {target.shape}")
    diff = pred.data - target
    out = Tensor(np.mean(diff * diff))

    def bwd(g):
        if pred.requires_grad:
            pred.accumulate_grad((2.0 / diff.size) * g * diff)

    return record(out, (pred,), bwd)


def masked_mse(pred: Tensor, target, mask):
    """Mean squared error over voxels where ``mask`` is nonzero."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.data.dtype)
    mask = np.asarray(mask, dtype=pred.data.dtype)
    if target.shape != pred.data.shape or mask.shape != pred.data.shape:
        raise ValueError(
            f"masked_mse shape mismatch: pred {pred.data.shape}, target {target.shape}, mask {mask.shape}"
        )
    n = float(mask.sum())
    if n == 0:
        raise ValueError("masked_mse: empty mask")
    diff = (pred.data - target) * mask
    out = Tensor(np.sum(diff * diff) / n)

    def bwd(g):
        if pred.requires_grad:
            pred.accumulate_grad((2.0 / n) * g * diff)

    return record(out, (pred,), bwd)


# ---------------------------------------------------------------------------
# Operator wiring
# ---------------------------------------------------------------------------

Tensor.__add__ = add
Tensor.__radd__ = lambda a, b: add(a, b)
Tensor.__sub__ = sub
Tensor.__rsub__ = lambda a, b: sub(_coerce(b, a), a)
Tensor.__mul__ = mul
Tensor.__rmul__ = lambda a, b: mul(a, b)
Tensor.__truediv__ = div
Tensor.__rtruediv__ = lambda a, b: div(_coerce(b, a), a)
Tensor.__neg__ = neg
Tensor.__pow__ = pow_scalar
Tensor.__matmul__ = matmul
Tensor.__getitem__ = getitem
Tensor.reshape = reshape
Tensor.permute = permute
Tensor.sum = sum_
Tensor.mean = mean

"""Layer modules built on the autodiff primitives.

``Module`` tracks parameters, persistent buffers, and submodules in
declaration order, which fixes the checkpoint payload layout.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .init import kaiming_init, scaled_normal_init
from .ops import BatchNormState
from .tensor import Tensor, default_dtype


class Parameter(Tensor):
    def __init__(self, data, requires_grad: bool = True):
        super().__init__(data, requires_grad=requires_grad, dtype=np.asarray(data).dtype)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        self.training = True

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def modules(self):
        yield self
        for child in self._children.values():
            yield from child.modules()

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def _local_buffers(self):
        """Persistent non-trainable arrays; overridden where needed."""
        return []

    def _load_local_buffer(self, name: str, array: np.ndarray):
        raise KeyError(f"{type(self).__name__} has no buffer {name!r}")

    def named_buffers(self, prefix: str = ""):
        for name, arr in self._local_buffers():
            yield prefix + name, arr
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def state_entries(self):
        """(name, array) pairs in declaration order: parameters then buffers."""
        return [(n, p.data) for n, p in self.named_parameters()] + list(self.named_buffers())

    def load_state_entries(self, entries):
        params = dict(self.named_parameters())
        buffer_owner = {}
        for cname, child in self._named_modules():
            for bname, _ in child._local_buffers():
                buffer_owner[cname + bname] = (child, bname)
        for name, arr in entries:
            if name in params:
                p = params[name]
                if p.data.shape != arr.shape:
                    raise ValueError(f"parameter {name!r} shape {p.data.shape} != {arr.shape}")
                p.data = arr.astype(p.data.dtype, copy=True)
            elif name in buffer_owner:
                child, bname = buffer_owner[name]
                child._load_local_buffer(bname, arr)
            else:
                raise KeyError(f"unknown state entry {name!r}")

    def _named_modules(self, prefix: str = ""):
        yield prefix, self
        for cname, child in self._children.items():
            yield from child._named_modules(prefix + cname + ".")

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def requires_grad_(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 rng: np.random.Generator | None = None, init: str = "kaiming", init_std: float = 0.02):
        super().__init__()
        if init == "kaiming":
            w = kaiming_init((in_features, out_features), rng=rng)
        else:
            w = scaled_normal_init((in_features, out_features), std=init_std, rng=rng)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_features, dtype=default_dtype())) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = ops.matmul(x, self.weight)
        if self.bias is not None:
            out = ops.add(out, self.bias)
        return out


class Conv3d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 stride: int = 1, padding: int = 0, bias: bool = True,
                 rng: np.random.Generator | None = None):
        super().__init__()
        k = int(kernel_size)
        self.stride = int(stride)
        self.padding = int(padding)
        self.weight = Parameter(kaiming_init((out_channels, in_channels, k, k, k), rng=rng))
        self.bias = Parameter(np.zeros(out_channels, dtype=default_dtype())) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv3d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm3d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(channels, dtype=default_dtype()))
        self.beta = Parameter(np.zeros(channels, dtype=default_dtype()))
        self.momentum = momentum
        self.eps = eps
        self.state = BatchNormState(channels)

    def _local_buffers(self):
        return [
            ("running_mean", self.state.running_mean),
            ("running_var", self.state.running_var),
            ("num_updates", np.asarray([self.state.num_updates], dtype=np.float32)),
        ]

    def _load_local_buffer(self, name, array):
        if name == "running_mean":
            self.state.running_mean = array.astype(self.state.running_mean.dtype, copy=True)
        elif name == "running_var":
            self.state.running_var = array.astype(self.state.running_var.dtype, copy=True)
        elif name == "num_updates":
            self.state.num_updates = int(array.reshape(-1)[0])
        else:
            raise KeyError(name)

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.state,
                              training=self.training, momentum=self.momentum, eps=self.eps)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(dim, dtype=default_dtype()))
        self.beta = Parameter(np.zeros(dim, dtype=default_dtype()))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class Identity(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x


class Sequential(Module):
    def __init__(self, *parts: Module):
        super().__init__()
        for i, part in enumerate(parts):
            setattr(self, f"m{i}", part)
        self.parts = list(parts)

    def forward(self, x: Tensor) -> Tensor:
        for part in self.parts:
            x = part(x)
        return x


class MultiHeadAttention(Module):
    """Standard scaled dot-product attention over (B, N, E) token arrays."""

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator | None = None):
        super().__init__()
        if dim % n_heads != 0:
            raise ValueError(f"embedding dim {dim} not divisible by {n_heads} heads")
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.qkv = Linear(dim, 3 * dim, rng=rng)
        self.proj = Linear(dim, dim, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        b, n, e = x.shape
        h, d = self.n_heads, self.head_dim
        qkv = self.qkv(x)  # (B, N, 3E)
        qkv = qkv.reshape((b, n, 3, h, d)).permute((2, 0, 3, 1, 4))  # (3, B, H, N, D)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = ops.matmul(q, k.permute((0, 1, 3, 2))) * (1.0 / np.sqrt(d))
        att = ops.softmax(att, axis=-1)
        out = ops.matmul(att, v)  # (B, H, N, D)
        out = out.permute((0, 2, 1, 3)).reshape((b, n, e))
        return self.proj(out)


class MLPBlock(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator | None = None):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng=rng)
        self.fc2 = Linear(hidden, dim, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-layer-norm transformer block: MHA then MLP, residual around each."""

    def __init__(self, dim: int, n_heads: int, mlp_ratio: float = 4.0,
                 rng: np.random.Generator | None = None):
        super().__init__()
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, n_heads, rng=rng)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLPBlock(dim, int(dim * mlp_ratio), rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        x = x + self.mlp(self.ln2(x))
        return x

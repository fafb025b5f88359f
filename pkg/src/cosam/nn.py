"""Layer operations and a small parameter container built on :mod:`cosam.tensor`."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor, _make, as_tensor

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(np.array(data, dtype=T.DEFAULT_DTYPE), requires_grad=True, name=name)

    @property
    def value(self) -> Tensor:
        return self

    @property
    def gradient(self) -> np.ndarray:
        return np.zeros_like(self.data) if self.grad is None else self.grad


# ---------------------------------------------------------------------------
# Functional layers
# ---------------------------------------------------------------------------


def _expect(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


def conv1x1(x, weight, bias=None) -> Tensor:
    """out[n,o,h,w] = sum_i weight[o,i] * x[n,i,h,w] + bias[o]."""
    x, weight = as_tensor(x), as_tensor(weight)
    _expect(x.ndim == 4, f"conv1x1 expects [N,C,H,W], got {x.shape}")
    _expect(weight.ndim == 2, f"conv1x1 weight must be [C_out,C_in], got {weight.shape}")
    n, c, h, w = x.shape
    _expect(weight.shape[1] == c, f"conv1x1: weight expects {weight.shape[1]} input channels, input has {c}")
    out = T.matmul(weight, x.reshape(n, c, h * w))
    if bias is not None:
        bias = as_tensor(bias)
        _expect(bias.shape == (weight.shape[0],), f"conv1x1: bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias.reshape(1, -1, 1)
    return out.reshape(n, weight.shape[0], h, w)


def conv2d(x, weight, bias=None, stride: int = 1) -> Tensor:
    """3x3 (or any odd square kernel) convolution with 'same' zero padding.

    Only strides 1 and 2 are supported; the backbone needs nothing else.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _expect(x.ndim == 4 and weight.ndim == 4, "conv2d expects 4-d input and weight")
    _expect(stride in (1, 2), f"conv2d supports stride 1 or 2, got {stride}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    _expect(ci == c, f"conv2d: weight expects {ci} input channels, input has {c}")
    _expect(kh == kw and kh % 2 == 1, "conv2d kernel must be odd and square")
    _expect(h % stride == 0 and w % stride == 0, f"conv2d: {h}x{w} not divisible by stride {stride}")
    pad = kh // 2
    ho, wo = h // stride, w // stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    wd = weight.data
    out = np.zeros((n, o, ho, wo), dtype=x.data.dtype)
    for dy in range(kh):
        for dx in range(kw):
            patch = xp[:, :, dy : dy + stride * ho : stride, dx : dx + stride * wo : stride]
            out += np.einsum("oc,nchw->nohw", wd[:, :, dy, dx], patch, optimize=True)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data.reshape(1, -1, 1, 1)
        parents.append(bias)

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        for dy in range(kh):
            for dx in range(kw):
                sl = (slice(None), slice(None), slice(dy, dy + stride * ho, stride), slice(dx, dx + stride * wo, stride))
                gw[:, :, dy, dx] = np.einsum("nohw,nchw->oc", g, xp[sl], optimize=True)
                gxp[sl] += np.einsum("oc,nohw->nchw", wd[:, :, dy, dx], g, optimize=True)
        grads = [gxp[:, :, pad : pad + h, pad : pad + w], gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, parents, vjp, "conv2d")


def linear(x, weight, bias=None) -> Tensor:
    """Affine map over the last axis: x @ weight.T + bias."""
    x, weight = as_tensor(x), as_tensor(weight)
    _expect(weight.ndim == 2, f"linear weight must be [O,I], got {weight.shape}")
    _expect(x.shape[-1] == weight.shape[1], f"linear: input width {x.shape[-1]} != weight width {weight.shape[1]}")
    out = T.matmul(x if x.ndim >= 2 else x.reshape(1, -1), weight.T)
    if x.ndim == 1:
        out = out.reshape(-1)
    if bias is not None:
        bias = as_tensor(bias)
        _expect(bias.shape == (weight.shape[0],), f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias
    return out


class BatchNormState:
    """Running statistics for :func:`batch_norm2d`."""

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM):
        self.running_mean = np.zeros(channels, dtype=T.DEFAULT_DTYPE)
        self.running_var = np.ones(channels, dtype=T.DEFAULT_DTYPE)
        self.momentum = momentum


def batch_norm2d(x, gamma, beta, state: BatchNormState, mode: str = "train", eps: float = BN_EPS) -> Tensor:
    """Per-channel normalisation over (N, H, W).

    Train mode uses batch statistics and updates ``state`` in place
    (running variance uses the unbiased estimate); eval mode uses ``state``.
    """
    x = as_tensor(x)
    _expect(x.ndim == 4, f"batch_norm2d expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    _expect(as_tensor(gamma).shape == (c,) and as_tensor(beta).shape == (c,), "batch_norm2d: gamma/beta must be [C]")
    shape = (1, c, 1, 1)
    if mode == "train":
        count = n * h * w
        if count < 2:
            raise ValueError("batch_norm2d in train mode needs at least 2 values per channel")
        mu = x.mean(axis=(0, 2, 3), keepdims=True)
        centred = x - mu
        var = (centred * centred).mean(axis=(0, 2, 3), keepdims=True)
        xhat = centred / T.sqrt(var + eps)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu.data.reshape(c)
        state.running_var = (1 - m) * state.running_var + m * var.data.reshape(c) * count / (count - 1)
    elif mode == "eval":
        xhat = (x - state.running_mean.reshape(shape)) / np.sqrt(state.running_var.reshape(shape) + eps)
    else:
        raise ValueError(f"unknown batch_norm2d mode {mode!r}")
    return xhat * T.reshape(gamma, shape) + T.reshape(beta, shape)


def global_avg_pool(x) -> Tensor:
    x = as_tensor(x)
    _expect(x.ndim >= 3, f"global_avg_pool expects [..., H, W], got {x.shape}")
    return x.mean(axis=(-2, -1))


def activation(x, kind: str, axis: int = -1) -> Tensor:
    if kind == "relu":
        return T.relu(x)
    if kind == "sigmoid":
        return T.sigmoid(x)
    if kind == "softmax":
        return T.softmax(x, axis=axis)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# Module container
# ---------------------------------------------------------------------------


class Module:
    """Minimal parameter container with dotted names.

    Sub-modules and :class:`Parameter` attributes are registered in assignment
    order, which fixes checkpoint layout and optimiser ordering.
    """

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
            if value.name is None:
                value.name = key
        elif isinstance(value, Module):
            self._modules[key] = value
        object.__setattr__(self, key, value)

    def register_buffer(self, key: str, owner, attr: str) -> None:
        """Expose ``owner.<attr>`` (a numpy array) as persistent state."""
        self._buffers[key] = (owner, attr)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, (owner, attr) in self._buffers.items():
            yield prefix + name, getattr(owner, attr)
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def set_buffer(self, dotted: str, value: np.ndarray) -> None:
        head, _, rest = dotted.partition(".")
        if rest and head in self._modules:
            self._modules[head].set_buffer(rest, value)
            return
        owner, attr = self._buffers[dotted]
        setattr(owner, attr, np.array(value, dtype=T.DEFAULT_DTYPE))

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((k, p.data.copy()) for k, p in self.named_parameters())
        state.update((k, np.array(v, copy=True)) for k, v in self.named_buffers())
        return state

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        unknown = set(state) - set(params) - set(buffers)
        if missing or unknown:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unknown={sorted(unknown)}")
        for k, p in params.items():
            if p.shape != state[k].shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=T.DEFAULT_DTYPE)
        for k in buffers:
            self.set_buffer(k, state[k])

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for m in self._modules.values():
            m.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    @property
    def bn_mode(self) -> str:
        return "train" if self.training else "eval"

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv1x1(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, zero_init: bool = False, bias: bool = True):
        super().__init__()
        w = np.zeros((c_out, c_in)) if zero_init else rng.uniform(-1, 1, (c_out, c_in)) / np.sqrt(c_in)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(c_out)) if bias else None

    def forward(self, x):
        return conv1x1(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, stride: int = 1, kernel: int = 3):
        super().__init__()
        self.stride = stride
        self.weight = Parameter(kaiming(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel))
        self.bias = Parameter(np.zeros(c_out))

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride)


class BatchNorm2d(Module):
    def __init__(self, channels: int):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.state = BatchNormState(channels)
        self.register_buffer("running_mean", self.state, "running_mean")
        self.register_buffer("running_var", self.state, "running_var")

    def forward(self, x):
        return batch_norm2d(x, self.gamma, self.beta, self.state, self.bn_mode)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, zero_init: bool = False, bias: bool = True):
        super().__init__()
        w = np.zeros((d_out, d_in)) if zero_init else rng.uniform(-1, 1, (d_out, d_in)) / np.sqrt(d_in)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)

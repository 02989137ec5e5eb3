"""Network building blocks over (batch, time, channel) tensors.

Every layer draws its parameters from the generator handed to the
constructor, uniform in [-s, s] with s = 1/sqrt(fan_in), and exposes them
as a flat name -> Tensor mapping so checkpoints and optimizers never care
about structure.  Batch-norm additionally carries running statistics as
plain arrays, updated only in training mode.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, concat

__all__ = [
    "Conv1d",
    "Downsample",
    "downsample_geometry",
    "PWConv",
    "BatchNorm",
    "LSTMStack",
    "Affine",
    "MSCAM",
    "AFF",
    "IAFF",
    "global_avg_pool",
    "conv1d_op",
]


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(max(1, fan_in))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def conv1d_op(x: Tensor, w: Tensor, b: Tensor, stride: int) -> Tensor:
    """Valid cross-correlation of (B, L, C) with kernel (p, C, F)."""
    n_batch, length, c_in = x.shape
    p, c_kernel, _ = w.shape
    if c_kernel != c_in:
        raise ValueError(f"kernel expects {c_kernel} channels, input has {c_in}")
    if p > length:
        raise ValueError(f"kernel size {p} exceeds input length {length}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    l_out = (length - p) // stride + 1
    idx = np.arange(l_out)[:, None] * stride + np.arange(p)[None, :]
    cols = x.data[:, idx, :]  # (B, L_out, p, C)
    value = np.tensordot(cols, w.data, axes=([2, 3], [0, 1])) + b.data
    out = Tensor(value, parents=(x, w, b))

    def backward(g):
        if w.requires_grad:
            w._accumulate(np.tensordot(cols, g, axes=([0, 1], [0, 1])))
        if b.requires_grad:
            b._accumulate(g.sum(axis=(0, 1)))
        if x.requires_grad:
            grad_cols = np.tensordot(g, w.data, axes=([2], [2]))
            grad_x = np.zeros_like(x.data)
            np.add.at(grad_x, (slice(None), idx), grad_cols)
            x._accumulate(grad_x)

    out._backward = backward
    return out


class Conv1d:
    def __init__(self, kernel: int, c_in: int, c_out: int, stride: int, rng):
        self.kernel = kernel
        self.stride = stride
        self.w = _uniform(rng, (kernel, c_in, c_out), fan_in=kernel * c_in)
        self.b = _uniform(rng, (c_out,), fan_in=kernel * c_in)

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d_op(x, self.w, self.b, self.stride)

    def params(self):
        return {"w": self.w, "b": self.b}


def downsample_geometry(length: int, target: int = 10) -> tuple[int, int]:
    """Kernel size and stride mapping `length` inputs to exactly `target`.

    Starts from kernel round(0.1 (L-1)) and stride round(0.1 L), both at
    least 1, then moves the kernel as little as possible until the valid
    output count lands on target; ties prefer the smaller kernel.  For the
    few lengths where no kernel can reach the target with that stride
    (e.g. 15 or 26) the stride shrinks step by step, which always succeeds
    because stride 1 leaves kernel L - target + 1.
    """
    if length < target:
        raise ValueError(f"need at least {target} points, got {length}")
    p0 = max(1, round(0.1 * (length - 1)))
    r = max(1, round(0.1 * length))
    while r > 1 and length - (target - 1) * r < 1:
        r -= 1
    lo = max(1, length - target * r + 1)
    hi = length - (target - 1) * r
    p = min(range(lo, hi + 1), key=lambda q: (abs(q - p0), q))
    return p, r


class Downsample:
    """Strided conv layer that always emits ten time steps."""

    def __init__(self, length: int, c_in: int, c_out: int, rng, target: int = 10):
        kernel, stride = downsample_geometry(length, target)
        self.conv = Conv1d(kernel, c_in, c_out, stride, rng)
        self.length = length
        self.target = target

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.length:
            raise ValueError(f"layer built for length {self.length}, got {x.shape[1]}")
        return self.conv(x)

    def params(self):
        return self.conv.params()


class PWConv:
    """Pointwise (kernel 1) convolution: a shared affine map over channels."""

    def __init__(self, c_in: int, c_out: int, rng):
        self.w = _uniform(rng, (c_in, c_out), fan_in=c_in)
        self.b = _uniform(rng, (c_out,), fan_in=c_in)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b

    def params(self):
        return {"w": self.w, "b": self.b}


class BatchNorm:
    """Per-channel normalization over batch and time axes.

    Training mode normalizes with (and differentiates through) the batch
    moments and refreshes the running ones; inference mode uses the frozen
    running moments only.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if training:
            mean = x.mean(axis=(0, 1), keepdims=True)
            centered = x - mean
            var = (centered * centered).mean(axis=(0, 1), keepdims=True)
            self.running_mean += self.momentum * (mean.data.reshape(-1) - self.running_mean)
            self.running_var += self.momentum * (var.data.reshape(-1) - self.running_var)
            xhat = centered / ((var + self.eps) ** 0.5)
        else:
            xhat = (x - self.running_mean) / np.sqrt(self.running_var + self.eps)
        return xhat * self.gamma + self.beta

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class LSTMLayer:
    """Gate order (input, forget, cell, output); output is the hidden state."""

    def __init__(self, c_in: int, units: int, rng):
        self.units = units
        fan_in = c_in + units
        self.wx = _uniform(rng, (c_in, 4 * units), fan_in=fan_in)
        self.wh = _uniform(rng, (units, 4 * units), fan_in=fan_in)
        self.b = _uniform(rng, (4 * units,), fan_in=fan_in)

    def step(self, x_t: Tensor, h: Tensor, c: Tensor):
        u = self.units
        z = x_t @ self.wx + h @ self.wh + self.b
        gate_i = z[:, :u].sigmoid()
        gate_f = z[:, u : 2 * u].sigmoid()
        gate_g = z[:, 2 * u : 3 * u].tanh()
        gate_o = z[:, 3 * u :].sigmoid()
        c_next = gate_f * c + gate_i * gate_g
        h_next = gate_o * c_next.tanh()
        return h_next, c_next

    def __call__(self, x: Tensor) -> Tensor:
        n_batch, n_steps, _ = x.shape
        h = Tensor(np.zeros((n_batch, self.units)))
        c = Tensor(np.zeros((n_batch, self.units)))
        outputs = []
        for t in range(n_steps):
            h, c = self.step(x[:, t, :], h, c)
            outputs.append(h.reshape(n_batch, 1, self.units))
        return concat(outputs, axis=1)

    def params(self):
        return {"wx": self.wx, "wh": self.wh, "b": self.b}


class LSTMStack:
    def __init__(self, c_in: int, units: list, rng):
        self.layers = []
        width = c_in
        for u in units:
            self.layers.append(LSTMLayer(width, u, rng))
            width = u

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def params(self):
        return {
            f"l{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params().items()
        }


class Affine:
    def __init__(self, n_in: int, n_out: int, rng):
        self.w = _uniform(rng, (n_in, n_out), fan_in=n_in)
        self.b = _uniform(rng, (n_out,), fan_in=n_in)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b

    def params(self):
        return {"w": self.w, "b": self.b}


def global_avg_pool(x: Tensor) -> Tensor:
    """Collapse the time axis to one step, keeping channels."""
    return x.mean(axis=1, keepdims=True)


class _ContextPath:
    """PWConv -> BN -> ReLU -> PWConv -> BN bottleneck shared by both scales."""

    def __init__(self, channels: int, bottleneck: int, rng):
        self.pw1 = PWConv(channels, bottleneck, rng)
        self.bn1 = BatchNorm(bottleneck)
        self.pw2 = PWConv(bottleneck, channels, rng)
        self.bn2 = BatchNorm(channels)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return self.bn2(self.pw2(self.bn1(self.pw1(x), training).relu()), training)

    def params(self):
        out = {}
        for name, piece in (("pw1", self.pw1), ("bn1", self.bn1), ("pw2", self.pw2), ("bn2", self.bn2)):
            out.update({f"{name}.{k}": v for k, v in piece.params().items()})
        return out

    def buffers(self):
        out = {}
        for name, piece in (("bn1", self.bn1), ("bn2", self.bn2)):
            out.update({f"{name}.{k}": v for k, v in piece.buffers().items()})
        return out


class MSCAM:
    """Multi-scale channel attention: sigmoid of local plus global context."""

    def __init__(self, channels: int, rng, ratio: int = 4):
        if channels < 2:
            raise ValueError("attention needs at least two channels")
        bottleneck = max(1, channels // ratio)
        self.local = _ContextPath(channels, bottleneck, rng)
        self.glob = _ContextPath(channels, bottleneck, rng)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        local = self.local(x, training)
        pooled = self.glob(global_avg_pool(x), training)
        return (local + pooled).sigmoid()

    def params(self):
        out = {f"local.{k}": v for k, v in self.local.params().items()}
        out.update({f"global.{k}": v for k, v in self.glob.params().items()})
        return out

    def buffers(self):
        out = {f"local.{k}": v for k, v in self.local.buffers().items()}
        out.update({f"global.{k}": v for k, v in self.glob.buffers().items()})
        return out


def _check_same_shape(x: Tensor, y: Tensor) -> None:
    if x.shape != y.shape:
        raise ValueError(f"fusion inputs differ in shape: {x.shape} vs {y.shape}")


class AFF:
    """Attentional blend: weights from the attention map of the plain sum."""

    def __init__(self, channels: int, rng, ratio: int = 4):
        self.cam = MSCAM(channels, rng, ratio)

    def __call__(self, x: Tensor, y: Tensor, training: bool) -> Tensor:
        _check_same_shape(x, y)
        m = self.cam(x + y, training)
        return x * m + y * (1.0 - m)

    def params(self):
        return {f"cam.{k}": v for k, v in self.cam.params().items()}

    def buffers(self):
        return {f"cam.{k}": v for k, v in self.cam.buffers().items()}


class IAFF:
    """Two-stage fusion: an attentional integration feeds a second attention."""

    def __init__(self, channels: int, rng, ratio: int = 4):
        self.inner = MSCAM(channels, rng, ratio)
        self.outer = MSCAM(channels, rng, ratio)

    def __call__(self, x: Tensor, y: Tensor, training: bool) -> Tensor:
        _check_same_shape(x, y)
        m1 = self.inner(x + y, training)
        mixed = x * m1 + y * (1.0 - m1)
        m2 = self.outer(mixed, training)
        return x * m2 + y * (1.0 - m2)

    def params(self):
        out = {f"inner.{k}": v for k, v in self.inner.params().items()}
        out.update({f"outer.{k}": v for k, v in self.outer.params().items()})
        return out

    def buffers(self):
        out = {f"inner.{k}": v for k, v in self.inner.buffers().items()}
        out.update({f"outer.{k}": v for k, v in self.outer.buffers().items()})
        return out

"""The branched forecasting network and its on-disk checkpoint format.

Input windows carry the observable vector layout: population differences,
then upper-triangle real parts, then imaginary parts.  Each of the three
column groups gets its own convolutional downsampling to ten steps, a
small mixing convolution, and an LSTM stack; the real and imaginary branch
features merge elementwise and the result is fused with the diagonal
branch by two-stage channel attention before an affine head emits the
next observable vector.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .layers import IAFF, Affine, Conv1d, Downsample, LSTMStack, downsample_geometry

__all__ = ["ModelConfig", "ForecastNet", "save_checkpoint", "load_checkpoint"]

_MIX_KERNEL = 3


@dataclass(frozen=True)
class ModelConfig:
    window: int
    d_s: int
    conv_kernel: int
    conv_stride: int
    lstm_units: tuple
    seed: int

    def __post_init__(self):
        if self.d_s < 2:
            raise ValueError("need a system dimension of at least 2")
        if self.window < 10:
            raise ValueError("window must hold at least ten points")
        if not self.lstm_units:
            raise ValueError("need at least one LSTM layer")
        if self.lstm_units[-1] < 2:
            raise ValueError("final LSTM width must be >= 2 for channel attention")
        expected = downsample_geometry(self.window)
        if (self.conv_kernel, self.conv_stride) != expected:
            raise ValueError(
                f"conv geometry {(self.conv_kernel, self.conv_stride)} does not map "
                f"window {self.window} to ten steps; expected {expected}"
            )

    @classmethod
    def for_window(cls, window: int, d_s: int, lstm_units, seed: int) -> "ModelConfig":
        kernel, stride = downsample_geometry(window)
        return cls(
            window=window,
            d_s=d_s,
            conv_kernel=kernel,
            conv_stride=stride,
            lstm_units=tuple(int(u) for u in lstm_units),
            seed=seed,
        )

    @property
    def n_components(self) -> int:
        return self.d_s * self.d_s - 1

    def to_json(self) -> str:
        payload = {
            "window": self.window,
            "d_s": self.d_s,
            "conv_kernel": self.conv_kernel,
            "conv_stride": self.conv_stride,
            "lstm_units": list(self.lstm_units),
            "seed": self.seed,
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        raw = json.loads(text)
        return cls(
            window=raw["window"],
            d_s=raw["d_s"],
            conv_kernel=raw["conv_kernel"],
            conv_stride=raw["conv_stride"],
            lstm_units=tuple(raw["lstm_units"]),
            seed=raw["seed"],
        )


class _Branch:
    """Downsample to ten steps, mix, then recur over the short sequence."""

    def __init__(self, window: int, c_in: int, lstm_units, rng):
        self.down = Downsample(window, c_in, c_in, rng)
        self.mix = Conv1d(_MIX_KERNEL, c_in, c_in, 1, rng)
        self.lstm = LSTMStack(c_in, list(lstm_units), rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lstm(self.mix(self.down(x)))

    def params(self):
        out = {f"down.{k}": v for k, v in self.down.params().items()}
        out.update({f"mix.{k}": v for k, v in self.mix.params().items()})
        out.update({f"lstm.{k}": v for k, v in self.lstm.params().items()})
        return out


class ForecastNet:
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        d = config.d_s
        n_off = d * (d - 1) // 2
        self._splits = (d - 1, d - 1 + n_off)
        units = config.lstm_units
        self.diag = _Branch(config.window, d - 1, units, rng)
        self.off_re = _Branch(config.window, n_off, units, rng)
        self.off_im = _Branch(config.window, n_off, units, rng)
        self.fuse = IAFF(units[-1], rng)
        feature_len = (10 - _MIX_KERNEL + 1) * units[-1]
        self.head = Affine(feature_len, config.n_components, rng)

    def forward(self, window: Tensor, training: bool = False) -> Tensor:
        """(B, window, d_s^2 - 1) -> (B, d_s^2 - 1)."""
        if window.ndim != 3 or window.shape[1:] != (self.config.window, self.config.n_components):
            raise ValueError(
                f"expected (batch, {self.config.window}, {self.config.n_components}), "
                f"got {window.shape}"
            )
        a, b = self._splits
        z_diag = self.diag(window[:, :, :a])
        z_re = self.off_re(window[:, :, a:b])
        z_im = self.off_im(window[:, :, b:])
        fused = self.fuse(z_diag, z_re + z_im, training)
        n_batch = fused.shape[0]
        return self.head(fused.reshape(n_batch, -1))

    def predict(self, windows: np.ndarray) -> np.ndarray:
        """Inference on plain arrays with frozen statistics."""
        out = self.forward(Tensor(windows), training=False)
        return out.data

    def params(self) -> dict:
        out = {}
        for name, part in (
            ("diag", self.diag),
            ("off_re", self.off_re),
            ("off_im", self.off_im),
            ("fuse", self.fuse),
            ("head", self.head),
        ):
            out.update({f"{name}.{k}": v for k, v in part.params().items()})
        return out

    def buffers(self) -> dict:
        return {f"fuse.{k}": v for k, v in self.fuse.buffers().items()}

    def n_params(self) -> int:
        return sum(int(t.data.size) for t in self.params().values())

    def state_arrays(self) -> dict:
        """All learned state as plain arrays: parameters plus running stats."""
        out = {k: v.data for k, v in self.params().items()}
        out.update(self.buffers())
        return out

    def load_state(self, arrays: dict) -> None:
        own = self.state_arrays()
        if set(own) != set(arrays):
            missing = set(own) ^ set(arrays)
            raise ValueError(f"state does not match the architecture: {sorted(missing)[:4]}")
        for key, target in self.params().items():
            target.data = np.array(arrays[key], dtype=float).reshape(target.data.shape)
        for key, buf in self.buffers().items():
            buf[...] = np.asarray(arrays[key], dtype=float).reshape(buf.shape)

    def clone_state(self) -> dict:
        return {k: v.copy() for k, v in self.state_arrays().items()}


_CKPT_MAGIC = b"NMSSNET1"
_CKPT_VERSION = 1


def save_checkpoint(path, model: ForecastNet) -> None:
    """Versioned binary: header, JSON config, then named float64 blocks."""
    blob = bytearray()
    blob += _CKPT_MAGIC
    blob += struct.pack("<I", _CKPT_VERSION)
    cfg = model.config.to_json().encode()
    blob += struct.pack("<I", len(cfg))
    blob += cfg
    state = model.state_arrays()
    blob += struct.pack("<I", len(state))
    for name in sorted(state):
        raw = name.encode()
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        blob += struct.pack("<H", len(raw))
        blob += raw
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
        blob += arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path) -> ForecastNet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", blob, 12)
    offset = 16
    config = ModelConfig.from_json(blob[offset : offset + cfg_len].decode())
    offset += cfg_len
    (n_blocks,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    arrays = {}
    for _ in range(n_blocks):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode()
        offset += name_len
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, offset) if ndim else ()
        offset += 4 * ndim
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += 8 * count
    model = ForecastNet(config)
    model.load_state(arrays)
    return model

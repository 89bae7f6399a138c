"""Dense NCHW tensors and the baseline numeric primitives.

Values are stored as float32. Reductions (convolution sums, softmax) are
carried out in float64 and rounded once on the way out, so results do not
depend on how a reduction is vectorised.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

DTYPE = np.float32
TNSR_MAGIC = "TNSR1"


@dataclass(frozen=True, eq=False)
class Tensor:
    """Immutable rank-4 ``(batch, channels, height, width)`` array."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=DTYPE, copy=True, order="C")
        if arr.ndim != 4:
            raise ConfigError(f"tensor must be rank 4 (NCHW), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ConfigError(f"all tensor dims must be >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ConfigError("tensor contains NaN or Inf")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]

    def __add__(self, other: Tensor) -> Tensor:
        if self.shape != other.shape:
            raise ConfigError(f"cannot add tensors of shape {self.shape} and {other.shape}")
        return Tensor(self.data + other.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    @classmethod
    def full(cls, shape, value) -> Tensor:
        return cls(np.full(shape, value, dtype=DTYPE))

    @classmethod
    def random(cls, shape, seed=0, low=-1.0, high=1.0) -> Tensor:
        rng = np.random.default_rng(seed)
        return cls(rng.uniform(low, high, size=shape))

    def equals(self, other: Tensor) -> bool:
        """Bitwise equality (shape and every float32 value)."""
        return self.shape == other.shape and np.array_equal(
            self.data.view(np.uint32), other.data.view(np.uint32)
        )


@dataclass(frozen=True, eq=False)
class ConvSpec:
    """Square-kernel, stride-1, zero "same"-padded convolution."""

    in_channels: int
    out_channels: int
    kernel: int
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("conv channel counts must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"conv kernel must be odd and >= 1, got {self.kernel}")
        w = np.asarray(self.weight, dtype=DTYPE)
        expected = self.out_channels * self.in_channels * self.kernel**2
        if w.size != expected:
            raise ConfigError(f"conv weight has {w.size} values, expected {expected}")
        w = w.reshape(self.out_channels, self.in_channels, self.kernel, self.kernel).copy()
        b = np.asarray(self.bias, dtype=DTYPE).reshape(-1).copy()
        if b.size != self.out_channels:
            raise ConfigError(f"conv bias has {b.size} values, expected {self.out_channels}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ConfigError("conv parameters must be finite")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def padding(self) -> int:
        return self.kernel // 2

    @property
    def n_params(self) -> int:
        return self.weight.size + self.bias.size

    @classmethod
    def init(cls, in_channels, out_channels, kernel=1, rng=None, bias=True) -> ConvSpec:
        """Seeded uniform init in ``[-b, b]`` with ``b = 1/sqrt(fan_in)``."""
        if rng is None or isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(rng)
        bound = 1.0 / np.sqrt(in_channels * kernel * kernel)
        w = rng.uniform(-bound, bound, size=(out_channels, in_channels, kernel, kernel))
        b = rng.uniform(-bound, bound, size=out_channels) if bias else np.zeros(out_channels)
        return cls(in_channels, out_channels, kernel, w, b)

    @classmethod
    def zeros(cls, in_channels, out_channels, kernel=1, bias=0.0) -> ConvSpec:
        w = np.zeros((out_channels, in_channels, kernel, kernel))
        return cls(in_channels, out_channels, kernel, w, np.broadcast_to(bias, (out_channels,)))


def conv2d(x: Tensor, spec: ConvSpec) -> Tensor:
    if x.channels != spec.in_channels:
        raise ConfigError(
            f"conv expects {spec.in_channels} input channels, got {x.channels}"
        )
    k, p = spec.kernel, spec.padding
    n, _, h, w = x.shape
    xp = np.pad(x.data.astype(np.float64), ((0, 0), (0, 0), (p, p), (p, p)))
    wt = spec.weight.astype(np.float64)
    out = np.zeros((n, spec.out_channels, h, w))
    for dy in range(k):
        for dx in range(k):
            window = xp[:, :, dy:dy + h, dx:dx + w]
            out += np.einsum("oc,nchw->nohw", wt[:, :, dy, dx], window)
    out += spec.bias.astype(np.float64)[None, :, None, None]
    return Tensor(out)


def softmax_group(x: Tensor, group_size: int) -> Tensor:
    """Softmax over each contiguous block of ``group_size`` channels."""
    if group_size < 1 or x.channels % group_size:
        raise ConfigError(
            f"{x.channels} channels are not divisible into groups of {group_size}"
        )
    n, c, h, w = x.shape
    z = x.data.astype(np.float64).reshape(n, c // group_size, group_size, h, w)
    z = np.exp(z - z.max(axis=2, keepdims=True))
    z /= z.sum(axis=2, keepdims=True)
    return Tensor(z.reshape(n, c, h, w))


def nearest_upsample(x: Tensor, scale: int) -> Tensor:
    if int(scale) != scale or scale < 1:
        raise ConfigError(f"upsample scale must be a positive integer, got {scale}")
    scale = int(scale)
    return Tensor(np.repeat(np.repeat(x.data, scale, axis=2), scale, axis=3))


def relu(x: Tensor) -> Tensor:
    return Tensor(np.maximum(x.data, 0))


def avg_pool2(x: Tensor) -> Tensor:
    if x.height % 2 or x.width % 2:
        raise ConfigError(f"2x average pool needs even spatial dims, got {x.shape}")
    n, c, h, w = x.shape
    d = x.data.astype(np.float64).reshape(n, c, h // 2, 2, w // 2, 2)
    return Tensor(d.mean(axis=(3, 5)))


def concat(tensors) -> Tensor:
    tensors = list(tensors)
    return Tensor(np.concatenate([t.data for t in tensors], axis=1))


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    return Tensor(x.data[:, start:stop])


# -- TNSR1 file format ------------------------------------------------------

def tensor_to_bytes(t: Tensor) -> bytes:
    header = f"{TNSR_MAGIC} {t.batch} {t.channels} {t.height} {t.width}\n".encode("ascii")
    return header + t.data.astype("<f4").tobytes(order="C")


def tensor_from_bytes(raw: bytes, source="<bytes>") -> Tensor:
    nl = raw.find(b"\n")
    if nl < 0:
        raise DataError("missing TNSR1 header line", source, 1)
    try:
        fields = raw[:nl].decode("ascii").split()
    except UnicodeDecodeError:
        raise DataError("header is not ASCII", source, 1) from None
    if len(fields) != 5 or fields[0] != TNSR_MAGIC:
        raise DataError(f"bad header {raw[:nl]!r}, expected 'TNSR1 b c h w'", source, 1)
    try:
        shape = tuple(int(f) for f in fields[1:])
    except ValueError:
        raise DataError(f"non-integer dims in header {raw[:nl]!r}", source, 1) from None
    if min(shape) < 1:
        raise DataError(f"dims must be >= 1, got {shape}", source, 1)
    body = raw[nl + 1:]
    expected = int(np.prod(shape)) * 4
    if len(body) != expected:
        raise DataError(f"payload has {len(body)} bytes, header implies {expected}", source)
    arr = np.frombuffer(body, dtype="<f4").reshape(shape)
    try:
        return Tensor(arr)
    except ConfigError as exc:
        raise DataError(str(exc), source) from None


def write_tensor(path, t: Tensor) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def read_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read(), os.fspath(path))


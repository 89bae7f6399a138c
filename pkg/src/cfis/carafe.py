"""Content-aware feature reassembly (CARAFE) upsampling.

Kernel prediction runs a linear 1x1 channel compressor, a
``k_up - 2`` content encoder emitting ``scale**2 * k_up**2`` channels, and a
softmax over each ``k_up**2`` group. Encoder channel ``s * k_up**2 + q``
holds tap ``q`` of the kernel for sub-position ``s = i * scale + j`` of each
output block, so the groups are contiguous and a pixel shuffle spreads them
over the ``scale * H x scale * W`` output grid. Tap ``q = (n + r) * k_up +
(m + r)`` weights the source pixel at row offset ``n`` and column offset
``m``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import ConvSpec, Tensor, conv2d, softmax_group

DEFAULT_K_UP = 5
DEFAULT_C_M = 64


@dataclass(frozen=True, eq=False)
class CarafeConfig:
    channels: int
    scale: int
    k_up: int
    compressor: ConvSpec
    encoder: ConvSpec

    def __post_init__(self):
        if self.scale < 1 or int(self.scale) != self.scale:
            raise ConfigError(f"scale must be a positive integer, got {self.scale}")
        if self.k_up < 3 or self.k_up % 2 == 0:
            raise ConfigError(f"k_up must be odd and >= 3, got {self.k_up}")
        comp, enc = self.compressor, self.encoder
        if comp.kernel != 1 or comp.in_channels != self.channels:
            raise ConfigError("compressor must be a 1x1 conv over the input channels")
        if enc.kernel != self.k_encoder:
            raise ConfigError(f"encoder kernel must be k_up - 2 = {self.k_encoder}, got {enc.kernel}")
        if enc.in_channels != comp.out_channels:
            raise ConfigError("encoder input channels must equal the compressed channel count")
        if enc.out_channels != self.c_up:
            raise ConfigError(f"encoder must emit scale^2 * k_up^2 = {self.c_up} channels")

    @property
    def k_encoder(self) -> int:
        return self.k_up - 2

    @property
    def c_m(self) -> int:
        return self.compressor.out_channels

    @property
    def c_up(self) -> int:
        return self.scale**2 * self.k_up**2

    @property
    def radius(self) -> int:
        return self.k_up // 2

    @classmethod
    def init(cls, channels, scale=2, k_up=DEFAULT_K_UP, c_m=DEFAULT_C_M, rng=None) -> CarafeConfig:
        if rng is None or isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(rng)
        comp = ConvSpec.init(channels, c_m, 1, rng)
        enc = ConvSpec.init(c_m, scale**2 * k_up**2, k_up - 2, rng)
        return cls(channels, scale, k_up, comp, enc)

    @classmethod
    def one_hot(cls, channels, scale=2, k_up=DEFAULT_K_UP, c_m=DEFAULT_C_M, rng=None) -> CarafeConfig:
        """Random compressor, encoder forced to exact centre-tap one-hot kernels."""
        cfg = cls.init(channels, scale, k_up, c_m, rng)
        return cls(channels, scale, k_up, cfg.compressor, one_hot_encoder(c_m, scale, k_up))


def one_hot_encoder(c_m, scale, k_up, margin=1e4) -> ConvSpec:
    """Zero-weight encoder whose bias puts ``margin`` on every centre tap.

    ``exp(-margin)`` underflows to 0, so the softmax yields exact one-hot
    kernels whatever the input.
    """
    k2 = k_up * k_up
    c_up = scale**2 * k2
    bias = np.zeros(c_up)
    bias[k2 // 2::k2] = margin
    return ConvSpec(c_m, c_up, k_up - 2, np.zeros((c_up, c_m, k_up - 2, k_up - 2)), bias)


@dataclass(frozen=True, eq=False)
class ReassemblyKernelField:
    """Per-output-location reassembly kernels.

    ``weights`` has shape ``(batch, k_up * k_up, scale * H, scale * W)``.
    """

    weights: np.ndarray
    k_up: int

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float32)
        if w.ndim != 4 or w.shape[1] != self.k_up**2:
            raise ConfigError(f"kernel field must be (N, k_up^2, H', W'), got {w.shape}")
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def out_size(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]

    def kernel_at(self, b, u, v) -> np.ndarray:
        return self.weights[b, :, u, v].reshape(self.k_up, self.k_up)


def pixel_shuffle_kernels(groups: np.ndarray, scale: int, k_up: int) -> np.ndarray:
    """``(N, scale^2 * k^2, H, W)`` -> ``(N, k^2, scale*H, scale*W)``."""
    n, _, h, w = groups.shape
    k2 = k_up * k_up
    g = groups.reshape(n, scale, scale, k2, h, w)
    # out[n, q, y*scale + i, x*scale + j] = g[n, i, j, q, y, x]
    return g.transpose(0, 3, 4, 1, 5, 2).reshape(n, k2, h * scale, w * scale)


def predict_kernels(x: Tensor, cfg: CarafeConfig) -> ReassemblyKernelField:
    if x.channels != cfg.channels:
        raise ConfigError(f"CARAFE configured for {cfg.channels} channels, got {x.channels}")
    compressed = conv2d(x, cfg.compressor)
    logits = conv2d(compressed, cfg.encoder)
    normed = softmax_group(logits, cfg.k_up**2)
    return ReassemblyKernelField(pixel_shuffle_kernels(normed.data, cfg.scale, cfg.k_up), cfg.k_up)


def reassemble(x: Tensor, kernels: ReassemblyKernelField, cfg: CarafeConfig) -> Tensor:
    """Weighted ``k_up x k_up`` neighbourhood sum with one kernel per output pixel.

    The same kernel is applied to every channel; neighbours outside the
    input contribute zero.
    """
    s, k, r = cfg.scale, cfg.k_up, cfg.radius
    n, c, h, w = x.shape
    if kernels.k_up != k:
        raise ConfigError(f"kernel field has k_up={kernels.k_up}, config has {k}")
    if kernels.weights.shape[0] != n or kernels.out_size != (s * h, s * w):
        raise ConfigError(
            f"kernel field shape {kernels.weights.shape} does not fit input {x.shape} at scale {s}"
        )
    xp = np.pad(x.data.astype(np.float64), ((0, 0), (0, 0), (r, r), (r, r)))
    wt = kernels.weights.astype(np.float64)
    out = np.zeros((n, c, s * h, s * w))
    # taps accumulate in row-major (n, m) order
    for dn in range(k):
        for dm in range(k):
            src = xp[:, :, dn:dn + h, dm:dm + w]
            src = np.repeat(np.repeat(src, s, axis=2), s, axis=3)
            out += wt[:, None, dn * k + dm] * src
    return Tensor(out)


def carafe_upsample(x: Tensor, cfg: CarafeConfig) -> Tensor:
    return reassemble(x, predict_kernels(x, cfg), cfg)

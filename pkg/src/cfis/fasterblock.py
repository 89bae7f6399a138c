"""Partial convolution, FasterBlock, C2f blocks and the analytic cost model.

Two C2f flavours share one topology (1x1 expand, split in halves, chain of
blocks on the second half, concat everything, 1x1 compress):

* ``C2fSpec(kind="fnb")`` chains FasterBlocks (PConv 3x3 -> 1x1 expand 2x
  -> ReLU -> 1x1 project, plus residual);
* ``C2fSpec(kind="standard")`` chains the usual two-3x3 residual
  bottleneck, used as the baseline for cost comparisons.

No normalisation layers are modelled; the 1x1 expand/compress convs are
linear.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .carafe import CarafeConfig
from .errors import ConfigError
from .tensor import ConvSpec, Tensor, channel_slice, concat, conv2d, relu

FIRST = "first"
LAST = "last"


def _rng(rng):
    if rng is None or isinstance(rng, (int, np.integer)):
        return np.random.default_rng(rng)
    return rng


def default_partial_channels(c: int, ratio=Fraction(1, 4)) -> int:
    return max(1, int(c * ratio))


@dataclass(frozen=True, eq=False)
class PConvSpec:
    channels: int
    conv: ConvSpec
    placement: str = FIRST

    def __post_init__(self):
        cp = self.conv.in_channels
        if not 1 <= cp <= self.channels:
            raise ConfigError(f"partial channel count must be in [1, {self.channels}], got {cp}")
        if self.conv.out_channels != cp:
            raise ConfigError("partial conv must map c_p channels to c_p channels")
        if self.placement not in (FIRST, LAST):
            raise ConfigError(f"placement must be 'first' or 'last', got {self.placement!r}")

    @property
    def partial_channels(self) -> int:
        return self.conv.in_channels

    @property
    def ratio(self) -> Fraction:
        return Fraction(self.partial_channels, self.channels)

    @property
    def kernel(self) -> int:
        return self.conv.kernel

    @property
    def touched(self) -> slice:
        cp = self.partial_channels
        if self.placement == FIRST:
            return slice(0, cp)
        return slice(self.channels - cp, self.channels)

    @classmethod
    def init(cls, channels, partial_channels=None, kernel=3, placement=FIRST, rng=None):
        cp = partial_channels or default_partial_channels(channels)
        return cls(channels, ConvSpec.init(cp, cp, kernel, _rng(rng)), placement)


@dataclass(frozen=True, eq=False)
class FasterBlockSpec:
    pconv: PConvSpec
    expand: ConvSpec
    project: ConvSpec

    def __post_init__(self):
        c = self.pconv.channels
        if self.expand.in_channels != c or self.expand.kernel != 1:
            raise ConfigError("FasterBlock expand must be a 1x1 conv over the block channels")
        if self.project.in_channels != self.expand.out_channels or self.project.out_channels != c:
            raise ConfigError("FasterBlock project must map the expanded width back to the block width")

    @property
    def channels(self) -> int:
        return self.pconv.channels

    @classmethod
    def init(cls, channels, expansion=2, partial_channels=None, rng=None):
        rng = _rng(rng)
        return cls(
            PConvSpec.init(channels, partial_channels, 3, FIRST, rng),
            ConvSpec.init(channels, expansion * channels, 1, rng),
            ConvSpec.init(expansion * channels, channels, 1, rng),
        )


@dataclass(frozen=True, eq=False)
class BottleneckSpec:
    """Plain residual bottleneck: 3x3 -> ReLU -> 3x3, plus residual."""

    conv1: ConvSpec
    conv2: ConvSpec

    def __post_init__(self):
        c = self.conv1.in_channels
        if self.conv1.out_channels != c or self.conv2.in_channels != c or self.conv2.out_channels != c:
            raise ConfigError("bottleneck convs must preserve the channel count")

    @property
    def channels(self) -> int:
        return self.conv1.in_channels

    @classmethod
    def init(cls, channels, rng=None):
        rng = _rng(rng)
        return cls(ConvSpec.init(channels, channels, 3, rng), ConvSpec.init(channels, channels, 3, rng))


@dataclass(frozen=True, eq=False)
class C2fSpec:
    in_channels: int
    out_channels: int
    expand: ConvSpec
    blocks: tuple = ()
    compress: ConvSpec = None
    kind: str = "fnb"

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if self.kind not in ("fnb", "standard"):
            raise ConfigError(f"unknown C2f kind {self.kind!r}")
        if self.expand.in_channels != self.in_channels or self.expand.kernel != 1:
            raise ConfigError("C2f expand must be a 1x1 conv over the input channels")
        if self.expand.out_channels % 2:
            raise ConfigError(f"expanded channel count must be even, got {self.expand.out_channels}")
        hidden = self.hidden
        block_type = FasterBlockSpec if self.kind == "fnb" else BottleneckSpec
        for b in self.blocks:
            if not isinstance(b, block_type) or b.channels != hidden:
                raise ConfigError(f"every block must be a {block_type.__name__} over {hidden} channels")
        c = self.compress
        if c is None or c.kernel != 1 or c.in_channels != (2 + len(self.blocks)) * hidden:
            raise ConfigError(f"compress must be 1x1 over {(2 + len(self.blocks)) * hidden} channels")
        if c.out_channels != self.out_channels:
            raise ConfigError("compress must emit out_channels")

    @property
    def hidden(self) -> int:
        return self.expand.out_channels // 2

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @classmethod
    def init(cls, in_channels, out_channels, n_blocks=1, kind="fnb", hidden=None, rng=None):
        """Seeded spec; ``hidden`` defaults to ``out_channels`` so the expand
        conv emits twice the output width."""
        rng = _rng(rng)
        hidden = hidden or out_channels
        expand = ConvSpec.init(in_channels, 2 * hidden, 1, rng)
        if kind == "fnb":
            blocks = [FasterBlockSpec.init(hidden, rng=rng) for _ in range(n_blocks)]
        else:
            blocks = [BottleneckSpec.init(hidden, rng=rng) for _ in range(n_blocks)]
        compress = ConvSpec.init((2 + n_blocks) * hidden, out_channels, 1, rng)
        return cls(in_channels, out_channels, expand, blocks, compress, kind)


# C2f_FNB spec from the block's own point of view
C2fFnbSpec = C2fSpec


def pconv(x: Tensor, spec: PConvSpec) -> Tensor:
    if x.channels != spec.channels:
        raise ConfigError(f"PConv expects {spec.channels} channels, got {x.channels}")
    sl = spec.touched
    part = conv2d(channel_slice(x, sl.start, sl.stop), spec.conv)
    out = x.data.copy()
    out[:, sl] = part.data
    return Tensor(out)


def faster_block(x: Tensor, spec: FasterBlockSpec) -> Tensor:
    y = pconv(x, spec.pconv)
    y = relu(conv2d(y, spec.expand))
    y = conv2d(y, spec.project)
    return x + y


def bottleneck(x: Tensor, spec: BottleneckSpec) -> Tensor:
    y = relu(conv2d(x, spec.conv1))
    return x + conv2d(y, spec.conv2)


def c2f(x: Tensor, spec: C2fSpec) -> Tensor:
    if x.channels != spec.in_channels:
        raise ConfigError(f"C2f expects {spec.in_channels} channels, got {x.channels}")
    block_fn = faster_block if spec.kind == "fnb" else bottleneck
    y = conv2d(x, spec.expand)
    h = spec.hidden
    parts = [channel_slice(y, 0, h), channel_slice(y, h, 2 * h)]
    for b in spec.blocks:
        parts.append(block_fn(parts[-1], b))
    return conv2d(concat(parts), spec.compress)


def c2f_fnb(x: Tensor, spec: C2fSpec) -> Tensor:
    if spec.kind != "fnb":
        raise ConfigError("c2f_fnb needs a spec built from FasterBlocks")
    return c2f(x, spec)


# -- cost accounting -----------------------------------------------------------

def flops_pconv(h: int, w: int, k: int, c: int, c_p: int) -> int:
    """Multiply-accumulates of a c_p -> c_p k x k conv over an h x w map."""
    return h * w * k * k * c_p * c_p


def flops_conv(h: int, w: int, k: int, c: int) -> int:
    return flops_pconv(h, w, k, c, c)


@dataclass
class LayerCost:
    name: str
    macs: int
    params: int

    @property
    def flops(self) -> int:
        return 2 * self.macs

    def to_dict(self):
        return {"name": self.name, "flops": self.flops, "params": self.params}


@dataclass
class CostReport:
    """Analytic cost; FLOPs are reported as 2 x multiply-accumulates."""

    layers: list = field(default_factory=list)

    @property
    def total_flops(self) -> int:
        return sum(layer.flops for layer in self.layers)

    @property
    def total_params(self) -> int:
        return sum(layer.params for layer in self.layers)

    def extend(self, other: CostReport, prefix="") -> CostReport:
        for layer in other.layers:
            self.layers.append(LayerCost(prefix + layer.name, layer.macs, layer.params))
        return self

    def to_dict(self):
        return {
            "total_flops": self.total_flops,
            "total_params": self.total_params,
            "layers": [layer.to_dict() for layer in self.layers],
        }


def _conv_layer(name, spec: ConvSpec, h, w) -> LayerCost:
    macs = h * w * spec.kernel**2 * spec.in_channels * spec.out_channels
    return LayerCost(name, macs, spec.n_params)


@functools.singledispatch
def count_params(spec, h: int = 1, w: int = 1) -> CostReport:
    """Per-layer weight+bias counts and MACs at an ``h x w`` input map.

    ``h`` and ``w`` only affect the FLOPs column.
    """
    raise ConfigError(f"no cost model for {type(spec).__name__}")


@count_params.register
def _(spec: ConvSpec, h: int = 1, w: int = 1) -> CostReport:
    return CostReport([_conv_layer("conv", spec, h, w)])


@count_params.register
def _(spec: PConvSpec, h: int = 1, w: int = 1) -> CostReport:
    c = spec.conv
    macs = flops_pconv(h, w, c.kernel, spec.channels, spec.partial_channels)
    return CostReport([LayerCost("pconv", macs, c.n_params)])


@count_params.register
def _(spec: FasterBlockSpec, h: int = 1, w: int = 1) -> CostReport:
    report = count_params(spec.pconv, h, w)
    report.layers.append(_conv_layer("expand", spec.expand, h, w))
    report.layers.append(_conv_layer("project", spec.project, h, w))
    return report


@count_params.register
def _(spec: BottleneckSpec, h: int = 1, w: int = 1) -> CostReport:
    return CostReport([_conv_layer("conv1", spec.conv1, h, w), _conv_layer("conv2", spec.conv2, h, w)])


@count_params.register
def _(spec: C2fSpec, h: int = 1, w: int = 1) -> CostReport:
    report = CostReport([_conv_layer("expand", spec.expand, h, w)])
    for i, b in enumerate(spec.blocks):
        report.extend(count_params(b, h, w), prefix=f"block{i}.")
    report.layers.append(_conv_layer("compress", spec.compress, h, w))
    return report


@count_params.register
def _(spec: CarafeConfig, h: int = 1, w: int = 1) -> CostReport:
    s = spec.scale
    reassembly_macs = (s * h) * (s * w) * spec.k_up**2 * spec.channels
    return CostReport([
        _conv_layer("compressor", spec.compressor, h, w),
        _conv_layer("encoder", spec.encoder, h, w),
        LayerCost("reassembly", reassembly_macs, 0),
    ])


def carafe_encoder_weights(k_encoder: int, c_m: int, c_up: int) -> int:
    return k_encoder**2 * c_m * c_up

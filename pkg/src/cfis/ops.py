"""Named, seeded operator instances for benchmarking and the CLI."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .carafe import DEFAULT_C_M, DEFAULT_K_UP, CarafeConfig, carafe_upsample
from .errors import ConfigError
from .fasterblock import (
    C2fSpec,
    CostReport,
    FasterBlockSpec,
    LayerCost,
    PConvSpec,
    c2f,
    count_params,
    faster_block,
    pconv,
)
from .tensor import ConvSpec, conv2d, nearest_upsample


@dataclass
class Operator:
    name: str
    fn: Callable
    cost: Callable  # (h, w) -> CostReport
    baseline: str | None = None


def _nearest(channels, scale=2, **_):
    return Operator(
        "nearest",
        lambda x: nearest_upsample(x, scale),
        lambda h, w: CostReport([LayerCost("nearest", 0, 0)]),
    )


def _carafe(channels, scale=2, k_up=DEFAULT_K_UP, c_m=DEFAULT_C_M, rng=None, **_):
    cfg = CarafeConfig.init(channels, scale, k_up, c_m, rng)
    return Operator("carafe", lambda x: carafe_upsample(x, cfg), lambda h, w: count_params(cfg, h, w), "nearest")


def _conv(channels, rng=None, **_):
    spec = ConvSpec.init(channels, channels, 3, rng)
    return Operator("conv", lambda x: conv2d(x, spec), lambda h, w: count_params(spec, h, w))


def _pconv(channels, rng=None, **_):
    spec = PConvSpec.init(channels, rng=rng)
    return Operator("pconv", lambda x: pconv(x, spec), lambda h, w: count_params(spec, h, w), "conv")


def _faster_block(channels, rng=None, **_):
    spec = FasterBlockSpec.init(channels, rng=rng)
    return Operator("faster_block", lambda x: faster_block(x, spec), lambda h, w: count_params(spec, h, w))


def _c2f(kind):
    def build(channels, n_blocks=1, rng=None, **_):
        spec = C2fSpec.init(channels, channels, n_blocks, kind, rng=rng)
        baseline = "c2f_standard" if kind == "fnb" else None
        return Operator(f"c2f_{kind}", lambda x: c2f(x, spec), lambda h, w: count_params(spec, h, w), baseline)
    return build


OPERATORS = {
    "nearest": _nearest,
    "carafe": _carafe,
    "conv": _conv,
    "pconv": _pconv,
    "faster_block": _faster_block,
    "c2f_fnb": _c2f("fnb"),
    "c2f_standard": _c2f("standard"),
}


def build_operator(name: str, channels: int, seed: int = 0, **kwargs) -> Operator:
    try:
        factory = OPERATORS[name]
    except KeyError:
        raise ConfigError(f"unknown operator {name!r}; choose from {', '.join(OPERATORS)}") from None
    return factory(channels, rng=np.random.default_rng(seed), **kwargs)

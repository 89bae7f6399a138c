"""Two-level FPN/PAN micro detector built from C2f blocks and CARAFE.

Layout (``H x W`` input, widths ``c1, c2, c3``)::

    stem     3x3 conv -> ReLU                              H
    p1       3x3 conv -> avgpool2 -> ReLU -> C2f(c2)       H/2
    p2       3x3 conv -> avgpool2 -> ReLU -> C2f(c3)       H/4
    top-down upsample(p2) ++ p1 -> C2f(c2)                 H/2
    bottom-up 3x3 conv -> avgpool2 -> ReLU ++ p2 -> C2f(c3) H/4
    head     1x1 conv -> 5 + n_classes                     H/4

Head channels are ``(tx, ty, tw, th, objectness, class logits...)``.

Weights on disk: one TNSR1 file per tensor, ``<layer>.weight.tnsr`` with
shape ``(out, in, k, k)`` and ``<layer>.bias.tnsr`` with shape
``(1, out, 1, 1)``, next to a ``config.json`` holding :class:`MicroNetConfig`.
Layer names are the keys of :func:`named_convs`.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .boxloss import BBox
from .carafe import DEFAULT_K_UP, CarafeConfig, carafe_upsample, one_hot_encoder
from .errors import ConfigError
from .evalkit import Detection
from .fasterblock import (
    BottleneckSpec,
    C2fSpec,
    CostReport,
    FasterBlockSpec,
    LayerCost,
    PConvSpec,
    c2f,
    count_params,
    default_partial_channels,
)
from .tensor import (
    ConvSpec,
    Tensor,
    avg_pool2,
    concat,
    conv2d,
    nearest_upsample,
    read_tensor,
    relu,
    write_tensor,
)

MAX_WIDTH = 64
LOG_SIZE_CLIP = 10.0


@dataclass(frozen=True)
class MicroNetConfig:
    in_channels: int = 3
    widths: tuple = (16, 32, 64)
    n_classes: int = 7
    block: str = "fnb"
    upsampler: str = "carafe"
    n_blocks: int = 1
    k_up: int = DEFAULT_K_UP
    c_m: int = 16

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) != 3 or not all(1 <= w <= MAX_WIDTH for w in self.widths):
            raise ConfigError(f"widths must be three values in [1, {MAX_WIDTH}], got {self.widths}")
        if self.n_classes < 1:
            raise ConfigError("n_classes must be >= 1")
        if self.block not in ("fnb", "standard"):
            raise ConfigError(f"block must be 'fnb' or 'standard', got {self.block!r}")
        if self.upsampler not in ("nearest", "carafe"):
            raise ConfigError(f"upsampler must be 'nearest' or 'carafe', got {self.upsampler!r}")

    @property
    def head_channels(self) -> int:
        return 5 + self.n_classes


@dataclass(frozen=True, eq=False)
class MicroNetSpec:
    config: MicroNetConfig
    stem: ConvSpec
    down1: ConvSpec
    stage1: C2fSpec
    down2: ConvSpec
    stage2: C2fSpec
    upsampler: CarafeConfig | None
    fuse_td: C2fSpec
    down3: ConvSpec
    fuse_bu: C2fSpec
    head: ConvSpec

    def __post_init__(self):
        c1, c2, c3 = self.config.widths
        if (self.upsampler is None) != (self.config.upsampler == "nearest"):
            raise ConfigError("upsampler spec does not match config")
        if self.upsampler is not None and (self.upsampler.channels != c3 or self.upsampler.scale != 2):
            raise ConfigError("CARAFE must upsample the deep features by 2")
        if self.fuse_td.in_channels != c2 + c3 or self.fuse_bu.in_channels != c2 + c3:
            raise ConfigError("fusion blocks must take the concatenated pyramid widths")
        if self.head.out_channels != self.config.head_channels:
            raise ConfigError(f"head must emit 5 + n_classes = {self.config.head_channels} channels")


def _seeded(seed):
    def make(name, cin, cout, k):
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        return ConvSpec.init(cin, cout, k, rng)
    return make


def _zeros(name, cin, cout, k):
    return ConvSpec.zeros(cin, cout, k)


def _c2f(make, prefix, cin, cout, n_blocks, kind) -> C2fSpec:
    hidden = cout
    expand = make(f"{prefix}.expand", cin, 2 * hidden, 1)
    blocks = []
    for i in range(n_blocks):
        p = f"{prefix}.block{i}"
        if kind == "fnb":
            cp = default_partial_channels(hidden)
            blocks.append(FasterBlockSpec(
                PConvSpec(hidden, make(f"{p}.pconv", cp, cp, 3)),
                make(f"{p}.expand", hidden, 2 * hidden, 1),
                make(f"{p}.project", 2 * hidden, hidden, 1),
            ))
        else:
            blocks.append(BottleneckSpec(make(f"{p}.conv1", hidden, hidden, 3), make(f"{p}.conv2", hidden, hidden, 3)))
    compress = make(f"{prefix}.compress", (2 + n_blocks) * hidden, cout, 1)
    return C2fSpec(cin, cout, expand, blocks, compress, kind)


def build_micronet(config: MicroNetConfig, seed: int = 0, weights="seeded", carafe_one_hot=False) -> MicroNetSpec:
    """Assemble a spec. ``weights`` is ``"seeded"``, ``"zeros"`` or a
    callable ``(name, cin, cout, k) -> ConvSpec``.

    Each layer draws from its own name-keyed stream, so changing the
    upsampler or block type leaves every other layer's weights untouched.
    """
    if weights == "seeded":
        make = _seeded(seed)
    elif weights == "zeros":
        make = _zeros
    else:
        make = weights
    cfg = config
    c1, c2, c3 = cfg.widths
    up = None
    if cfg.upsampler == "carafe":
        comp = make("up.compressor", c3, cfg.c_m, 1)
        c_up = 4 * cfg.k_up**2
        if carafe_one_hot:
            enc = one_hot_encoder(cfg.c_m, 2, cfg.k_up)
        else:
            enc = make("up.encoder", cfg.c_m, c_up, cfg.k_up - 2)
        up = CarafeConfig(c3, 2, cfg.k_up, comp, enc)
    return MicroNetSpec(
        cfg,
        stem=make("stem", cfg.in_channels, c1, 3),
        down1=make("down1", c1, c2, 3),
        stage1=_c2f(make, "stage1", c2, c2, cfg.n_blocks, cfg.block),
        down2=make("down2", c2, c3, 3),
        stage2=_c2f(make, "stage2", c3, c3, cfg.n_blocks, cfg.block),
        upsampler=up,
        fuse_td=_c2f(make, "fuse_td", c2 + c3, c2, cfg.n_blocks, cfg.block),
        down3=make("down3", c2, c2, 3),
        fuse_bu=_c2f(make, "fuse_bu", c2 + c3, c3, cfg.n_blocks, cfg.block),
        head=make("head", c3, cfg.head_channels, 1),
    )


def _down(x, spec):
    return relu(avg_pool2(conv2d(x, spec)))


def forward(x: Tensor, spec: MicroNetSpec) -> Tensor:
    """Raw head map of shape ``(batch, 5 + n_classes, H/4, W/4)``."""
    if x.height % 4 or x.width % 4:
        raise ConfigError(f"input height and width must be divisible by 4, got {x.height}x{x.width}")
    if x.channels != spec.config.in_channels:
        raise ConfigError(f"network expects {spec.config.in_channels} input channels, got {x.channels}")
    x0 = relu(conv2d(x, spec.stem))
    p1 = c2f(_down(x0, spec.down1), spec.stage1)
    p2 = c2f(_down(p1, spec.down2), spec.stage2)
    if spec.upsampler is None:
        up = nearest_upsample(p2, 2)
    else:
        up = carafe_upsample(p2, spec.upsampler)
    n1 = c2f(concat([p1, up]), spec.fuse_td)
    n2 = c2f(concat([_down(n1, spec.down3), p2]), spec.fuse_bu)
    return conv2d(n2, spec.head)


def _sigmoid(z):
    return 0.5 * (1.0 + math.tanh(0.5 * z))


def decode_box(raw, row, col, grid_h, grid_w) -> BBox:
    """Box from the four raw box channels of cell ``(row, col)``."""
    tx, ty, tw, th = (float(v) for v in raw)
    tw = min(max(tw, -LOG_SIZE_CLIP), LOG_SIZE_CLIP)
    th = min(max(th, -LOG_SIZE_CLIP), LOG_SIZE_CLIP)
    return BBox(
        (col + _sigmoid(tx)) / grid_w,
        (row + _sigmoid(ty)) / grid_h,
        math.exp(tw) / grid_w,
        math.exp(th) / grid_h,
    )


def decode_box_derivative(raw, grid_h, grid_w) -> np.ndarray:
    """d(cx, cy, w, h)/d(tx, ty, tw, th); the map is diagonal."""
    tx, ty, tw, th = (float(v) for v in raw)
    sx, sy = _sigmoid(tx), _sigmoid(ty)
    dw = math.exp(tw) / grid_w if abs(tw) < LOG_SIZE_CLIP else 0.0
    dh = math.exp(th) / grid_h if abs(th) < LOG_SIZE_CLIP else 0.0
    return np.array([sx * (1 - sx) / grid_w, sy * (1 - sy) / grid_h, dw, dh])


def decode(head: Tensor, conf_threshold: float, image_ids=None) -> list[Detection]:
    """Per-cell candidates whose objectness sigmoid exceeds ``conf_threshold``.

    No suppression is applied. Detections come out in (batch, row, col)
    order; ``image_ids`` names each batch entry (defaults to its index).
    """
    n, c, gh, gw = head.shape
    if c < 6:
        raise ConfigError(f"head needs at least 6 channels, got {c}")
    data = head.data.astype(np.float64)
    out = []
    for b in range(n):
        image_id = str(b) if image_ids is None else image_ids[b]
        for i in range(gh):
            for j in range(gw):
                conf = _sigmoid(data[b, 4, i, j])
                if not conf > conf_threshold:
                    continue
                cls = int(np.argmax(data[b, 5:, i, j]))
                out.append(Detection(image_id, cls, conf, decode_box(data[b, :4, i, j], i, j, gh, gw)))
    return out


def named_convs(spec: MicroNetSpec) -> dict[str, ConvSpec]:
    out = {"stem": spec.stem, "down1": spec.down1, "down2": spec.down2, "down3": spec.down3, "head": spec.head}
    for prefix, block in (("stage1", spec.stage1), ("stage2", spec.stage2),
                          ("fuse_td", spec.fuse_td), ("fuse_bu", spec.fuse_bu)):
        out[f"{prefix}.expand"] = block.expand
        out[f"{prefix}.compress"] = block.compress
        for i, b in enumerate(block.blocks):
            p = f"{prefix}.block{i}"
            if isinstance(b, FasterBlockSpec):
                out[f"{p}.pconv"] = b.pconv.conv
                out[f"{p}.expand"] = b.expand
                out[f"{p}.project"] = b.project
            else:
                out[f"{p}.conv1"] = b.conv1
                out[f"{p}.conv2"] = b.conv2
    if spec.upsampler is not None:
        out["up.compressor"] = spec.upsampler.compressor
        out["up.encoder"] = spec.upsampler.encoder
    return dict(sorted(out.items()))


def save_weights(spec: MicroNetSpec, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    cfg = asdict(spec.config)
    cfg["widths"] = list(cfg["widths"])
    (d / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    for name, conv in named_convs(spec).items():
        write_tensor(d / f"{name}.weight.tnsr", Tensor(conv.weight))
        write_tensor(d / f"{name}.bias.tnsr", Tensor(conv.bias.reshape(1, -1, 1, 1)))


def load_weights(directory) -> MicroNetSpec:
    d = Path(directory)
    config = MicroNetConfig(**json.loads((d / "config.json").read_text()))

    def make(name, cin, cout, k):
        w = read_tensor(d / f"{name}.weight.tnsr")
        b = read_tensor(d / f"{name}.bias.tnsr")
        if w.shape != (cout, cin, k, k):
            raise ConfigError(f"{name}: weight shape {w.shape}, expected {(cout, cin, k, k)}")
        return ConvSpec(cin, cout, k, w.data, b.data.reshape(-1))

    return build_micronet(config, weights=make)


def end_to_end_cost(spec: MicroNetSpec, height: int, width: int) -> CostReport:
    """Per-layer parameters and FLOPs at an ``height x width`` input."""
    h, w = height, width
    report = CostReport()
    report.extend(count_params(spec.stem, h, w), "stem.")
    report.extend(count_params(spec.down1, h, w), "down1.")
    report.extend(count_params(spec.stage1, h // 2, w // 2), "stage1.")
    report.extend(count_params(spec.down2, h // 2, w // 2), "down2.")
    report.extend(count_params(spec.stage2, h // 4, w // 4), "stage2.")
    if spec.upsampler is None:
        report.layers.append(LayerCost("up.nearest", 0, 0))
    else:
        report.extend(count_params(spec.upsampler, h // 4, w // 4), "up.")
    report.extend(count_params(spec.fuse_td, h // 2, w // 2), "fuse_td.")
    report.extend(count_params(spec.down3, h // 2, w // 2), "down3.")
    report.extend(count_params(spec.fuse_bu, h // 4, w // 4), "fuse_bu.")
    report.extend(count_params(spec.head, h // 4, w // 4), "head.")
    return report

"""IoU geometry and the Inner-SIoU bounding-box loss.

Boxes are centre-form ``(cx, cy, w, h)``; ``x`` runs horizontally. The
ground truth ``t`` is always the first argument and the anchor/prediction
``a`` the second.

The SIoU terms follow the usual definitions:

* angle cost ``1 - 2 sin^2(arcsin(sin_alpha) - pi/4)`` with ``sin_alpha`` the
  smaller centre-axis gap over the centre distance;
* distance cost ``sum_i 1 - exp(-(2 - angle) * rho_i)``, ``rho_i`` being the
  squared centre offset normalised by the enclosing box;
* shape cost ``sum_i (1 - exp(-omega_i)) ** theta`` with
  ``omega_w = |w_a - w_t| / max(w_a, w_t)``.

All arithmetic is float64.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError

GAMMA_RANGE = (0.5, 1.5)


@dataclass(frozen=True)
class BBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ConfigError(f"box values must be finite, got {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ConfigError(f"box width and height must be positive, got w={self.w}, h={self.h}")
        for name, v in zip(("cx", "cy", "w", "h"), vals):
            object.__setattr__(self, name, float(v))

    @classmethod
    def from_corners(cls, x1, y1, x2, y2) -> BBox:
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def area(self) -> float:
        return self.w * self.h

    def scaled(self, gamma: float) -> BBox:
        return BBox(self.cx, self.cy, gamma * self.w, gamma * self.h)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 1.25
    lambda1: float = 0.5
    lambda2: float = 0.5
    theta: float = 4.0

    def __post_init__(self):
        check_gamma(self.gamma)


@dataclass(frozen=True)
class LossBreakdown:
    iou: float
    iou_inner: float
    angle_cost: float
    delta_dist: float
    delta_shape: float
    l_siou: float
    l_inner_siou: float

    def to_dict(self):
        return asdict(self)


def check_gamma(gamma):
    lo, hi = GAMMA_RANGE
    if not lo <= gamma <= hi:
        raise ConfigError(f"auxiliary scale gamma must lie in [{lo}, {hi}], got {gamma}")


def _overlap(c1, s1, c2, s2):
    """Clamped overlap of intervals ``[c - s, c + s]``.

    Written in terms of the centre offset so equal intervals give exactly
    ``2 * s`` regardless of where they sit.
    """
    d = c2 - c1
    return max(min(s1, d + s2) + min(s1, s2 - d), 0.0)


def _iou(t: BBox, a: BBox) -> float:
    inter = _overlap(t.cx, t.w / 2, a.cx, a.w / 2) * _overlap(t.cy, t.h / 2, a.cy, a.h / 2)
    union = t.area + a.area - inter
    return min(inter / union, 1.0)


def iou(b1: BBox, b2: BBox) -> float:
    return _iou(b1, b2)


def auxiliary_box(b: BBox, gamma: float) -> tuple[float, float, float, float]:
    """Corners ``(x1, y1, x2, y2)`` of the box rescaled by ``gamma`` about its centre."""
    check_gamma(gamma)
    gw, gh = gamma * b.w / 2, gamma * b.h / 2
    return (b.cx - gw, b.cy - gh, b.cx + gw, b.cy + gh)


def inner_iou(t: BBox, a: BBox, gamma: float) -> float:
    check_gamma(gamma)
    ix = _overlap(t.cx, gamma * t.w / 2, a.cx, gamma * a.w / 2)
    iy = _overlap(t.cy, gamma * t.h / 2, a.cy, gamma * a.h / 2)
    inter = ix * iy
    union = gamma**2 * (t.w * t.h + a.w * a.h) - inter
    return min(inter / union, 1.0)


def siou_components(t: BBox, a: BBox, theta: float = 4.0) -> tuple[float, float, float]:
    """``(angle_cost, delta_dist, delta_shape)``; coincident centres give angle 0."""
    dx, dy = a.cx - t.cx, a.cy - t.cy
    sigma = math.hypot(dx, dy)
    if sigma == 0.0:
        angle = 0.0
        rho_x = rho_y = 0.0
    else:
        sin_alpha = min(abs(dx), abs(dy)) / sigma
        angle = 1.0 - 2.0 * math.sin(math.asin(sin_alpha) - math.pi / 4) ** 2
        tx1, ty1, tx2, ty2 = t.corners
        ax1, ay1, ax2, ay2 = a.corners
        cw = max(tx2, ax2) - min(tx1, ax1)
        ch = max(ty2, ay2) - min(ty1, ay1)
        rho_x, rho_y = (dx / cw) ** 2, (dy / ch) ** 2
    gamma_d = 2.0 - angle
    dist = (1.0 - math.exp(-gamma_d * rho_x)) + (1.0 - math.exp(-gamma_d * rho_y))
    omega_w = abs(a.w - t.w) / max(a.w, t.w)
    omega_h = abs(a.h - t.h) / max(a.h, t.h)
    shape = (1.0 - math.exp(-omega_w)) ** theta + (1.0 - math.exp(-omega_h)) ** theta
    return angle, dist, shape


def siou_loss(t: BBox, a: BBox, cfg: LossConfig = LossConfig()) -> float:
    _, dist, shape = siou_components(t, a, cfg.theta)
    return 1.0 - _iou(t, a) + cfg.lambda1 * dist + cfg.lambda2 * shape


def inner_siou_loss(t: BBox, a: BBox, cfg: LossConfig = LossConfig()) -> LossBreakdown:
    plain = _iou(t, a)
    inner = inner_iou(t, a, cfg.gamma)
    angle, dist, shape = siou_components(t, a, cfg.theta)
    l_siou = 1.0 - plain + cfg.lambda1 * dist + cfg.lambda2 * shape
    return LossBreakdown(plain, inner, angle, dist, shape, l_siou, l_siou + (plain - inner))


# -- gradients -----------------------------------------------------------------

def _overlap_grad(c1, s1, c2, s2):
    """Overlap length and its derivative w.r.t. ``(c2, s2)``."""
    hi_is_2 = c2 + s2 < c1 + s1
    lo_is_2 = c2 - s2 > c1 - s1
    length = min(c1 + s1, c2 + s2) - max(c1 - s1, c2 - s2)
    if length <= 0.0:
        return 0.0, 0.0, 0.0
    d_c = float(hi_is_2) - float(lo_is_2)
    d_s = float(hi_is_2) + float(lo_is_2)
    return length, d_c, d_s


def _iou_grad(t: BBox, a: BBox) -> tuple[float, np.ndarray]:
    lx, dlx_c, dlx_s = _overlap_grad(t.cx, t.w / 2, a.cx, a.w / 2)
    ly, dly_c, dly_s = _overlap_grad(t.cy, t.h / 2, a.cy, a.h / 2)
    inter = lx * ly
    d_inter = np.array([dlx_c * ly, dly_c * lx, 0.5 * dlx_s * ly, 0.5 * dly_s * lx])
    union = t.area + a.area - inter
    d_union = np.array([0.0, 0.0, a.h, a.w]) - d_inter
    return inter / union, (d_inter * union - inter * d_union) / union**2


def _extent_grad(c1, s1, c2, s2):
    """Enclosing-interval length and its derivative w.r.t. ``(c2, s2)``."""
    right_is_2 = c2 + s2 > c1 + s1
    left_is_2 = c2 - s2 < c1 - s1
    length = max(c1 + s1, c2 + s2) - min(c1 - s1, c2 - s2)
    return length, float(right_is_2) - float(left_is_2), float(right_is_2) + float(left_is_2)


def _omega_grad(size_a, size_t):
    omega = abs(size_a - size_t) / max(size_a, size_t)
    if size_a > size_t:
        return omega, size_t / size_a**2
    if size_a < size_t:
        return omega, -1.0 / size_t
    return omega, 0.0


def inner_siou_grad(t: BBox, a: BBox, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """Analytic gradient of the Inner-SIoU loss w.r.t. ``(cx, cy, w, h)`` of ``a``.

    Valid wherever the loss is differentiable; at kinks (touching edges,
    axis-aligned or coincident centres, equal sizes) a one-sided value is
    returned.
    """
    g = cfg.gamma
    _, d_iou = _iou_grad(t, a)
    _, d_inner = _iou_grad(t.scaled(g), a.scaled(g))
    d_inner = d_inner * np.array([1.0, 1.0, g, g])

    dx, dy = a.cx - t.cx, a.cy - t.cy
    s2 = dx * dx + dy * dy
    if s2 == 0.0:
        angle, d_angle = 0.0, np.zeros(4)
        rho_x = rho_y = 0.0
        d_rho_x = d_rho_y = np.zeros(4)
    else:
        ax_, ay_ = abs(dx), abs(dy)
        angle = 2.0 * ax_ * ay_ / s2
        d_angle = np.array([
            2.0 * math.copysign(1.0, dx) * ay_ / s2 - 4.0 * ax_ * ay_ * dx / s2**2,
            2.0 * math.copysign(1.0, dy) * ax_ / s2 - 4.0 * ax_ * ay_ * dy / s2**2,
            0.0,
            0.0,
        ])
        cw, dcw_c, dcw_s = _extent_grad(t.cx, t.w / 2, a.cx, a.w / 2)
        ch, dch_c, dch_s = _extent_grad(t.cy, t.h / 2, a.cy, a.h / 2)
        rho_x, rho_y = (dx / cw) ** 2, (dy / ch) ** 2
        d_rho_x = np.array([2 * dx / cw**2 - 2 * dx**2 / cw**3 * dcw_c, 0.0, -dx**2 / cw**3 * dcw_s, 0.0])
        d_rho_y = np.array([0.0, 2 * dy / ch**2 - 2 * dy**2 / ch**3 * dch_c, 0.0, -dy**2 / ch**3 * dch_s])

    gamma_d = 2.0 - angle
    d_dist = np.zeros(4)
    for rho, d_rho in ((rho_x, d_rho_x), (rho_y, d_rho_y)):
        d_dist += math.exp(-gamma_d * rho) * (gamma_d * d_rho - rho * d_angle)

    th = cfg.theta
    d_shape = np.zeros(4)
    for idx, (sa, st) in ((2, (a.w, t.w)), (3, (a.h, t.h))):
        omega, d_omega = _omega_grad(sa, st)
        e = math.exp(-omega)
        d_shape[idx] = th * (1.0 - e) ** (th - 1) * e * d_omega

    d_siou = -d_iou + cfg.lambda1 * d_dist + cfg.lambda2 * d_shape
    return d_siou + d_iou - d_inner


def _loss_at(t, params, cfg):
    return inner_siou_loss(t, BBox(*params), cfg).l_inner_siou


def numeric_grad(t: BBox, a: BBox, cfg: LossConfig = LossConfig(), eps=1e-4) -> np.ndarray:
    """Central-difference gradient of the Inner-SIoU loss w.r.t. ``a``."""
    x0 = a.as_array()
    grad = np.zeros(4)
    for j in range(4):
        x = x0.copy()
        x[j] = x0[j] + eps
        f_plus = _loss_at(t, x, cfg)
        x[j] = x0[j] - eps
        f_minus = _loss_at(t, x, cfg)
        grad[j] = (f_plus - f_minus) / (2 * eps)
    return grad


def smooth_margin(t: BBox, a: BBox, gamma: float) -> float:
    """Distance (in coordinate units) from the nearest kink of the loss in ``a``."""
    gaps = [abs(a.cx - t.cx), abs(a.cy - t.cy), abs(a.w - t.w), abs(a.h - t.h)]
    for g in {1.0, gamma}:
        tx1, ty1, tx2, ty2 = (t.cx - g * t.w / 2, t.cy - g * t.h / 2, t.cx + g * t.w / 2, t.cy + g * t.h / 2)
        ax1, ay1, ax2, ay2 = (a.cx - g * a.w / 2, a.cy - g * a.h / 2, a.cx + g * a.w / 2, a.cy + g * a.h / 2)
        gaps += [abs(ax1 - tx1), abs(ax2 - tx2), abs(ax2 - tx1), abs(ax1 - tx2)]
        gaps += [abs(ay1 - ty1), abs(ay2 - ty2), abs(ay2 - ty1), abs(ay1 - ty2)]
    return min(gaps)


def nudge_to_smooth(t: BBox, a: BBox, gamma: float, margin: float, seed=0, tries=200) -> BBox:
    """Deterministically perturb ``a`` until it is ``margin`` away from every kink."""
    rng = np.random.default_rng(seed)
    cand = a
    step = 4 * margin
    for _ in range(tries):
        if smooth_margin(t, cand, gamma) > margin:
            return cand
        d = rng.uniform(-step, step, size=4)
        cand = BBox(a.cx + d[0], a.cy + d[1], max(a.w + d[2], margin), max(a.h + d[3], margin))
        step *= 1.1
    raise ConfigError("could not move the anchor box away from non-differentiable configurations")


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor=1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check(t: BBox, a: BBox, cfg: LossConfig = LossConfig(), eps=1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    The anchor is first nudged at least ``10 * eps`` away from any kink so
    no probe straddles one. Returns ``inf`` if a probe yields a non-finite
    loss.
    """
    a = nudge_to_smooth(t, a, cfg.gamma, 10 * eps)
    try:
        num = numeric_grad(t, a, cfg, eps)
    except (ConfigError, ZeroDivisionError, OverflowError):
        return math.inf
    if not np.all(np.isfinite(num)):
        return math.inf
    return relative_error(inner_siou_grad(t, a, cfg), num)

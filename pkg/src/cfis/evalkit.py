"""Detection evaluation: greedy matching, precision/recall, AP and mAP.

Precision, recall and AP are computed with exact rational arithmetic and
converted to float only for reporting, so hand-computed fixtures come out
exactly.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .boxloss import BBox, iou
from .errors import ConfigError, DataError

DEFAULT_TAU = 0.5


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    class_id: int
    box: BBox


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_id: int
    confidence: float
    box: BBox

    def __post_init__(self):
        if not (math.isfinite(self.confidence) and 0.0 <= self.confidence <= 1.0):
            raise ConfigError(f"confidence must be finite and in [0, 1], got {self.confidence}")


@dataclass
class MatchResult:
    """``det_tp`` follows the input detection order, ``gt_matched`` the GT order."""

    det_tp: list
    gt_matched: list
    det_gt: list

    @property
    def tp(self) -> int:
        return sum(self.det_tp)

    @property
    def fp(self) -> int:
        return len(self.det_tp) - self.tp

    @property
    def fn(self) -> int:
        return len(self.gt_matched) - sum(self.gt_matched)


def _priority(det: Detection, index: int):
    b = det.box
    return (-det.confidence, str(det.image_id), det.class_id, b.cx, b.cy, b.w, b.h, index)


def detection_order(dets) -> list[int]:
    """Indices by descending confidence.

    Ties are broken by image id, class, then box coordinates, and only then by
    input order, so reordering files or lines cannot change the outcome.
    """
    return sorted(range(len(dets)), key=lambda i: _priority(dets[i], i))


def greedy_assign(ious, tau: float) -> list[int]:
    """Assign GT columns to detection rows, rows taken in priority order.

    Each row takes the unmatched column with the highest IoU (lowest index
    on ties) if that IoU reaches ``tau``; otherwise it gets ``-1``.
    """
    ious = np.asarray(ious, dtype=float)
    n_det = ious.shape[0]
    n_gt = ious.shape[1] if ious.ndim == 2 else 0
    taken = [False] * n_gt
    out = []
    for i in range(n_det):
        best, best_j = -1.0, -1
        for j in range(n_gt):
            if not taken[j] and ious[i, j] > best:
                best, best_j = ious[i, j], j
        if best_j >= 0 and best >= tau:
            taken[best_j] = True
            out.append(best_j)
        else:
            out.append(-1)
    return out


def match(gts, dets, tau: float = DEFAULT_TAU) -> MatchResult:
    gts, dets = list(gts), list(dets)
    groups: dict = {}
    for j, g in enumerate(gts):
        groups.setdefault((g.image_id, g.class_id), []).append(j)
    det_tp = [False] * len(dets)
    det_gt = [-1] * len(dets)
    gt_matched = [False] * len(gts)
    by_group: dict = {}
    for i in detection_order(dets):
        d = dets[i]
        by_group.setdefault((d.image_id, d.class_id), []).append(i)
    for key, det_idx in by_group.items():
        gt_idx = groups.get(key, [])
        if not gt_idx:
            continue
        ious = np.array([[iou(gts[j].box, dets[i].box) for j in gt_idx] for i in det_idx])
        for i, col in zip(det_idx, greedy_assign(ious, tau)):
            if col >= 0:
                det_tp[i] = True
                det_gt[i] = gt_idx[col]
                gt_matched[gt_idx[col]] = True
    return MatchResult(det_tp, gt_matched, det_gt)


def pr_curve(labels, confidences, n_gt: int) -> list[tuple[Fraction, Fraction]]:
    """Cumulative ``(precision, recall)`` after each detection, highest confidence first."""
    labels, confidences = list(labels), list(confidences)
    if len(labels) != len(confidences):
        raise ConfigError("labels and confidences must have the same length")
    if n_gt <= 0:
        if labels:
            raise ConfigError("recall is undefined without ground truth")
        return []
    order = sorted(range(len(labels)), key=lambda i: -confidences[i])
    points = []
    tp = fp = 0
    for i in order:
        if labels[i]:
            tp += 1
        else:
            fp += 1
        points.append((Fraction(tp, tp + fp), Fraction(tp, n_gt)))
    return points


def ap_exact(pr) -> Fraction:
    """Exact envelope area of ``pr`` as a fraction (0 for an empty curve)."""
    area = Fraction(0)
    prev_recall = 0
    envelope = 0
    # right-to-left running max gives the monotone precision envelope
    env = []
    for p, _ in reversed(pr):
        envelope = max(envelope, p)
        env.append(envelope)
    env.reverse()
    for (_, r), p in zip(pr, env):
        area += (r - prev_recall) * p
        prev_recall = r
    return area


def average_precision(pr) -> float:
    """Area under the monotone-envelope PR staircase (all-points interpolation)."""
    if not pr:
        return 0.0
    return float(ap_exact(pr))


@dataclass
class ClassResult:
    class_id: int
    ap_exact: Fraction
    pr: list
    tp: int
    fp: int
    fn: int

    @property
    def ap(self) -> float:
        return float(self.ap_exact)


@dataclass
class EvalReport:
    tau: float
    n_classes: int
    classes: list = field(default_factory=list)
    skipped_classes: list = field(default_factory=list)
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def empty(self) -> bool:
        return not self.classes

    @property
    def map_exact(self) -> Fraction:
        if not self.classes:
            return Fraction(0)
        return sum((c.ap_exact for c in self.classes), Fraction(0)) / len(self.classes)

    @property
    def map(self) -> float:
        return float(self.map_exact)

    def to_dict(self):
        return {
            "map": self.map,
            "tau": self.tau,
            "n_classes": self.n_classes,
            "empty": self.empty,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "classes": [
                {
                    "id": c.class_id,
                    "ap": c.ap,
                    "pr": [[float(p), float(r)] for p, r in c.pr],
                    "tp": c.tp,
                    "fp": c.fp,
                    "fn": c.fn,
                }
                for c in self.classes
            ],
            "skipped_classes": list(self.skipped_classes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def pr_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class_id", "precision", "recall"])
        for c in self.classes:
            for p, r in c.pr:
                writer.writerow([c.class_id, repr(float(p)), repr(float(r))])
        return buf.getvalue()


def evaluate(gts, dets, tau: float = DEFAULT_TAU, n_classes: int | None = None) -> EvalReport:
    """Per-class match -> PR curve -> AP; mAP averages classes that have ground truth.

    Classes in ``range(n_classes)`` (plus any id seen in the data) without
    ground truth are listed in ``skipped_classes``.
    """
    gts, dets = list(gts), list(dets)
    seen = {g.class_id for g in gts} | {d.class_id for d in dets}
    if n_classes is None:
        n_classes = max(seen, default=-1) + 1
    if n_classes < 1 and seen:
        raise ConfigError("n_classes must be >= 1")
    result = match(gts, dets, tau)
    report = EvalReport(tau=tau, n_classes=n_classes, tp=result.tp, fp=result.fp, fn=result.fn)
    order = detection_order(dets)
    for cls in sorted(set(range(n_classes)) | seen):
        n_gt = sum(1 for g in gts if g.class_id == cls)
        if n_gt == 0:
            report.skipped_classes.append(cls)
            continue
        idx = [i for i in order if dets[i].class_id == cls]
        labels = [result.det_tp[i] for i in idx]
        pr = pr_curve(labels, [dets[i].confidence for i in idx], n_gt)
        tp = sum(labels)
        report.classes.append(ClassResult(cls, ap_exact(pr), pr, tp, len(labels) - tp, n_gt - tp))
    return report


# -- annotation files ------------------------------------------------------------

def _clamped_box(cx, cy, w, h, path, lineno) -> BBox:
    x1, y1 = max(cx - w / 2, 0.0), max(cy - h / 2, 0.0)
    x2, y2 = min(cx + w / 2, 1.0), min(cy + h / 2, 1.0)
    if not (x2 > x1 and y2 > y1):
        raise DataError(f"box ({cx}, {cy}, {w}, {h}) is empty after clamping to the unit square", path, lineno)
    return BBox.from_corners(x1, y1, x2, y2)


def _rows(path, n_fields):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != n_fields:
                raise DataError(f"expected {n_fields} fields, got {len(parts)}", path, lineno)
            try:
                cls = int(parts[0])
                vals = [float(p) for p in parts[1:]]
            except ValueError:
                raise DataError(f"cannot parse line {line!r}", path, lineno) from None
            if cls < 0 or not all(math.isfinite(v) for v in vals):
                raise DataError(f"invalid values in line {line!r}", path, lineno)
            yield lineno, cls, vals


def read_ground_truth(path, image_id=None) -> list[GroundTruth]:
    """Lines ``class_id cx cy w h`` in normalised coordinates."""
    image_id = image_id if image_id is not None else Path(path).stem
    out = []
    for lineno, cls, (cx, cy, w, h) in _rows(path, 5):
        out.append(GroundTruth(image_id, cls, _clamped_box(cx, cy, w, h, path, lineno)))
    return out


def read_predictions(path, image_id=None) -> list[Detection]:
    """Lines ``class_id confidence cx cy w h``."""
    image_id = image_id if image_id is not None else Path(path).stem
    out = []
    for lineno, cls, (conf, cx, cy, w, h) in _rows(path, 6):
        if not 0.0 <= conf <= 1.0:
            raise DataError(f"confidence {conf} outside [0, 1]", path, lineno)
        out.append(Detection(image_id, cls, conf, _clamped_box(cx, cy, w, h, path, lineno)))
    return out


def thread_count() -> int:
    raw = os.environ.get("CFIS_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CFIS_THREADS must be an integer, got {raw!r}") from None
    return n if n > 0 else min(32, (os.cpu_count() or 1) + 4)


def load_directories(gt_dir, pred_dir):
    """Read per-image files keyed by stem; returns ``(gts, dets)`` sorted by image id."""
    gt_files = {p.stem: p for p in sorted(Path(gt_dir).glob("*.txt"))}
    pred_files = {p.stem: p for p in sorted(Path(pred_dir).glob("*.txt"))} if pred_dir else {}
    with ThreadPoolExecutor(max_workers=thread_count()) as pool:
        gt_lists = pool.map(read_ground_truth, gt_files.values())
        det_lists = pool.map(read_predictions, pred_files.values())
        gts = [g for lst in gt_lists for g in lst]
        dets = [d for lst in det_lists for d in lst]
    gts.sort(key=lambda g: g.image_id)
    dets.sort(key=lambda d: d.image_id)
    return gts, dets


# -- throughput --------------------------------------------------------------------

@dataclass
class BenchResult:
    samples_ms: list
    warmup: int

    @property
    def median_ms(self) -> float:
        return float(np.median(self.samples_ms))

    @property
    def p95_ms(self) -> float:
        return float(np.percentile(self.samples_ms, 95))

    @property
    def fps(self) -> float:
        return 1000.0 / self.median_ms

    def to_dict(self):
        return {
            "repetitions": len(self.samples_ms),
            "warmup": self.warmup,
            "median_ms": self.median_ms,
            "p95_ms": self.p95_ms,
            "fps": self.fps,
        }


def throughput_bench(op, shape, repetitions: int, warmup: int = 2, seed: int = 0, **op_kwargs) -> BenchResult:
    """Time ``op`` on a seeded input of ``shape``.

    ``op`` is a callable taking a ``Tensor`` or a name from
    :data:`cfis.ops.OPERATORS`.
    """
    from .ops import build_operator
    from .tensor import Tensor

    if repetitions < 1:
        raise ConfigError("repetitions must be >= 1")
    if isinstance(op, str):
        op = build_operator(op, shape[1], seed=seed, **op_kwargs).fn
    x = Tensor.random(shape, seed=seed)
    for _ in range(warmup):
        op(x)
    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        op(x)
        samples.append((time.perf_counter() - t0) * 1000.0)
    return BenchResult(samples, warmup)

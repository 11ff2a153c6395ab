"""Scoring protocols: per-pixel F1, class-weighted F1, accuracy, Acc@IoU, and report tables.

Per-pixel metrics are micro-averaged over a dataset: confusion counts are
summed first and the ratio is taken once.  ``PixelConfusion`` addition is
associative and commutative, so partial sums from parallel workers can be
folded in any order.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import kernels
from .geom import BBox, GeometryError, Mask, Polygon, rasterize


class Unscorable(ValueError):
    """Example that cannot be scored (e.g. all-background ground truth)."""


@dataclass
class PixelConfusion:
    """Per-class TP/FP/FN pixel counts; index 0 is background and never scored."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int = 2) -> "PixelConfusion":
        z = np.zeros(num_classes, dtype=np.int64)
        return cls(z.copy(), z.copy(), z.copy())

    @classmethod
    def from_matrix(cls, cm: np.ndarray) -> "PixelConfusion":
        """From a ``cm[gt, pred]`` matrix."""
        diag = np.diag(cm).astype(np.int64)
        return cls(diag, cm.sum(axis=0).astype(np.int64) - diag, cm.sum(axis=1).astype(np.int64) - diag)

    @property
    def num_classes(self) -> int:
        return len(self.tp)

    @property
    def gt_pixels(self) -> np.ndarray:
        return self.tp + self.fn

    def __add__(self, other: "PixelConfusion") -> "PixelConfusion":
        k = max(self.num_classes, other.num_classes)
        out = PixelConfusion.zeros(k)
        for src in (self, other):
            n = src.num_classes
            out.tp[:n] += src.tp
            out.fp[:n] += src.fp
            out.fn[:n] += src.fn
        return out

    def is_empty(self) -> bool:
        return not (self.tp[1:].any() or self.fp[1:].any() or self.fn[1:].any())

    def class_f1(self, c: int) -> float:
        denom = 2 * self.tp[c] + self.fp[c] + self.fn[c]
        return 1.0 if denom == 0 else float(2 * self.tp[c] / denom)

    def f1(self) -> float:
        """Foreground F1 summed over all foreground classes (binary case: class 1)."""
        tp, fp, fn = self.tp[1:].sum(), self.fp[1:].sum(), self.fn[1:].sum()
        denom = 2 * tp + fp + fn
        return 1.0 if denom == 0 else float(2 * tp / denom)

    def weighted_f1(self) -> float:
        """Per-class F1 weighted by ground-truth pixel share; absent classes carry no weight."""
        gt = self.gt_pixels[1:].astype(np.float64)
        total = gt.sum()
        if total == 0:
            raise Unscorable("ground truth has no foreground pixels")
        f1 = np.array([self.class_f1(c) for c in range(1, self.num_classes)])
        return float(np.sum(gt / total * f1))

    def to_json(self) -> dict:
        return {"tp": self.tp.tolist(), "fp": self.fp.tolist(), "fn": self.fn.tolist()}


def _check_extent(pred: Mask, gt: Mask):
    if pred.extent != gt.extent:
        raise GeometryError(f"extent mismatch: pred {pred.extent} vs gt {gt.extent}")


def binary_confusion(pred: Mask, gt: Mask) -> PixelConfusion:
    _check_extent(pred, gt)
    tp, fp, fn = kernels.binary_counts(pred.labels, gt.labels)
    return PixelConfusion(np.array([0, tp], dtype=np.int64), np.array([0, fp], dtype=np.int64),
                          np.array([0, fn], dtype=np.int64))


def class_confusion(pred: Mask, gt: Mask, num_classes: int) -> PixelConfusion:
    _check_extent(pred, gt)
    if max(pred.num_classes, gt.num_classes) > num_classes:
        raise GeometryError(f"mask labels exceed num_classes={num_classes}")
    return PixelConfusion.from_matrix(kernels.confusion(pred.labels, gt.labels, num_classes))


def pixel_f1(pred: Mask, gt: Mask) -> float:
    """Foreground F1 between binary masks; 1.0 when both are empty."""
    return binary_confusion(pred, gt).f1()


def class_weighted_f1(pred: Mask, gt: Mask, num_classes: int) -> float:
    """Class-weighted F1 over foreground classes.

    Raises:
        Unscorable: when ``gt`` is all background.
    """
    return class_confusion(pred, gt, num_classes).weighted_f1()


class F1Accumulator:
    """Micro-averaging fold over per-example masks.

    ``mode="binary"`` accumulates foreground F1, ``mode="weighted"``
    accumulates per-class counts for whole-split class weighting.
    Per-example values are kept for debugging.
    """

    def __init__(self, mode: str = "binary", num_classes: int = 2):
        if mode not in ("binary", "weighted"):
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self.num_classes = num_classes
        self.confusion = PixelConfusion.zeros(num_classes if mode == "weighted" else 2)
        self.per_example: List[Optional[float]] = []
        self.unscorable = 0

    def add(self, pred: Mask, gt: Mask) -> Optional[float]:
        if self.mode == "binary":
            conf = binary_confusion(pred, gt)
            value = conf.f1()
        else:
            conf = class_confusion(pred, gt, self.num_classes)
            try:
                value = conf.weighted_f1()
            except Unscorable:
                self.unscorable += 1
                self.per_example.append(None)
                return None
        self.confusion = self.confusion + conf
        self.per_example.append(value)
        return value

    def merge(self, other: "F1Accumulator") -> "F1Accumulator":
        self.confusion = self.confusion + other.confusion
        self.per_example.extend(other.per_example)
        self.unscorable += other.unscorable
        return self

    @property
    def count(self) -> int:
        return len(self.per_example) - self.unscorable

    @property
    def value(self) -> Optional[float]:
        if self.count == 0:
            return None
        if self.mode == "binary":
            return self.confusion.f1()
        try:
            return self.confusion.weighted_f1()
        except Unscorable:
            return None


def accuracy(preds: Sequence, gts: Sequence) -> float:
    """Exact-match fraction; inputs are expected to be canonicalised already."""
    if len(preds) != len(gts):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(gts)} labels")
    if not gts:
        raise ValueError("accuracy of an empty list is undefined")
    hits = sum(1 for p, g in zip(preds, gts) if p is not None and p == g)
    return hits / len(gts)


def box_iou(a: BBox, b: BBox) -> float:
    return a.iou(b)


def acc_at_iou(pred_boxes: Sequence[Union[BBox, Sequence[BBox], None]], gt_boxes: Sequence[BBox],
               threshold: float = 0.5) -> float:
    """Fraction of referring queries whose predicted box reaches ``threshold`` IoU.

    Each prediction may be a box, a list of boxes (only the first counts) or
    ``None`` (a miss).
    """
    if len(pred_boxes) != len(gt_boxes):
        raise ValueError(f"length mismatch: {len(pred_boxes)} vs {len(gt_boxes)}")
    if not gt_boxes:
        raise ValueError("no queries")
    hits = 0
    for pred, gt in zip(pred_boxes, gt_boxes):
        if pred is not None and not isinstance(pred, BBox):
            pred = pred[0] if len(pred) else None
        if pred is not None and pred.iou(gt) >= threshold:
            hits += 1
    return hits / len(gt_boxes)


@dataclass
class RegionClassExample:
    """One classified polygon for the urban-change protocol.

    ``gt`` and ``pred`` hold one class name per scored slot: a single
    sequence-level change type for the 2-image variant, or one change status
    per timestep for the 5-image variant.  ``None`` in ``gt`` marks a slot
    that is not scored; ``None`` in ``pred`` is a missing prediction.
    """

    polygon: Polygon
    extent: Tuple[int, int]
    gt: Sequence[Optional[str]]
    pred: Sequence[Optional[str]]


class RegionClassScorer:
    """Rasterise classified polygons and fold class confusion per slot."""

    def __init__(self, classes: Sequence[str], slots: int = 1):
        self.classes = list(classes)
        self.index = {c: i + 1 for i, c in enumerate(self.classes)}
        self.accs = [F1Accumulator("weighted", len(self.classes) + 1) for _ in range(slots)]

    def label(self, name: Optional[str]) -> int:
        return self.index.get(name, 0) if name is not None else 0

    def add(self, polygon: Polygon, extent: Tuple[int, int], slot: int,
            gt: str, pred: Optional[str]) -> Optional[float]:
        k = len(self.classes) + 1
        g = self.label(gt)
        if g == 0:
            raise ValueError(f"ground-truth class {gt!r} not in vocabulary")
        gt_mask = rasterize([(polygon, g)], extent, k)
        p = self.label(pred)
        pred_mask = rasterize([(polygon, p)], extent, k) if p else Mask.empty(extent[0], extent[1], k)
        return self.accs[slot].add(pred_mask, gt_mask)

    def slot_values(self) -> List[Optional[float]]:
        return [a.value for a in self.accs]

    @property
    def value(self) -> Optional[float]:
        vals = [v for v in self.slot_values() if v is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def count(self) -> int:
        return sum(a.count for a in self.accs)


def qfabric_protocol(examples: Sequence[RegionClassExample], window: int,
                     classes: Optional[Sequence[str]] = None) -> float:
    """Urban-change region classification score.

    ``window=2`` scores the sequence-level change type with class-weighted
    per-pixel F1 over the whole split.  ``window=5`` does the same per
    timestep with the change-status labels and takes the unweighted mean
    over timesteps that have ground truth.
    """
    if window not in (2, 5):
        raise ValueError(f"window must be 2 or 5, got {window}")
    if not examples:
        raise ValueError("no examples")
    if classes is None:
        classes = sorted({c for ex in examples for c in ex.gt if c is not None})
    slots = 1 if window == 2 else max(len(ex.gt) for ex in examples)
    scorer = RegionClassScorer(classes, slots)
    for ex in examples:
        gts = [ex.gt] if isinstance(ex.gt, str) else list(ex.gt)
        preds = [ex.pred] if isinstance(ex.pred, str) or ex.pred is None else list(ex.pred)
        if window == 2:
            gts, preds = gts[:1], preds[:1]
        for t, g in enumerate(gts):
            if g is None:
                continue
            p = preds[t] if t < len(preds) else None
            scorer.add(ex.polygon, ex.extent, t, g, p)
    value = scorer.value
    if value is None:
        raise Unscorable("no scorable slots")
    return value


# ---------------------------------------------------------------- reports

CATEGORY_ORDER = ["TSC", "CD", "SRE", "QA", "RQA", "TRE", "RTQA"]
TASK_CATEGORY = {
    "tsc": "TSC", "cd_loc": "CD", "cd_dmg": "CD", "cd_det": "CD", "sre": "SRE", "qa": "QA",
    "rqa": "RQA", "tre": "TRE", "rtqa": "RTQA", "single_image_passthrough": "Single image",
}
# row order inside a category
DATASET_ORDER = [
    "fMoW RGB", "fMoW Sentinel", "xBD Loc.", "xBD Dmg Cls.", "S2Looking Det.", "xBD", "S2Looking",
    "QFabric", "QFabric [2 images]", "QFabric [5 images]",
]


@dataclass
class MetricReport:
    task: str
    dataset: str
    metric: str
    value: Optional[float]
    count: int
    per_class: Optional[Dict[str, float]] = None
    confusion: Optional[dict] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.value is not None:
            if not 0.0 <= self.value <= 1.0:
                raise ValueError(f"metric value {self.value} outside [0, 1]")
            if self.count <= 0:
                raise ValueError("a reported value needs at least one example")

    @property
    def category(self) -> str:
        return TASK_CATEGORY.get(self.task, self.task.upper())

    def sort_key(self):
        cat = self.category
        ci = CATEGORY_ORDER.index(cat) if cat in CATEGORY_ORDER else len(CATEGORY_ORDER)
        di = DATASET_ORDER.index(self.dataset) if self.dataset in DATASET_ORDER else len(DATASET_ORDER)
        return ci, cat, di, self.dataset, self.metric

    def to_json(self) -> dict:
        return {"task": self.task, "category": self.category, "dataset": self.dataset,
                "metric": self.metric, "value": self.value, "count": self.count,
                "per_class": self.per_class, "confusion": self.confusion, "meta": self.meta}

    @classmethod
    def from_json(cls, d: dict) -> "MetricReport":
        return cls(d["task"], d["dataset"], d["metric"], d["value"], d["count"],
                   d.get("per_class"), d.get("confusion"), d.get("meta") or {})


def sort_reports(reports: Iterable[MetricReport]) -> List[MetricReport]:
    return sorted(reports, key=MetricReport.sort_key)


def reports_to_json(reports: Iterable[MetricReport]) -> str:
    return json.dumps([r.to_json() for r in sort_reports(reports)], indent=2, sort_keys=True)


def render_table(reports: Iterable[MetricReport]) -> str:
    """Aligned text table, one row per report, grouped in task-category order."""
    rows = [("Task", "Dataset/Subtask", "Metric", "Value", "N")]
    last = None
    for r in sort_reports(reports):
        cat = r.category if r.category != last else ""
        last = r.category
        value = "-" if r.value is None else f"{100.0 * r.value:.1f}"
        rows.append((cat, r.dataset, r.metric, value, str(r.count)))
    widths = [max(len(row[i]) for row in rows) for i in range(5)]
    lines = []
    for n, row in enumerate(rows):
        cells = [row[i].ljust(widths[i]) if i < 3 else row[i].rjust(widths[i]) for i in range(5)]
        lines.append("  ".join(cells).rstrip())
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"

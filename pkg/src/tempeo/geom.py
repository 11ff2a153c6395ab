"""Geometry primitives, frame transforms and rasterisation to label masks.

Conventions used throughout the package:

* pixel coordinates, origin at the top-left corner, x to the right, y down;
* boxes are integer and half-open, so ``[0, 0, 2, 2]`` covers four pixels;
* a pixel belongs to a shape iff its centre ``(col + .5, row + .5)`` is inside
  (even-odd rule for polygons).
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from . import kernels

# clipped boxes below either threshold are dropped as slivers
MIN_BOX_AREA = 10
MIN_BOX_FRACTION = 0.1


class GeometryError(ValueError):
    """Invalid geometry."""


class DegenerateGeometry(GeometryError):
    """Geometry that collapses to zero area."""


@dataclass(frozen=True)
class BBox:
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        for name in ("x_min", "y_min", "x_max", "y_max"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise GeometryError(f"{name} must be an integer, got {v!r}")
            object.__setattr__(self, name, int(v))
        if self.x_min < 0 or self.y_min < 0:
            raise GeometryError(f"negative box coordinate in {self.as_list()}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise GeometryError(f"empty or inverted box {self.as_list()}")

    @classmethod
    def from_list(cls, values: Sequence[int]) -> "BBox":
        if len(values) != 4:
            raise GeometryError(f"box needs 4 values, got {len(values)}")
        return cls(*values)

    def as_list(self) -> list:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    @property
    def area(self) -> int:
        return self.width * self.height

    def intersection(self, other: "BBox") -> Optional["BBox"]:
        x0, y0 = max(self.x_min, other.x_min), max(self.y_min, other.y_min)
        x1, y1 = min(self.x_max, other.x_max), min(self.y_max, other.y_max)
        if x0 < x1 and y0 < y1:
            return BBox(x0, y0, x1, y1)
        return None

    def intersection_area(self, other: "BBox") -> int:
        w = min(self.x_max, other.x_max) - max(self.x_min, other.x_min)
        h = min(self.y_max, other.y_max) - max(self.y_min, other.y_min)
        return w * h if w > 0 and h > 0 else 0

    def iou(self, other: "BBox") -> float:
        inter = self.intersection_area(other)
        return inter / (self.area + other.area - inter)

    def fits(self, width: int, height: int) -> bool:
        return self.x_max <= width and self.y_max <= height

    def __str__(self):
        return "[{}, {}, {}, {}]".format(*self.as_list())


def _ring(coords, what: str) -> np.ndarray:
    arr = np.asarray(coords, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise GeometryError(f"{what} ring must be a list of [x, y] pairs")
    if not np.all(np.isfinite(arr)):
        raise GeometryError(f"{what} ring has non-finite coordinates")
    if len(arr) > 1 and np.array_equal(arr[0], arr[-1]):
        arr = arr[:-1]
    if len(arr) > 1:
        keep = np.ones(len(arr), dtype=bool)
        keep[1:] = np.any(arr[1:] != arr[:-1], axis=1)
        arr = arr[keep]
        while len(arr) > 1 and np.array_equal(arr[0], arr[-1]):
            arr = arr[:-1]
    if len(arr) < 3:
        raise GeometryError(f"{what} ring needs at least 3 distinct vertices")
    return np.vstack([arr, arr[:1]])


def _signed_area(ring: np.ndarray) -> float:
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * float(np.dot(x[:-1], y[1:]) - np.dot(x[1:], y[:-1]))


class Polygon:
    """Polygon with an exterior ring and optional holes, in pixel coordinates.

    Rings are normalised to closed form (first vertex repeated at the end)
    with consecutive duplicates removed.  Self-intersection is *not* checked
    here; call :meth:`is_simple` where source data enters the system.
    """

    __slots__ = ("exterior", "holes", "_flat")

    def __init__(self, exterior, holes: Iterable = ()):
        self.exterior = _ring(exterior, "exterior")
        self.holes = tuple(_ring(h, "interior") for h in holes)
        self._flat = None

    @classmethod
    def from_box(cls, box: BBox) -> "Polygon":
        return cls([(box.x_min, box.y_min), (box.x_max, box.y_min),
                    (box.x_max, box.y_max), (box.x_min, box.y_max)])

    @property
    def rings(self) -> Tuple[np.ndarray, ...]:
        return (self.exterior,) + self.holes

    @property
    def area(self) -> float:
        return abs(_signed_area(self.exterior)) - sum(abs(_signed_area(h)) for h in self.holes)

    @property
    def bounds(self) -> Tuple[float, float, float, float]:
        e = self.exterior
        return float(e[:, 0].min()), float(e[:, 1].min()), float(e[:, 0].max()), float(e[:, 1].max())

    def flat(self):
        """``(xs, ys, starts)`` open-ring arrays as consumed by the kernels."""
        if self._flat is None:
            opened = [r[:-1] for r in self.rings]
            pts = np.ascontiguousarray(np.vstack(opened))
            starts = np.zeros(len(opened) + 1, dtype=np.int64)
            starts[1:] = np.cumsum([len(r) for r in opened])
            self._flat = (np.ascontiguousarray(pts[:, 0]), np.ascontiguousarray(pts[:, 1]), starts)
        return self._flat

    def is_simple(self) -> bool:
        """True when no two non-adjacent edges touch or cross (all rings)."""
        segs = []
        ring_id = []
        pos = []
        for r, ring in enumerate(self.rings):
            n = len(ring) - 1
            segs.append(np.hstack([ring[:-1], ring[1:]]))
            ring_id.extend([r] * n)
            pos.extend(range(n))
        s = np.vstack(segs)
        ring_id = np.asarray(ring_id)
        pos = np.asarray(pos)
        sizes = np.asarray([len(ring) - 1 for ring in self.rings])[ring_id]
        i, j = np.triu_indices(len(s), k=1)
        same = ring_id[i] == ring_id[j]
        adjacent = same & ((pos[j] - pos[i] == 1) | ((pos[i] == 0) & (pos[j] == sizes[i] - 1)))
        i, j = i[~adjacent], j[~adjacent]
        a, b, c, d = s[i, :2], s[i, 2:], s[j, :2], s[j, 2:]

        def orient(p, q, r):
            return np.sign((q[:, 0] - p[:, 0]) * (r[:, 1] - p[:, 1]) - (q[:, 1] - p[:, 1]) * (r[:, 0] - p[:, 0]))

        o1, o2, o3, o4 = orient(a, b, c), orient(a, b, d), orient(c, d, a), orient(c, d, b)
        hit = (o1 * o2 <= 0) & (o3 * o4 <= 0)
        collinear = (o1 == 0) & (o2 == 0)
        if np.any(collinear):
            ov_x = np.maximum(np.minimum(a[:, 0], b[:, 0]), np.minimum(c[:, 0], d[:, 0])) <= \
                np.minimum(np.maximum(a[:, 0], b[:, 0]), np.maximum(c[:, 0], d[:, 0]))
            ov_y = np.maximum(np.minimum(a[:, 1], b[:, 1]), np.minimum(c[:, 1], d[:, 1])) <= \
                np.minimum(np.maximum(a[:, 1], b[:, 1]), np.maximum(c[:, 1], d[:, 1]))
            hit = np.where(collinear, ov_x & ov_y, hit)
        return not bool(np.any(hit))

    def affine(self, scale: float, dx: float, dy: float) -> "Polygon":
        """Map every vertex ``p -> p * scale - (dx, dy)``."""
        off = np.array([dx, dy])
        return Polygon(self.exterior * scale - off, [h * scale - off for h in self.holes])

    def to_json(self) -> dict:
        out = {"polygon": self.exterior.tolist()}
        if self.holes:
            out["holes"] = [h.tolist() for h in self.holes]
        return out

    def __eq__(self, other):
        if not isinstance(other, Polygon):
            return NotImplemented
        return len(self.rings) == len(other.rings) and all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.rings, other.rings))

    def __repr__(self):
        return f"Polygon({self.exterior[:-1].tolist()!r}, holes={len(self.holes)})"


Shape = Union[Polygon, BBox]


@dataclass(frozen=True, eq=False)
class Mask:
    """Dense ``(height, width)`` uint8 label grid; label 0 is background."""

    labels: np.ndarray
    num_classes: int = 2

    def __post_init__(self):
        if self.labels.ndim != 2:
            raise GeometryError("mask labels must be 2-D")
        if self.num_classes < 2 or self.num_classes > 256:
            raise GeometryError(f"num_classes out of range: {self.num_classes}")
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise GeometryError("mask label exceeds declared class count")

    @classmethod
    def empty(cls, width: int, height: int, num_classes: int = 2) -> "Mask":
        return cls(np.zeros((height, width), dtype=np.uint8), num_classes)

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def extent(self) -> Tuple[int, int]:
        return self.width, self.height

    def binary(self) -> "Mask":
        return Mask((self.labels != 0).astype(np.uint8), 2)

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return self.num_classes == other.num_classes and np.array_equal(self.labels, other.labels)

    def to_png_bytes(self) -> bytes:
        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(np.ascontiguousarray(self.labels, dtype=np.uint8), mode="L").save(buf, format="PNG")
        return buf.getvalue()


def min_aabb(polygon: Polygon) -> BBox:
    """Smallest integer half-open box containing every vertex.

    Raises:
        DegenerateGeometry: when flooring/ceiling leaves zero width or height.
        GeometryError: when the polygon reaches negative coordinates.
    """
    x0, y0, x1, y1 = polygon.bounds
    bx0, by0, bx1, by1 = math.floor(x0), math.floor(y0), math.ceil(x1), math.ceil(y1)
    if bx0 >= bx1 or by0 >= by1:
        raise DegenerateGeometry(f"polygon collapses to a zero-area box at ({bx0}, {by0})")
    return BBox(bx0, by0, bx1, by1)


def rasterize(shapes: Sequence[Tuple[Shape, int]], extent: Tuple[int, int],
              num_classes: Optional[int] = None) -> Mask:
    """Burn ``(shape, label)`` pairs into a mask; later shapes overwrite earlier ones.

    Shapes extending past ``extent`` are clipped.  ``num_classes`` defaults to
    ``max(label) + 1`` (at least 2).
    """
    w, h = extent
    if w <= 0 or h <= 0:
        raise GeometryError(f"extent must be positive, got {extent}")
    top = 0
    for i, (shape, label) in enumerate(shapes):
        if not 1 <= label <= 255:
            raise GeometryError(f"shape {i}: label {label} outside 1..255")
        if isinstance(shape, Polygon):
            if not shape.area > 0:
                raise GeometryError(f"shape {i}: polygon has zero area")
        elif not isinstance(shape, BBox):
            raise GeometryError(f"shape {i}: unsupported shape type {type(shape).__name__}")
        top = max(top, label)
    k = num_classes if num_classes is not None else max(2, top + 1)
    if top >= k:
        raise GeometryError(f"label {top} does not fit num_classes={k}")
    labels = np.zeros((h, w), dtype=np.uint8)
    for shape, label in shapes:
        if isinstance(shape, BBox):
            kernels.fill_box(labels, shape.x_min, shape.y_min, shape.x_max, shape.y_max, label)
        else:
            xs, ys, starts = shape.flat()
            kernels.fill_polygon(labels, xs, ys, starts, np.uint8(label))
    return Mask(labels, k)


@dataclass(frozen=True)
class TileTransform:
    """Affine frame change ``p' = p * scale - (dx, dy)`` followed by clipping to the target extent."""

    src_w: int
    src_h: int
    scale: float
    dx: float
    dy: float
    dst_w: int
    dst_h: int

    @classmethod
    def identity(cls, width: int, height: int) -> "TileTransform":
        return cls(width, height, 1.0, 0.0, 0.0, width, height)

    @classmethod
    def crop(cls, src: Tuple[int, int], x0: int, y0: int, width: int, height: int) -> "TileTransform":
        return cls(src[0], src[1], 1.0, float(x0), float(y0), width, height)

    @classmethod
    def resize_center_crop(cls, src: Tuple[int, int], size: int = 224) -> "TileTransform":
        """Scale the shorter side to ``size`` then take the centred ``size x size`` window."""
        w, h = src
        s = size / min(w, h)
        return cls(w, h, s, (w * s - size) / 2.0, (h * s - size) / 2.0, size, size)

    @property
    def is_identity(self) -> bool:
        return self.scale == 1.0 and self.dx == 0 and self.dy == 0 and \
            (self.src_w, self.src_h) == (self.dst_w, self.dst_h)

    def apply_point(self, x: float, y: float) -> Tuple[float, float]:
        return x * self.scale - self.dx, y * self.scale - self.dy

    def source_window(self) -> Tuple[float, float, float, float]:
        """Region of the source frame that lands inside the target extent."""
        s = self.scale
        return self.dx / s, self.dy / s, (self.dx + self.dst_w) / s, (self.dy + self.dst_h) / s

    def inverse_box(self, box: BBox) -> BBox:
        s = self.scale
        return BBox(math.floor((box.x_min + self.dx) / s), math.floor((box.y_min + self.dy) / s),
                    math.ceil((box.x_max + self.dx) / s), math.ceil((box.y_max + self.dy) / s))

    def to_json(self) -> dict:
        return {"src": [self.src_w, self.src_h], "scale": self.scale, "offset": [self.dx, self.dy],
                "dst": [self.dst_w, self.dst_h]}

    @classmethod
    def from_json(cls, d: dict) -> "TileTransform":
        return cls(d["src"][0], d["src"][1], d["scale"], d["offset"][0], d["offset"][1], d["dst"][0], d["dst"][1])


def map_box(box: BBox, t: TileTransform) -> Tuple[int, int, int, int]:
    """Outer-rounded image of ``box`` under ``t`` before clipping (may be out of frame)."""
    s = t.scale
    return (math.floor(box.x_min * s - t.dx), math.floor(box.y_min * s - t.dy),
            math.ceil(box.x_max * s - t.dx), math.ceil(box.y_max * s - t.dy))


def transform_box(box: BBox, t: TileTransform, min_area: int = MIN_BOX_AREA,
                  min_fraction: float = MIN_BOX_FRACTION) -> Optional[BBox]:
    """Map ``box`` into the target frame and clip it; ``None`` means dropped.

    A box that is cut by the frame edge is dropped when what remains covers
    fewer than ``min_area`` pixels or less than ``min_fraction`` of its mapped
    area.  Boxes that survive unclipped are never dropped.
    """
    x0, y0, x1, y1 = map_box(box, t)
    cx0, cy0 = max(x0, 0), max(y0, 0)
    cx1, cy1 = min(x1, t.dst_w), min(y1, t.dst_h)
    if cx0 >= cx1 or cy0 >= cy1:
        return None
    full = (x1 - x0) * (y1 - y0)
    kept = (cx1 - cx0) * (cy1 - cy0)
    if kept < full and (kept < min_area or kept < min_fraction * full):
        return None
    return BBox(cx0, cy0, cx1, cy1)


def _clip_ring(ring: np.ndarray, x0: float, y0: float, x1: float, y1: float) -> np.ndarray:
    # Sutherland-Hodgman against the four window edges; intersection
    # coordinates on the clip line are set exactly.
    pts = [tuple(p) for p in ring[:-1]]
    for axis, bound, keep_ge in ((0, x0, True), (0, x1, False), (1, y0, True), (1, y1, False)):
        if not pts:
            break
        out = []
        n = len(pts)
        for i in range(n):
            cur, prev = pts[i], pts[i - 1]
            cin = cur[axis] >= bound if keep_ge else cur[axis] <= bound
            pin = prev[axis] >= bound if keep_ge else prev[axis] <= bound
            if cin != pin:
                t = (bound - prev[axis]) / (cur[axis] - prev[axis])
                other = prev[1 - axis] + t * (cur[1 - axis] - prev[1 - axis])
                out.append((bound, other) if axis == 0 else (other, bound))
            if cin:
                out.append(cur)
        pts = out
    return np.asarray(pts, dtype=np.float64).reshape(-1, 2)


def clip_polygon(polygon: Polygon, x0: float, y0: float, x1: float, y1: float) -> Optional[Polygon]:
    """Clip to the window ``[x0, x1] x [y0, y1]``; ``None`` when nothing with area remains."""
    bx0, by0, bx1, by1 = polygon.bounds
    if bx0 >= x0 and by0 >= y0 and bx1 <= x1 and by1 <= y1:
        return polygon
    ext = _clip_ring(polygon.exterior, x0, y0, x1, y1)
    try:
        clipped_ext = _ring(ext, "exterior")
    except GeometryError:
        return None
    if _signed_area(clipped_ext) == 0:
        return None
    holes = []
    for h in polygon.holes:
        try:
            ring = _ring(_clip_ring(h, x0, y0, x1, y1), "interior")
        except GeometryError:
            continue
        if _signed_area(ring) != 0:
            holes.append(ring)
    return Polygon(clipped_ext, holes)


def transform_polygon(polygon: Polygon, t: TileTransform) -> Optional[Polygon]:
    """Map a polygon into the target frame and clip it to the target extent."""
    mapped = polygon if t.is_identity else polygon.affine(t.scale, t.dx, t.dy)
    return clip_polygon(mapped, 0.0, 0.0, float(t.dst_w), float(t.dst_h))


def boxes_overlap(a: BBox, b: BBox, iou_threshold: float = 0.0) -> bool:
    """Overlap test used by overlap masking: IoU strictly above the threshold."""
    inter = a.intersection_area(b)
    if inter == 0:
        return False
    return inter / (a.area + b.area - inter) > iou_threshold


def mask_diff(a: Mask, b: Mask, overlap_masking: bool = False,
              boxes: Optional[Tuple[Sequence[BBox], Sequence[BBox]]] = None,
              overlap_iou: float = 0.0) -> Mask:
    """Pixelwise XOR of two binary masks.

    With ``overlap_masking`` the pixels of every box pair ``(ba, bb)`` drawn
    from ``boxes = (boxes_a, boxes_b)`` that overlaps across the two inputs
    (IoU above ``overlap_iou``) are forced to background.
    """
    if a.extent != b.extent:
        raise GeometryError(f"extent mismatch: {a.extent} vs {b.extent}")
    out = ((a.labels != 0) != (b.labels != 0)).astype(np.uint8)
    if overlap_masking:
        if boxes is None:
            raise GeometryError("overlap masking needs the predicted boxes of both inputs")
        boxes_a, boxes_b = boxes
        for ba in boxes_a:
            for bb in boxes_b:
                if boxes_overlap(ba, bb, overlap_iou):
                    kernels.fill_box(out, ba.x_min, ba.y_min, ba.x_max, ba.y_max, 0)
                    kernels.fill_box(out, bb.x_min, bb.y_min, bb.x_max, bb.y_max, 0)
    return Mask(out, 2)

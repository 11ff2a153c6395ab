"""Source normalisation: interchange label files -> tiled, frame-normalised SceneRecords.

Directory layout consumed for every temporal source kind::

    <root>/<split>/labels/<scene>.json     one interchange file per scene
    <root>/<split>/images/...              image files referenced by the label files

Interchange file fields (optional ones may be omitted)::

    id              str
    width, height   int, source extent in pixels
    images          [str], paths relative to <root>/<split>, chronological order
    sensor          str?
    resolution      "high" | "low" ?
    disaster_type   str?               damage schema
    sequence_class  str?               scene-classification schema
    crop_box        [x0, y0, x1, y1]?  scene-classification schema
    labels          [{polygon: [[x, y], ...], holes?: [[[x, y], ...]],
                      classes_per_timestep?: [str], sequence_class?: str,
                      change?: "constructed" | "demolished"}]

The single-image corpus is one JSONL file ``<root>/<split>/instruct.jsonl``
with records ``{id, image, conversations: [{from, value}]}``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

from .geom import (BBox, DegenerateGeometry, Polygon, TileTransform, clip_polygon,
                   min_aabb, transform_box, transform_polygon)
from .vocab import BUILDING_CHANGES, CHANGE_STATUSES, CHANGE_TYPES, DAMAGE_CLASSES, FMOW_CLASSES, SOURCE_KINDS

log = logging.getLogger(__name__)

TILE_SIZE = 256
FRAME_SIZE = 224
REMAINDER_POLICIES = ("anchor", "drop")


class IngestError(ValueError):
    def __init__(self, path, message, index=None):
        where = f"{path}" if index is None else f"{path} [record {index}]"
        super().__init__(f"{where}: {message}")
        self.path = str(path)
        self.index = index


@dataclass(frozen=True)
class SourceDescriptor:
    kind: str
    root: str
    split: str = "train"

    def __post_init__(self):
        if self.kind not in SOURCE_KINDS:
            raise ValueError(f"unknown source kind {self.kind!r}; expected one of {SOURCE_KINDS}")

    @property
    def base(self) -> Path:
        return Path(self.root) / self.split

    @classmethod
    def parse(cls, text: str) -> "SourceDescriptor":
        """``kind=root[:split]``."""
        kind, _, rest = text.partition("=")
        if not rest:
            raise ValueError(f"source must look like kind=root[:split], got {text!r}")
        root, split = rest.rsplit(":", 1) if ":" in rest else (rest, "train")
        return cls(kind, root, split or "train")


@dataclass(frozen=True)
class ImageRef:
    path: str
    crop: Optional[Tuple[int, int, int, int]] = None  # x, y, w, h in source pixels

    def uri(self) -> str:
        if self.crop is None:
            return self.path
        return "{}#xywh={},{},{},{}".format(self.path, *self.crop)

    @classmethod
    def from_uri(cls, uri: str) -> "ImageRef":
        path, sep, frag = uri.partition("#xywh=")
        if not sep:
            return cls(uri)
        return cls(path, tuple(int(v) for v in frag.split(",")))

    def sub_crop(self, x: int, y: int, w: int, h: int) -> "ImageRef":
        if self.crop is None:
            return ImageRef(self.path, (x, y, w, h))
        return ImageRef(self.path, (self.crop[0] + x, self.crop[1] + y, w, h))


@dataclass
class GeoLabel:
    polygon: Polygon
    classes_per_timestep: Optional[List[Optional[str]]] = None
    sequence_class: Optional[str] = None
    change: Optional[str] = None

    def validate(self, n_images: int):
        if self.classes_per_timestep is None and self.sequence_class is None and self.change is None:
            raise ValueError("label carries no class, change flag or per-timestep classes")
        if self.classes_per_timestep is not None and len(self.classes_per_timestep) != n_images:
            raise ValueError(f"classes_per_timestep has {len(self.classes_per_timestep)} entries "
                             f"for {n_images} images")

    def with_polygon(self, polygon: Polygon) -> "GeoLabel":
        return GeoLabel(polygon, self.classes_per_timestep, self.sequence_class, self.change)

    def box(self) -> BBox:
        return min_aabb(self.polygon)

    def to_json(self) -> dict:
        out = self.polygon.to_json()
        if self.classes_per_timestep is not None:
            out["classes_per_timestep"] = list(self.classes_per_timestep)
        if self.sequence_class is not None:
            out["sequence_class"] = self.sequence_class
        if self.change is not None:
            out["change"] = self.change
        return out

    @classmethod
    def from_json(cls, d: dict) -> "GeoLabel":
        return cls(Polygon(d["polygon"], d.get("holes", ())), d.get("classes_per_timestep"),
                   d.get("sequence_class"), d.get("change"))


@dataclass
class SceneRecord:
    id: str
    source: str
    images: List[ImageRef]
    width: Optional[int] = None
    height: Optional[int] = None
    order: List[int] = field(default_factory=list)
    labels: List[GeoLabel] = field(default_factory=list)
    sequence_class: Optional[str] = None
    sensor: Optional[str] = None
    resolution: Optional[str] = None
    disaster_type: Optional[str] = None
    transforms: Optional[List[TileTransform]] = None
    passthrough: Optional[List[dict]] = None

    def __post_init__(self):
        if not self.order:
            self.order = list(range(len(self.images)))

    @property
    def n_images(self) -> int:
        return len(self.images)

    @property
    def extent(self) -> Tuple[int, int]:
        return self.width, self.height

    def validate(self):
        """Raise ``ValueError`` when any record invariant is violated."""
        if self.n_images < 1:
            raise ValueError(f"{self.id}: record has no images")
        if len(self.order) != self.n_images or any(b <= a for a, b in zip(self.order, self.order[1:])):
            raise ValueError(f"{self.id}: order indices must be strictly increasing, one per image")
        if self.resolution not in (None, "high", "low"):
            raise ValueError(f"{self.id}: resolution must be high or low")
        if self.labels and (self.width is None or self.height is None):
            raise ValueError(f"{self.id}: labelled record needs an extent")
        for i, lab in enumerate(self.labels):
            try:
                lab.validate(self.n_images)
            except ValueError as e:
                raise ValueError(f"{self.id}: label {i}: {e}") from None
            x0, y0, x1, y1 = lab.polygon.bounds
            if x0 < 0 or y0 < 0 or x1 > self.width or y1 > self.height:
                raise ValueError(f"{self.id}: label {i} lies outside the {self.width}x{self.height} extent")
        if self.transforms is not None and len(self.transforms) != self.n_images:
            raise ValueError(f"{self.id}: one transform per image required")

    def subset(self, indices: Sequence[int]) -> "SceneRecord":
        """Keep only the images at ``indices`` (ascending), slicing per-timestep labels to match."""
        idx = list(indices)
        labels = [GeoLabel(l.polygon, None if l.classes_per_timestep is None else
                           [l.classes_per_timestep[i] for i in idx], l.sequence_class, l.change)
                  for l in self.labels]
        return SceneRecord(self.id, self.source, [self.images[i] for i in idx], self.width, self.height,
                           [self.order[i] for i in idx], labels, self.sequence_class, self.sensor,
                           self.resolution, self.disaster_type,
                           None if self.transforms is None else [self.transforms[i] for i in idx],
                           self.passthrough)

    def to_json(self) -> dict:
        out = {"id": self.id, "source": self.source, "images": [im.uri() for im in self.images],
               "order": list(self.order)}
        for name in ("width", "height", "sequence_class", "sensor", "resolution", "disaster_type",
                     "passthrough"):
            v = getattr(self, name)
            if v is not None:
                out[name] = v
        out["labels"] = [lab.to_json() for lab in self.labels]
        if self.transforms is not None:
            out["transforms"] = [t.to_json() for t in self.transforms]
        return out

    @classmethod
    def from_json(cls, d: dict) -> "SceneRecord":
        return cls(d["id"], d["source"], [ImageRef.from_uri(u) for u in d["images"]], d.get("width"),
                   d.get("height"), list(d.get("order") or []),
                   [GeoLabel.from_json(l) for l in d.get("labels", [])], d.get("sequence_class"),
                   d.get("sensor"), d.get("resolution"), d.get("disaster_type"),
                   None if d.get("transforms") is None else [TileTransform.from_json(t) for t in d["transforms"]],
                   d.get("passthrough"))


# ------------------------------------------------------------ interchange

def scene_to_interchange(record: SceneRecord) -> dict:
    """Interchange dict for a source-resolution record (inverse of :func:`scene_from_interchange`)."""
    out = {"id": record.id, "width": record.width, "height": record.height,
           "images": [im.path for im in record.images]}
    for name in ("sensor", "resolution", "disaster_type", "sequence_class"):
        v = getattr(record, name)
        if v is not None:
            out[name] = v
    crops = {im.crop for im in record.images}
    if crops != {None}:
        (crop,) = crops
        x, y, w, h = crop
        out["crop_box"] = [x, y, x + w, y + h]
    out["labels"] = [lab.to_json() for lab in record.labels]
    return out


def dumps_interchange(record: SceneRecord) -> str:
    return json.dumps(scene_to_interchange(record), sort_keys=True, indent=1) + "\n"


def scene_from_interchange(d: dict, kind: str, path="<memory>") -> SceneRecord:
    try:
        sid = str(d["id"])
        width, height = int(d["width"]), int(d["height"])
        images = d["images"]
        raw_labels = d.get("labels", [])
    except (KeyError, TypeError, ValueError) as e:
        raise IngestError(path, f"missing or malformed field: {e}") from None
    if not isinstance(images, list) or not images:
        raise IngestError(path, "images must be a non-empty list")
    if width <= 0 or height <= 0:
        raise IngestError(path, "extent must be positive")
    crop = d.get("crop_box")
    refs = [ImageRef(p) for p in images]
    if crop is not None:
        x0, y0, x1, y1 = (int(v) for v in crop)
        if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
            raise IngestError(path, f"crop_box {crop} outside the {width}x{height} extent")
        refs = [r.sub_crop(x0, y0, x1 - x0, y1 - y0) for r in refs]
    labels = []
    for i, raw in enumerate(raw_labels):
        try:
            lab = GeoLabel.from_json(raw)
            lab.validate(len(images))
        except (KeyError, TypeError, ValueError) as e:
            raise IngestError(path, str(e), i) from None
        if not lab.polygon.is_simple():
            raise IngestError(path, "polygon is self-intersecting", i)
        _check_vocab(kind, lab, path, i)
        labels.append(lab)
    rec = SceneRecord(sid, kind, refs, width, height, list(range(len(images))), labels,
                      d.get("sequence_class"), d.get("sensor"), d.get("resolution"), d.get("disaster_type"))
    if kind.startswith("fmow") and rec.sequence_class not in FMOW_CLASSES:
        raise IngestError(path, f"unknown scene class {rec.sequence_class!r}")
    try:
        rec.validate()
    except ValueError as e:
        raise IngestError(path, str(e)) from None
    return rec


def _check_vocab(kind, lab, path, i):
    if kind == "xbd" and lab.sequence_class not in DAMAGE_CLASSES:
        raise IngestError(path, f"damage class {lab.sequence_class!r} not in {DAMAGE_CLASSES}", i)
    if kind == "s2looking" and lab.change not in BUILDING_CHANGES:
        raise IngestError(path, f"change flag {lab.change!r} not in {BUILDING_CHANGES}", i)
    if kind == "qfabric":
        if lab.sequence_class not in CHANGE_TYPES:
            raise IngestError(path, f"change type {lab.sequence_class!r} not in {CHANGE_TYPES}", i)
        if lab.classes_per_timestep is None or any(c not in CHANGE_STATUSES for c in lab.classes_per_timestep):
            raise IngestError(path, "every timestep needs a change status", i)


# ------------------------------------------------------------ tiling

def tile_origins(length: int, tile_size: int, remainder: str = "anchor") -> List[int]:
    """Grid origins along one axis; with ``anchor`` a final tile is pinned to the far edge."""
    if remainder not in REMAINDER_POLICIES:
        raise ValueError(f"remainder policy must be one of {REMAINDER_POLICIES}")
    if length <= tile_size:
        return [0]
    n = length // tile_size
    origins = [i * tile_size for i in range(n)]
    if length % tile_size and remainder == "anchor":
        origins.append(length - tile_size)
    return origins


def tile_count(width: int, height: int, tile_size: int = TILE_SIZE, remainder: str = "anchor") -> int:
    return len(tile_origins(width, tile_size, remainder)) * len(tile_origins(height, tile_size, remainder))


@dataclass
class IngestStats:
    scenes: int = 0
    records: int = 0
    missing_images: int = 0
    dropped_empty_tiles: int = 0
    dropped_slivers: int = 0
    degenerate_labels: int = 0
    remainder_policy: str = "anchor"

    def to_json(self) -> dict:
        return dict(self.__dict__)


def tile(record: SceneRecord, tile_size: int = TILE_SIZE, remainder: str = "anchor",
         drop_slivers: bool = True, stats: Optional[IngestStats] = None) -> List[SceneRecord]:
    """Cut a source-resolution record into grid tiles with labels in tile coordinates.

    Polygons are clipped to each tile window.  With ``drop_slivers`` a label
    whose bounding box would be dropped by :func:`transform_box` for that
    tile is left out of the tile.
    """
    w, h = record.extent
    out = []
    for row, ty in enumerate(tile_origins(h, tile_size, remainder)):
        for col, tx in enumerate(tile_origins(w, tile_size, remainder)):
            tw, th = min(tile_size, w), min(tile_size, h)
            t = TileTransform.crop((w, h), tx, ty, tw, th)
            labels = []
            for lab in record.labels:
                clipped = clip_polygon(lab.polygon, tx, ty, tx + tw, ty + th)
                if clipped is None:
                    continue
                if drop_slivers:
                    try:
                        kept = transform_box(min_aabb(lab.polygon), t)
                    except DegenerateGeometry:
                        kept = None
                    if kept is None:
                        if stats is not None:
                            stats.dropped_slivers += 1
                        continue
                labels.append(lab.with_polygon(clipped.affine(1.0, tx, ty)))
            tid = f"{record.id}_{row:03d}_{col:03d}"
            out.append(SceneRecord(tid, record.source, [im.sub_crop(tx, ty, tw, th) for im in record.images],
                                   tw, th, list(record.order), labels, record.sequence_class, record.sensor,
                                   record.resolution, record.disaster_type))
    return out


def normalize_frame(record: SceneRecord, size: int = FRAME_SIZE, stats: Optional[IngestStats] = None) -> SceneRecord:
    """Re-express geometry in the ``size x size`` model frame (short side resize, centre crop)."""
    t = TileTransform.resize_center_crop(record.extent, size)
    labels = []
    for lab in record.labels:
        try:
            kept = transform_box(min_aabb(lab.polygon), t)
        except DegenerateGeometry:
            kept = None
        poly = transform_polygon(lab.polygon, t) if kept is not None else None
        if poly is None:
            if stats is not None:
                stats.dropped_slivers += 1
            continue
        try:
            min_aabb(poly)
        except DegenerateGeometry:
            if stats is not None:
                stats.degenerate_labels += 1
            continue
        labels.append(lab.with_polygon(poly))
    return SceneRecord(record.id, record.source, list(record.images), size, size, list(record.order), labels,
                       record.sequence_class, record.sensor, record.resolution, record.disaster_type,
                       [t] * record.n_images, record.passthrough)


# ------------------------------------------------------------ sources

def _images_present(base: Path, record: SceneRecord) -> bool:
    return all((base / im.path).exists() for im in record.images)


def load_scenes(desc: SourceDescriptor) -> List[Tuple[Path, SceneRecord]]:
    """Read and validate every interchange file of a temporal source, sorted by scene id."""
    label_dir = desc.base / "labels"
    if not label_dir.is_dir():
        raise IngestError(label_dir, "label directory not found")
    scenes = []
    for path in sorted(label_dir.glob("*.json")):
        try:
            with open(path, encoding="utf-8") as fh:
                d = json.load(fh)
        except json.JSONDecodeError as e:
            raise IngestError(path, f"invalid JSON: {e}") from None
        scenes.append((path, scene_from_interchange(d, desc.kind, path)))
    scenes.sort(key=lambda item: item[1].id)
    return scenes


def load_single_image_corpus(desc: SourceDescriptor) -> List[SceneRecord]:
    path = desc.base / "instruct.jsonl"
    if not path.exists():
        raise IngestError(path, "single-image corpus file not found")
    out = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                turns = [{"from": t["from"], "value": str(t["value"])} for t in d["conversations"]]
                rec = SceneRecord(str(d["id"]), desc.kind, [ImageRef(d["image"])], passthrough=turns)
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise IngestError(path, f"malformed record: {e}", i) from None
            out.append(rec)
    out.sort(key=lambda r: r.id)
    return out


def expand_scene(record: SceneRecord, tile_size: int = TILE_SIZE, remainder: str = "anchor",
                 stats: Optional[IngestStats] = None) -> List[SceneRecord]:
    """Per-kind processing of one validated source scene into frame-normalised records."""
    if record.source.startswith("fmow"):
        crop = record.images[0].crop
        w, h = (crop[2], crop[3]) if crop else record.extent
        rec = SceneRecord(record.id, record.source, record.images, w, h, record.order, [],
                          record.sequence_class, record.sensor, record.resolution)
        return [normalize_frame(rec, stats=stats)]
    tiles = tile(record, tile_size, remainder, stats=stats)
    if record.source == "qfabric":
        kept = [t for t in tiles if t.labels]
        if stats is not None:
            stats.dropped_empty_tiles += len(tiles) - len(kept)
        tiles = kept
    return [normalize_frame(t, stats=stats) for t in tiles]


def ingest_source(desc: SourceDescriptor, tile_size: int = TILE_SIZE, remainder: str = "anchor",
                  stats: Optional[IngestStats] = None) -> Iterator[SceneRecord]:
    """Yield normalised SceneRecords for one source in deterministic order."""
    stats = stats if stats is not None else IngestStats()
    stats.remainder_policy = remainder
    if desc.kind == "single_image_corpus":
        for rec in load_single_image_corpus(desc):
            stats.scenes += 1
            if not _images_present(desc.base, rec):
                stats.missing_images += 1
                log.warning("skipping %s: image missing", rec.id)
                continue
            stats.records += 1
            yield rec
        return
    for path, scene in load_scenes(desc):
        stats.scenes += 1
        if not _images_present(desc.base, scene):
            stats.missing_images += 1
            log.warning("skipping %s (%s): image missing", scene.id, path)
            continue
        for rec in expand_scene(scene, tile_size, remainder, stats):
            rec.validate()
            stats.records += 1
            yield rec

"""Synthetic source trees in the interchange layout, for tests and CI.

Buildings are random axis-aligned rectangles and L-shapes placed without
overlap.  Images are flat grey-level renders of the labels so that the tree
is complete on disk, and a ``stats.json`` sidecar records per-kind label
counts for distribution checks.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image

from ._util import rng_for
from .geom import BBox, Polygon, rasterize
from .ingest import SourceDescriptor
from .vocab import BUILDING_CHANGES, CHANGE_STATUSES, CHANGE_TYPES, DAMAGE_CLASSES, DISASTER_TYPES, FMOW_CLASSES

DEFAULT_SCENES = {"xbd": 2, "s2looking": 2, "qfabric": 2, "fmow_rgb": 4, "fmow_sentinel": 4,
                  "single_image_corpus": 6}
DEFAULT_EXTENTS = {"xbd": (1024, 1024), "s2looking": (1024, 1024), "qfabric": (600, 520)}
# progression of statuses used for synthetic development; the last entry is never part of it
_PROGRESSION = CHANGE_STATUSES[:-1]


@dataclass
class FixtureConfig:
    seed: int = 0
    scenes: Dict[str, int] = field(default_factory=lambda: dict(DEFAULT_SCENES))
    extents: Dict[str, Tuple[int, int]] = field(default_factory=lambda: dict(DEFAULT_EXTENTS))
    buildings: Tuple[int, int] = (4, 14)
    damage_probs: Tuple[float, ...] = (0.55, 0.2, 0.15, 0.1)
    constructed_prob: float = 0.5
    fmow_lengths: Tuple[int, int] = (1, 20)
    qfabric_images: int = 5
    split: str = "train"
    write_images: bool = True


def random_building(rng, w: int, h: int, size: Tuple[int, int] = (12, 60)) -> Polygon:
    """Rectangle or L-shape with integer vertices fully inside ``w x h``."""
    bw = int(rng.integers(size[0], size[1] + 1))
    bh = int(rng.integers(size[0], size[1] + 1))
    bw, bh = min(bw, w - 2), min(bh, h - 2)
    x0 = int(rng.integers(1, w - bw))
    y0 = int(rng.integers(1, h - bh))
    x1, y1 = x0 + bw, y0 + bh
    if rng.random() < 0.35 and bw >= 6 and bh >= 6:
        nx = int(rng.integers(bw // 3, 2 * bw // 3 + 1))
        ny = int(rng.integers(bh // 3, 2 * bh // 3 + 1))
        corner = int(rng.integers(4))
        pts = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
        cx, cy = pts[corner]
        sx = 1 if corner in (0, 3) else -1
        sy = 1 if corner in (0, 1) else -1
        notch = [(cx, cy + sy * ny), (cx + sx * nx, cy + sy * ny), (cx + sx * nx, cy)]
        # the notch replaces the corner vertex; odd corners walk it the other way round
        if corner % 2:
            notch.reverse()
        ring = pts[:corner] + notch + pts[corner + 1:]
        return Polygon(ring)
    return Polygon([(x0, y0), (x1, y0), (x1, y1), (x0, y1)])


def place_buildings(rng, w: int, h: int, n: int, size=(12, 60), attempts: int = 60) -> List[Polygon]:
    out: List[Polygon] = []
    boxes: List[BBox] = []
    for _ in range(n):
        for _ in range(attempts):
            poly = random_building(rng, w, h, size)
            x0, y0, x1, y1 = (int(v) for v in poly.bounds)
            grown = BBox(max(0, x0 - 2), max(0, y0 - 2), x1 + 2, y1 + 2)
            if all(grown.intersection_area(b) == 0 for b in boxes):
                out.append(poly)
                boxes.append(BBox(x0, y0, x1, y1))
                break
    return out


def _poly_json(poly: Polygon) -> dict:
    return {"polygon": [[int(x), int(y)] for x, y in poly.exterior[:-1]]}


def _write_png(path: Path, labels: np.ndarray, lut: np.ndarray):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(lut[labels]).save(path, format="PNG", optimize=False)


def _render(path, shapes, extent, cfg):
    if not cfg.write_images:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(b"")
        return
    lut = np.array([40] + [min(255, 90 + 15 * i) for i in range(1, 256)], dtype=np.uint8)
    labels = rasterize(shapes, extent, 256).labels if shapes else np.zeros(extent[::-1], np.uint8)
    _write_png(path, labels, lut)


def _scene_xbd(rng, sid, cfg, base):
    w, h = cfg.extents["xbd"]
    polys = place_buildings(rng, w, h, int(rng.integers(cfg.buildings[0], cfg.buildings[1] + 1)))
    probs = np.asarray(cfg.damage_probs, float)
    classes = [DAMAGE_CLASSES[int(rng.choice(len(DAMAGE_CLASSES), p=probs / probs.sum()))] for _ in polys]
    images = [f"images/{sid}_pre.png", f"images/{sid}_post.png"]
    _render(base / images[0], [(p, 1) for p in polys], (w, h), cfg)
    _render(base / images[1], [(p, 1 + DAMAGE_CLASSES.index(c)) for p, c in zip(polys, classes)], (w, h), cfg)
    labels = [dict(_poly_json(p), sequence_class=c) for p, c in zip(polys, classes)]
    return {"id": sid, "width": w, "height": h, "images": images, "resolution": "high",
            "disaster_type": sorted(DISASTER_TYPES)[int(rng.integers(len(DISASTER_TYPES)))], "labels": labels}


def _scene_s2(rng, sid, cfg, base):
    w, h = cfg.extents["s2looking"]
    polys = place_buildings(rng, w, h, int(rng.integers(cfg.buildings[0], cfg.buildings[1] + 1)))
    changes = [BUILDING_CHANGES[0] if rng.random() < cfg.constructed_prob else BUILDING_CHANGES[1] for _ in polys]
    images = [f"images/{sid}_1.png", f"images/{sid}_2.png"]
    _render(base / images[0], [(p, 1) for p, c in zip(polys, changes) if c == "demolished"], (w, h), cfg)
    _render(base / images[1], [(p, 1) for p, c in zip(polys, changes) if c == "constructed"], (w, h), cfg)
    labels = [dict(_poly_json(p), change=c) for p, c in zip(polys, changes)]
    return {"id": sid, "width": w, "height": h, "images": images, "resolution": "high", "labels": labels}


def _statuses(rng, n):
    if rng.random() < 0.2:
        s = int(rng.integers(len(_PROGRESSION)))
        return [_PROGRESSION[s]] * n
    idx = np.sort(rng.integers(0, len(_PROGRESSION), size=n))
    if n > 1 and idx[0] == idx[-1]:
        if idx[-1] < len(_PROGRESSION) - 1:
            idx[-1] += 1
        else:
            idx[0] -= 1
    return [_PROGRESSION[int(i)] for i in idx]


def _scene_qfabric(rng, sid, cfg, base):
    w, h = cfg.extents["qfabric"]
    n = cfg.qfabric_images
    polys = place_buildings(rng, w, h, int(rng.integers(cfg.buildings[0], cfg.buildings[1] + 1)), size=(20, 90))
    statuses = [_statuses(rng, n) for _ in polys]
    types = [CHANGE_TYPES[int(rng.integers(len(CHANGE_TYPES)))] for _ in polys]
    images = [f"images/{sid}_{t}.png" for t in range(n)]
    for t in range(n):
        shapes = [(p, 1 + _PROGRESSION.index(s[t])) for p, s in zip(polys, statuses)]
        _render(base / images[t], shapes, (w, h), cfg)
    labels = [dict(_poly_json(p), sequence_class=c, classes_per_timestep=s)
              for p, c, s in zip(polys, types, statuses)]
    return {"id": sid, "width": w, "height": h, "images": images, "resolution": "high", "labels": labels}


def _scene_fmow(rng, sid, cfg, base, kind):
    w, h = int(rng.integers(200, 401)), int(rng.integers(200, 401))
    n = int(rng.integers(cfg.fmow_lengths[0], cfg.fmow_lengths[1] + 1))
    cw, ch = int(rng.integers(32, w // 2 + 1)), int(rng.integers(32, h // 2 + 1))
    cx, cy = int(rng.integers(0, w - cw + 1)), int(rng.integers(0, h - ch + 1))
    images = [f"images/{sid}_{t:02d}.png" for t in range(n)]
    crop = Polygon([(cx, cy), (cx + cw, cy), (cx + cw, cy + ch), (cx, cy + ch)])
    for t in range(n):
        _render(base / images[t], [(crop, 1 + t)], (w, h), cfg)
    d = {"id": sid, "width": w, "height": h, "images": images, "crop_box": [cx, cy, cx + cw, cy + ch],
         "sequence_class": FMOW_CLASSES[int(rng.integers(len(FMOW_CLASSES)))], "labels": []}
    if kind == "fmow_sentinel":
        d.update(sensor="Sentinel-2", resolution="low")
    else:
        d.update(resolution="high")
    return d


_PASSTHROUGH = (
    ("[refer] the large building near the road", "[{x0}, {y0}, {x1}, {y1}]"),
    ("[grounding] Describe the image in detail.", "A building at [{x0}, {y0}, {x1}, {y1}] next to an open field."),
    ("[vqa] How many buildings are in the image?", "{n}"),
    ("[identify] What is in this region [{x0}, {y0}, {x1}, {y1}]?", "A building."),
    ("Describe this image.", "An aerial view of a residential area."),
)


def _single_image(rng, i, cfg, base):
    sid = f"single_{i:04d}"
    img = f"images/{sid}.png"
    poly = place_buildings(rng, 224, 224, 1, size=(16, 80))[0]
    x0, y0, x1, y1 = (int(v) for v in poly.bounds)
    _render(base / img, [(poly, 1)], (224, 224), cfg)
    q, a = _PASSTHROUGH[i % len(_PASSTHROUGH)]
    slots = dict(x0=x0, y0=y0, x1=x1, y1=y1, n=int(rng.integers(1, 9)))
    return {"id": sid, "image": img, "conversations": [
        {"from": "human", "value": "<image>\n" + q.format(**slots)},
        {"from": "gpt", "value": a.format(**slots)},
    ]}


def _label_stats(kind, scenes):
    counts: Dict[str, int] = {}
    n_labels = 0
    for s in scenes:
        for lab in s.get("labels", []):
            n_labels += 1
            key = lab.get("sequence_class") or lab.get("change")
            counts[key] = counts.get(key, 0) + 1
        if kind.startswith("fmow"):
            counts[s["sequence_class"]] = counts.get(s["sequence_class"], 0) + 1
    return {"scenes": len(scenes), "labels": n_labels, "class_counts": dict(sorted(counts.items()))}


def make_fixtures(root, cfg: Optional[FixtureConfig] = None) -> Dict[str, SourceDescriptor]:
    """Write a synthetic tree under ``root``; return one descriptor per generated kind."""
    cfg = cfg or FixtureConfig()
    root = Path(root)
    out: Dict[str, SourceDescriptor] = {}
    stats = {"seed": cfg.seed, "config": {"damage_probs": list(cfg.damage_probs),
                                          "constructed_prob": cfg.constructed_prob,
                                          "fmow_lengths": list(cfg.fmow_lengths)}, "kinds": {}}
    for kind, n in cfg.scenes.items():
        if n <= 0:
            continue
        base = root / kind / cfg.split
        scenes = []
        for i in range(n):
            rng = rng_for(cfg.seed, "fixture", kind, i)
            if kind == "single_image_corpus":
                scenes.append(_single_image(rng, i, cfg, base))
                continue
            sid = f"{kind.split('_')[0]}_{i:04d}"
            if kind == "xbd":
                d = _scene_xbd(rng, sid, cfg, base)
            elif kind == "s2looking":
                d = _scene_s2(rng, sid, cfg, base)
            elif kind == "qfabric":
                d = _scene_qfabric(rng, sid, cfg, base)
            elif kind.startswith("fmow"):
                d = _scene_fmow(rng, sid, cfg, base, kind)
            else:
                raise ValueError(f"no fixture generator for {kind!r}")
            (base / "labels").mkdir(parents=True, exist_ok=True)
            (base / "labels" / f"{sid}.json").write_text(json.dumps(d, sort_keys=True, indent=1) + "\n")
            scenes.append(d)
        if kind == "single_image_corpus":
            base.mkdir(parents=True, exist_ok=True)
            with open(base / "instruct.jsonl", "w", encoding="utf-8") as fh:
                for d in scenes:
                    fh.write(json.dumps(d, sort_keys=True) + "\n")
        stats["kinds"][kind] = _label_stats(kind, scenes)
        out[kind] = SourceDescriptor(kind, str(root / kind), cfg.split)
    (root / "stats.json").write_text(json.dumps(stats, sort_keys=True, indent=1) + "\n")
    return out


def fixture_sources(root, split: str = "train") -> List[SourceDescriptor]:
    """Descriptors for every kind present under a fixture root, in canonical kind order."""
    from .vocab import SOURCE_KINDS

    root = Path(root)
    return [SourceDescriptor(k, str(root / k), split) for k in SOURCE_KINDS if (root / k / split).is_dir()]

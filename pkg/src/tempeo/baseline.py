"""Adapters that turn per-image predictions into temporal answers.

A single-image detector or classifier is run on every image of a sequence
and its outputs are combined with fixed rules: majority vote for scene
classes, box-mask differencing for change detection, and box matching for
change questions.  Any per-image predictor works, including the oracles
used in the tests.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .geom import BBox, Mask, mask_diff, rasterize


@dataclass
class PerImagePrediction:
    id: str
    image_index: int
    boxes: List[BBox] = field(default_factory=list)
    classes: Optional[List[Optional[str]]] = None  # one per box
    cls: Optional[str] = None
    answer: Optional[str] = None

    def __post_init__(self):
        if self.image_index < 0:
            raise ValueError(f"{self.id}: negative image index")
        self.boxes = [b if isinstance(b, BBox) else BBox.from_list(b) for b in self.boxes]
        if self.classes is not None and len(self.classes) != len(self.boxes):
            raise ValueError(f"{self.id}: {len(self.classes)} box classes for {len(self.boxes)} boxes")

    def to_json(self) -> dict:
        out = {"id": self.id, "image_index": self.image_index}
        if self.boxes:
            out["boxes"] = [b.as_list() for b in self.boxes]
        if self.classes is not None:
            out["box_classes"] = list(self.classes)
        if self.cls is not None:
            out["class"] = self.cls
        if self.answer is not None:
            out["answer"] = self.answer
        return out

    @classmethod
    def from_json(cls, d: dict) -> "PerImagePrediction":
        return cls(d["id"], int(d["image_index"]), [BBox.from_list(b) for b in d.get("boxes", [])],
                   d.get("box_classes"), d.get("class"), d.get("answer"))


def majority_vote(classes: Sequence[str]) -> str:
    """Modal class; a tie goes to the class that reached the modal count first."""
    if not classes:
        raise ValueError("majority vote over an empty sequence")
    top = max(Counter(classes).values())
    seen: Counter = Counter()
    for c in classes:
        seen[c] += 1
        if seen[c] == top:
            return c
    raise AssertionError("unreachable")


def boxes_mask(boxes: Iterable[BBox], extent: Tuple[int, int]) -> Mask:
    return rasterize([(b, 1) for b in boxes], extent, 2)


def detection_diff(boxes_t1: Sequence[BBox], boxes_t2: Sequence[BBox], extent: Tuple[int, int],
                   overlap_iou: float = 0.0) -> Mask:
    """Predicted change mask: XOR of the two box masks, with overlapping box pairs masked out."""
    return mask_diff(boxes_mask(boxes_t1, extent), boxes_mask(boxes_t2, extent), overlap_masking=True,
                     boxes=(list(boxes_t1), list(boxes_t2)), overlap_iou=overlap_iou)


def constructed_destructed_split(boxes_t1: Sequence[BBox], boxes_t2: Sequence[BBox],
                                 extent: Tuple[int, int]) -> Tuple[Mask, Mask]:
    """``(destructed, constructed)``: pixels only in the first image, and only in the second."""
    a = boxes_mask(boxes_t1, extent).labels != 0
    b = boxes_mask(boxes_t2, extent).labels != 0
    return Mask((a & ~b).astype(np.uint8), 2), Mask((b & ~a).astype(np.uint8), 2)


def _restrict(boxes: Sequence[BBox], region: Optional[BBox]) -> List[BBox]:
    if region is None:
        return list(boxes)
    return [r for r in (b.intersection(region) for b in boxes) if r is not None]


def change_qa_from_detections(boxes_t1: Sequence[BBox], boxes_t2: Sequence[BBox],
                              region: Optional[BBox] = None) -> str:
    """``"yes"`` when some box on either side touches no box on the other side.

    With ``region`` only the parts of the boxes inside the query box count.
    """
    a = _restrict(boxes_t1, region)
    b = _restrict(boxes_t2, region)

    def unmatched(src, other):
        return any(all(s.intersection_area(o) == 0 for o in other) for s in src)

    return "yes" if unmatched(a, b) or unmatched(b, a) else "no"


# ------------------------------------------------------------ temporal adaptation

def encode_mask(mask: Mask) -> dict:
    """Run-length encoding of a binary mask, row-major, starting with a background run."""
    flat = (mask.labels != 0).ravel()
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return {"size": [mask.height, mask.width], "counts": runs}


def decode_mask(rle: dict) -> Mask:
    h, w = rle["size"]
    counts = rle["counts"]
    if sum(counts) != h * w:
        raise ValueError(f"run lengths sum to {sum(counts)}, expected {h * w}")
    vals = np.zeros(len(counts), dtype=np.uint8)
    vals[1::2] = 1
    return Mask(np.repeat(vals, counts).reshape(h, w), 2)


def _format_boxes(boxes):
    from .taskgen import format_box

    return ", ".join(format_box(b) for b in boxes)


def adapt_record(record, preds: Sequence[PerImagePrediction]) -> Optional[dict]:
    """Temporal prediction ``{id, response_text, mask?}`` for one ConversationRecord.

    Returns ``None`` when no adapter covers the record's task variant.
    """
    by_index: Dict[int, PerImagePrediction] = {p.image_index: p for p in preds}
    n = len(record.images)
    if any(i >= n for i in by_index):
        raise ValueError(f"{record.id}: image index out of range for {n} images")
    meta = record.meta
    variant = meta.get("variant")
    ev = meta.get("eval") or {}
    extent = tuple(ev.get("extent") or (224, 224))
    boxes = [by_index[i].boxes if i in by_index else [] for i in range(n)]
    query = BBox.from_list(ev["query_box"]) if ev.get("query_box") else None
    out = {"id": record.id}
    if variant == "fmow_class":
        votes = [by_index[i].cls for i in sorted(by_index) if by_index[i].cls is not None]
        if not votes:
            return None
        out["response_text"] = majority_vote(votes) + "."
    elif variant == "xbd_loc":
        out["response_text"] = _format_boxes(boxes[0]) + "."
    elif variant == "s2_det":
        out["response_text"] = ""
        out["mask"] = encode_mask(detection_diff(boxes[0], boxes[-1], extent))
    elif variant == "s2_sre":
        destructed, constructed = constructed_destructed_split(boxes[0], boxes[-1], extent)
        change = ev.get("change", "constructed")
        out["response_text"] = ""
        out["mask"] = encode_mask(constructed if change == "constructed" else destructed)
    elif variant == "s2_any":
        out["response_text"] = change_qa_from_detections(boxes[0], boxes[-1]).capitalize() + "."
    elif variant == "s2_region_changed":
        out["response_text"] = change_qa_from_detections(boxes[0], boxes[-1], query).capitalize() + "."
    else:
        return None
    return out


def load_per_image(path) -> Dict[str, List[PerImagePrediction]]:
    """Group a per-image prediction JSONL file by record id."""
    out: Dict[str, List[PerImagePrediction]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                p = PerImagePrediction.from_json(json.loads(line))
                out.setdefault(p.id, []).append(p)
    return out

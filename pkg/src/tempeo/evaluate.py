"""Score prediction files against a conversation corpus.

Predictions are JSONL ``{id, response_text, mask?}``.  ``mask`` is an
optional run-length encoded binary mask (see :func:`tempeo.baseline.encode_mask`)
for change masks that cannot be expressed as boxes.  Corpus records without
a prediction are scored as an empty response.
"""
from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping

from .baseline import decode_mask
from .geom import BBox, Polygon, rasterize
from .metrics import F1Accumulator, MetricReport, RegionClassScorer, acc_at_iou, accuracy
from .respond import extract_answer, parse

UNSCORED = "unscored"


class EvalError(ValueError):
    pass


@dataclass
class EvalResult:
    reports: List[MetricReport]
    coverage: dict
    buckets: Dict[str, List[str]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"reports": [r.to_json() for r in self.reports], "coverage": self.coverage}


def load_predictions(path) -> Dict[str, dict]:
    out: Dict[str, dict] = {}
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                pid = str(d["id"])
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise EvalError(f"{path} [line {i + 1}]: malformed prediction: {e}") from None
            if pid in out:
                raise EvalError(f"{path} [line {i + 1}]: duplicate prediction id {pid}")
            out[pid] = d
    return out


def _polys(items) -> List[Polygon]:
    return [Polygon(p["polygon"], p.get("holes", ())) for p in items]


class _Bucket:
    def __init__(self, task, ev):
        self.task = task
        self.protocol = ev["protocol"]
        self.dataset = ev["dataset"]
        self.metric = ev["metric"]
        self.acc = F1Accumulator("binary") if self.protocol == "pixel_f1" else None
        self.preds: list = []
        self.gts: list = []
        self.region: list = []
        self.classes = ev.get("classes")

    def report(self) -> MetricReport:
        meta = {"protocol": self.protocol}
        if self.protocol == "pixel_f1":
            meta["aggregation"] = "micro"
            return MetricReport(self.task, self.dataset, self.metric, self.acc.value, self.acc.count,
                                confusion=self.acc.confusion.to_json(), meta=meta)
        if self.protocol in ("class_f1", "region_class"):
            slots = 1 + max(ex[0] for ex in self.region)
            scorer = RegionClassScorer(self.classes, slots)
            for slot, poly, extent, gt, pred in self.region:
                scorer.add(poly, extent, slot, gt, pred)
            meta["weighting"] = "ground-truth pixel share over the split"
            if slots > 1:
                meta["slot_values"] = scorer.slot_values()
                meta["slot_mean"] = "unweighted"
            return MetricReport(self.task, self.dataset, self.metric, scorer.value, len(self.region), meta=meta)
        if self.protocol == "accuracy":
            return MetricReport(self.task, self.dataset, self.metric, accuracy(self.preds, self.gts),
                                len(self.gts), meta=meta)
        if self.protocol == "acc_iou":
            return MetricReport(self.task, self.dataset, self.metric, acc_at_iou(self.preds, self.gts),
                                len(self.gts), meta=meta)
        raise EvalError(f"unknown protocol {self.protocol!r}")


def _norm(kind, value):
    return tuple(value) if kind == "image_refs" and value is not None else value


def evaluate(records: Iterable, predictions: Mapping[str, dict]) -> EvalResult:
    """Score every corpus record; each record lands in exactly one bucket."""
    records = list(records)
    corpus_ids = {r.id for r in records}
    matched = [pid for pid in predictions if pid in corpus_ids]
    if predictions and not matched:
        raise EvalError("no prediction id matches the corpus")
    if not predictions:
        raise EvalError("prediction set is empty")
    buckets: "OrderedDict[str, _Bucket]" = OrderedDict()
    bucket_ids: Dict[str, List[str]] = {UNSCORED: []}
    diagnostics = 0
    missing = 0
    for rec in records:
        ev = rec.meta.get("eval") or {}
        pred = predictions.get(rec.id)
        if pred is None:
            missing += 1
            pred = {"response_text": ""}
        text = pred.get("response_text") or ""
        if not ev or ev.get("protocol") in (None, "none"):
            bucket_ids[UNSCORED].append(rec.id)
            continue
        key = f"{rec.task}|{ev['dataset']}|{ev['metric']}"
        b = buckets.get(key)
        if b is None:
            b = buckets[key] = _Bucket(rec.task, ev)
            bucket_ids[key] = []
        bucket_ids[key].append(rec.id)
        ans = rec.meta["answer"]
        parsed = parse(text, ans["kind"], rec.meta.get("options"))
        diagnostics += len(parsed.diagnostics)
        proto = ev["protocol"]
        if proto == "pixel_f1":
            extent = tuple(ev["extent"])
            gt = rasterize([(p, 1) for p in _polys(ev["polygons"])], extent, 2)
            if pred.get("mask") is not None:
                pm = decode_mask(pred["mask"])
                if pm.extent != extent:
                    raise EvalError(f"{rec.id}: mask extent {pm.extent} does not match {extent}")
            else:
                pm = rasterize([(bx, 1) for bx in parsed.boxes], extent, 2)
            b.acc.add(pm, gt)
        elif proto in ("class_f1", "region_class"):
            poly = _polys([ev["polygon"]])[0]
            pcls = parsed.classes[0] if parsed.classes else None
            if pcls not in ev["classes"]:
                pcls = None
            slot = int(ev.get("slot", 0)) if proto == "region_class" and ev.get("window") == 5 else 0
            b.region.append((slot, poly, tuple(ev["extent"]), ev["gt"], pcls))
        elif proto == "accuracy":
            b.preds.append(_norm(ans["kind"], extract_answer(text, ans["kind"], rec.meta.get("options"))))
            b.gts.append(_norm(ans["kind"], ans["value"]))
        elif proto == "acc_iou":
            b.preds.append(parsed.boxes[0] if parsed.boxes else None)
            b.gts.append(BBox.from_list(ans["value"][0]))
        else:
            raise EvalError(f"{rec.id}: unknown protocol {proto!r}")
    reports = [b.report() for b in buckets.values()]
    coverage = {
        "records": len(records),
        "predictions": len(predictions),
        "matched": len(matched),
        "unmatched": len(predictions) - len(matched),
        "missing": missing,
        "parse_diagnostics": diagnostics,
        "buckets": {k: len(v) for k, v in bucket_ids.items()},
    }
    return EvalResult(reports, coverage, bucket_ids)

import json
import logging
import random

import numpy as np
import pytest

from oracles import star_polygon
from tempeo.geom import BBox, Polygon, min_aabb, rasterize
from tempeo.ingest import (GeoLabel, ImageRef, IngestError, IngestStats, SceneRecord, SourceDescriptor,
                           dumps_interchange, ingest_source, normalize_frame, scene_from_interchange,
                           scene_to_interchange, tile, tile_count, tile_origins)


def _square(x, y, s):
    return Polygon([(x, y), (x + s, y), (x + s, y + s), (x, y + s)])


def _write_scene(base, d, touch_images=True):
    (base / "labels").mkdir(parents=True, exist_ok=True)
    (base / "labels" / f"{d['id']}.json").write_text(json.dumps(d))
    if touch_images:
        for p in d["images"]:
            (base / p).parent.mkdir(parents=True, exist_ok=True)
            (base / p).write_bytes(b"")


# ------------------------------------------------------------ tiling


def test_tile_counts():
    assert tile_count(1024, 1024) == 16
    assert tile_count(256, 256) == 1
    assert tile_count(10_000, 10_000, remainder="anchor") == 1600
    assert tile_count(10_000, 10_000, remainder="drop") == 1521
    assert tile_origins(600, 256) == [0, 256, 344]
    with pytest.raises(ValueError):
        tile_origins(600, 256, "pad")


def test_single_tile_has_identity_geometry():
    rec = SceneRecord("s", "xbd", [ImageRef("a.png"), ImageRef("b.png")], 256, 256,
                      labels=[GeoLabel(_square(10, 10, 20), sequence_class="Destroyed")])
    (only,) = tile(rec)
    assert only.extent == (256, 256)
    assert np.allclose(only.labels[0].polygon.exterior, rec.labels[0].polygon.exterior)
    assert only.images[0].uri() == "a.png#xywh=0,0,256,256"


def test_tiles_cover_extent_without_gaps():
    for w, h in [(1024, 1024), (600, 520), (256, 900)]:
        cover = np.zeros((h, w), np.int32)
        for tx in tile_origins(w, 256):
            for ty in tile_origins(h, 256):
                cover[ty:ty + 256, tx:tx + 256] += 1
        assert cover.min() >= 1


def _damage_scene():
    labels = [GeoLabel(_square(100, 100, 40), sequence_class="No damage"),
              GeoLabel(_square(400, 300, 30), sequence_class="Destroyed"),
              GeoLabel(_square(240, 700, 40), sequence_class="Minor Damage")]  # straddles x=256
    return SceneRecord("scene", "xbd", [ImageRef("pre.png"), ImageRef("post.png")], 1024, 1024, labels=labels)


def test_damage_scene_gives_sixteen_tiles_with_boxes_distributed():
    tiles = tile(_damage_scene())
    assert len(tiles) == 16
    per_tile = {t.id: len(t.labels) for t in tiles}
    assert per_tile["scene_000_000"] == 1
    assert per_tile["scene_001_001"] == 1
    # the straddling building is split between two neighbouring tiles
    assert per_tile["scene_002_000"] == 1 and per_tile["scene_002_001"] == 1
    assert sum(per_tile.values()) == 4
    for t in tiles:
        t.validate()
        for lab in t.labels:
            assert min_aabb(lab.polygon).fits(256, 256)


def test_conservation_of_foreground_pixels():
    rng = random.Random(4)
    for _ in range(10):
        labels = [GeoLabel(Polygon(star_polygon(rng, rng.uniform(40, 470), rng.uniform(40, 470), 5, 40)),
                           change="constructed") for _ in range(8)]
        rec = SceneRecord("c", "s2looking", [ImageRef("a"), ImageRef("b")], 512, 512, labels=labels)
        src = rasterize([(l.polygon, 1) for l in labels], (512, 512)).labels
        total = 0
        for t in tile(rec, drop_slivers=False):
            if t.labels:
                total += int(rasterize([(l.polygon, 1) for l in t.labels], (256, 256)).labels.sum())
        assert total == int(src.sum())


def test_slivers_are_dropped_and_counted():
    lab = GeoLabel(Polygon([(200, 10), (257, 10), (257, 30), (200, 30)]), change="demolished")
    rec = SceneRecord("s", "s2looking", [ImageRef("a"), ImageRef("b")], 512, 256, labels=[lab])
    stats = IngestStats()
    tiles = tile(rec, stats=stats)
    assert [len(t.labels) for t in tiles] == [1, 0]
    assert stats.dropped_slivers == 1


# ------------------------------------------------------------ frame normalisation


def test_normalize_square_tile():
    rec = SceneRecord("t", "xbd", [ImageRef("a")], 256, 256,
                      labels=[GeoLabel(Polygon.from_box(BBox(32, 32, 64, 64)), sequence_class="Destroyed")])
    out = normalize_frame(rec)
    assert out.extent == (224, 224)
    assert out.transforms[0].scale == 0.875
    assert min_aabb(out.labels[0].polygon) == BBox(28, 28, 56, 56)


def test_normalize_identity_for_224():
    rec = SceneRecord("t", "xbd", [ImageRef("a")], 224, 224,
                      labels=[GeoLabel(_square(3, 4, 10), sequence_class="Destroyed")])
    out = normalize_frame(rec)
    assert out.transforms[0].is_identity
    assert np.array_equal(out.labels[0].polygon.exterior, rec.labels[0].polygon.exterior)


def test_normalize_wide_tile_crops_sides():
    rec = SceneRecord("t", "xbd", [ImageRef("a")], 512, 256,
                      labels=[GeoLabel(_square(0, 0, 20), sequence_class="Destroyed"),
                              GeoLabel(_square(240, 100, 32), sequence_class="Destroyed")])
    stats = IngestStats()
    out = normalize_frame(rec, stats=stats)
    assert out.transforms[0].dx == 112.0
    assert len(out.labels) == 1 and stats.dropped_slivers == 1
    # x: 240 * .875 - 112 = 98, 272 * .875 - 112 = 126; y: 87.5 floors, 115.5 ceils
    assert min_aabb(out.labels[0].polygon) == BBox(98, 87, 126, 116)


# ------------------------------------------------------------ sources on disk


def test_ingest_qfabric_drops_empty_tiles(tmp_path):
    statuses = ["Land Cleared", "Construction Started"]
    d = {"id": "qf", "width": 512, "height": 256, "images": ["img/a.png", "img/b.png"],
         "labels": [{"polygon": [[10, 10], [60, 10], [60, 60], [10, 60]], "sequence_class": "Road",
                     "classes_per_timestep": statuses}]}
    _write_scene(tmp_path / "train", d)
    stats = IngestStats()
    recs = list(ingest_source(SourceDescriptor("qfabric", str(tmp_path)), stats=stats))
    assert [r.id for r in recs] == ["qf_000_000"]
    assert stats.dropped_empty_tiles == 1


def test_ingest_fmow_crop_box(tmp_path):
    d = {"id": "f", "width": 800, "height": 600, "images": ["a.jpg", "b.jpg", "c.jpg"],
         "sequence_class": "airport", "crop_box": [100, 50, 400, 250]}
    _write_scene(tmp_path / "train", d)
    (rec,) = ingest_source(SourceDescriptor("fmow_rgb", str(tmp_path)))
    assert [im.uri() for im in rec.images] == [f"{p}#xywh=100,50,300,200" for p in ("a.jpg", "b.jpg", "c.jpg")]
    assert rec.transforms[0].src_w == 300 and rec.extent == (224, 224)


def test_malformed_label_names_file_and_index(tmp_path):
    d = {"id": "bad", "width": 256, "height": 256, "images": ["a.png", "b.png"],
         "labels": [{"polygon": [[0, 0], [5, 0], [5, 5]], "sequence_class": "Destroyed"},
                    {"polygon": [[0, 0], [5, 0], [5, 5]], "sequence_class": "Flattened"}]}
    _write_scene(tmp_path / "train", d)
    with pytest.raises(IngestError) as err:
        list(ingest_source(SourceDescriptor("xbd", str(tmp_path))))
    assert "bad.json" in str(err.value) and "[record 1]" in str(err.value)
    assert err.value.index == 1


def test_invalid_json_and_self_intersection(tmp_path):
    base = tmp_path / "train" / "labels"
    base.mkdir(parents=True)
    (base / "x.json").write_text("{not json")
    with pytest.raises(IngestError, match="x.json"):
        list(ingest_source(SourceDescriptor("xbd", str(tmp_path))))
    with pytest.raises(IngestError, match="self-intersecting"):
        scene_from_interchange({"id": "b", "width": 9, "height": 9, "images": ["a"],
                                "labels": [{"polygon": [[0, 0], [4, 4], [4, 0], [0, 4]],
                                            "sequence_class": "Destroyed"}]}, "xbd")


def test_missing_image_is_skipped_with_warning(tmp_path, caplog):
    good = {"id": "g", "width": 256, "height": 256, "images": ["g1.png", "g2.png"], "labels": []}
    gone = {"id": "m", "width": 256, "height": 256, "images": ["m1.png", "m2.png"], "labels": []}
    _write_scene(tmp_path / "train", good)
    _write_scene(tmp_path / "train", gone, touch_images=False)
    stats = IngestStats()
    with caplog.at_level(logging.WARNING):
        recs = list(ingest_source(SourceDescriptor("xbd", str(tmp_path)), stats=stats))
    assert [r.id for r in recs] == ["g_000_000"]
    assert stats.missing_images == 1 and "m" in caplog.text


def test_source_descriptor_parse():
    d = SourceDescriptor.parse("xbd=/data/xbd:test")
    assert (d.kind, d.root, d.split) == ("xbd", "/data/xbd", "test")
    assert SourceDescriptor.parse("qfabric=rel/dir").split == "train"
    with pytest.raises(ValueError):
        SourceDescriptor.parse("landsat=/x")
    with pytest.raises(ValueError):
        SourceDescriptor.parse("xbd")


def test_interchange_round_trip_is_bit_exact():
    d = {"id": "r", "width": 300, "height": 200, "images": ["a.png", "b.png"], "sensor": "WorldView-2",
         "resolution": "high", "disaster_type": "flooding",
         "labels": [{"polygon": [[1.5, 2.25], [30, 2], [30, 40.125], [1, 40]], "sequence_class": "Destroyed"}]}
    rec = scene_from_interchange(d, "xbd")
    text = dumps_interchange(rec)
    again = scene_from_interchange(json.loads(text), "xbd")
    assert dumps_interchange(again) == text
    assert scene_to_interchange(rec)["labels"][0]["polygon"] == d["labels"][0]["polygon"] + [[1.5, 2.25]]


# ------------------------------------------------------------ fixture corpus sweep


def _stream(fixture_sources):
    out = []
    for desc in fixture_sources:
        out.extend(r.to_json() for r in ingest_source(desc))
    return json.dumps(out, sort_keys=True)


def test_ingest_is_idempotent(fixture_sources):
    assert _stream(fixture_sources) == _stream(fixture_sources)


def test_every_ingested_record_validates(fixture_sources):
    n = 0
    for desc in fixture_sources:
        for rec in ingest_source(desc):
            rec.validate()
            if desc.kind != "single_image_corpus":
                assert rec.extent == (224, 224)
                for lab in rec.labels:
                    assert min_aabb(lab.polygon).fits(224, 224)
            n += 1
    assert n > 0


def test_scene_record_invariants():
    with pytest.raises(ValueError, match="strictly increasing"):
        SceneRecord("x", "xbd", [ImageRef("a"), ImageRef("b")], 4, 4, order=[1, 1]).validate()
    with pytest.raises(ValueError, match="entries"):
        SceneRecord("x", "qfabric", [ImageRef("a")], 9, 9,
                    labels=[GeoLabel(_square(1, 1, 2), ["a", "b"])]).validate()
    with pytest.raises(ValueError, match="outside"):
        SceneRecord("x", "xbd", [ImageRef("a")], 9, 9,
                    labels=[GeoLabel(_square(5, 5, 8), sequence_class="Destroyed")]).validate()

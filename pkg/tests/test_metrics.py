import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import f1_oracle, raster_oracle, star_polygon, weighted_f1_oracle
from tempeo.geom import BBox, GeometryError, Mask, Polygon, rasterize
from tempeo.metrics import (F1Accumulator, MetricReport, PixelConfusion, RegionClassExample, Unscorable,
                            acc_at_iou, accuracy, class_weighted_f1, pixel_f1, qfabric_protocol,
                            render_table, sort_reports)


def _random_mask(rng, w, h, k):
    shapes = []
    for _ in range(rng.randint(0, 4)):
        label = rng.randint(1, k - 1)
        if rng.random() < 0.5:
            x0, y0 = rng.randrange(w), rng.randrange(h)
            shapes.append((BBox(x0, y0, x0 + rng.randint(1, w), y0 + rng.randint(1, h)), label))
        else:
            shapes.append((Polygon(star_polygon(rng, rng.uniform(0, w), rng.uniform(0, h), 1, w)), label))
    return rasterize(shapes, (w, h), k)


def test_pixel_f1_matches_oracle():
    rng = random.Random(1)
    for _ in range(100):
        w, h = rng.randint(1, 40), rng.randint(1, 40)
        p, g = _random_mask(rng, w, h, 2), _random_mask(rng, w, h, 2)
        assert pixel_f1(p, g) == pytest.approx(f1_oracle(p.labels.tolist(), g.labels.tolist()), abs=1e-12)


def test_class_weighted_f1_matches_oracle():
    rng = random.Random(2)
    for _ in range(100):
        w, h, k = rng.randint(1, 40), rng.randint(1, 40), rng.randint(2, 6)
        p, g = _random_mask(rng, w, h, k), _random_mask(rng, w, h, k)
        expected = weighted_f1_oracle(p.labels.tolist(), g.labels.tolist(), k)
        if expected is None:
            with pytest.raises(Unscorable):
                class_weighted_f1(p, g, k)
        else:
            assert class_weighted_f1(p, g, k) == pytest.approx(expected, abs=1e-12)


def test_f1_hand_example():
    g = Mask(np.array([[1, 1, 0, 0]], np.uint8))
    p = Mask(np.array([[1, 0, 1, 0]], np.uint8))
    assert pixel_f1(p, g) == pytest.approx(0.5)  # 2*1 / (2*1 + 1 + 1)


def test_both_empty_is_perfect_and_weighted_is_unscorable():
    e = Mask.empty(8, 8)
    assert pixel_f1(e, e) == 1.0
    with pytest.raises(Unscorable):
        class_weighted_f1(e, e, 3)


def test_extent_mismatch_raises():
    with pytest.raises(GeometryError, match="extent"):
        pixel_f1(Mask.empty(4, 4), Mask.empty(4, 5))


@given(st.integers(0, 10_000))
def test_weighted_reduces_to_binary_for_two_classes(seed):
    rng = random.Random(seed)
    p, g = _random_mask(rng, 24, 24, 2), _random_mask(rng, 24, 24, 2)
    if not g.labels.any():
        return
    assert class_weighted_f1(p, g, 2) == pytest.approx(pixel_f1(p, g), abs=1e-12)


@given(st.integers(0, 10_000))
def test_perfect_prediction_scores_one(seed):
    rng = random.Random(seed)
    g = _random_mask(rng, 20, 20, 4)
    assert pixel_f1(g, g) == 1.0
    if g.labels.any():
        assert class_weighted_f1(g, g, 4) == pytest.approx(1.0)


def _pairs(seed, n, k):
    rng = random.Random(seed)
    return [(_random_mask(rng, 16, 12, k), _random_mask(rng, 16, 12, k)) for _ in range(n)]


@given(st.integers(0, 10_000), st.integers(1, 6))
def test_micro_average_equals_concatenated_masks(seed, n):
    pairs = _pairs(seed, n, 2)
    acc = F1Accumulator("binary")
    for p, g in pairs:
        acc.add(p, g)
    cat_p = Mask(np.concatenate([p.labels for p, _ in pairs], axis=1))
    cat_g = Mask(np.concatenate([g.labels for _, g in pairs], axis=1))
    assert acc.value == pytest.approx(pixel_f1(cat_p, cat_g), abs=1e-12)


@given(st.integers(0, 10_000), st.randoms())
def test_micro_average_is_order_and_partition_invariant(seed, shuffler):
    pairs = _pairs(seed, 6, 4)
    a = F1Accumulator("weighted", 4)
    for p, g in pairs:
        a.add(p, g)
    order = list(pairs)
    shuffler.shuffle(order)
    cut = shuffler.randint(0, len(order))
    left, right = F1Accumulator("weighted", 4), F1Accumulator("weighted", 4)
    for p, g in order[:cut]:
        left.add(p, g)
    for p, g in order[cut:]:
        right.add(p, g)
    merged = left.merge(right)
    assert np.array_equal(merged.confusion.tp, a.confusion.tp)
    assert merged.value == a.value


def test_confusion_addition_pads_class_counts():
    a = PixelConfusion.zeros(2)
    a.tp[1] = 3
    b = PixelConfusion.zeros(4)
    b.fn[3] = 2
    s = a + b
    assert s.tp.tolist() == [0, 3, 0, 0] and s.fn.tolist() == [0, 0, 0, 2]


def test_accuracy():
    assert accuracy(["yes", "no", None], ["yes", "yes", "no"]) == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        accuracy([], [])
    with pytest.raises(ValueError):
        accuracy(["a"], ["a", "b"])


def test_acc_at_iou_example():
    gt = [BBox(0, 0, 10, 10)] * 3
    preds = [BBox(0, 0, 10, 10), BBox(5, 0, 15, 10), None]  # IoU 1, 1/3, miss
    assert acc_at_iou(preds, gt) == pytest.approx(1 / 3)
    # IoU of exactly 0.5 counts as a hit; only the first of several boxes counts
    assert acc_at_iou([[BBox(0, 0, 10, 20), BBox(50, 50, 60, 60)]], [BBox(0, 0, 10, 10)]) == 1.0
    assert acc_at_iou([[]], [BBox(0, 0, 10, 10)]) == 0.0


# ------------------------------------------------------------ region classification

CHANGE = ["Residential", "Commercial", "Road"]
SQUARES = [Polygon([(x, 2), (x + w, 2), (x + w, 2 + w), (x, 2 + w)]) for x, w in ((1, 4), (8, 6), (20, 3))]


def test_window2_perfect_and_invalid_window():
    exs = [RegionClassExample(p, (32, 16), [c], [c]) for p, c in zip(SQUARES, CHANGE)]
    assert qfabric_protocol(exs, 2, CHANGE) == pytest.approx(1.0)
    with pytest.raises(ValueError, match="window"):
        qfabric_protocol(exs, 3, CHANGE)


def test_window2_fixed_class_matches_counting_oracle():
    exs = [RegionClassExample(p, (32, 16), [c], ["Residential"]) for p, c in zip(SQUARES, CHANGE)]
    value = qfabric_protocol(exs, 2, CHANGE)
    # one image per example, concatenated side by side
    label = {c: i + 1 for i, c in enumerate(CHANGE)}
    gt_rows = [[] for _ in range(16)]
    pred_rows = [[] for _ in range(16)]
    for p, c in zip(SQUARES, CHANGE):
        ring = [tuple(v) for v in p.exterior.tolist()]
        g = raster_oracle([("rings", [ring], label[c])], 32, 16)
        q = raster_oracle([("rings", [ring], label["Residential"])], 32, 16)
        for r in range(16):
            gt_rows[r] += g[r]
            pred_rows[r] += q[r]
    assert value == pytest.approx(weighted_f1_oracle(pred_rows, gt_rows, 4), abs=1e-12)


def test_constant_class_closed_form():
    # predicting class c on every polygon: F1_c = 2s/(1+s), other classes 0,
    # so the weighted score is s * 2s/(1+s) with s the pixel share of c
    exs = [RegionClassExample(p, (32, 16), [c], ["Commercial"]) for p, c in zip(SQUARES, CHANGE)]
    s = 36 / (16 + 36 + 9)
    assert qfabric_protocol(exs, 2, CHANGE) == pytest.approx(s * 2 * s / (1 + s), abs=1e-12)


def test_window5_one_wrong_timestep():
    statuses = ["prior construction", "land cleared", "construction started", "construction midway",
                "construction done"]
    pred = list(statuses)
    pred[2] = "land cleared"
    ex = RegionClassExample(SQUARES[1], (32, 16), statuses, pred)
    assert qfabric_protocol([ex], 5, statuses) == pytest.approx(0.8)
    perfect = RegionClassExample(SQUARES[1], (32, 16), statuses, statuses)
    assert qfabric_protocol([perfect], 5, statuses) == pytest.approx(1.0)


def test_window5_missing_prediction_counts_as_wrong():
    statuses = ["a", "b"]
    ex = RegionClassExample(SQUARES[0], (32, 16), ["a", "b"], ["a"])
    assert qfabric_protocol([ex], 5, statuses) == pytest.approx(0.5)


# ------------------------------------------------------------ reports

def test_metric_report_bounds():
    with pytest.raises(ValueError):
        MetricReport("qa", "xBD", "Accuracy", 1.2, 3)
    with pytest.raises(ValueError):
        MetricReport("qa", "xBD", "Accuracy", 0.5, 0)
    MetricReport("qa", "xBD", "Accuracy", None, 0)


def test_render_table_orders_categories_and_marks_missing():
    rows = [
        MetricReport("rtqa", "QFabric [5 images]", "F1", 0.25, 4),
        MetricReport("tsc", "fMoW Sentinel", "Accuracy", 0.5, 2),
        MetricReport("cd_loc", "xBD Loc.", "F1", None, 0),
        MetricReport("tsc", "fMoW RGB", "Accuracy", 1.0, 2),
    ]
    assert [r.dataset for r in sort_reports(rows)] == ["fMoW RGB", "fMoW Sentinel", "xBD Loc.",
                                                       "QFabric [5 images]"]
    lines = render_table(rows).splitlines()
    assert lines[0].split()[:2] == ["Task", "Dataset/Subtask"]
    assert lines[2].startswith("TSC") and lines[3].startswith(" ")
    assert lines[4].split()[-2:] == ["-", "0"]
    assert lines[5].split()[-2:] == ["25.0", "4"]


def test_report_json_round_trip():
    r = MetricReport("qa", "S2Looking", "Accuracy", 0.75, 8, meta={"protocol": "accuracy"})
    assert MetricReport.from_json(r.to_json()) == r

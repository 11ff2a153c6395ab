import json
import re

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tempeo._util import rng_for
from tempeo.geom import Polygon
from tempeo.ingest import GeoLabel, ImageRef, SceneRecord, SourceDescriptor
from tempeo.respond import extract_answer
from tempeo.taskgen import (BOX_REQUEST, DEFAULT_BANK, DEFAULT_TEMPLATES, MAX_IMAGES, TASK_VARIANTS, TASKS,
                            VARIANTS, BuildConfig, ConversationRecord, TaskLabelMismatch, build_prompt,
                            emit_corpus, most_affected_cell, render_answer, render_chat, sample_sequence,
                            sequence_prompt)


def _square(x, y, s):
    return Polygon([(x, y), (x + s, y), (x + s, y + s), (x, y + s)])


def _seq(n, source="fmow_rgb", **kw):
    return SceneRecord(f"s{n}", source, [ImageRef(f"{i}.png") for i in range(n)], 224, 224, **kw)


def _xbd(labels, **kw):
    return SceneRecord("x", "xbd", [ImageRef("pre.png"), ImageRef("post.png")], 224, 224, labels=labels,
                       sensor="WorldView-3", resolution="high", disaster_type="flooding", **kw)


# ------------------------------------------------------------ sequence sampling


def test_short_sequences_are_unchanged():
    rec = _seq(2)
    assert sample_sequence(rec, seed=5) is rec


@given(st.integers(0, 10_000))
def test_long_sequences_are_capped_in_order(seed):
    rec = _seq(12)
    out = sample_sequence(rec, seed=seed)
    assert out.n_images == MAX_IMAGES
    idx = [int(im.path.split(".")[0]) for im in out.images]
    assert idx == sorted(set(idx)) and out.order == idx
    assert sample_sequence(rec, seed=seed).order == out.order


def test_subsequence_lengths_are_uniform():
    rec = _seq(5, "qfabric")
    counts = np.zeros(6, dtype=int)
    for i in range(10_000):
        counts[sample_sequence(rec, rng=rng_for(0, "chi2", i), subseq_prob=1.0).n_images] += 1
    obs = counts[2:]
    assert counts[:2].sum() == 0
    chi2 = float(((obs - 2500) ** 2 / 2500).sum())
    assert chi2 < 11.34  # 3 degrees of freedom, p = 0.01


def test_subsequences_slice_per_timestep_labels():
    statuses = ["Greenland", "Land Cleared", "Excavation", "Construction Started", "Construction Done"]
    rec = _seq(5, "qfabric", labels=[GeoLabel(_square(5, 5, 20), statuses, "Residential")])
    for i in range(50):
        out = sample_sequence(rec, rng=rng_for(1, i), subseq_prob=1.0)
        assert out.labels[0].classes_per_timestep == [statuses[k] for k in out.order]
        out.validate()


# ------------------------------------------------------------ prompts


def test_sequence_prompt_format():
    assert sequence_prompt(2, "high", "WorldView-3") == (
        "This is a sequence of high resolution, optical satellite images from WorldView-3: "
        "Image 1: <image> Image 2: <image>.")
    assert sequence_prompt(1) == "This is a sequence of satellite images: Image 1: <image>."


def test_damage_classification_answer():
    rec = _xbd([GeoLabel(_square(40, 40, 30), sequence_class="Minor Damage")])
    conv = build_prompt(rec, "cd_dmg", seed=1)
    assert conv.answer_text == "Minor Damage."
    assert "[40, 40, 70, 70]" in conv.user_text and "Choose from:" in conv.user_text
    conv.validate()


def test_temporal_reference_answer():
    rec = _seq(2, "qfabric", labels=[GeoLabel(_square(10, 10, 30), ["Land Cleared", "Land Cleared"], "Road")])
    conv = build_prompt(rec, "tre", seed=0, variant="qf_visible")
    assert conv.answer_text == "Image 1, Image 2"


def test_most_affected_cell_answer():
    labels = [GeoLabel(_square(5, 90, 40), sequence_class="Destroyed"),       # centre-left cell
              GeoLabel(_square(160, 10, 20), sequence_class="Minor Damage"),  # top-right, smaller
              GeoLabel(_square(100, 170, 50), sequence_class="No damage")]    # undamaged, ignored
    rec = _xbd(labels)
    assert most_affected_cell(rec) == "center left"
    conv = build_prompt(rec, "qa", seed=0, variant="xbd_most_affected")
    assert conv.answer_text == "The center left of the image was most affected by the disaster."


def test_most_affected_tie_goes_to_first_cell_in_reading_order():
    rec = _xbd([GeoLabel(_square(160, 10, 20), sequence_class="Destroyed"),
                GeoLabel(_square(10, 160, 20), sequence_class="Destroyed")])
    assert most_affected_cell(rec) == "top right"


def test_box_tasks_request_box_format():
    rec = _xbd([GeoLabel(_square(40, 40, 30), sequence_class="Destroyed")])
    conv = build_prompt(rec, "cd_loc", seed=0)
    assert conv.user_text.endswith(BOX_REQUEST)
    assert conv.answer_text == "[40, 40, 70, 70]."


def test_empty_box_answer():
    conv = build_prompt(_xbd([]), "cd_loc", seed=0)
    assert conv.answer_text == "There are no buildings in the image."
    assert conv.meta["answer"]["value"] == []


def test_task_label_mismatch_names_requirement():
    with pytest.raises(TaskLabelMismatch, match="labelled building"):
        build_prompt(_xbd([]), "cd_dmg")
    with pytest.raises(TaskLabelMismatch, match="not defined"):
        build_prompt(_xbd([]), "tre")
    rec = _seq(3)
    with pytest.raises(TaskLabelMismatch, match="scene class"):
        build_prompt(rec, "tsc")


def test_metadata_injection_frequency():
    rec = _seq(2, sensor="WorldView-3", resolution="high", sequence_class="airport")
    res = sensor = 0
    n = 10_000
    for seed in range(n):
        meta = build_prompt(rec, "tsc", seed=seed).meta
        res += meta["resolution"] is not None
        sensor += meta["sensor"] is not None
    assert 0.47 <= res / n <= 0.53
    assert 0.47 <= sensor / n <= 0.53


def test_render_chat_prefix():
    rec = _seq(2, sequence_class="airport")
    chat = render_chat(build_prompt(rec, "tsc"))
    assert chat.startswith("A chat between a curious user")
    assert " USER: This is a sequence of" in chat and " ASSISTANT: Airport." in chat


def test_record_validation_rejects_bad_refs():
    rec = ConversationRecord("r", ["a", "b"], "qa", [])
    rec.turns = []
    with pytest.raises(ValueError):
        rec.validate()
    from tempeo.taskgen import Turn

    bad = ConversationRecord("r", ["a", "b"], "qa",
                             [Turn("user", "This is a sequence of satellite images: Image 1: <image>. Q?"),
                              Turn("assistant", "Yes.")])
    with pytest.raises(ValueError, match="image references"):
        bad.validate()
    boxes = ConversationRecord("r", ["a"], "qa",
                               [Turn("user", sequence_prompt(1) + " Q?"), Turn("assistant", "[5, 5, 2, 9]")])
    with pytest.raises(ValueError, match="box"):
        boxes.validate()


# ------------------------------------------------------------ template bank


def test_every_task_has_templates():
    covered = {t for fam in TASK_VARIANTS.values() for t in fam} | {"single_image_passthrough"}
    assert covered == set(TASKS)
    for fam in TASK_VARIANTS.values():
        for variants in fam.values():
            for v in variants:
                assert v in VARIANTS and DEFAULT_BANK[v]
    for name, templates in DEFAULT_TEMPLATES.items():
        assert any(t.verbatim for t in templates), name


def test_description_tasks_have_eight_paraphrases():
    for fam in TASK_VARIANTS.values():
        for task in ("region_caption", "detailed_desc", "grounded_desc"):
            for v in fam.get(task, ()):
                assert len(DEFAULT_TEMPLATES[v]) >= 8, v


def test_box_templates_render_parseable_answers():
    boxes = [[0, 0, 5, 5], [10, 12, 40, 50]]
    for name, templates in DEFAULT_TEMPLATES.items():
        for t in templates:
            if "{boxes}" not in t.answer:
                continue
            text = render_answer(t.answer, "boxes", boxes, t.empty)
            assert extract_answer(text, "boxes") == boxes, name
            assert t.empty is not None and extract_answer(t.empty, "boxes") == []


# ------------------------------------------------------------ corpus


def test_corpus_invariants(corpus):
    assert corpus
    for conv in corpus:
        conv.validate()
        n = len(conv.images)
        assert 1 <= n <= MAX_IMAGES
        if conv.task != "single_image_passthrough":
            refs = [int(k) for k in re.findall(r"Image (\d+): <image>", conv.user_text)]
            assert refs == list(range(1, n + 1))
        opts = conv.meta.get("options")
        if opts and conv.meta["answer"]["kind"] == "class":
            assert conv.meta["answer"]["value"] in opts
        assert ConversationRecord.from_json(json.loads(json.dumps(conv.to_json()))).to_json() == conv.to_json()


def test_corpus_covers_every_source(corpus):
    sources = {c.meta["source"] for c in corpus}
    assert {"xbd", "s2looking", "qfabric", "single_image_corpus"} <= sources
    assert sources & {"fmow_rgb", "fmow_sentinel"}


def test_fmow_variants_are_exclusive_per_sequence(corpus):
    scenes = [c.meta["scene"] for c in corpus if c.meta["source"].startswith("fmow")]
    assert len(scenes) == len(set(scenes))


def test_fixed_mix_gives_one_task(tmp_path):
    from tempeo.fixtures import FixtureConfig, make_fixtures

    cfg = FixtureConfig(seed=1, scenes={"xbd": 10}, extents={"xbd": (256, 256)}, write_images=False)
    descs = make_fixtures(tmp_path, cfg)
    man = {}
    out = list(emit_corpus([descs["xbd"]], BuildConfig(seed=2, mix={"xbd": {"cd_loc": 1.0}}), manifest=man))
    assert len(out) == 10 and {c.task for c in out} == {"cd_loc"}
    assert man["tasks"] == {"cd_loc": 10}


def test_emit_is_deterministic(fixture_sources):
    cfg = BuildConfig(seed=11)
    a = [json.dumps(c.to_json(), sort_keys=True) for c in emit_corpus(fixture_sources, cfg)]
    b = [json.dumps(c.to_json(), sort_keys=True) for c in emit_corpus(fixture_sources, cfg)]
    assert a == b


def test_empty_source_is_an_error(tmp_path):
    (tmp_path / "train" / "labels").mkdir(parents=True)
    with pytest.raises(ValueError, match="empty"):
        list(emit_corpus([SourceDescriptor("xbd", str(tmp_path))], BuildConfig()))

"""Instruction-following conversation records from normalised SceneRecords.

Each record gets one task drawn from a per-source mix, one phrasing drawn
from the template bank, and a user turn made of the sequence prompt (with an
``Image k: `` reference before every image placeholder) followed by the task
instruction.  The assistant turn is rendered from structured ground truth
that is also stored in ``meta["answer"]`` so responses can be parsed back and
compared against it.

All randomness for a record comes from ``(seed, record id)``; output does not
depend on worker scheduling.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ._util import parallel_map, rng_for
from .geom import BBox, min_aabb, rasterize
from .ingest import (IngestStats, SceneRecord, SourceDescriptor, expand_scene, load_scenes,
                     load_single_image_corpus, TILE_SIZE)
from .vocab import (CHANGE_STATUSES, CHANGE_TYPES, DAMAGE_CLASSES, DAMAGED, DATASET_NAMES, DISASTER_TYPES,
                    FMOW_CLASSES, GRID_CELLS, SEVERITY, fmow_display)

log = logging.getLogger(__name__)

MAX_IMAGES = 8
IMAGE_TOKEN = "<image>"
CHAT_PREAMBLE = ("A chat between a curious user and an artificial intelligence assistant. "
                 "The assistant gives helpful, detailed, and polite answers to the user's questions.")
BOX_REQUEST = "Please include bounding boxes of the form [x_min, y_min, x_max, y_max] in your response."

TASKS = ("tsc", "cd_loc", "cd_dmg", "cd_det", "sre", "qa", "rqa", "tre", "rtqa", "region_caption",
         "detailed_desc", "grounded_desc", "single_image_passthrough")
ANSWER_KINDS = ("boxes", "class", "image_refs", "polarity", "grid_cell", "count", "text")

FMOW_OPTIONS = tuple(fmow_display(c) for c in FMOW_CLASSES)
DISASTER_OPTIONS = tuple(sorted(set(DISASTER_TYPES.values())))

_NUMBER_WORDS = ("no", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten")


class TaskLabelMismatch(ValueError):
    """The record lacks the labels a task needs."""


# ------------------------------------------------------------ templates

@dataclass(frozen=True)
class Template:
    instruction: str
    answer: str
    empty: Optional[str] = None  # answer used when the box list is empty
    verbatim: bool = False       # canonical phrasing for the task


T = Template

_CHANGE_ANSWERS = (
    "{Change_summary}.", "In this area, {change_summary}.", "Comparing the two images, {change_summary}.",
    "Between the first and second image, {change_summary}.", "Over time, {change_summary}.",
    "The images show that {change_summary}.", "Looking at the sequence, {change_summary}.",
    "From the first image to the second, {change_summary}.",
)

DEFAULT_TEMPLATES: Dict[str, Tuple[Template, ...]] = {
    # temporal scene classification
    "fmow_class": (
        T("What class does this sequence of images belong to? Choose from: {options}.", "{cls}.", verbatim=True),
        T("Classify this sequence of images. Choose from: {options}.", "{cls}."),
        T("Which category best describes the site shown in these images? Choose from: {options}.", "{cls}."),
    ),
    # change detection
    "xbd_loc": (
        T("Identify all the buildings in the image. " + BOX_REQUEST, "{boxes}.",
          "There are no buildings in the image.", verbatim=True),
        T("Locate every building in the image. " + BOX_REQUEST, "{boxes}.", "There are no buildings in the image."),
        T("Where are the buildings in this area? " + BOX_REQUEST, "{boxes}.", "There are no buildings in the image."),
    ),
    "xbd_dmg": (
        T("Classify the level of damage experienced by the building at location {box} in the second image. "
          "Choose from: {options}.", "{cls}.", verbatim=True),
        T("What level of damage did the building at {box} suffer in the second image? Choose from: {options}.",
          "{cls}."),
    ),
    "s2_det": (
        T("Identify all changed buildings. " + BOX_REQUEST, "{boxes}", "No buildings have changed.", verbatim=True),
        T("Which buildings have changed between the images? " + BOX_REQUEST, "{boxes}",
          "No buildings have changed."),
    ),
    # spatial change referring expressions
    "xbd_sre": (
        T("Identify the {phrase} buildings in the image. " + BOX_REQUEST, "{boxes}.",
          "There are no {phrase} buildings in the image.", verbatim=True),
        T("Locate all {phrase} buildings. " + BOX_REQUEST, "{boxes}.",
          "There are no {phrase} buildings in the image."),
    ),
    "xbd_sre_section": (
        T("Identify the {phrase} buildings in the {section} of the image. " + BOX_REQUEST, "{boxes}.",
          "There are no {phrase} buildings in the {section} of the image.", verbatim=True),
    ),
    "xbd_sre_region": (
        T("Identify the {phrase} buildings in this area {box}. " + BOX_REQUEST, "{boxes}.",
          "There are no {phrase} buildings in the given area.", verbatim=True),
    ),
    "s2_sre": (
        T("Identify the {phrase} buildings in the image. " + BOX_REQUEST, "{boxes}",
          "There are no {phrase} buildings in the image.", verbatim=True),
        T("Find all {phrase} buildings. " + BOX_REQUEST, "{boxes}", "There are no {phrase} buildings in the image."),
    ),
    "s2_largest": (
        T("What is the largest building that experienced a change? " + BOX_REQUEST, "{boxes}.",
          "No buildings have changed.", verbatim=True),
    ),
    # change question answering
    "xbd_disaster": (
        T("What disaster has occurred here?", "{cls_article}.", verbatim=True),
        T("What type of disaster affected this area?", "{cls_article}."),
    ),
    "xbd_most_affected": (
        T("Which part of the image was most affected by the disaster?",
          "The {cell} of the image was most affected by the disaster.", verbatim=True),
    ),
    "xbd_count_destroyed": (
        T("How many buildings in the image have been destroyed?", "{count}.", verbatim=True),
    ),
    "xbd_any": (
        T("Are there any {phrase} buildings in the image?", "{yesno}.", verbatim=True),
        T("Are there any {phrase} buildings in the image? Please answer with Yes or No.", "{yesno}."),
    ),
    "s2_any": (
        T("Have any buildings been {phrase} in the area? Please answer with Yes or No.", "{yesno}.", verbatim=True),
    ),
    "s2_count": (
        T("How many buildings in the image have been built or destroyed?", "{count}.", verbatim=True),
    ),
    # region-based question answering
    "xbd_region_any": (
        T("Are there any damaged buildings in this region {box}?", "{yesno}.", verbatim=True),
    ),
    "xbd_severity": (
        T("How severe is the damage to this building {box}?", "The given building {severity}.", verbatim=True),
    ),
    "s2_region_changed": (
        T("Has the area {box} changed? Please answer with Yes or No.", "{yesno}.", verbatim=True),
    ),
    "qf_any_dev": (
        T("Has there been urban development in this area {box}?", "{yesno}", verbatim=True),
    ),
    "qf_change_type": (
        T("Identify the type of urban development that has occurred in this area {box}. Choose from: {options}.",
          "{cls}", verbatim=True),
    ),
    # temporal referring expressions
    "qf_transition": (
        T("Identify all images in which {phrase} in this region {box} from the previous image.", "{refs}",
          verbatim=True),
        T("Identify all images in which {phrase} in this area {box} from the previous image.", "{refs}"),
    ),
    "qf_visible": (
        T("In which images is {status} visible in this region {box}?", "{refs}", verbatim=True),
    ),
    # region-based temporal question answering
    "qf_between": (
        T("Has there been urban development in this area {box} between image {n} and image {m}?", "{yesno}",
          verbatim=True),
    ),
    "qf_status": (
        T("What is the development status in this region {box} in image {n}? Choose from: {options}.", "{cls}",
          verbatim=True),
    ),
    # captions and descriptions
    "xbd_region_caption": tuple(
        T("How has this building {box} changed?", a, verbatim=(i == 0)) for i, a in enumerate((
            "The given building {severity}.", "This building {severity}.",
            "After the {disaster}, the building {severity}.", "Following the {disaster}, this building {severity}.",
            "The building at this location {severity}.", "Compared with the first image, the building {severity}.",
            "In the second image, the building {severity}.", "Looking at both images, the building {severity}.",
        ))),
    "xbd_detailed": tuple(
        T("Describe how the buildings have changed.", a, verbatim=(i == 0)) for i, a in enumerate((
            "There has been {disaster_article} that has damaged {n_damaged} in the area.",
            "{Disaster_article} has struck this area and damaged {n_damaged}.",
            "The area was hit by {disaster_article}, leaving {n_damaged} damaged.",
            "After {disaster_article}, {n_damaged} in this area show damage.",
            "This region experienced {disaster_article}; {n_damaged} were damaged.",
            "Comparing the images, {disaster_article} has damaged {n_damaged}.",
            "The second image shows the aftermath of {disaster_article}, with {n_damaged} damaged.",
            "Due to {disaster_article}, {n_damaged} in the area have been damaged.",
        ))),
    "xbd_grounded": tuple(
        T("Describe how the buildings have changed. Include bounding boxes. " + BOX_REQUEST, a, e, verbatim=(i == 0))
        for i, (a, e) in enumerate((
            ("There has been {disaster_article} that has damaged buildings at the locations {boxes}.",
             "There has been {disaster_article}, but no buildings in the area were damaged."),
            ("{Disaster_article} damaged the buildings at {boxes}.",
             "{Disaster_article} struck, but no damaged buildings are visible."),
            ("The {disaster} left damaged buildings at {boxes}.", "The {disaster} left no damaged buildings here."),
            ("Damaged buildings after the {disaster} are located at {boxes}.",
             "No buildings were damaged by the {disaster}."),
            ("Following {disaster_article}, damage is visible at {boxes}.",
             "Following {disaster_article}, no damage to buildings is visible."),
            ("The buildings at {boxes} were damaged by {disaster_article}.",
             "None of the buildings were damaged by {disaster_article}."),
            ("Comparing the images, {disaster_article} damaged buildings at {boxes}.",
             "Comparing the images, {disaster_article} did not damage any buildings."),
            ("In the second image, buildings damaged by {disaster_article} appear at {boxes}.",
             "In the second image, no buildings appear damaged by {disaster_article}."),
        ))),
    "s2_region_caption": tuple(
        T("Describe how the buildings have changed in this area: {box}.", a, verbatim=(i == 0))
        for i, a in enumerate(_CHANGE_ANSWERS)),
    "s2_detailed": tuple(
        T("Provide a detailed description of the buildings that have changed.", a, verbatim=(i == 0))
        for i, a in enumerate(_CHANGE_ANSWERS)),
    "s2_grounded": tuple(
        T("Provide a detailed description of the buildings that have changed. Include bounding boxes in your output. "
          + BOX_REQUEST, a, e, verbatim=(i == 0))
        for i, (a, e) in enumerate((
            ("{Change_summary} {boxes}.", "No buildings have changed."),
            ("{Change_summary}, at {boxes}.", "None of the buildings have changed."),
            ("In this area, {change_summary}: {boxes}.", "In this area, no buildings have changed."),
            ("Comparing the two images, {change_summary} at {boxes}.",
             "Comparing the two images, no buildings have changed."),
            ("Over time, {change_summary}. They are located at {boxes}.", "Over time, no buildings have changed."),
            ("The images show that {change_summary}, located at {boxes}.",
             "The images show no changed buildings."),
            ("Between the images, {change_summary}: {boxes}.", "Between the images, no buildings changed."),
            ("{Change_summary}; their locations are {boxes}.", "There are no changed buildings."),
        ))),
    "qf_region_caption": tuple(
        T("How has the area {box} changed as a result of urban development?", a, verbatim=(i == 0))
        for i, a in enumerate((
            "This region was {first} at first, and then became {last}.",
            "The area started as {first} and ended as {last}.",
            "At first this area was {first}; by the last image it had become {last}.",
            "This region changed from {first} to {last}.",
            "Initially {first}, the area later became {last}.",
            "In the first image the area is {first}, and it becomes {last} over the sequence.",
            "The development here progressed from {first} to {last}.",
            "Over the sequence, this region went from {first} to {last}.",
        ))),
}

TASK_VARIANTS: Dict[str, Dict[str, Tuple[str, ...]]] = {
    "fmow": {"tsc": ("fmow_class",)},
    "xbd": {
        "cd_loc": ("xbd_loc",), "cd_dmg": ("xbd_dmg",),
        "sre": ("xbd_sre", "xbd_sre_section", "xbd_sre_region"),
        "qa": ("xbd_disaster", "xbd_most_affected", "xbd_count_destroyed", "xbd_any"),
        "rqa": ("xbd_region_any", "xbd_severity"),
        "region_caption": ("xbd_region_caption",), "detailed_desc": ("xbd_detailed",),
        "grounded_desc": ("xbd_grounded",),
    },
    "s2looking": {
        "cd_det": ("s2_det",), "sre": ("s2_sre", "s2_largest"), "qa": ("s2_any", "s2_count"),
        "rqa": ("s2_region_changed",), "region_caption": ("s2_region_caption",),
        "detailed_desc": ("s2_detailed",), "grounded_desc": ("s2_grounded",),
    },
    "qfabric": {
        "tre": ("qf_transition", "qf_visible"), "rqa": ("qf_any_dev", "qf_change_type"),
        "rtqa": ("qf_between", "qf_status"), "region_caption": ("qf_region_caption",),
    },
}


class TemplateBank:
    """Phrasings per variant, grouped per task tag through :data:`TASK_VARIANTS`."""

    def __init__(self, templates: Optional[Mapping[str, Sequence[Template]]] = None):
        self.templates = {k: tuple(v) for k, v in (templates or DEFAULT_TEMPLATES).items()}

    def __getitem__(self, variant: str) -> Tuple[Template, ...]:
        return self.templates[variant]

    def for_task(self, task: str) -> List[Tuple[str, Template]]:
        out = []
        for by_task in TASK_VARIANTS.values():
            for variant in by_task.get(task, ()):
                out.extend((variant, t) for t in self.templates[variant])
        return out


DEFAULT_BANK = TemplateBank()


# ------------------------------------------------------------ rendering

def format_box(box) -> str:
    b = box.as_list() if isinstance(box, BBox) else list(box)
    return "[{}, {}, {}, {}]".format(*b)


def number_phrase(n: int, noun: str = "building") -> str:
    word = _NUMBER_WORDS[n] if n < len(_NUMBER_WORDS) else str(n)
    return f"{word} {noun}" if n == 1 else f"{word} {noun}s"


def with_article(phrase: str) -> str:
    return ("an " if phrase[:1].lower() in "aeiou" else "a ") + phrase


class _Keep(dict):
    def __missing__(self, key):
        return "{" + key + "}"


def fill(template: str, **slots) -> str:
    return template.format_map(_Keep(slots))


def render_answer(template: str, kind: str, value, empty: Optional[str] = None) -> str:
    """Fill the answer slot of ``template`` from structured ground truth."""
    if kind == "boxes":
        if not value:
            if empty is None:
                raise ValueError("empty box list needs an empty-answer template")
            return empty
        return template.replace("{boxes}", ", ".join(format_box(b) for b in value))
    if kind == "class":
        return (template.replace("{cls}", value).replace("{cls_article}", with_article(value).capitalize())
                .replace("{severity}", SEVERITY.get(value, value.lower())))
    if kind == "image_refs":
        return template.replace("{refs}", ", ".join(f"Image {k}" for k in value))
    if kind == "polarity":
        return template.replace("{yesno}", value.capitalize())
    if kind == "grid_cell":
        return template.replace("{cell}", value)
    if kind == "count":
        return template.replace("{count}", str(value))
    if kind == "text":
        return value
    raise ValueError(f"unknown answer kind {kind!r}")


def sequence_prompt(n_images: int, resolution: Optional[str] = None, sensor: Optional[str] = None) -> str:
    """User-turn prefix: the sequence description with one ``Image k: <image>`` per image."""
    desc = f"{resolution} resolution, optical satellite images" if resolution else "satellite images"
    if sensor:
        desc += f" from {sensor}"
    refs = " ".join(f"Image {k}: {IMAGE_TOKEN}" for k in range(1, n_images + 1))
    return f"This is a sequence of {desc}: {refs}."


# ------------------------------------------------------------ records

@dataclass
class Turn:
    role: str
    text: str


@dataclass
class ConversationRecord:
    id: str
    images: List[str]
    task: str
    turns: List[Turn]
    meta: dict = field(default_factory=dict)

    @property
    def user_text(self) -> str:
        return next(t.text for t in self.turns if t.role == "user")

    @property
    def answer_text(self) -> str:
        return next(t.text for t in self.turns if t.role == "assistant")

    def validate(self):
        from .respond import parse

        if self.task not in TASKS:
            raise ValueError(f"{self.id}: unknown task {self.task!r}")
        if not 1 <= len(self.images) <= MAX_IMAGES:
            raise ValueError(f"{self.id}: {len(self.images)} images (allowed 1..{MAX_IMAGES})")
        roles = [t.role for t in self.turns]
        if "user" not in roles or "assistant" not in roles:
            raise ValueError(f"{self.id}: needs a user and an assistant turn")
        if any(r == roles[i + 1] for i, r in enumerate(roles[:-1])) or roles[0] != "user":
            raise ValueError(f"{self.id}: turns must alternate starting with the user")
        refs = [int(k) for k in re.findall(r"Image (\d+): " + re.escape(IMAGE_TOKEN), self.user_text)]
        if self.task != "single_image_passthrough" and refs != list(range(1, len(self.images) + 1)):
            raise ValueError(f"{self.id}: image references {refs} do not match {len(self.images)} images")
        for t in self.turns:
            bad = [d for d in parse(t.text).diagnostics if d.startswith("invalid box")]
            if bad:
                raise ValueError(f"{self.id}: unparseable box token in {t.role} turn: {bad[0]}")

    def to_json(self) -> dict:
        return {"id": self.id, "images": list(self.images), "task": self.task,
                "conversations": [{"role": t.role, "text": t.text} for t in self.turns], "meta": self.meta}

    @classmethod
    def from_json(cls, d: dict) -> "ConversationRecord":
        return cls(d["id"], list(d["images"]), d["task"], [Turn(t["role"], t["text"]) for t in d["conversations"]],
                   d.get("meta") or {})


def render_chat(record: ConversationRecord) -> str:
    """Flatten to the single-string chat format used for training."""
    parts = [CHAT_PREAMBLE]
    for t in record.turns:
        parts.append(("USER: " if t.role == "user" else "ASSISTANT: ") + t.text)
    return " ".join(parts)


# ------------------------------------------------------------ sequence sampling

def sample_sequence(record: SceneRecord, max_images: int = MAX_IMAGES, seed=0,
                    subseq_prob: float = 0.3, rng: Optional[np.random.Generator] = None) -> SceneRecord:
    """Cap the sequence at ``max_images`` by uniform sampling without replacement, keeping order.

    Urban-change records are additionally shortened, with probability
    ``subseq_prob``, to a random subset whose length is uniform on ``2..N``.
    """
    rng = rng if rng is not None else rng_for(seed, record.id, "sequence")
    n = record.n_images
    idx = np.arange(n)
    if record.source == "qfabric" and n > 2 and rng.random() < subseq_prob:
        length = int(rng.integers(2, n + 1))
        idx = np.sort(rng.choice(idx, size=length, replace=False))
    if len(idx) > max_images:
        idx = np.sort(rng.choice(idx, size=max_images, replace=False))
    if len(idx) == n:
        return record
    return record.subset(idx.tolist())


# ------------------------------------------------------------ task variants

@dataclass
class _Built:
    instruction_slots: dict
    kind: str
    value: object
    options: Optional[Sequence[str]] = None
    eval: dict = field(default_factory=dict)
    answer_slots: dict = field(default_factory=dict)


def _family(source: str) -> str:
    return "fmow" if source.startswith("fmow") else source


def _labelled(rec: SceneRecord) -> List[Tuple[object, BBox]]:
    return [(lab, min_aabb(lab.polygon)) for lab in rec.labels]


def _reading_order(pairs):
    return sorted(pairs, key=lambda p: (p[1].y_min, p[1].x_min, p[1].y_max, p[1].x_max))


def _pixel_eval(rec, dataset, labels) -> dict:
    return {"protocol": "pixel_f1", "dataset": dataset, "metric": "F1", "extent": [rec.width, rec.height],
            "polygons": [lab.polygon.to_json() for lab in labels]}


def _accuracy_eval(dataset) -> dict:
    return {"protocol": "accuracy", "dataset": dataset, "metric": "Acc."}


def _boxes_built(rec, dataset, pairs, slots=None) -> _Built:
    pairs = _reading_order(pairs)
    return _Built(slots or {}, "boxes", [b.as_list() for _, b in pairs],
                  eval=_pixel_eval(rec, dataset, [lab for lab, _ in pairs]))


def _cell_of(x: float, y: float, w: int, h: int) -> int:
    return min(int(3 * y // h), 2) * 3 + min(int(3 * x // w), 2)


def most_affected_cell(rec: SceneRecord) -> Optional[str]:
    """Grid cell (3x3, row-major tie-break) holding the most damaged-building pixels."""
    shapes = [(lab.polygon, 1) for lab in rec.labels if lab.sequence_class in DAMAGED]
    if not shapes:
        return None
    mask = rasterize(shapes, rec.extent).labels
    rows = (np.arange(rec.height) * 3) // rec.height
    cols = (np.arange(rec.width) * 3) // rec.width
    counts = np.zeros((3, 3), dtype=np.int64)
    np.add.at(counts, (rows[:, None].repeat(rec.width, 1), cols[None, :].repeat(rec.height, 0)), mask != 0)
    if counts.max() == 0:
        return None
    return GRID_CELLS[int(np.argmax(counts))]


def _query_region(rec, rng, anchors: List[BBox]) -> BBox:
    w, h = rec.extent
    if anchors and rng.random() < 0.5:
        b = anchors[int(rng.integers(len(anchors)))]
        m = int(rng.integers(0, 9))
        return BBox(max(0, b.x_min - m), max(0, b.y_min - m), min(w, b.x_max + m), min(h, b.y_max + m))
    bw = int(rng.integers(min(24, w), min(96, w) + 1))
    bh = int(rng.integers(min(24, h), min(96, h) + 1))
    x0 = int(rng.integers(0, w - bw + 1))
    y0 = int(rng.integers(0, h - bh + 1))
    return BBox(x0, y0, x0 + bw, y0 + bh)


def _pick(rng, items):
    return items[int(rng.integers(len(items)))]


def _damaged(phrase_classes, lab):
    return lab.sequence_class in phrase_classes


_XBD_PHRASES = {
    "damaged": DAMAGED,
    "severely damaged or destroyed": frozenset({"Major Damage", "Destroyed"}),
    "destroyed": frozenset({"Destroyed"}),
}


def _disaster_slots(rec) -> dict:
    name = DISASTER_TYPES.get(rec.disaster_type, rec.disaster_type or "disaster")
    art = with_article(name)
    return {"disaster": name, "disaster_article": art, "Disaster_article": art[:1].upper() + art[1:]}


def _change_summary(labels) -> dict:
    n_c = sum(1 for l in labels if l.change == "constructed")
    n_d = sum(1 for l in labels if l.change == "demolished")
    parts = []
    if n_c:
        parts.append(number_phrase(n_c) + (" has" if n_c == 1 else " have") + " been constructed")
    if n_d:
        parts.append(number_phrase(n_d) + (" has" if n_d == 1 else " have") + " been demolished")
    text = " and ".join(parts) if parts else "no buildings have changed"
    return {"change_summary": text, "Change_summary": text[:1].upper() + text[1:]}


def _developed(lab) -> bool:
    s = lab.classes_per_timestep or []
    return len(set(s)) > 1


_STATUS_PHRASES = {
    "Greenland": "the land became greenland",
    "Land Cleared": "land was cleared",
    "Excavation": "excavation began",
    "Materials Dumped": "materials were dumped",
    "Construction Started": "a construction project was begun",
    "Construction Midway": "construction reached the midway stage",
    "Construction Done": "construction was finished",
    "Operational": "the site became operational",
    "Prior Construction": "prior construction appeared",
}


def _transitions(statuses: Sequence[str]) -> Dict[str, List[int]]:
    out: Dict[str, List[int]] = {}
    for k in range(1, len(statuses)):
        if statuses[k] != statuses[k - 1]:
            out.setdefault(statuses[k], []).append(k + 1)
    return out


# Each variant: (eligible(rec) -> bool, requirement text, build(rec, rng) -> _Built)

def _v_fmow_class(rec, rng):
    dataset = DATASET_NAMES[rec.source]
    return _Built({"options": ", ".join(FMOW_OPTIONS)}, "class", fmow_display(rec.sequence_class), FMOW_OPTIONS,
                  _accuracy_eval(dataset))


def _v_xbd_loc(rec, rng):
    return _boxes_built(rec, "xBD Loc.", _labelled(rec))


def _v_xbd_dmg(rec, rng):
    lab, box = _pick(rng, _labelled(rec))
    ev = {"protocol": "class_f1", "dataset": "xBD Dmg Cls.", "metric": "F1", "extent": [rec.width, rec.height],
          "polygon": lab.polygon.to_json(), "classes": list(DAMAGE_CLASSES), "gt": lab.sequence_class}
    return _Built({"box": format_box(box), "options": ", ".join(DAMAGE_CLASSES)}, "class", lab.sequence_class,
                  DAMAGE_CLASSES, ev)


def _v_xbd_sre(rec, rng):
    phrase = _pick(rng, list(_XBD_PHRASES))
    pairs = [(l, b) for l, b in _labelled(rec) if l.sequence_class in _XBD_PHRASES[phrase]]
    built = _boxes_built(rec, "xBD", pairs, {"phrase": phrase})
    built.answer_slots = {"phrase": phrase}
    return built


def _v_xbd_sre_section(rec, rng):
    phrase = _pick(rng, list(_XBD_PHRASES))
    section = _pick(rng, GRID_CELLS)
    cell = GRID_CELLS.index(section)
    pairs = [(l, b) for l, b in _labelled(rec) if l.sequence_class in _XBD_PHRASES[phrase]
             and _cell_of((b.x_min + b.x_max) / 2, (b.y_min + b.y_max) / 2, rec.width, rec.height) == cell]
    built = _boxes_built(rec, "xBD", pairs, {"phrase": phrase, "section": section})
    built.answer_slots = {"phrase": phrase, "section": section}
    return built


def _v_xbd_sre_region(rec, rng):
    phrase = _pick(rng, list(_XBD_PHRASES))
    match = [(l, b) for l, b in _labelled(rec) if l.sequence_class in _XBD_PHRASES[phrase]]
    region = _query_region(rec, rng, [b for _, b in match])
    pairs = [(l, b) for l, b in match if b.intersection_area(region) > 0]
    built = _boxes_built(rec, "xBD", pairs, {"phrase": phrase, "box": format_box(region)})
    built.answer_slots = {"phrase": phrase}
    built.eval["query_box"] = region.as_list()
    return built


def _v_s2_det(rec, rng):
    return _boxes_built(rec, "S2Looking Det.", _labelled(rec))


def _v_s2_sre(rec, rng):
    change, phrase = _pick(rng, [("constructed", "constructed"), ("demolished", _pick(rng, ["destructed", "demolished"]))])
    pairs = [(l, b) for l, b in _labelled(rec) if l.change == change]
    built = _boxes_built(rec, "S2Looking", pairs, {"phrase": phrase})
    built.answer_slots = {"phrase": phrase}
    built.eval["change"] = change
    return built


def _v_s2_largest(rec, rng):
    pairs = _labelled(rec)
    best = max(range(len(pairs)), key=lambda i: (pairs[i][0].polygon.area, -i))
    return _boxes_built(rec, "S2Looking", [pairs[best]])


def _v_xbd_disaster(rec, rng):
    name = DISASTER_TYPES.get(rec.disaster_type, rec.disaster_type)
    return _Built({}, "class", name, DISASTER_OPTIONS, _accuracy_eval("xBD"))


def _v_xbd_most_affected(rec, rng):
    return _Built({}, "grid_cell", most_affected_cell(rec), None, _accuracy_eval("xBD"))


def _v_xbd_count_destroyed(rec, rng):
    n = sum(1 for l in rec.labels if l.sequence_class == "Destroyed")
    return _Built({}, "count", n, None, _accuracy_eval("xBD"))


def _v_xbd_any(rec, rng):
    phrase = _pick(rng, list(_XBD_PHRASES))
    yes = any(l.sequence_class in _XBD_PHRASES[phrase] for l in rec.labels)
    return _Built({"phrase": phrase}, "polarity", "yes" if yes else "no", None, _accuracy_eval("xBD"))


def _v_s2_any(rec, rng):
    change = _pick(rng, ["constructed", "demolished"])
    yes = any(l.change == change for l in rec.labels)
    return _Built({"phrase": change}, "polarity", "yes" if yes else "no", None, _accuracy_eval("S2Looking"))


def _v_s2_count(rec, rng):
    return _Built({}, "count", len(rec.labels), None, _accuracy_eval("S2Looking"))


def _v_xbd_region_any(rec, rng):
    dmg = [b for l, b in _labelled(rec) if l.sequence_class in DAMAGED]
    region = _query_region(rec, rng, dmg)
    yes = any(b.intersection_area(region) > 0 for b in dmg)
    ev = _accuracy_eval("xBD")
    ev["query_box"] = region.as_list()
    return _Built({"box": format_box(region)}, "polarity", "yes" if yes else "no", None, ev)


def _v_xbd_severity(rec, rng):
    lab, box = _pick(rng, _labelled(rec))
    ev = _accuracy_eval("xBD")
    ev["query_box"] = box.as_list()
    return _Built({"box": format_box(box)}, "class", lab.sequence_class, DAMAGE_CLASSES, ev)


def _v_s2_region_changed(rec, rng):
    boxes = [b for _, b in _labelled(rec)]
    region = _query_region(rec, rng, boxes)
    yes = any(b.intersection_area(region) > 0 for b in boxes)
    ev = _accuracy_eval("S2Looking")
    ev["query_box"] = region.as_list()
    return _Built({"box": format_box(region)}, "polarity", "yes" if yes else "no", None, ev)


def _v_qf_any_dev(rec, rng):
    dev = [b for l, b in _labelled(rec) if _developed(l)]
    region = _query_region(rec, rng, dev)
    yes = any(b.intersection_area(region) > 0 for b in dev)
    ev = _accuracy_eval("QFabric")
    ev["query_box"] = region.as_list()
    return _Built({"box": format_box(region)}, "polarity", "yes" if yes else "no", None, ev)


def _region_class_eval(rec, dataset, lab, classes, gt, window, slot):
    return {"protocol": "region_class", "dataset": dataset, "metric": "F1", "window": window, "slot": slot,
            "extent": [rec.width, rec.height], "polygon": lab.polygon.to_json(), "classes": list(classes), "gt": gt}


def _v_qf_change_type(rec, rng):
    lab, box = _pick(rng, _labelled(rec))
    ev = _region_class_eval(rec, "QFabric [2 images]", lab, CHANGE_TYPES, lab.sequence_class, 2, 0)
    return _Built({"box": format_box(box), "options": ", ".join(CHANGE_TYPES)}, "class", lab.sequence_class,
                  CHANGE_TYPES, ev)


def _v_qf_transition(rec, rng):
    cands = [(l, b) for l, b in _labelled(rec) if _transitions(l.classes_per_timestep)]
    lab, box = _pick(rng, cands)
    trans = _transitions(lab.classes_per_timestep)
    status = _pick(rng, sorted(trans))
    return _Built({"phrase": _STATUS_PHRASES[status], "box": format_box(box)}, "image_refs", trans[status], None,
                  _accuracy_eval("QFabric"))


def _v_qf_visible(rec, rng):
    lab, box = _pick(rng, _labelled(rec))
    status = _pick(rng, sorted(set(lab.classes_per_timestep)))
    refs = [k + 1 for k, s in enumerate(lab.classes_per_timestep) if s == status]
    return _Built({"status": status.lower(), "box": format_box(box)}, "image_refs", refs, None,
                  _accuracy_eval("QFabric"))


def _v_qf_between(rec, rng):
    lab, box = _pick(rng, _labelled(rec))
    n, m = sorted(int(v) for v in rng.choice(rec.n_images, size=2, replace=False) + 1)
    s = lab.classes_per_timestep
    yes = s[n - 1] != s[m - 1]
    return _Built({"box": format_box(box), "n": n, "m": m}, "polarity", "yes" if yes else "no", None,
                  _accuracy_eval("QFabric"))


def _v_qf_status(rec, rng):
    lab, box = _pick(rng, _labelled(rec))
    n = int(rng.integers(1, rec.n_images + 1))
    gt = lab.classes_per_timestep[n - 1]
    ev = _region_class_eval(rec, "QFabric [5 images]", lab, CHANGE_STATUSES, gt, 5, rec.order[n - 1])
    return _Built({"box": format_box(box), "n": n, "options": ", ".join(CHANGE_STATUSES)}, "class", gt,
                  CHANGE_STATUSES, ev)


def _caption_eval(rec) -> dict:
    return {"protocol": "none", "dataset": DATASET_NAMES[rec.source], "metric": "-"}


def _v_xbd_region_caption(rec, rng):
    lab, box = _pick(rng, _labelled(rec))
    slots = _disaster_slots(rec)
    slots["severity"] = SEVERITY[lab.sequence_class]
    return _Built({"box": format_box(box)}, "text", None, None, _caption_eval(rec), slots)


def _v_xbd_detailed(rec, rng):
    n = sum(1 for l in rec.labels if l.sequence_class in DAMAGED)
    slots = _disaster_slots(rec)
    slots["n_damaged"] = number_phrase(n)
    return _Built({}, "text", None, None, _caption_eval(rec), slots)


def _v_xbd_grounded(rec, rng):
    pairs = [(l, b) for l, b in _labelled(rec) if l.sequence_class in DAMAGED]
    built = _boxes_built(rec, "xBD", pairs)
    built.eval = _caption_eval(rec)
    built.answer_slots = _disaster_slots(rec)
    return built


def _v_s2_region_caption(rec, rng):
    boxes = _labelled(rec)
    region = _query_region(rec, rng, [b for _, b in boxes])
    inside = [l for l, b in boxes if b.intersection_area(region) > 0]
    return _Built({"box": format_box(region)}, "text", None, None, _caption_eval(rec), _change_summary(inside))


def _v_s2_detailed(rec, rng):
    return _Built({}, "text", None, None, _caption_eval(rec), _change_summary(rec.labels))


def _v_s2_grounded(rec, rng):
    built = _boxes_built(rec, "S2Looking", _labelled(rec))
    built.eval = _caption_eval(rec)
    built.answer_slots = _change_summary(rec.labels)
    return built


def _v_qf_region_caption(rec, rng):
    lab, box = _pick(rng, _labelled(rec))
    s = lab.classes_per_timestep
    return _Built({"box": format_box(box)}, "text", None, None, _caption_eval(rec),
                  {"first": s[0].lower(), "last": s[-1].lower()})


def _has_labels(rec):
    return bool(rec.labels)


def _always(rec):
    return True


VARIANTS: Dict[str, Tuple[Callable, str, Callable]] = {
    "fmow_class": (lambda r: r.sequence_class in FMOW_CLASSES, "a scene class", _v_fmow_class),
    "xbd_loc": (_always, "nothing", _v_xbd_loc),
    "xbd_dmg": (_has_labels, "at least one labelled building", _v_xbd_dmg),
    "xbd_sre": (_always, "nothing", _v_xbd_sre),
    "xbd_sre_section": (_always, "nothing", _v_xbd_sre_section),
    "xbd_sre_region": (_always, "nothing", _v_xbd_sre_region),
    "xbd_disaster": (lambda r: r.disaster_type is not None, "disaster_type", _v_xbd_disaster),
    "xbd_most_affected": (lambda r: most_affected_cell(r) is not None, "damaged buildings", _v_xbd_most_affected),
    "xbd_count_destroyed": (_always, "nothing", _v_xbd_count_destroyed),
    "xbd_any": (_always, "nothing", _v_xbd_any),
    "xbd_region_any": (_always, "nothing", _v_xbd_region_any),
    "xbd_severity": (_has_labels, "at least one labelled building", _v_xbd_severity),
    "xbd_region_caption": (_has_labels, "at least one labelled building", _v_xbd_region_caption),
    "xbd_detailed": (lambda r: r.disaster_type is not None, "disaster_type", _v_xbd_detailed),
    "xbd_grounded": (lambda r: r.disaster_type is not None, "disaster_type", _v_xbd_grounded),
    "s2_det": (_always, "nothing", _v_s2_det),
    "s2_sre": (_always, "nothing", _v_s2_sre),
    "s2_largest": (_has_labels, "at least one changed building", _v_s2_largest),
    "s2_any": (_always, "nothing", _v_s2_any),
    "s2_count": (_always, "nothing", _v_s2_count),
    "s2_region_changed": (_always, "nothing", _v_s2_region_changed),
    "s2_region_caption": (_always, "nothing", _v_s2_region_caption),
    "s2_detailed": (_always, "nothing", _v_s2_detailed),
    "s2_grounded": (_always, "nothing", _v_s2_grounded),
    "qf_any_dev": (_always, "nothing", _v_qf_any_dev),
    "qf_change_type": (_has_labels, "a labelled region", _v_qf_change_type),
    "qf_transition": (lambda r: r.n_images > 1 and any(_transitions(l.classes_per_timestep) for l in r.labels),
                      "a region whose status changes", _v_qf_transition),
    "qf_visible": (_has_labels, "a labelled region", _v_qf_visible),
    "qf_between": (lambda r: r.n_images > 1 and bool(r.labels), "a labelled region and two images", _v_qf_between),
    "qf_status": (_has_labels, "a labelled region", _v_qf_status),
    "qf_region_caption": (_has_labels, "a labelled region", _v_qf_region_caption),
}


def eligible_tasks(record: SceneRecord) -> List[str]:
    if record.source == "single_image_corpus":
        return ["single_image_passthrough"]
    by_task = TASK_VARIANTS.get(_family(record.source), {})
    return [t for t in TASKS if any(VARIANTS[v][0](record) for v in by_task.get(t, ()))]


def _inject_metadata(record, rng, metadata_prob):
    res = record.resolution if record.resolution and rng.random() < metadata_prob else None
    sensor = record.sensor if record.sensor and rng.random() < metadata_prob else None
    return res, sensor


def build_prompt(record: SceneRecord, task: str, seed=0, metadata_prob: float = 0.5,
                 bank: TemplateBank = DEFAULT_BANK, variant: Optional[str] = None) -> ConversationRecord:
    """Render one conversation for ``task`` from the record's ground truth.

    ``variant`` pins the question type within the task (see :data:`TASK_VARIANTS`);
    by default it is drawn from the eligible ones.

    Raises:
        TaskLabelMismatch: when the record lacks what every variant of the task needs.
    """
    rng = rng_for(seed, record.source, record.id, "prompt", task)
    if task == "single_image_passthrough":
        return _passthrough(record, rng, seed, metadata_prob)
    by_task = TASK_VARIANTS.get(_family(record.source), {})
    variants = by_task.get(task)
    if not variants:
        raise TaskLabelMismatch(f"{record.id}: task {task} is not defined for {record.source} records")
    if variant is not None:
        if variant not in variants:
            raise ValueError(f"variant {variant} does not belong to task {task} for {record.source}")
        variants = (variant,)
    ok = [v for v in variants if VARIANTS[v][0](record)]
    if not ok:
        raise TaskLabelMismatch(f"{record.id}: task {task} needs {VARIANTS[variants[0]][1]}")
    variant = _pick(rng, ok)
    built = VARIANTS[variant][2](record, rng)
    templates = bank[variant]
    ti = int(rng.integers(len(templates)))
    tpl = templates[ti]
    instruction = fill(tpl.instruction, **{k: str(v) for k, v in built.instruction_slots.items()})
    answer_tpl = fill(tpl.answer, **built.answer_slots)
    empty_tpl = fill(tpl.empty, **built.answer_slots) if tpl.empty is not None else None
    res, sensor = _inject_metadata(record, rng, metadata_prob)
    user = sequence_prompt(record.n_images, res, sensor) + " " + instruction
    if built.kind == "text":
        answer = answer_tpl
        value = answer
    else:
        value = built.value
        answer = render_answer(answer_tpl, built.kind, value, empty_tpl)
    meta = {
        "source": record.source, "scene": record.id, "seed": seed, "variant": variant, "template": ti,
        "verbatim": tpl.verbatim, "order": list(record.order),
        "resolution": res, "sensor": sensor,
        "answer": {"kind": built.kind, "value": value, "template": answer_tpl, "empty": empty_tpl},
        "eval": built.eval,
    }
    if built.options is not None:
        meta["options"] = list(built.options)
    return ConversationRecord(f"{record.source}/{record.id}", [im.uri() for im in record.images], task,
                              [Turn("user", user), Turn("assistant", answer)], meta)


# single-image corpus: task tokens replaced by short natural-language specifications
TASK_TOKENS = {
    "[grounding]": "Describe the image in detail. " + BOX_REQUEST,
    "[refer]": "Locate the object described. " + BOX_REQUEST,
    "[identify]": "Describe the object in the given region.",
    "[vqa]": "Answer the question with a short phrase.",
    "[caption]": "Describe the image briefly.",
}
_TOKEN_RE = re.compile("|".join(re.escape(t) for t in TASK_TOKENS))


def strip_task_tokens(text: str) -> Tuple[str, List[str]]:
    found = _TOKEN_RE.findall(text)
    body = " ".join(_TOKEN_RE.sub(" ", text).replace(IMAGE_TOKEN, " ").split())
    spec = " ".join(TASK_TOKENS[t] for t in dict.fromkeys(found))
    return (body + " " + spec).strip() if spec else body, found


def _passthrough(record, rng, seed, metadata_prob):
    from .respond import parse

    turns = []
    tokens = []
    for i, t in enumerate(record.passthrough or []):
        role = "user" if t["from"] in ("human", "user") else "assistant"
        text = t["value"]
        if role == "user":
            text, found = strip_task_tokens(text)
            tokens.extend(found)
            if not turns:
                res, sensor = _inject_metadata(record, rng, metadata_prob)
                text = sequence_prompt(1, res, sensor) + " " + text
        turns.append(Turn(role, text))
    ev = {"protocol": "none", "dataset": DATASET_NAMES["single_image_corpus"], "metric": "-"}
    answer = {"kind": "text", "value": None, "template": None, "empty": None}
    first_answer = next((t.text for t in turns if t.role == "assistant"), "")
    if "[refer]" in tokens:
        boxes = parse(first_answer).boxes
        if boxes:
            ev = {"protocol": "acc_iou", "dataset": "Single image grounding", "metric": "Acc@0.5"}
            answer = {"kind": "boxes", "value": [boxes[0].as_list()], "template": None, "empty": None}
    if answer["kind"] == "text":
        answer["value"] = first_answer
    meta = {"source": record.source, "scene": record.id, "seed": seed, "variant": "passthrough",
            "task_tokens": tokens, "answer": answer, "eval": ev}
    return ConversationRecord(f"{record.source}/{record.id}", [im.uri() for im in record.images],
                              "single_image_passthrough", turns, meta)


# ------------------------------------------------------------ corpus

@dataclass(frozen=True)
class BuildConfig:
    seed: int = 0
    mix: Optional[Mapping[str, Mapping[str, float]]] = None
    max_images: int = MAX_IMAGES
    metadata_prob: float = 0.5
    subseq_prob: float = 0.3
    tile_size: int = TILE_SIZE
    remainder: str = "anchor"


def choose_task(record: SceneRecord, cfg: BuildConfig) -> Optional[str]:
    """Draw a task from the source's mix restricted to tasks the record supports."""
    tasks = eligible_tasks(record)
    mix = (cfg.mix or {}).get(record.source)
    if mix is None and record.source.startswith("fmow"):
        mix = (cfg.mix or {}).get("fmow")
    if mix is not None:
        weights = np.array([float(mix.get(t, 0.0)) for t in tasks])
    else:
        weights = np.ones(len(tasks))
    if not tasks or weights.sum() <= 0:
        return None
    rng = rng_for(cfg.seed, record.source, record.id, "task")
    return tasks[int(rng.choice(len(tasks), p=weights / weights.sum()))]


def generate(record: SceneRecord, cfg: BuildConfig) -> Optional[ConversationRecord]:
    rec = sample_sequence(record, cfg.max_images, cfg.seed, cfg.subseq_prob,
                          rng=rng_for(cfg.seed, record.source, record.id, "sequence"))
    task = choose_task(rec, cfg)
    if task is None:
        return None
    return build_prompt(rec, task, cfg.seed, cfg.metadata_prob)


def _scene_job(args):
    scene, cfg = args
    stats = IngestStats(remainder_policy=cfg.remainder)
    if scene.source == "single_image_corpus":
        records = [scene]
    else:
        records = expand_scene(scene, cfg.tile_size, cfg.remainder, stats)
    out = []
    skipped = 0
    for rec in records:
        rec.validate()
        conv = generate(rec, cfg)
        if conv is None:
            skipped += 1
        else:
            out.append(conv)
    stats.records = len(records)
    return out, stats, skipped


def _select_fmow(scenes_by_kind, seed):
    """Pick RGB or Sentinel per sequence id when both fMoW variants are present."""
    rgb = {s.id: s for s in scenes_by_kind.get("fmow_rgb", [])}
    sen = {s.id: s for s in scenes_by_kind.get("fmow_sentinel", [])}
    if not rgb or not sen:
        return 0
    dropped = 0
    for sid in sorted(set(rgb) & set(sen)):
        pick = int(rng_for(seed, sid, "fmow-variant").integers(2))
        (sen if pick == 0 else rgb).pop(sid)
        dropped += 1
    scenes_by_kind["fmow_rgb"] = [rgb[k] for k in sorted(rgb)]
    scenes_by_kind["fmow_sentinel"] = [sen[k] for k in sorted(sen)]
    return dropped


def emit_corpus(sources: Sequence[SourceDescriptor], cfg: BuildConfig, workers: int = 1,
                manifest: Optional[dict] = None) -> Iterator[ConversationRecord]:
    """Yield conversation records for every source in a fixed order.

    ``manifest`` (if given) is filled with per-source and per-task counts and
    the tiling policy once the iterator is exhausted.
    """
    manifest = manifest if manifest is not None else {}
    scenes_by_kind: Dict[str, list] = {}
    ingest_stats: Dict[str, IngestStats] = {}
    order = []
    for desc in sources:
        if desc.kind in scenes_by_kind:
            raise ValueError(f"source kind {desc.kind} given twice")
        order.append(desc.kind)
        st = ingest_stats[desc.kind] = IngestStats(remainder_policy=cfg.remainder)
        if desc.kind == "single_image_corpus":
            scenes = load_single_image_corpus(desc)
        else:
            scenes = [s for _, s in load_scenes(desc)]
        kept = []
        for s in scenes:
            st.scenes += 1
            if all((desc.base / im.path).exists() for im in s.images):
                kept.append(s)
            else:
                st.missing_images += 1
                log.warning("skipping %s/%s: image missing", desc.kind, s.id)
        if not scenes:
            raise ValueError(f"source {desc.kind} at {desc.base} is empty")
        scenes_by_kind[desc.kind] = kept
    fmow_dropped = _select_fmow(scenes_by_kind, cfg.seed)

    per_source: Dict[str, dict] = {}
    per_task: Dict[str, int] = {}
    total = 0
    for kind in order:
        results = parallel_map(_scene_job, [(s, cfg) for s in scenes_by_kind[kind]], workers)
        st = ingest_stats[kind]
        emitted = skipped = 0
        by_task: Dict[str, int] = {}
        for convs, sst, sk in results:
            st.records += sst.records
            st.dropped_empty_tiles += sst.dropped_empty_tiles
            st.dropped_slivers += sst.dropped_slivers
            st.degenerate_labels += sst.degenerate_labels
            skipped += sk
            for conv in convs:
                emitted += 1
                by_task[conv.task] = by_task.get(conv.task, 0) + 1
                yield conv
        per_source[kind] = {"emitted": emitted, "skipped_no_task": skipped, "tasks": dict(sorted(by_task.items())),
                            **st.to_json()}
        for t, n in by_task.items():
            per_task[t] = per_task.get(t, 0) + n
        total += emitted
    manifest.update({
        "seed": cfg.seed, "total": total, "sources": per_source, "tasks": dict(sorted(per_task.items())),
        "fmow_variant_dropped": fmow_dropped,
        "tiling": {"tile_size": cfg.tile_size, "remainder": cfg.remainder},
        "config": {"max_images": cfg.max_images, "metadata_prob": cfg.metadata_prob,
                   "subseq_prob": cfg.subseq_prob, "mix": cfg.mix},
    })

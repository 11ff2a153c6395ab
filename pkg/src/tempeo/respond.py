"""Response parsing, option canonicalisation and oracle responders.

The parser is total: it never raises, and anything it cannot interpret is
reported in ``ParsedResponse.diagnostics``.
"""
from __future__ import annotations

import re
import string
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

from ._util import rng_for
from .geom import BBox, GeometryError
from .vocab import GRID_CELLS

_BRACKET = re.compile(r"\[([^\[\]]*)\]")
_NUMBER = re.compile(r"^[+-]?(\d+(\.\d*)?|\.\d+)$")
_IMAGE_REF = re.compile(r"\bimage\s*#?\s*(\d+)\b", re.IGNORECASE)
_POLARITY = re.compile(r"\b(yes|no)\b", re.IGNORECASE)
_INTEGER = re.compile(r"(?<![\w.])(\d+)(?!\w|\.\d)")
_PUNCT = str.maketrans({c: " " for c in string.punctuation})

# longest names first so "center left" wins over "center"
_CELL_PATTERNS = [(cell, re.compile(r"\b" + r"[\s_-]*".join(cell.split()) + r"\b", re.IGNORECASE))
                  for cell in sorted(GRID_CELLS, key=len, reverse=True)]


@dataclass
class ParsedResponse:
    boxes: List[BBox] = field(default_factory=list)
    classes: List[str] = field(default_factory=list)
    image_refs: List[int] = field(default_factory=list)
    polarity: Optional[str] = None
    grid_cell: Optional[str] = None
    count: Optional[int] = None
    free_text: str = ""
    diagnostics: List[str] = field(default_factory=list)

    def check_refs(self, n_images: int) -> bool:
        return all(1 <= k <= n_images for k in self.image_refs)


def canonical(text: str) -> str:
    """Case-fold, map punctuation to spaces, collapse whitespace."""
    return " ".join(text.casefold().translate(_PUNCT).split())


def canonicalize(text: str, options: Sequence[str]) -> Optional[str]:
    """Return the longest option whose canonical form occurs as whole words in ``text``."""
    if not options:
        raise ValueError("option list is empty")
    hay = f" {canonical(text)} "
    best = None
    for opt in options:
        c = canonical(opt)
        if c and f" {c} " in hay and (best is None or len(c) > len(canonical(best))):
            best = opt
    return best


def _parse_box(body: str, diagnostics: List[str]) -> Optional[BBox]:
    parts = [p.strip() for p in body.split(",")]
    if len(parts) != 4:
        return None
    if not all(_NUMBER.match(p) for p in parts):
        diagnostics.append(f"non-numeric box candidate [{body}]")
        return None
    vals = [float(p) for p in parts]
    ints = [int(round(v)) for v in vals]
    if any(v != i for v, i in zip(vals, ints)):
        diagnostics.append(f"rounded box coordinates [{body}]")
    try:
        return BBox(*ints)
    except (GeometryError, ValueError) as e:
        diagnostics.append(f"invalid box [{body}]: {e}")
        return None


def parse(text, expected: Optional[str] = None, options: Optional[Sequence[str]] = None) -> ParsedResponse:
    """Extract every structured element from a free-text response.

    Args:
        text: response text; non-string input is coerced with ``str``.
        expected: optional answer kind, used only to report surplus elements.
        options: class options for class extraction.
    """
    out = ParsedResponse()
    try:
        if not isinstance(text, str):
            text = text.decode("utf-8", "replace") if isinstance(text, (bytes, bytearray)) else str(text)
        rest = []
        last = 0
        for m in _BRACKET.finditer(text):
            box = _parse_box(m.group(1), out.diagnostics)
            if box is not None:
                out.boxes.append(box)
                rest.append(text[last:m.start()])
                rest.append(" ")
                last = m.end()
        rest.append(text[last:])
        free = "".join(rest)
        out.free_text = " ".join(free.split())

        out.image_refs = [int(k) for k in _IMAGE_REF.findall(free)]
        pol = [p.lower() for p in _POLARITY.findall(free)]
        if pol:
            out.polarity = pol[0]
            if len(set(pol)) > 1:
                out.diagnostics.append("both yes and no present; first taken")
        best = None
        for cell, pat in _CELL_PATTERNS:
            m = pat.search(free)
            if m and (best is None or m.start() < best[1]):
                best = (cell, m.start())
        if best:
            out.grid_cell = best[0]
        no_refs = _IMAGE_REF.sub(" ", free)
        m = _INTEGER.search(no_refs)
        if m:
            out.count = int(m.group(1))
        if options:
            cls = canonicalize(free, options)
            if cls is not None:
                out.classes.append(cls)
        if expected == "class" and out.boxes:
            out.diagnostics.append("boxes ignored for a classification answer")
    except Exception as e:  # the parser must stay total
        out.diagnostics.append(f"parser error: {type(e).__name__}: {e}")
    return out


def extract_answer(text: str, kind: str, options: Optional[Sequence[str]] = None):
    """Structured value of ``kind`` from a response, ``None`` when absent.

    Boxes come back as lists of ``[x_min, y_min, x_max, y_max]``.
    """
    p = parse(text, kind, options)
    if kind == "boxes":
        return [b.as_list() for b in p.boxes]
    if kind == "class":
        return p.classes[0] if p.classes else None
    if kind == "image_refs":
        return p.image_refs
    if kind == "polarity":
        return p.polarity
    if kind == "grid_cell":
        return p.grid_cell
    if kind == "count":
        return p.count
    if kind == "text":
        return p.free_text
    raise ValueError(f"unknown answer kind {kind!r}")


# ------------------------------------------------------------ oracles

ORACLE_MODES = ("perfect", "noisy", "constant")


@dataclass(frozen=True)
class OracleSpec:
    mode: str = "perfect"
    jitter: int = 0
    flip_rate: float = 0.0
    miss_rate: float = 0.0
    constant: str = "No damage."

    def __post_init__(self):
        if self.mode not in ORACLE_MODES:
            raise ValueError(f"unknown oracle mode {self.mode!r}")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")
        for name in ("flip_rate", "miss_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


def _frame(meta) -> tuple:
    ext = (meta.get("eval") or {}).get("extent")
    return tuple(ext) if ext else (224, 224)


def _jitter_box(b, j, rng, w, h):
    x0, y0, x1, y1 = (int(v + rng.integers(-j, j + 1)) for v in b)
    x0, y0 = min(max(0, x0), w - 1), min(max(0, y0), h - 1)
    x1, y1 = max(min(w, x1), x0 + 1), max(min(h, y1), y0 + 1)
    return [x0, y0, x1, y1]


def _noisy_value(kind, value, meta, spec, rng):
    if kind == "boxes":
        w, h = _frame(meta)
        out = []
        for b in value:
            if spec.miss_rate and rng.random() < spec.miss_rate:
                continue
            out.append(_jitter_box(b, spec.jitter, rng, w, h) if spec.jitter else list(b))
        return out
    if not spec.flip_rate or rng.random() >= spec.flip_rate:
        return value
    if kind == "class":
        others = [o for o in meta.get("options") or [] if o != value]
        return others[int(rng.integers(len(others)))] if others else value
    if kind == "polarity":
        return "no" if value == "yes" else "yes"
    if kind == "count":
        return value + 1
    if kind == "image_refs":
        n = len(meta.get("order") or []) or max(value, default=1)
        return [k for k in range(1, n + 1) if k not in value] or value
    if kind == "grid_cell":
        others = [c for c in GRID_CELLS if c != value]
        return others[int(rng.integers(len(others)))]
    return value


def oracle_respond(record, spec: OracleSpec = OracleSpec(), seed=0) -> str:
    """Synthetic response for a ConversationRecord derived from its stored ground truth."""
    from .taskgen import render_answer

    if spec.mode == "constant":
        return spec.constant
    ans = record.meta["answer"]
    kind, value = ans["kind"], ans["value"]
    if kind == "text" or ans.get("template") is None:
        return record.answer_text
    if spec.mode == "noisy":
        rng = rng_for(seed, record.id, "oracle")
        value = _noisy_value(kind, value, record.meta, spec, rng)
    return render_answer(ans["template"], kind, value, ans.get("empty"))

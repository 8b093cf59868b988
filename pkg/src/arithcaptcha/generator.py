"""Seed-deterministic synthesis of labeled arithmetic CAPTCHAs.

A notation is ``<first operand, operator, second operand>``. Operands are
digits 0-9 written in one of three scripts (S simplified ideographs, T
traditional ideographs, D Arabic digits); the operator is a symbol (O), one
ideographic character (N) or two of them (NN).
"""
from __future__ import annotations

import csv
import enum
import io
import math
import os
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Sequence

import numpy as np

from .imagecore import GrayImage, read_pgm, save_pgm
from .preprocess import AffineMap, affine_transform

GLYPH_HEIGHT = 20
ATLAS_CELL = 20
WIDE, DIGIT, SYMBOL = 20, 11, 9

DIGITS = [str(i) for i in range(10)]
LOWER = [chr(c) for c in range(ord("a"), ord("z") + 1)]
UPPER = [chr(c) for c in range(ord("A"), ord("Z") + 1)]
SIMPLIFIED = [f"S{i}" for i in range(10)]
TRADITIONAL = [f"T{i}" for i in range(10)]
SYMBOLS = ["+", "-", "*", "/"]
OPERATOR_CHARS = ["add1", "sub1", "mul1", "div1", "add2", "sub2", "mul2", "div2"]

PAPER_CLASSES = DIGITS + LOWER + UPPER + SIMPLIFIED + TRADITIONAL
EXTENDED_CLASSES = PAPER_CLASSES + SYMBOLS + OPERATOR_CHARS
CLASS_INDEX = {name: i for i, name in enumerate(EXTENDED_CLASSES)}


def class_width(name: str) -> int:
    """Nominal cell width of a glyph class."""
    if name in SYMBOLS:
        return SYMBOL
    if len(name) == 1 and name.isalnum():
        return DIGIT
    return WIDE


class Op(enum.Enum):
    Add = "Add"
    Sub = "Sub"
    Mul = "Mul"
    Div = "Div"


class Script(enum.Enum):
    S = "S"
    T = "T"
    D = "D"


class Form(enum.Enum):
    O = "O"
    N = "N"
    NN = "NN"


_OP_ORDER = list(Op)
_SYMBOL_OF = dict(zip(_OP_ORDER, SYMBOLS))
_CHAR_OF = dict(zip(_OP_ORDER, OPERATOR_CHARS[:4]))
_SECOND_CHAR_OF = dict(zip(_OP_ORDER, OPERATOR_CHARS[4:]))


@dataclass(frozen=True, order=True)
class NotationType:
    script: Script
    form: Form

    def __post_init__(self):
        if (self.script, self.form) == (Script.S, Form.N):
            raise ValueError("S-N-S is not a valid notation type")

    @property
    def name(self) -> str:
        s = self.script.value
        return f"{s}-{self.form.value}-{s}"

    @classmethod
    def parse(cls, text: str) -> "NotationType":
        parts = text.strip().split("-")
        if len(parts) != 3 or parts[0] != parts[2]:
            raise ValueError(f"bad notation type {text!r}")
        return cls(Script(parts[0]), Form(parts[1]))

    def __str__(self):
        return self.name


def enumerate_types() -> list[NotationType]:
    """The eight notation types, grouped by operand script (S, T, D)."""
    out = []
    for script in (Script.S, Script.T, Script.D):
        for form in (Form.O, Form.N, Form.NN):
            if (script, form) == (Script.S, Form.N):
                continue
            out.append(NotationType(script, form))
    return out


def operand_choices() -> list[tuple[Script, int]]:
    return [(s, v) for s in Script for v in range(10)]


def operator_choices() -> list[tuple[Form, Op]]:
    return [(f, op) for f in Form for op in Op]


def combination_count() -> int:
    operands = operand_choices()
    return len(operands) * len(operands) * len(operator_choices())


@dataclass(frozen=True)
class NotationSpec:
    first: int
    op: Op
    second: int
    script: Script
    form: Form

    def __post_init__(self):
        if not (0 <= self.first <= 9 and 0 <= self.second <= 9):
            raise ValueError("operands must be digits 0-9")
        if (self.script, self.form) == (Script.S, Form.N):
            raise ValueError("S-N-S is not a valid notation type")
        if self.op is Op.Div and (self.second == 0 or self.first % self.second):
            raise ValueError(f"{self.first} / {self.second} is not an exact division")

    @property
    def type(self) -> NotationType:
        return NotationType(self.script, self.form)

    def classes(self) -> list[str]:
        """Glyph class of every cell, left to right."""
        return [operand_class(self.script, self.first), *operator_classes(self.form, self.op),
                operand_class(self.script, self.second)]


def operand_class(script: Script, value: int) -> str:
    if script is Script.D:
        return str(value)
    return f"{script.value}{value}"


def operator_classes(form: Form, op: Op) -> list[str]:
    if form is Form.O:
        return [_SYMBOL_OF[op]]
    if form is Form.N:
        return [_CHAR_OF[op]]
    return [_CHAR_OF[op], _SECOND_CHAR_OF[op]]


def parse_operand(name: str) -> tuple[Script, int] | None:
    """Inverse of :func:`operand_class`; ``None`` for non-operand classes."""
    if name in DIGITS:
        return Script.D, int(name)
    if len(name) == 2 and name[0] in "ST" and name[1].isdigit():
        return Script(name[0]), int(name[1])
    return None


def parse_operator(names: Sequence[str]) -> tuple[Form, Op] | None:
    if len(names) == 1:
        for op in Op:
            if names[0] == _SYMBOL_OF[op]:
                return Form.O, op
            if names[0] == _CHAR_OF[op]:
                return Form.N, op
    elif len(names) == 2:
        for op in Op:
            if tuple(names) == (_CHAR_OF[op], _SECOND_CHAR_OF[op]):
                return Form.NN, op
    return None


def sample_spec(rng_seed, allowed: Iterable[NotationType]) -> NotationSpec:
    allowed = sorted(set(allowed), key=_type_order)
    if not allowed:
        raise ValueError("allowed notation types must be non-empty")
    rng = np.random.default_rng(rng_seed)
    t = allowed[int(rng.integers(len(allowed)))]
    while True:
        first = int(rng.integers(10))
        op = _OP_ORDER[int(rng.integers(4))]
        second = int(rng.integers(10))
        if op is Op.Div and (second == 0 or first % second):
            continue
        return NotationSpec(first, op, second, t.script, t.form)


def _type_order(t: NotationType) -> int:
    return enumerate_types().index(t)


def compute_answer(spec: NotationSpec) -> int:
    a, b = spec.first, spec.second
    if spec.op is Op.Add:
        return a + b
    if spec.op is Op.Sub:
        return a - b
    if spec.op is Op.Mul:
        return a * b
    return a // b


# --- atlas ---------------------------------------------------------------

@dataclass(frozen=True)
class GlyphAtlas:
    """Class name -> ink mask of shape ``(GLYPH_HEIGHT, width)``."""

    entries: dict

    def glyph(self, name: str) -> np.ndarray:
        try:
            return self.entries[name]
        except KeyError:
            raise KeyError(f"atlas has no glyph for class {name!r}") from None

    def width(self, name: str) -> int:
        return self.glyph(name).shape[1]

    @property
    def classes(self) -> list[str]:
        return [c for c in EXTENDED_CLASSES if c in self.entries]

    @classmethod
    def from_sheet(cls, sheet: GrayImage, index_text: str) -> "GlyphAtlas":
        entries = {}
        for row in csv.DictReader(io.StringIO(index_text)):
            r, c, w = int(row["row"]), int(row["col"]), int(row["width"])
            block = sheet.pixels[r * ATLAS_CELL:r * ATLAS_CELL + GLYPH_HEIGHT, c * ATLAS_CELL:c * ATLAS_CELL + w]
            mask = block < 128
            mask.flags.writeable = False
            entries[row["class"]] = mask
        return cls(entries)


_DEFAULT_ATLAS = None


def load_atlas(path: str | None = None) -> GlyphAtlas:
    """Load an atlas sprite sheet; ``path`` is the ``.pgm`` (index is the sibling ``.csv``)."""
    global _DEFAULT_ATLAS
    if path is None:
        if _DEFAULT_ATLAS is None:
            data = resources.files("arithcaptcha") / "data"
            sheet = read_pgm((data / "atlas.pgm").read_bytes())
            _DEFAULT_ATLAS = GlyphAtlas.from_sheet(sheet, (data / "atlas.csv").read_text())
        return _DEFAULT_ATLAS
    with open(path, "rb") as fh:
        sheet = read_pgm(fh.read())
    with open(os.path.splitext(path)[0] + ".csv") as fh:
        return GlyphAtlas.from_sheet(sheet, fh.read())


# --- rendering -----------------------------------------------------------

def default_angles(limit: int = 50, step: int = 5) -> tuple[int, ...]:
    return tuple(range(-limit, limit + 1, step))


@dataclass(frozen=True)
class RenderStyle:
    """``angles`` is the set per-character rotations are drawn from."""

    angles: tuple = (0,)
    noise_density: float = 0.0
    lines: int = 0
    padding: int = 4
    vmargin: int = 6
    seed: int = 0

    def __post_init__(self):
        if any(abs(a) > 50 for a in self.angles):
            raise ValueError("rotation angles must lie in [-50, 50]")
        if not self.angles:
            raise ValueError("angle set must be non-empty")


@dataclass(frozen=True)
class CellTruth:
    label: str
    x0: int
    x1: int
    angle: float

    @property
    def class_id(self) -> int:
        return CLASS_INDEX[self.label]

    @property
    def width(self) -> int:
        return self.x1 - self.x0


@dataclass(frozen=True)
class Rendered:
    image: GrayImage
    cells: tuple


def _style_rng(style: RenderStyle) -> np.random.Generator:
    return np.random.default_rng([style.seed, 0x5EED])


def render(spec: NotationSpec, style: RenderStyle, atlas: GlyphAtlas | None = None) -> Rendered:
    atlas = atlas or load_atlas()
    labels = spec.classes()
    masks = [atlas.glyph(name) for name in labels]
    widths = [m.shape[1] for m in masks]
    pad = style.padding
    width = sum(widths) + pad * (len(widths) + 1)
    height = GLYPH_HEIGHT + 2 * style.vmargin
    rng = _style_rng(style)
    angles = [float(style.angles[int(rng.integers(len(style.angles)))]) for _ in labels]

    canvas = np.full((height, width), 255, np.uint8)
    cells = []
    x = pad
    y0 = style.vmargin
    for name, mask, w, angle in zip(labels, masks, widths, angles):
        layer = np.full((height, width), 255, np.uint8)
        layer[y0:y0 + GLYPH_HEIGHT, x:x + w][mask] = 0
        if angle:
            cx, cy = x + (w - 1) / 2.0, y0 + (GLYPH_HEIGHT - 1) / 2.0
            layer = affine_transform(GrayImage(layer), AffineMap.rotation(angle, cx, cy), 255).pixels
        np.minimum(canvas, layer, out=canvas)
        cells.append(CellTruth(name, x, x + w, angle))
        x += w + pad
    img = GrayImage(canvas)
    if style.noise_density or style.lines:
        img = add_noise(img, style.noise_density, style.lines, int(rng.integers(2**63)))
    return Rendered(img, tuple(cells))


def _segment_pixels(x0, y0, x1, y1):
    n = max(abs(x1 - x0), abs(y1 - y0)) + 1
    xs = np.rint(np.linspace(x0, x1, n)).astype(int)
    ys = np.rint(np.linspace(y0, y1, n)).astype(int)
    return xs, ys


def add_noise(img: GrayImage, density: float, lines: int, seed) -> GrayImage:
    """Flip ``floor(density * N)`` pixels to the opposite extreme, then draw dark 1-px segments."""
    if not 0.0 <= density <= 1.0:
        raise ValueError(f"noise density {density} outside [0, 1]")
    if lines < 0:
        raise ValueError("line count must be non-negative")
    rng = np.random.default_rng(seed)
    px = img.pixels.copy()
    flat = px.reshape(-1)
    n = int(math.floor(density * flat.size))
    if n:
        idx = rng.choice(flat.size, size=n, replace=False)
        flat[idx] = np.where(flat[idx] < 128, 255, 0)
    h, w = px.shape
    for _ in range(lines):
        x0, x1 = rng.integers(0, w, size=2)
        y0, y1 = rng.integers(0, h, size=2)
        xs, ys = _segment_pixels(int(x0), int(y0), int(x1), int(y1))
        px[ys, xs] = 0
    return GrayImage(px)


# --- datasets ------------------------------------------------------------

MANIFEST_HEADER = ["file", "script", "form", "first", "op", "second", "answer", "cells"]


def _fmt_angle(a: float) -> str:
    return str(int(a)) if float(a).is_integer() else repr(float(a))


@dataclass(frozen=True)
class Sample:
    file: str
    spec: NotationSpec
    cells: tuple = field(default=())

    @property
    def answer(self) -> int:
        return compute_answer(self.spec)

    def to_row(self) -> list[str]:
        s = self.spec
        cells = ";".join(f"{c.class_id}:{c.x0}:{c.x1}:{_fmt_angle(c.angle)}" for c in self.cells)
        return [self.file, s.script.value, s.form.value, str(s.first), s.op.value, str(s.second),
                str(self.answer), cells]


def _parse_cells(text: str) -> tuple:
    out = []
    for rec in filter(None, text.split(";")):
        cid, x0, x1, angle = rec.split(":")
        a = float(angle)
        out.append(CellTruth(EXTENDED_CLASSES[int(cid)], int(x0), int(x1), a))
    return tuple(out)


def write_manifest(path, samples: Sequence[Sample]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(MANIFEST_HEADER)
        for s in samples:
            wr.writerow(s.to_row())


def read_manifest(path) -> list[Sample]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames != MANIFEST_HEADER:
            raise ValueError(f"unexpected manifest header {rd.fieldnames}")
        out = []
        for row in rd:
            spec = NotationSpec(int(row["first"]), Op(row["op"]), int(row["second"]),
                                Script(row["script"]), Form(row["form"]))
            if int(row["answer"]) != compute_answer(spec):
                raise ValueError(f"answer mismatch for {row['file']}")
            out.append(Sample(row["file"], spec, _parse_cells(row["cells"])))
        return out


def corpus_samples(count: int, types: Sequence[NotationType], style: RenderStyle, seed: int,
                   atlas: GlyphAtlas | None = None):
    """Yield ``(Sample, GrayImage)`` pairs; types are assigned round-robin.

    Sample ``i`` draws its spec from seed ``seed + i`` and its style noise
    from ``style.seed + i``, so any index can be regenerated alone.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    types = sorted(set(types), key=_type_order)
    if not types:
        raise ValueError("type filter is empty")
    atlas = atlas or load_atlas()
    for i in range(count):
        t = types[i % len(types)]
        spec = sample_spec(seed + i, [t])
        st = RenderStyle(style.angles, style.noise_density, style.lines, style.padding, style.vmargin,
                         style.seed + seed + i)
        r = render(spec, st, atlas)
        yield Sample(f"{i:05d}.pgm", spec, r.cells), r.image


def generate_corpus(out_dir, count: int, types: Sequence[NotationType], style: RenderStyle, seed: int,
                    atlas: GlyphAtlas | None = None) -> list[Sample]:
    os.makedirs(out_dir, exist_ok=True)
    samples = []
    for sample, img in corpus_samples(count, types, style, seed, atlas):
        save_pgm(os.path.join(out_dir, sample.file), img)
        samples.append(sample)
    write_manifest(os.path.join(out_dir, "manifest.csv"), samples)
    return samples

"""Glyph normalization, classification and the end-to-end solve path.

solve: threshold -> median (tau=1) -> column split -> per-cell deskew with
the declared angles -> width-based layout detection -> normalize each cell
to 32x32 -> classify -> assemble the notation -> answer.
"""
from __future__ import annotations

import math
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .generator import (
    EXTENDED_CLASSES, GLYPH_HEIGHT, GlyphAtlas, NotationSpec, NotationType, Sample, Script,
    compute_answer, enumerate_types, load_atlas, parse_operand, parse_operator, read_manifest,
)
from .imagecore import BinaryImage, GrayImage, load_pgm
from .nn import CnnModel, LabeledSample, augment_rotations, to_input
from .preprocess import denoise, resize, rotate
from .segment import (
    MIN_GAP, MIN_WIDTH, CharBox, OperandKind, SegmentationError, StructuralForm,
    adaptive_detect, projection_profile, split_columns,
)

GLYPH_SIZE = 32
GLYPH_BOX = 28
SHIFT = 2


class SolveError(Exception):
    """Base for solve failures; ``partial`` holds whatever was recognized."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class SegmentationFailed(SolveError):
    pass


class InconsistentRecognition(SolveError):
    pass


def _ink_bbox(mask: np.ndarray):
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    return xs.min(), xs.max() + 1, ys.min(), ys.max() + 1


def normalize_glyph(glyph: CharBox | GrayImage) -> GrayImage:
    """Tight-crop the ink, scale it (aspect kept) to fit 28x28, center on a 32x32 white field."""
    img = glyph.glyph if isinstance(glyph, CharBox) else glyph
    if img is None or img.size == 0:
        raise ValueError("blank glyph")
    bbox = _ink_bbox(img.pixels < 128)
    if bbox is None:
        raise ValueError("blank glyph")
    x0, x1, y0, y1 = bbox
    w, h = x1 - x0, y1 - y0
    scale = GLYPH_BOX / max(w, h)
    nw = max(1, min(GLYPH_BOX, round(w * scale)))
    nh = max(1, min(GLYPH_BOX, round(h * scale)))
    tight = GrayImage(img.pixels[y0:y1, x0:x1])
    scaled = resize(tight, nw, nh)
    out = np.full((GLYPH_SIZE, GLYPH_SIZE), 255, np.uint8)
    ox, oy = (GLYPH_SIZE - nw) // 2, (GLYPH_SIZE - nh) // 2
    out[oy:oy + nh, ox:ox + nw] = scaled.pixels
    return GrayImage(out)


# --- template matching ---------------------------------------------------

@dataclass(frozen=True)
class Template:
    label: str
    bitmap: GrayImage
    angle: float = 0.0


def _zscore(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.float64)
    v = v - v.mean(axis=-1, keepdims=True)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.divide(v, n, out=np.zeros_like(v), where=n > 0)


def ncc(a: GrayImage, b: GrayImage) -> float:
    """Zero-mean normalized cross-correlation of two equally sized rasters."""
    return float(_zscore(a.pixels.reshape(1, -1))[0] @ _zscore(b.pixels.reshape(1, -1))[0])


def _shifted_stack(img: np.ndarray, shift: int) -> np.ndarray:
    padded = np.pad(img, shift, mode="edge")
    h, w = img.shape
    views = [padded[shift + dy:shift + dy + h, shift + dx:shift + dx + w]
             for dy in range(-shift, shift + 1) for dx in range(-shift, shift + 1)]
    return np.stack(views).reshape(len(views), -1)


class TemplateClassifier:
    name = "TM"

    def __init__(self, templates: Sequence[Template], shift: int = SHIFT):
        if not templates:
            raise ValueError("templates must be non-empty")
        self.labels = [t.label for t in templates]
        self.bank = _zscore(np.stack([t.bitmap.pixels.reshape(-1) for t in templates]))
        self.shift = shift
        # ties go to the lowest class index
        self.rank = np.array([EXTENDED_CLASSES.index(lbl) if lbl in EXTENDED_CLASSES else len(EXTENDED_CLASSES)
                              for lbl in self.labels])

    def scores(self, glyph: GrayImage) -> np.ndarray:
        """Best correlation of each template over the shift window."""
        shifted = _zscore(_shifted_stack(glyph.pixels, self.shift))
        return (self.bank @ shifted.T).max(axis=1)

    def match(self, glyph: GrayImage) -> tuple[str, float]:
        s = self.scores(glyph)
        best = s.max()
        cands = np.flatnonzero(s == best)
        i = cands[np.argmin(self.rank[cands])]
        return self.labels[i], float(min(1.0, max(-1.0, best)))

    def classify(self, glyphs: Sequence[GrayImage]) -> list[tuple[str, float]]:
        return [self.match(g) for g in glyphs]


def template_match(glyph: GrayImage, templates: Sequence[Template]) -> tuple[str, float]:
    return TemplateClassifier(templates).match(glyph)


def glyph_canvas(mask: np.ndarray, margin: int = 8) -> GrayImage:
    """Atlas mask drawn dark on a white field with ``margin`` px of background."""
    h, w = mask.shape
    px = np.full((h + 2 * margin, w + 2 * margin), 255, np.uint8)
    px[margin:margin + h, margin:margin + w][mask] = 0
    return GrayImage(px)


def build_templates(atlas: GlyphAtlas | None = None, angles: Sequence[float] = (0,), clean: bool = True) -> list[Template]:
    """One normalized template per class and angle.

    With ``clean`` each glyph goes through the same threshold + median pass
    the solver applies, so templates match what the classifier sees.
    """
    atlas = atlas or load_atlas()
    out = []
    for angle in angles:
        for label in atlas.classes:
            img = glyph_canvas(atlas.glyph(label))
            if angle:
                img = rotate(img, angle, 255)
            if clean:
                img = denoise(img).to_gray()
            out.append(Template(label, normalize_glyph(img), float(angle)))
    return out


class CnnClassifier:
    name = "CNN"

    def __init__(self, model: CnnModel, labels: Sequence[str] | None = None):
        self.model = model
        self.labels = list(labels) if labels is not None else model.classes

    def classify(self, glyphs: Sequence[GrayImage]) -> list[tuple[str, float]]:
        if not glyphs:
            return []
        p = self.model.forward(to_input(glyphs))
        idx = np.argmax(p, axis=1)
        return [(self.labels[i], float(p[k, i])) for k, i in enumerate(idx)]


class OcrClassifier:
    """Slot for an external OCR engine; none ships with this package."""

    name = "OCR"

    def classify(self, glyphs):
        raise NotImplementedError("no OCR engine is bundled")


# --- solve ---------------------------------------------------------------

@dataclass
class SolveResult:
    form: StructuralForm | None
    type: NotationType | None
    cells: list  # (label, score) per cell
    spec: NotationSpec | None
    answer: int | None
    strategy: str

    @property
    def labels(self) -> list[str]:
        return [c[0] for c in self.cells]

    def line(self) -> str:
        t = self.type.name if self.type else "?"
        f = self.form.form.value if self.form else "?"
        ans = "?" if self.answer is None else str(self.answer)
        return f"{t} {f} {'|'.join(self.labels)} {ans} {self.strategy}"


def deskew_box(binary: BinaryImage, box: tuple[int, int], angle: float) -> CharBox:
    """Undo a known glyph rotation inside one column band.

    The band is embedded in a square white field large enough for any
    rotation, turned by ``-angle`` and re-thresholded; the returned box keeps
    the band's center and takes the upright ink width.
    """
    x0, x1 = box
    band = binary.mask[:, x0:x1]
    if not angle:
        bb = _ink_bbox(band)
        glyph = BinaryImage(band[bb[2]:bb[3], :]).to_gray() if bb else BinaryImage(band).to_gray()
        return CharBox(x0, x1, glyph)
    h, w = band.shape
    side = int(math.ceil(math.hypot(w, h))) + 4
    field_ = np.full((side, side), 255, np.uint8)
    oy, ox = (side - h) // 2, (side - w) // 2
    field_[oy:oy + h, ox:ox + w][band] = 0
    upright = rotate(GrayImage(field_), -angle, 255).pixels < 128
    bb = _ink_bbox(upright)
    if bb is None:
        return CharBox(x0, x1, BinaryImage(band).to_gray())
    ux0, ux1, uy0, uy1 = bb
    width = ux1 - ux0
    cx = (x0 + x1) / 2.0
    nx0 = int(math.floor(cx - width / 2.0))
    return CharBox(nx0, nx0 + width, BinaryImage(upright[uy0:uy1, ux0:ux1]).to_gray())


def segment_cells(img: GrayImage, angles: Sequence[float] | None = None, tau: int = 1,
                  min_gap: int = MIN_GAP, min_width: int = MIN_WIDTH) -> list[CharBox]:
    binary = denoise(img, tau)
    bands = split_columns(projection_profile(binary), min_gap, min_width)
    boxes = []
    for i, band in enumerate(bands):
        angle = angles[i] if angles is not None and i < len(angles) else 0.0
        boxes.append(deskew_box(binary, band, angle))
    return boxes


def _assemble(form: StructuralForm, labels: Sequence[str]):
    """Notation spec from per-cell labels, or ``None`` when they contradict the layout."""
    first = parse_operand(labels[0])
    second = parse_operand(labels[-1])
    op = parse_operator(labels[1:-1])
    if first is None or second is None or op is None:
        return None
    if first[0] != second[0]:
        return None
    if (first[0] is Script.D) != (form.operand_kind is OperandKind.Digit):
        return None
    if op[0] is not form.form:
        return None
    try:
        return NotationSpec(first[1], op[1], second[1], first[0], op[0])
    except ValueError:
        return None


def solve(img: GrayImage, classifier, angles: Sequence[float] | None = None, tau: int = 1) -> SolveResult:
    """Raise :class:`SegmentationFailed` or :class:`InconsistentRecognition` on failure."""
    boxes = segment_cells(img, angles, tau)
    strategy = getattr(classifier, "name", type(classifier).__name__)
    if len(boxes) < 3:
        raise SegmentationFailed(f"segmentation failed: {len(boxes)} cells")
    try:
        form, _ = adaptive_detect(boxes)
    except SegmentationError as exc:
        raise SegmentationFailed(f"segmentation failed: {exc}") from None
    cells = classifier.classify([normalize_glyph(b) for b in boxes])
    labels = [c[0] for c in cells]
    spec = _assemble(form, labels)
    if spec is None:
        partial = SolveResult(form, None, cells, None, None, strategy)
        raise InconsistentRecognition("inconsistent recognition", partial)
    return SolveResult(form, spec.type, cells, spec, compute_answer(spec), strategy)


# --- evaluation ----------------------------------------------------------

@dataclass
class TypeTally:
    samples: int = 0
    cells: int = 0
    correct_cells: int = 0
    solved: int = 0

    def add(self, other: "TypeTally"):
        self.samples += other.samples
        self.cells += other.cells
        self.correct_cells += other.correct_cells
        self.solved += other.solved

    @property
    def char_accuracy(self) -> float:
        return self.correct_cells / self.cells if self.cells else float("nan")

    @property
    def captcha_accuracy(self) -> float:
        return self.solved / self.samples if self.samples else float("nan")


@dataclass
class EvalReport:
    strategy: str
    per_type: dict = field(default_factory=dict)
    confusion: Counter = field(default_factory=Counter)
    missing: list = field(default_factory=list)
    segmentation_failures: int = 0
    inconsistent: int = 0

    @property
    def overall(self) -> TypeTally:
        t = TypeTally()
        for v in self.per_type.values():
            t.add(v)
        return t

    @property
    def char_accuracy(self) -> float:
        return self.overall.char_accuracy

    @property
    def captcha_accuracy(self) -> float:
        return self.overall.captcha_accuracy

    def serial_vs_adaptive(self) -> dict:
        """Success-rate models with single-character rate ``r``: four vs three
        verified characters per notation, per example and over all eight types."""
        r = self.char_accuracy
        return {"r": r, "per_example_serial": r ** 4, "per_example_adaptive": r ** 3,
                "all_types_serial": r ** 32, "all_types_adaptive": r ** 24}

    def to_csv(self, header: str | None = None) -> str:
        lines = [f"# {header}"] if header else []
        lines.append("type,samples,char_accuracy,captcha_accuracy")
        names = [t.name for t in enumerate_types()]
        for name in names + sorted(set(self.per_type) - set(names)):
            t = self.per_type.get(name, TypeTally())
            lines.append(f"{name},{t.samples},{_f(t.char_accuracy)},{_f(t.captcha_accuracy)}")
        o = self.overall
        lines.append(f"ALL,{o.samples},{_f(o.char_accuracy)},{_f(o.captcha_accuracy)}")
        return "\n".join(lines) + "\n"

    def confusion_csv(self) -> str:
        lines = ["true_class,pred_class,count"]
        for (t, p), n in sorted(self.confusion.items()):
            lines.append(f"{t},{p},{n}")
        return "\n".join(lines) + "\n"


def _f(x: float) -> str:
    return "nan" if x != x else f"{x:.6f}"


def score_sample(sample: Sample, img: GrayImage, classifier, deskew: bool = True):
    """Tally one sample; returns ``(TypeTally, predicted labels or None, outcome)``."""
    truth = [c.label for c in sample.cells] or sample.spec.classes()
    angles = [c.angle for c in sample.cells] if deskew and sample.cells else None
    outcome = "ok"
    try:
        pred = solve(img, classifier, angles).labels
    except InconsistentRecognition as exc:
        pred = exc.partial.labels
        outcome = "inconsistent"
    except SegmentationFailed:
        pred = None
        outcome = "segmentation"
    tally = TypeTally(samples=1, cells=len(truth))
    if pred is not None and len(pred) == len(truth):
        hits = sum(p == t for p, t in zip(pred, truth))
        tally.correct_cells = hits
        tally.solved = int(hits == len(truth))
    return tally, pred, outcome


def evaluate(corpus_dir: str, classifier, deskew: bool = True, limit: int | None = None) -> EvalReport:
    """Whole-CAPTCHA success needs every cell right; per-cell accuracy is reported alongside."""
    samples = read_manifest(os.path.join(corpus_dir, "manifest.csv"))
    if limit is not None:
        samples = samples[:limit]
    report = EvalReport(getattr(classifier, "name", type(classifier).__name__))
    per_type = defaultdict(TypeTally)
    for s in samples:
        path = os.path.join(corpus_dir, s.file)
        if not os.path.exists(path):
            report.missing.append(s.file)
            continue
        tally, pred, outcome = score_sample(s, load_pgm(path), classifier, deskew)
        per_type[s.spec.type.name].add(tally)
        report.segmentation_failures += outcome == "segmentation"
        report.inconsistent += outcome == "inconsistent"
        truth = [c.label for c in s.cells] or s.spec.classes()
        if pred is not None and len(pred) == len(truth):
            for t, p in zip(truth, pred):
                report.confusion[(t, p)] += 1
        else:
            for t in truth:
                report.confusion[(t, "<unsegmented>")] += 1
    report.per_type = dict(per_type)
    return report


# --- training data -------------------------------------------------------

def ground_truth_cells(sample: Sample, img: GrayImage, tau: int = 1, deskew: bool = True) -> list[GrayImage]:
    """Normalized upright glyph per ground-truth cell.

    Each cell's band runs between the midpoints of the gaps to its
    neighbours, so a glyph rotated past its nominal box is still captured
    whole. The band then goes through the same deskew and normalization as
    in :func:`solve`.
    """
    if not sample.cells:
        raise ValueError(f"{sample.file}: manifest row has no cells")
    binary = denoise(img, tau)
    cells = sample.cells
    out = []
    for i, c in enumerate(cells):
        lo = 0 if i == 0 else (cells[i - 1].x1 + c.x0) // 2
        hi = img.width if i == len(cells) - 1 else (c.x1 + cells[i + 1].x0 + 1) // 2
        box = deskew_box(binary, (lo, hi), c.angle if deskew else 0.0)
        out.append(normalize_glyph(box))
    return out


def training_set(pairs, classes: Sequence[str], augment: bool = True, limit: float = 50, step: float = 5,
                 tau: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """uint8 glyph stack and label vector from ``(Sample, GrayImage)`` pairs.

    Labels index ``classes``; a cell whose class is missing from it raises
    before any training starts.
    """
    index = {c: i for i, c in enumerate(classes)}
    images, labels = [], []
    for sample, img in pairs:
        for glyph, cell in zip(ground_truth_cells(sample, img, tau), sample.cells):
            if cell.label not in index:
                raise ValueError(f"class {cell.label!r} is not in the {len(classes)}-class preset")
            base = LabeledSample(glyph, index[cell.label], cell.angle)
            for v in (augment_rotations(base, limit, step) if augment else [base]):
                images.append(v.image.pixels)
                labels.append(v.label)
    if not images:
        return np.zeros((0, GLYPH_SIZE, GLYPH_SIZE), np.uint8), np.zeros(0, np.intp)
    return np.stack(images), np.array(labels, dtype=np.intp)


def load_corpus(corpus_dir: str, limit: int | None = None):
    """Yield ``(Sample, GrayImage)`` for every manifest row whose file exists."""
    samples = read_manifest(os.path.join(corpus_dir, "manifest.csv"))
    for s in samples[:limit]:
        path = os.path.join(corpus_dir, s.file)
        if os.path.exists(path):
            yield s, load_pgm(path)

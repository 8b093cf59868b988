"""Character isolation and notation-layout detection.

Layout detection looks only at cell widths: ideographic cells are 20 px,
digits 11 px and operator symbols 9 px, split by a 14 px threshold.
"""
from __future__ import annotations

import enum
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .generator import Form, NotationType, Script, enumerate_types
from .imagecore import BinaryImage, GrayImage, crop

WIDTH_THRESHOLD = 14
MIN_GAP = 2
MIN_WIDTH = 4


class SegmentationError(ValueError):
    pass


@dataclass(frozen=True)
class CharBox:
    x0: int
    x1: int
    glyph: GrayImage | None = None

    def __post_init__(self):
        if self.x0 >= self.x1:
            raise ValueError(f"empty box [{self.x0}, {self.x1})")

    @property
    def width(self) -> int:
        return self.x1 - self.x0


class WidthClass(enum.Enum):
    Wide = "Wide"
    Narrow = "Narrow"


class OperandKind(enum.Enum):
    Digit = "Digit"
    Chinese = "Chinese"


@dataclass(frozen=True)
class StructuralForm:
    operand_kind: OperandKind
    form: Form

    @property
    def cell_count(self) -> int:
        return 4 if self.form is Form.NN else 3

    @property
    def operand_positions(self) -> tuple[int, int]:
        return (0, self.cell_count - 1)

    @property
    def operator_positions(self) -> tuple[int, ...]:
        return tuple(range(1, self.cell_count - 1))

    def widths(self) -> tuple[WidthClass, ...]:
        """Expected width class of every cell."""
        operand = WidthClass.Narrow if self.operand_kind is OperandKind.Digit else WidthClass.Wide
        op = WidthClass.Narrow if self.form is Form.O else WidthClass.Wide
        return (operand, *([op] * (self.cell_count - 2)), operand)

    @classmethod
    def of(cls, t: NotationType) -> "StructuralForm":
        kind = OperandKind.Digit if t.script is Script.D else OperandKind.Chinese
        return cls(kind, t.form)

    def __str__(self):
        return f"{self.operand_kind.value}/{self.form.value}"


def projection_profile(binary: BinaryImage, axis: str = "column") -> np.ndarray:
    if axis == "column":
        return binary.mask.sum(axis=0).astype(np.int64)
    if axis == "row":
        return binary.mask.sum(axis=1).astype(np.int64)
    raise ValueError(f"axis must be 'column' or 'row', got {axis!r}")


def split_columns(profile: Sequence[int], min_gap: int = MIN_GAP, min_width: int = MIN_WIDTH) -> list[tuple[int, int]]:
    """Half-open ``(x0, x1)`` runs of nonzero columns.

    Runs separated by fewer than ``min_gap`` zero columns are merged; merged
    runs narrower than ``min_width`` are dropped.
    """
    if min_gap < 1 or min_width < 1:
        raise ValueError("min_gap and min_width must be >= 1")
    nz = np.asarray(profile) > 0
    runs = []
    start = None
    for x, on in enumerate(nz):
        if on and start is None:
            start = x
        elif not on and start is not None:
            runs.append([start, x])
            start = None
    if start is not None:
        runs.append([start, len(nz)])
    merged = []
    for r in runs:
        if merged and r[0] - merged[-1][1] < min_gap:
            merged[-1][1] = r[1]
        else:
            merged.append(r)
    return [(a, b) for a, b in merged if b - a >= min_width]


def boxes_from_binary(binary: BinaryImage, min_gap: int = MIN_GAP, min_width: int = MIN_WIDTH) -> list[CharBox]:
    gray = binary.to_gray()
    out = []
    for x0, x1 in split_columns(projection_profile(binary), min_gap, min_width):
        out.append(CharBox(x0, x1, crop(gray, x0, x1, 0, binary.height)))
    return out


# --- k-means -------------------------------------------------------------

@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: list = field(default_factory=list)
    iterations: int = 0
    reseeded: int = 0


def _inertia(points, centroids, assign) -> float:
    return float(((points - centroids[assign]) ** 2).sum())


def _init_shuffle(pts, k, rng) -> list[int]:
    chosen, seen = [], set()
    for i in rng.permutation(len(pts)):
        key = pts[i].tobytes()
        if key not in seen:
            seen.add(key)
            chosen.append(int(i))
            if len(chosen) == k:
                break
    return chosen


def _init_farthest(pts, k, rng) -> list[int]:
    chosen = [int(rng.integers(len(pts)))]
    d2 = ((pts - pts[chosen[0]]) ** 2).sum(axis=1)
    while len(chosen) < k and d2.max() > 0:
        nxt = int(np.argmax(d2))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((pts - pts[nxt]) ** 2).sum(axis=1))
    return chosen


def kmeans(points, k: int, max_iter: int = 100, seed: int = 0, init: str = "farthest") -> KMeansResult:
    """Lloyd iterations from ``k`` distinct starting points.

    ``init="farthest"`` starts at a seeded random point and repeatedly adds
    the point farthest from those already chosen; ``init="shuffle"`` takes
    the first ``k`` distinct points of a seeded permutation, which can
    strand two centroids in one cluster. ``inertia`` records the objective
    after every assignment step.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    n = len(pts)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points ({n})")
    inits = {"farthest": _init_farthest, "shuffle": _init_shuffle}
    if init not in inits:
        raise ValueError(f"unknown init {init!r}")
    chosen = inits[init](pts, k, np.random.default_rng(seed))
    if len(chosen) < k:
        raise ValueError(f"only {len(chosen)} distinct points for k={k}")
    centroids = pts[chosen].copy()
    res = KMeansResult(np.full(n, -1), centroids)
    for it in range(max_iter):
        d2 = ((pts[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(d2, axis=1)
        res.inertia.append(_inertia(pts, centroids, assign))
        res.iterations = it + 1
        if np.array_equal(assign, res.assignments):
            break
        res.assignments = assign
        for c in range(k):
            members = pts[assign == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
            else:
                far = int(np.argmax(d2[np.arange(n), assign]))
                centroids[c] = pts[far]
                res.reseeded += 1
    res.centroids = centroids
    return res


def kmeans_segment(img: GrayImage | BinaryImage, k: int, seed: int = 0) -> list[BinaryImage]:
    """Cluster foreground pixels on ``(x, y)``; returns ``k`` disjoint masks covering the foreground."""
    if k < 2:
        raise ValueError("kmeans_segment needs k >= 2")
    if isinstance(img, GrayImage):
        from .preprocess import otsu_threshold
        img = otsu_threshold(img).binary
    ys, xs = np.nonzero(img.mask)
    if len(xs) < k:
        raise ValueError(f"{len(xs)} foreground pixels is fewer than k={k}")
    res = kmeans(np.stack([xs, ys], axis=1), k, seed=seed)
    masks = []
    for c in range(k):
        m = np.zeros(img.mask.shape, bool)
        sel = res.assignments == c
        m[ys[sel], xs[sel]] = True
        masks.append(BinaryImage(m))
    # left-to-right by centroid column
    order = np.argsort(res.centroids[:, 0], kind="stable")
    return [masks[i] for i in order]


# --- layout detection ----------------------------------------------------

def width_class(box: CharBox | int, threshold: int = WIDTH_THRESHOLD) -> WidthClass:
    w = box if isinstance(box, (int, np.integer)) else box.width
    return WidthClass.Wide if w >= threshold else WidthClass.Narrow


class _Checker:
    """Counts width checks; a missing position reads as ``None`` and still costs a check."""

    def __init__(self, boxes, threshold):
        self.boxes = boxes
        self.threshold = threshold
        self.count = 0

    def __call__(self, pos: int):
        self.count += 1
        if pos >= len(self.boxes):
            return None
        return width_class(self.boxes[pos], self.threshold)


def adaptive_detect(boxes: Sequence[CharBox], threshold: int = WIDTH_THRESHOLD) -> tuple[StructuralForm, int]:
    """Decision tree over cell widths; returns the layout and the number of checks spent.

    Digit operands: cell 3 narrow means O or N (cell 2 decides), cell 3 wide
    means NN. Ideographic operands: cell 2 narrow means O; otherwise cell 3
    must be wide and cell 4 (present and wide, or absent) splits NN from N.
    """
    if len(boxes) < 3:
        raise SegmentationError("not a notation")
    N, W = WidthClass.Narrow, WidthClass.Wide
    check = _Checker(boxes, threshold)
    if check(0) is N:
        if check(2) is N:
            form = Form.O if check(1) is N else Form.N
            result = StructuralForm(OperandKind.Digit, form)
        else:
            result = StructuralForm(OperandKind.Digit, Form.NN)
    else:
        if check(1) is N:
            result = StructuralForm(OperandKind.Chinese, Form.O)
        else:
            if check(2) is not W:
                raise SegmentationError("unrecognized layout")
            fourth = check(3)
            if fourth is None:
                result = StructuralForm(OperandKind.Chinese, Form.N)
            elif fourth is W:
                result = StructuralForm(OperandKind.Chinese, Form.NN)
            else:
                raise SegmentationError("unrecognized layout")
    if len(boxes) != result.cell_count or not _consistent(boxes, result, threshold):
        raise SegmentationError("unrecognized layout")
    return result, check.count


def _consistent(boxes, form: StructuralForm, threshold) -> bool:
    return all(width_class(b, threshold) is w for b, w in zip(boxes, form.widths()))


SERIAL_ORDER = enumerate_types()
CHECKS_PER_LAYOUT = 4


def serialized_detect(boxes: Sequence[CharBox], threshold: int = WIDTH_THRESHOLD) -> tuple[StructuralForm, int]:
    """Try the eight layouts in table order, four position checks each."""
    if len(boxes) < 3:
        raise SegmentationError("not a notation")
    checks = 0
    for t in SERIAL_ORDER:
        form = StructuralForm.of(t)
        checks += CHECKS_PER_LAYOUT
        if len(boxes) == form.cell_count and _consistent(boxes, form, threshold):
            return form, checks
    raise SegmentationError("no layout matches")


# --- speedup accounting --------------------------------------------------

SERIAL_WORST = len(SERIAL_ORDER) * CHECKS_PER_LAYOUT


@dataclass
class SpeedupReport:
    adaptive_checks: int
    serialized_checks: int
    samples: int
    wall_adaptive: float
    wall_serialized: float
    per_type: dict
    measured_serial_checks: int = 0
    agreement: int = 0

    @property
    def ratio(self) -> float:
        return self.serialized_checks / self.adaptive_checks

    @property
    def mean_adaptive(self) -> float:
        return self.adaptive_checks / self.samples

    @property
    def wall_ratio(self) -> float:
        return self.wall_serialized / self.wall_adaptive if self.wall_adaptive > 0 else float("nan")

    def to_text(self) -> str:
        lines = ["type,count,mean_adaptive_checks,serialized_checks,ratio"]
        for name in [t.name for t in enumerate_types()] + sorted(set(self.per_type) - {t.name for t in enumerate_types()}):
            if name not in self.per_type:
                continue
            count, checks = self.per_type[name]
            mean = checks / count
            lines.append(f"{name},{count},{mean:.4f},{SERIAL_WORST},{SERIAL_WORST / mean:.4f}")
        lines.append(f"ALL,{self.samples},{self.mean_adaptive:.4f},{SERIAL_WORST},{self.ratio:.4f}")
        return "\n".join(lines) + "\n"


def speedup_bench(corpus: Sequence[tuple[str, Sequence[CharBox]]]) -> SpeedupReport:
    """``corpus`` holds ``(type name, boxes)`` pairs.

    The serialized cost is charged at the full ``8 * 4`` checks per sample;
    the serialized detector is still run to time it and to confirm both
    detectors agree.
    """
    per_type = defaultdict(lambda: [0, 0])
    adaptive_total = 0
    serial_total = 0
    agree = 0
    forms = []
    t0 = time.perf_counter()
    for _, boxes in corpus:
        forms.append(adaptive_detect(boxes))
    t1 = time.perf_counter()
    serial = [serialized_detect(boxes) for _, boxes in corpus]
    t2 = time.perf_counter()
    for (name, _), (form, n), (sform, sn) in zip(corpus, forms, serial):
        per_type[name][0] += 1
        per_type[name][1] += n
        adaptive_total += n
        serial_total += sn
        agree += form == sform
    samples = len(corpus)
    return SpeedupReport(
        adaptive_checks=adaptive_total,
        serialized_checks=SERIAL_WORST * samples,
        samples=samples,
        wall_adaptive=t1 - t0,
        wall_serialized=t2 - t1,
        per_type={k: tuple(v) for k, v in per_type.items()},
        measured_serial_checks=serial_total,
        agreement=agree,
    )

import math
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from arithcaptcha.generator import (
    EXTENDED_CLASSES, Form, NotationSpec, NotationType, Op, RenderStyle, Script, corpus_samples,
    default_angles, enumerate_types, generate_corpus, render,
)
from arithcaptcha.imagecore import GrayImage
from arithcaptcha.nn import build_paper_net
from arithcaptcha.recognize import (
    CnnClassifier, EvalReport, InconsistentRecognition, OcrClassifier, SegmentationFailed, Template,
    TemplateClassifier, build_templates, evaluate, ground_truth_cells, ncc, normalize_glyph, score_sample,
    solve, template_match, training_set,
)
from arithcaptcha.segment import CharBox

ALL_TYPES = enumerate_types()


@pytest.fixture(scope="module")
def tm(atlas):
    return TemplateClassifier(build_templates(atlas))


def test_normalize_centres_a_square_glyph():
    px = np.full((40, 40), 255, np.uint8)
    px[10:30, 5:25] = 0
    out = normalize_glyph(GrayImage(px))
    assert (out.width, out.height) == (32, 32)
    ys, xs = np.nonzero(out.pixels < 128)
    assert xs.min() >= 2 and ys.min() >= 2 and xs.max() <= 29 and ys.max() <= 29
    assert xs.max() - xs.min() + 1 == 28


def test_normalize_keeps_aspect():
    px = np.full((20, 9), 255, np.uint8)
    px[:, 3:6] = 0
    ys, xs = np.nonzero(normalize_glyph(GrayImage(px)).pixels < 128)
    assert ys.max() - ys.min() + 1 == 28 and xs.max() - xs.min() + 1 == 4


def test_normalize_is_idempotent_on_normalized(atlas):
    for name in ["7", "S3", "+", "mul2"]:
        once = normalize_glyph(GrayImage(np.where(atlas.glyph(name), 0, 255).astype(np.uint8)))
        assert normalize_glyph(once) == once


def test_normalize_blank():
    with pytest.raises(ValueError, match="blank glyph"):
        normalize_glyph(GrayImage.blank(10, 10))
    with pytest.raises(ValueError, match="blank glyph"):
        normalize_glyph(CharBox(0, 3, None))


def test_template_counts(atlas):
    t0 = build_templates(atlas)
    assert len(t0) == 94 and {t.label for t in t0} == set(EXTENDED_CLASSES)
    assert len(build_templates(atlas, default_angles())) == 94 * 21
    for t in t0:
        assert (t.bitmap.width, t.bitmap.height) == (32, 32)
        assert normalize_glyph(t.bitmap) == t.bitmap


def test_self_match_and_anticorrelation(atlas):
    templates = build_templates(atlas)
    for t in templates[::7]:
        label, score = template_match(t.bitmap, templates)
        assert label == t.label and abs(score - 1.0) <= 1e-9
        inverted = GrayImage(255 - t.bitmap.pixels)
        assert ncc(inverted, t.bitmap) == pytest.approx(-1.0, abs=1e-12)


TEMPLATES = build_templates()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 93), st.floats(0.2, 1.0), st.floats(0, 1))
def test_ncc_affine_intensity_invariance(i, gain, frac):
    t = TEMPLATES[i]
    offset = frac * 255 * (1 - gain)  # keeps gain * v + offset inside 0..255, so no clipping
    scaled = GrayImage(np.clip(np.rint(t.bitmap.pixels * gain + offset), 0, 255).astype(np.uint8))
    assert ncc(scaled, t.bitmap) == pytest.approx(1.0, abs=2e-3)
    assert TemplateClassifier([t]).match(scaled)[1] == pytest.approx(1.0, abs=2e-3)


def test_shift_search_tolerates_two_pixels():
    t = TEMPLATES[3]
    # normalized ink spans rows 2..29, so one row down and two columns right keeps it off the border
    moved = GrayImage(np.roll(t.bitmap.pixels, (1, 2), axis=(0, 1)))
    assert ncc(moved, t.bitmap) < 0.99
    assert TemplateClassifier([t]).match(moved)[1] == pytest.approx(1.0, abs=1e-9)


def test_ties_go_to_lowest_class_index():
    img = GrayImage(np.tile(np.arange(0, 256, 8, dtype=np.uint8), (32, 1)))
    templates = [Template("b", img), Template("a", img), Template("7", img)]
    assert template_match(img, templates)[0] == "7"


def test_empty_templates():
    with pytest.raises(ValueError):
        template_match(GrayImage.blank(32, 32), [])


def test_clean_glyphs_match_atlas_templates(atlas, tm):
    wrong = set()
    for name in EXTENDED_CLASSES:
        img = GrayImage(np.pad(np.where(atlas.glyph(name), 0, 255).astype(np.uint8), 6, constant_values=255))
        got = tm.match(normalize_glyph(img))[0]
        if got != name:
            wrong.add((name, got))
    # size normalization erases the only difference between some letter pairs;
    # letters never occur in a notation
    assert wrong <= {("w", "W"), ("Q", "O"), ("o", "O"), ("x", "X"), ("v", "V"), ("z", "Z"), ("s", "S"), ("c", "C")}


@pytest.mark.parametrize("spec, answer", [
    (NotationSpec(9, Op.Sub, 5, Script.D, Form.O), 4),
    (NotationSpec(9, Op.Add, 5, Script.T, Form.NN), 14),
    (NotationSpec(8, Op.Div, 4, Script.S, Form.NN), 2),
])
def test_solve_examples(atlas, tm, spec, answer):
    r = render(spec, RenderStyle(), atlas)
    res = solve(r.image, tm)
    assert res.answer == answer and res.spec == spec
    assert res.labels == spec.classes() and res.type == spec.type
    assert res.line().split() == [spec.type.name, spec.form.value, "|".join(spec.classes()), str(answer), "TM"]


def test_solve_blank(tm):
    with pytest.raises(SegmentationFailed, match="segmentation failed"):
        solve(GrayImage.blank(60, 32), tm)


class FixedLabels:
    name = "fixed"

    def __init__(self, labels):
        self.labels = labels

    def classify(self, glyphs):
        return [(lbl, 0.5) for lbl in self.labels[:len(glyphs)]]


def test_inconsistent_recognition_keeps_structure(atlas):
    r = render(NotationSpec(9, Op.Sub, 5, Script.D, Form.O), RenderStyle(), atlas)
    with pytest.raises(InconsistentRecognition) as exc:
        solve(r.image, FixedLabels(["9", "3", "5"]))
    part = exc.value.partial
    assert part.form is not None and part.answer is None and part.labels == ["9", "3", "5"]
    with pytest.raises(InconsistentRecognition):
        solve(r.image, FixedLabels(["9", "-", "S5"]))


def test_closed_loop_clean_corpus(atlas, tm):
    for sample, img in corpus_samples(64, ALL_TYPES, RenderStyle(), 31, atlas):
        res = solve(img, tm)
        assert res.labels == sample.spec.classes() and res.answer == sample.answer


def test_rotated_solve_uses_declared_angles(atlas, tm):
    style = RenderStyle(default_angles(), 0.0, 0, 12, seed=2)
    hits = 0
    for sample, img in corpus_samples(40, ALL_TYPES, style, 77, atlas):
        tally, _, _ = score_sample(sample, img, tm)
        hits += tally.correct_cells == tally.cells
    assert hits >= 36


def test_ground_truth_cells_shape(atlas):
    style = RenderStyle(default_angles(), 0.02, 0, 12, seed=1)
    sample, img = next(corpus_samples(1, ALL_TYPES, style, 5, atlas))
    cells = ground_truth_cells(sample, img)
    assert len(cells) == len(sample.cells) and all(c.width == c.height == 32 for c in cells)


def test_training_set_multiplies_by_angle_count(atlas):
    pairs = list(corpus_samples(6, ALL_TYPES, RenderStyle(), 0, atlas))
    n_cells = sum(len(s.cells) for s, _ in pairs)
    x, y = training_set(pairs, EXTENDED_CLASSES)
    assert x.shape == (21 * n_cells, 32, 32) and x.dtype == np.uint8
    x1, y1 = training_set(pairs, EXTENDED_CLASSES, augment=False)
    assert len(x1) == n_cells
    # label distribution is preserved, every label exactly 21 times as often
    assert np.array_equal(np.bincount(y, minlength=94), 21 * np.bincount(y1, minlength=94))
    with pytest.raises(ValueError, match="not in the"):
        training_set(pairs, EXTENDED_CLASSES[:82])


def test_cnn_classifier_labels():
    m = build_paper_net(94, seed=0)
    out = CnnClassifier(m).classify([GrayImage.blank(32, 32)] * 3)
    assert len(out) == 3 and all(lbl in EXTENDED_CLASSES and 0 <= s <= 1 for lbl, s in out)
    assert CnnClassifier(m).classify([]) == []


def test_ocr_slot_is_unimplemented():
    with pytest.raises(NotImplementedError):
        OcrClassifier().classify([GrayImage.blank(32, 32)])


class NoisyOracle:
    """Returns the true label with probability r, otherwise a random wrong one."""

    name = "mock"

    def __init__(self, base, r, seed):
        self.base, self.r = base, r
        self.rng = np.random.default_rng(seed)

    def classify(self, glyphs):
        out = []
        for label, score in self.base.classify(glyphs):
            if self.rng.random() >= self.r:
                label = self.rng.choice([c for c in EXTENDED_CLASSES if c != label])
            out.append((str(label), score))
        return out


def test_whole_accuracy_is_r_to_the_fourth(atlas, tm):
    r, n = 0.9, 400
    dnnd = [NotationType.parse("D-NN-D")]
    mock = NoisyOracle(tm, r, seed=1)
    solved = 0
    for sample, img in corpus_samples(n, dnnd, RenderStyle(), 3, atlas):
        solved += score_sample(sample, img, mock)[0].solved
    expected = r ** 4
    sigma = math.sqrt(expected * (1 - expected) / n)
    assert abs(solved / n - expected) <= 4 * sigma


def test_evaluate_report(tmp_path, atlas, tm):
    d = tmp_path / "corpus"
    generate_corpus(d, 24, ALL_TYPES, RenderStyle(), 2, atlas)
    os.remove(d / "00005.pgm")
    rep = evaluate(str(d), tm)
    assert rep.missing == ["00005.pgm"]
    assert rep.overall.samples == 23 and rep.captcha_accuracy == 1.0 and rep.char_accuracy == 1.0
    lines = rep.to_csv("seed=2").splitlines()
    assert lines[0] == "# seed=2" and lines[1] == "type,samples,char_accuracy,captcha_accuracy"
    assert [ln.split(",")[0] for ln in lines[2:]] == [t.name for t in ALL_TYPES] + ["ALL"]
    assert lines[-1] == "ALL,23,1.000000,1.000000"
    conf = rep.confusion_csv().splitlines()
    assert conf[0] == "true_class,pred_class,count"
    assert all(t == p for t, p, _ in (row.split(",") for row in conf[1:]))


def test_whole_accuracy_bounded_by_char_accuracy(tmp_path, atlas):
    d = tmp_path / "c"
    generate_corpus(d, 40, ALL_TYPES, RenderStyle(default_angles(), 0.05, 2, 8), 9, atlas)
    rep = evaluate(str(d), TemplateClassifier(build_templates(atlas)))
    for t in rep.per_type.values():
        assert t.captcha_accuracy <= t.char_accuracy
    assert rep.captcha_accuracy <= rep.char_accuracy
    rates = rep.serial_vs_adaptive()
    assert rates["per_example_serial"] == pytest.approx(rates["r"] ** 4)
    assert rates["all_types_adaptive"] == pytest.approx(rates["r"] ** 24)


def test_report_empty_type_rows():
    rep = EvalReport("TM")
    assert "S-O-S,0,nan,nan" in rep.to_csv()

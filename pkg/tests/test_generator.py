import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from arithcaptcha.generator import (
    DIGIT, EXTENDED_CLASSES, PAPER_CLASSES, SYMBOL, WIDE, Form, GlyphAtlas, NotationSpec, NotationType, Op,
    RenderStyle, Sample, Script, add_noise, class_width, combination_count, compute_answer, corpus_samples,
    default_angles, enumerate_types, generate_corpus, operand_choices, operator_choices, parse_operand,
    parse_operator, read_manifest, render, sample_spec, write_manifest,
)
from arithcaptcha.imagecore import GrayImage
from arithcaptcha.segment import CharBox, StructuralForm, adaptive_detect

ALL_TYPES = enumerate_types()


def test_eight_types_in_table_order():
    names = [t.name for t in ALL_TYPES]
    assert len(names) == 8
    assert "D-O-D" in names and "S-N-S" not in names
    assert names == ["S-O-S", "S-NN-S", "T-O-T", "T-N-T", "T-NN-T", "D-O-D", "D-N-D", "D-NN-D"]


def test_types_are_all_pairs_but_one():
    pairs = {(s, f) for s in Script for f in Form}
    assert {(t.script, t.form) for t in ALL_TYPES} == pairs - {(Script.S, Form.N)}


def test_combination_count():
    assert len(operand_choices()) == 30
    assert len(operator_choices()) == 12
    assert combination_count() == 10800


def test_sns_rejected():
    with pytest.raises(ValueError):
        NotationType(Script.S, Form.N)
    with pytest.raises(ValueError):
        NotationSpec(1, Op.Add, 2, Script.S, Form.N)


def test_type_name_round_trip():
    for t in ALL_TYPES:
        assert NotationType.parse(t.name) == t


@pytest.mark.parametrize("first, second", [(7, 0), (7, 2), (1, 3)])
def test_inexact_division_rejected(first, second):
    with pytest.raises(ValueError):
        NotationSpec(first, Op.Div, second, Script.D, Form.O)


@pytest.mark.parametrize("a, op, b, ans", [(9, Op.Add, 5, 14), (9, Op.Sub, 5, 4), (8, Op.Div, 4, 2),
                                           (3, Op.Sub, 8, -5), (7, Op.Mul, 6, 42), (0, Op.Div, 3, 0)])
def test_compute_answer(a, op, b, ans):
    assert compute_answer(NotationSpec(a, op, b, Script.D, Form.O)) == ans


def test_sample_spec_singleton_and_determinism():
    dod = NotationType.parse("D-O-D")
    for seed in range(50):
        s = sample_spec(seed, {dod})
        assert (s.script, s.form) == (Script.D, Form.O)
        assert sample_spec(seed, ALL_TYPES) == sample_spec(seed, ALL_TYPES)


def test_sample_spec_empty():
    with pytest.raises(ValueError):
        sample_spec(0, [])


def test_sample_spec_type_uniformity():
    n = 10_000
    counts = {t: 0 for t in ALL_TYPES}
    for seed in range(n):
        counts[sample_spec(seed, ALL_TYPES).type] += 1
    p = 1 / 8
    sigma = math.sqrt(n * p * (1 - p))
    assert all(abs(c - n * p) <= 5 * sigma for c in counts.values())


def test_sample_spec_divisions_are_exact():
    for seed in range(2000):
        s = sample_spec(seed, ALL_TYPES)
        if s.op is Op.Div:
            assert s.second != 0 and s.first % s.second == 0


def test_class_inventory():
    assert len(PAPER_CLASSES) == 82 and len(EXTENDED_CLASSES) == 94
    assert EXTENDED_CLASSES[:82] == PAPER_CLASSES
    assert len(set(EXTENDED_CLASSES)) == 94


def test_atlas_widths_and_coverage(atlas):
    assert set(atlas.classes) == set(EXTENDED_CLASSES)
    for name in atlas.classes:
        assert atlas.width(name) == class_width(name)
        assert atlas.glyph(name).shape[0] == 20
        assert atlas.glyph(name).any()
    assert {class_width(c) for c in EXTENDED_CLASSES} == {WIDE, DIGIT, SYMBOL}
    for spec_type, a, op in itertools.product(ALL_TYPES, range(10), Op):
        b = 1
        spec = NotationSpec(a if op is not Op.Div else b, op, b, spec_type.script, spec_type.form)
        for name in spec.classes():
            atlas.glyph(name)


def test_atlas_glyphs_distinct(atlas):
    seen = {atlas.glyph(c).tobytes() + bytes([atlas.width(c)]) for c in atlas.classes}
    assert len(seen) == len(atlas.classes)


def test_missing_glyph_names_class(atlas):
    partial = GlyphAtlas({k: v for k, v in atlas.entries.items() if k != "7"})
    with pytest.raises(KeyError, match="'7'"):
        render(NotationSpec(7, Op.Add, 1, Script.D, Form.O), RenderStyle(), partial)


def test_parse_helpers_invert_class_names():
    for script, v in operand_choices():
        spec = NotationSpec(v, Op.Add, 0, script, Form.O if script is Script.S else Form.N)
        assert parse_operand(spec.classes()[0]) == (script, v)
    for form, op in operator_choices():
        spec = NotationSpec(4, op, 2, Script.D, form)
        assert parse_operator(spec.classes()[1:-1]) == (form, op)
    assert parse_operand("+") is None and parse_operator(["1"]) is None


def test_dod_layout_arithmetic(atlas):
    spec = NotationSpec(9, Op.Sub, 5, Script.D, Form.O)
    r = render(spec, RenderStyle(padding=4), atlas)
    assert len(r.cells) == 3
    assert r.image.width == 11 + 9 + 11 + 4 * 4
    assert [c.width for c in r.cells] == [11, 9, 11]
    assert r.image.height == 20 + 2 * 6


def test_dnnd_has_four_cells(atlas):
    r = render(NotationSpec(9, Op.Add, 5, Script.D, Form.NN), RenderStyle(), atlas)
    assert [c.width for c in r.cells] == [11, 20, 20, 11]


def test_render_deterministic(atlas):
    spec = NotationSpec(6, Op.Mul, 3, Script.T, Form.NN)
    style = RenderStyle(default_angles(), 0.05, 3, 12, 6, seed=99)
    a, b = render(spec, style, atlas), render(spec, style, atlas)
    assert a.image == b.image and a.cells == b.cells
    c = render(spec, RenderStyle(default_angles(), 0.05, 3, 12, 6, seed=100), atlas)
    assert c.image != a.image


def test_render_angles_from_declared_set(atlas):
    allowed = (-30, 10, 45)
    for seed in range(20):
        r = render(NotationSpec(1, Op.Add, 2, Script.D, Form.NN), RenderStyle(allowed, seed=seed), atlas)
        assert all(c.angle in allowed for c in r.cells)


def test_render_style_rejects_wide_angles():
    with pytest.raises(ValueError):
        RenderStyle((55,))


def test_ground_truth_reproduces_structural_form(atlas):
    for sample, _ in corpus_samples(80, ALL_TYPES, RenderStyle(default_angles(), 0.02, 2, 12), 5, atlas):
        boxes = [CharBox(c.x0, c.x1) for c in sample.cells]
        form, _ = adaptive_detect(boxes)
        assert form == StructuralForm.of(sample.spec.type)


def test_noise_identity_and_saturation(rng):
    img = GrayImage(rng.integers(0, 256, (40, 100), dtype=np.uint8))
    assert add_noise(img, 0.0, 0, 1) == img
    assert set(np.unique(add_noise(img, 1.0, 0, 1).pixels)) <= {0, 255}


def test_noise_flip_count():
    img = GrayImage(np.full((40, 100), 255, np.uint8))
    out = add_noise(img, 0.05, 0, 3)
    assert int((out.pixels != img.pixels).sum()) == 200


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_noise_flip_count_property(density, seed):
    px = np.random.default_rng(seed).choice(np.array([0, 255], np.uint8), (17, 23))
    out = add_noise(GrayImage(px), density, 0, seed)
    assert int((out.pixels != px).sum()) == math.floor(density * px.size)


def test_noise_lines_are_dark_and_deterministic():
    img = GrayImage.blank(60, 30)
    a = add_noise(img, 0.0, 4, 11)
    assert a == add_noise(img, 0.0, 4, 11)
    assert (a.pixels < 255).any() and set(np.unique(a.pixels)) <= {0, 255}


@pytest.mark.parametrize("density", [-0.1, 1.5])
def test_noise_density_range(density):
    with pytest.raises(ValueError):
        add_noise(GrayImage.blank(4, 4), density, 0, 0)


def test_round_robin_types(atlas):
    got = [s.spec.type for s, _ in corpus_samples(8, ALL_TYPES, RenderStyle(), 0, atlas)]
    assert got == ALL_TYPES


def test_corpus_determinism_and_manifest_round_trip(tmp_path, atlas):
    style = RenderStyle(default_angles(), 0.02, 1, 12, seed=4)
    a = generate_corpus(tmp_path / "a", 24, ALL_TYPES, style, 7, atlas)
    b = generate_corpus(tmp_path / "b", 24, ALL_TYPES, style, 7, atlas)
    for name in ["manifest.csv"] + [s.file for s in a]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert read_manifest(tmp_path / "a" / "manifest.csv") == a == b
    write_manifest(tmp_path / "c.csv", a)
    assert (tmp_path / "c.csv").read_bytes() == (tmp_path / "a" / "manifest.csv").read_bytes()


def test_manifest_rejects_wrong_answer(tmp_path):
    s = Sample("x.pgm", NotationSpec(2, Op.Add, 2, Script.D, Form.O))
    write_manifest(tmp_path / "m.csv", [s])
    text = (tmp_path / "m.csv").read_text().replace(",4,", ",5,")
    (tmp_path / "m.csv").write_text(text)
    with pytest.raises(ValueError, match="answer"):
        read_manifest(tmp_path / "m.csv")

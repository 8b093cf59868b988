"""Regenerate the shipped glyph atlas (src/arithcaptcha/data/atlas.pgm + atlas.csv).

Digits and Latin letters are rasterized from DejaVu Sans Mono Bold (bundled
with matplotlib); operator symbols are drawn by hand; ideographic classes
are seeded pseudo-glyphs. Needs Pillow and matplotlib, which the runtime
package does not.

    python scripts/build_atlas.py
"""
from __future__ import annotations

import os
import sys

import numpy as np
from PIL import Image, ImageDraw, ImageFont

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from arithcaptcha.generator import (  # noqa: E402
    ATLAS_CELL, GLYPH_HEIGHT, EXTENDED_CLASSES, class_width,
)
from arithcaptcha.imagecore import GrayImage, write_pgm  # noqa: E402

OUT_DIR = os.path.join(os.path.dirname(__file__), "..", "src", "arithcaptcha", "data")
GRID_COLS = 10


def _font():
    import matplotlib
    path = os.path.join(os.path.dirname(matplotlib.__file__), "mpl-data", "fonts", "ttf", "DejaVuSansMono-Bold.ttf")
    return ImageFont.truetype(path, 96)


def alnum_glyph(ch: str, font) -> np.ndarray:
    canvas = Image.new("L", (160, 160), 0)
    ImageDraw.Draw(canvas).text((20, 10), ch, fill=255, font=font)
    arr = np.asarray(canvas)
    ys, xs = np.nonzero(arr > 127)
    tight = canvas.crop((xs.min(), ys.min(), xs.max() + 1, ys.max() + 1))
    box = tight.resize((11, 16), Image.LANCZOS)
    ink = np.asarray(box) >= 110
    glyph = np.zeros((GLYPH_HEIGHT, 11), bool)
    glyph[2:18] = ink
    return glyph


def symbol_glyph(name: str) -> np.ndarray:
    g = np.zeros((GLYPH_HEIGHT, 9), bool)
    if name == "+":
        g[9:12, :] = True
        g[6:15, 3:6] = True
    elif name == "-":
        g[9:12, :] = True
    elif name == "*":
        g[5:16, 3:6] = True
        for r in range(5, 16):
            c = round((r - 5) * 8 / 10)
            g[r, max(c - 1, 0):c + 2] = True
            g[r, max(8 - c - 1, 0):8 - c + 2] = True
    elif name == "/":
        g[9:12, :] = True
        g[4:7, 3:6] = True
        g[14:17, 3:6] = True
    else:
        raise KeyError(name)
    return g


def pseudo_ideograph(index: int) -> np.ndarray:
    rng = np.random.default_rng(7919 + 104729 * index)
    g = np.zeros((GLYPH_HEIGHT, 20), bool)
    # a full-width bar keeps the ink touching both cell edges
    r = int(rng.integers(2, 16))
    g[r:r + 3, :] = True
    for _ in range(int(rng.integers(3, 6))):
        kind = rng.integers(0, 4)
        if kind == 0:
            r = int(rng.integers(0, 17))
            c0 = int(rng.integers(0, 10))
            c1 = int(rng.integers(c0 + 6, 21))
            g[r:r + 3, c0:c1] = True
        elif kind == 1:
            c = int(rng.integers(0, 17))
            r0 = int(rng.integers(0, 10))
            r1 = int(rng.integers(r0 + 6, 21))
            g[r0:r1, c:c + 3] = True
        elif kind == 2:
            # diagonal stroke, 3 px thick
            r0 = int(rng.integers(0, 8))
            c0 = int(rng.integers(0, 8))
            n = int(rng.integers(8, 13))
            sgn = 1 if rng.integers(0, 2) else -1
            for t in range(n):
                rr = r0 + t
                cc = c0 + t if sgn > 0 else 19 - c0 - t
                if 0 <= rr < 20 and 0 <= cc < 20:
                    g[rr, max(cc - 1, 0):cc + 2] = True
        else:
            r0 = int(rng.integers(0, 10))
            c0 = int(rng.integers(0, 10))
            hh = int(rng.integers(6, 11))
            ww = int(rng.integers(6, 11))
            g[r0:r0 + 2, c0:c0 + ww] = True
            g[r0 + hh - 2:r0 + hh, c0:c0 + ww] = True
            g[r0:r0 + hh, c0:c0 + 2] = True
            g[r0:r0 + hh, c0 + ww - 2:c0 + ww] = True
    return g


def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    a = a.astype(float).ravel() - a.mean()
    b = b.astype(float).ravel() - b.mean()
    return float(a @ b / np.sqrt((a @ a) * (b @ b)))


def build():
    font = _font()
    glyphs = {}
    ideo = 0
    for name in EXTENDED_CLASSES:
        if len(name) == 1 and name.isalnum():
            glyphs[name] = alnum_glyph(name, font)
        elif name in ("+", "-", "*", "/"):
            glyphs[name] = symbol_glyph(name)
        else:
            glyphs[name] = pseudo_ideograph(ideo)
            ideo += 1
        assert glyphs[name].shape[1] == class_width(name), name
        assert glyphs[name][:, 0].any() and glyphs[name][:, -1].any(), name

    wide = [n for n in EXTENDED_CLASSES if class_width(n) == 20]
    worst = max(_ncc(glyphs[p], glyphs[q]) for i, p in enumerate(wide) for q in wide[i + 1:])
    print(f"max pairwise correlation among ideographs: {worst:.3f}")

    rows = (len(EXTENDED_CLASSES) + GRID_COLS - 1) // GRID_COLS
    sheet = np.full((rows * ATLAS_CELL, GRID_COLS * ATLAS_CELL), 255, np.uint8)
    lines = ["class,row,col,width"]
    for i, name in enumerate(EXTENDED_CLASSES):
        r, c = divmod(i, GRID_COLS)
        g = glyphs[name]
        sheet[r * ATLAS_CELL:r * ATLAS_CELL + GLYPH_HEIGHT, c * ATLAS_CELL:c * ATLAS_CELL + g.shape[1]][g] = 0
        lines.append(f"{name},{r},{c},{g.shape[1]}")
    os.makedirs(OUT_DIR, exist_ok=True)
    with open(os.path.join(OUT_DIR, "atlas.pgm"), "wb") as fh:
        fh.write(write_pgm(GrayImage(sheet)))
    with open(os.path.join(OUT_DIR, "atlas.csv"), "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


if __name__ == "__main__":
    build()

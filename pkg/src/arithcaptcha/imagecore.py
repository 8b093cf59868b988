"""Raster containers, histograms, cropping and binary PGM I/O.

Coordinates are (x right, y down) with the origin at the top-left pixel.
Pixel arrays are stored row-major as ``(height, width)`` numpy arrays and
are frozen after construction.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np


class PGMError(ValueError):
    """Malformed or unsupported PGM stream."""


def _frozen(arr: np.ndarray, dtype) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True, order="C")
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class GrayImage:
    """8-bit grayscale raster."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels)
        if arr.ndim != 2:
            raise ValueError(f"expected a 2-D pixel array, got shape {arr.shape}")
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise ValueError("pixel values must lie in 0..255")
        object.__setattr__(self, "pixels", _frozen(arr, np.uint8))

    @classmethod
    def blank(cls, width: int, height: int, value: int = 255) -> "GrayImage":
        return cls(np.full((height, width), value, dtype=np.uint8))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def size(self) -> int:
        return self.pixels.size

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(np.array_equal(self.pixels, other.pixels))

    def __repr__(self):
        return f"GrayImage({self.width}x{self.height})"


@dataclass(frozen=True, eq=False)
class BinaryImage:
    """Foreground mask; ``True`` marks foreground."""

    mask: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.mask)
        if arr.ndim != 2:
            raise ValueError(f"expected a 2-D mask, got shape {arr.shape}")
        object.__setattr__(self, "mask", _frozen(arr, bool))

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    def to_gray(self, fg: int = 0, bg: int = 255) -> GrayImage:
        return GrayImage(np.where(self.mask, fg, bg).astype(np.uint8))

    def __eq__(self, other):
        if not isinstance(other, BinaryImage):
            return NotImplemented
        return self.mask.shape == other.mask.shape and bool(np.array_equal(self.mask, other.mask))

    def __repr__(self):
        return f"BinaryImage({self.width}x{self.height}, fg={int(self.mask.sum())})"


def histogram(img: GrayImage) -> np.ndarray:
    """Return the 256-bin gray-level tally of ``img``."""
    if img.size == 0:
        raise ValueError("empty input")
    return np.bincount(img.pixels.ravel(), minlength=256).astype(np.int64)


def crop(img: GrayImage, x0: int, x1: int, y0: int, y1: int) -> GrayImage:
    """Half-open crop ``[x0, x1) x [y0, y1)``."""
    if not (0 <= x0 < x1 <= img.width and 0 <= y0 < y1 <= img.height):
        raise ValueError(f"invalid crop rectangle x=[{x0},{x1}) y=[{y0},{y1}) for {img.width}x{img.height}")
    return GrayImage(img.pixels[y0:y1, x0:x1])


_HEADER = re.compile(rb"\s*(\S+)")


def _next_token(data: bytes, pos: int) -> tuple[bytes, int]:
    # comments are not produced by write_pgm but tolerated on read
    while True:
        m = _HEADER.match(data, pos)
        if m is None:
            raise PGMError(f"truncated header at offset {pos}")
        tok = m.group(1)
        if tok.startswith(b"#"):
            eol = data.find(b"\n", m.start(1))
            if eol < 0:
                raise PGMError(f"truncated header at offset {m.start(1)}")
            pos = eol + 1
            continue
        return tok, m.end(1)


def read_pgm(data: bytes) -> GrayImage:
    """Parse a binary P5 stream with maxval 255."""
    if len(data) < 2 or data[:2] != b"P5":
        raise PGMError(f"unsupported magic {data[:2]!r} at offset 0")
    pos = 2
    fields = []
    for name in ("width", "height", "maxval"):
        start = pos
        tok, pos = _next_token(data, pos)
        if not tok.isdigit():
            raise PGMError(f"bad {name} token {tok!r} at offset {start}")
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise PGMError(f"unsupported maxval {maxval} at offset {pos}")
    if pos >= len(data) or data[pos:pos + 1] not in (b" ", b"\n", b"\r", b"\t"):
        raise PGMError(f"missing header terminator at offset {pos}")
    pos += 1
    need = width * height
    if len(data) - pos < need:
        raise PGMError(f"truncated payload at offset {len(data)}: need {need} bytes from offset {pos}")
    if width == 0 or height == 0:
        raise PGMError(f"empty raster at offset {pos}")
    payload = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    return GrayImage(payload.reshape(height, width))


def write_pgm(img: GrayImage) -> bytes:
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.pixels.tobytes()


def load_pgm(path) -> GrayImage:
    with open(path, "rb") as fh:
        return read_pgm(fh.read())


def save_pgm(path, img: GrayImage) -> None:
    with open(path, "wb") as fh:
        fh.write(write_pgm(img))

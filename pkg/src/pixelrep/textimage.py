"""Rasterize Unicode text into fixed-height grayscale sentence images.

Glyphs come from an ordered chain of font faces; each character is drawn with
the first face whose character map covers it, and characters no face covers
are drawn with the first face's ``.notdef`` box. Intensities are 0 for
background and 1 for full ink.
"""

from __future__ import annotations

import struct
import threading
import unicodedata
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from fontTools.ttLib import TTFont
from PIL import Image, ImageDraw, ImageFont

from . import kernels

NOTDEF = -1

BUNDLED_FONTS = ("latin", "cyrillic", "greek", "hebrew")

CACHE_MAGIC = b"PXR1"
CACHE_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")
_WIDTH = struct.Struct("<I")


class FontLoadError(ValueError):
    """A font file in the fallback chain could not be read."""


def bundled_font_paths(names=BUNDLED_FONTS):
    root = resources.files("pixelrep") / "fonts"
    return [str(root / f"{name}.ttf") for name in names]


@dataclass(frozen=True)
class RenderConfig:
    canvas_height: int = 32
    font_pt: float = 10.0
    dpi: float = 120.0
    baseline_y: int | None = None
    pad_left: int = 2
    pad_right: int = 2
    antialias: bool = True

    def __post_init__(self):
        if self.canvas_height < 1:
            raise ValueError("canvas_height must be positive")
        if self.pixel_size > self.canvas_height:
            raise ValueError(
                f"pixel font size {self.pixel_size:.2f} exceeds canvas height {self.canvas_height}"
            )

    @property
    def pixel_size(self):
        return self.font_pt * self.dpi / 72.0

    @property
    def baseline(self):
        if self.baseline_y is not None:
            return self.baseline_y
        # a quarter of the canvas is reserved below the baseline for descenders
        return self.canvas_height - int(round(0.25 * self.canvas_height))


@dataclass(frozen=True)
class GlyphBitmap:
    coverage: np.ndarray
    bearing_x: int
    bearing_y: int
    advance: int
    is_mark: bool = False


@dataclass
class SentenceImage:
    pixels: np.ndarray
    text: str = ""

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


class FontFace:
    """One font file: its character map plus lazily created rasterizers."""

    def __init__(self, path):
        self.path = str(path)
        try:
            with TTFont(self.path, lazy=True) as tt:
                cmap = tt.getBestCmap()
        except Exception as exc:
            raise FontLoadError(f"cannot load font {self.path!r}: {exc}") from exc
        if cmap is None:
            raise FontLoadError(f"font {self.path!r} has no usable character map")
        self.codepoints = frozenset(cmap)
        self._sized = {}

    def covers(self, codepoint):
        return codepoint in self.codepoints

    def sized(self, pixel_size):
        font = self._sized.get(pixel_size)
        if font is None:
            try:
                font = ImageFont.truetype(self.path, pixel_size, layout_engine=ImageFont.Layout.BASIC)
            except OSError as exc:
                raise FontLoadError(f"cannot rasterize font {self.path!r}: {exc}") from exc
            self._sized[pixel_size] = font
        return font

    def __repr__(self):
        return f"FontFace({Path(self.path).name!r}, {len(self.codepoints)} codepoints)"


@dataclass
class FontAtlas:
    faces: tuple
    glyph_cache: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __len__(self):
        return len(self.faces)

    def advance(self, face_index, char, pixel_size):
        if is_mark(char):
            return 0
        return int(round(self.faces[face_index].sized(pixel_size).getlength(char)))

    def glyph(self, face_index, char, pixel_size, antialias=True):
        key = (face_index, ord(char), pixel_size, antialias)
        with self._lock:
            cached = self.glyph_cache.get(key)
        if cached is not None:
            return cached
        glyph = _rasterize(self.faces[face_index].sized(pixel_size), char, antialias)
        with self._lock:
            return self.glyph_cache.setdefault(key, glyph)


def is_mark(char):
    return unicodedata.category(char) in ("Mn", "Me")


def _rasterize(font, char, antialias):
    left, top, right, bottom = font.getbbox(char, anchor="ls")
    w, h = max(right - left, 0), max(bottom - top, 0)
    if w == 0 or h == 0:
        coverage = np.zeros((h, w), dtype=np.float32)
    else:
        img = Image.new("L", (w, h), 0)
        draw = ImageDraw.Draw(img)
        draw.fontmode = "L" if antialias else "1"
        draw.text((-left, -top), char, font=font, fill=255, anchor="ls")
        coverage = np.asarray(img, dtype=np.float32) / np.float32(255.0)
    advance = 0 if is_mark(char) else int(round(font.getlength(char)))
    return GlyphBitmap(coverage, int(left), int(-top), advance, is_mark(char))


def load_fonts(paths=None):
    """Build a fallback chain from font files in priority order.

    ``None`` selects the bundled Latin, Cyrillic, Greek and Hebrew faces.
    """
    if paths is None:
        paths = bundled_font_paths()
    paths = list(paths)
    if not paths:
        raise FontLoadError("empty fallback chain")
    return FontAtlas(tuple(FontFace(p) for p in paths))


def resolve_face(atlas, codepoint):
    if isinstance(codepoint, str):
        codepoint = ord(codepoint)
    for i, face in enumerate(atlas.faces):
        if face.covers(codepoint):
            return i
    return NOTDEF


def _is_rtl(text):
    for ch in text:
        bidi = unicodedata.bidirectional(ch)
        if bidi in ("R", "AL"):
            return True
        if bidi == "L":
            return False
    return False


def _layout(text, atlas, cfg, with_glyphs):
    """Place glyphs along the pen line.

    Returns ``(placements, content_end)`` where each placement is
    ``(glyph, x, cluster_start, cluster_advance)``; ``glyph`` is None when
    ``with_glyphs`` is false.
    """
    size = cfg.pixel_size
    pen = cfg.pad_left
    placements = []
    base = None  # (glyph, x, cluster_start, advance) of the last base character
    for ch in text:
        face = resolve_face(atlas, ord(ch))
        face = 0 if face == NOTDEF else face
        if is_mark(ch):
            glyph = atlas.glyph(face, ch, size, cfg.antialias) if with_glyphs else None
            if base is None:
                x = pen + (glyph.bearing_x if glyph is not None else 0)
                placements.append((glyph, x, pen, 0))
            else:
                _, bx, cs, adv = base
                x = cs
                if glyph is not None:
                    x = cs + int(round((adv - glyph.coverage.shape[1]) / 2))
                placements.append((glyph, x, cs, adv))
            continue
        adv = atlas.advance(face, ch, size)
        glyph = atlas.glyph(face, ch, size, cfg.antialias) if with_glyphs else None
        x = pen + (glyph.bearing_x if glyph is not None else 0)
        entry = (glyph, x, pen, adv)
        placements.append(entry)
        base = entry
        pen += adv
    return placements, pen


def measure_width(text, atlas, cfg=RenderConfig()):
    if not text:
        raise ValueError("empty input line")
    _, end = _layout(text, atlas, cfg, with_glyphs=False)
    return max(1, end + cfg.pad_right)


def render_sentence(text, atlas, cfg=RenderConfig()):
    """Render one line of text; no normalization is applied to ``text``."""
    if not text:
        raise ValueError("empty input line")
    placements, end = _layout(text, atlas, cfg, with_glyphs=True)
    width = max(1, end + cfg.pad_right)
    canvas = np.zeros((cfg.canvas_height, width), dtype=np.float32)
    rtl = _is_rtl(text)
    start = cfg.pad_left
    for glyph, x, cs, adv in placements:
        if glyph.coverage.size == 0:
            continue
        if rtl:
            # mirror the cluster box inside [pad_left, end); keep the offset within it
            x = start + end - (cs + adv) + (x - cs)
        top = cfg.baseline - glyph.bearing_y
        kernels.composite_max(canvas, glyph.coverage, top, x)
    return SentenceImage(canvas, text)


# -- PXR1 render cache ---------------------------------------------------------------


def quantize(pixels):
    return np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)


def write_render_cache(path, images, canvas_height):
    images = list(images)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, canvas_height, len(images)))
        for img in images:
            pixels = img.pixels if isinstance(img, SentenceImage) else img
            if pixels.shape[0] != canvas_height:
                raise ValueError(f"image height {pixels.shape[0]} != cache height {canvas_height}")
            fh.write(_WIDTH.pack(pixels.shape[1]))
            fh.write(np.ascontiguousarray(quantize(pixels)).tobytes())


def read_render_cache(path):
    """Return ``(canvas_height, [float32 pixel matrices])`` from a PXR1 file."""
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, version, height, count = _HEADER.unpack(header)
        if magic != CACHE_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != CACHE_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        images = []
        for _ in range(count):
            (width,) = _WIDTH.unpack(fh.read(_WIDTH.size))
            raw = fh.read(height * width)
            if len(raw) != height * width:
                raise ValueError(f"{path}: truncated image data")
            px = np.frombuffer(raw, dtype=np.uint8).reshape(height, width)
            images.append(px.astype(np.float32) / np.float32(255.0))
    return height, images

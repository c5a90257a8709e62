"""Cut sentence images into overlapping full-height windows and batch them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .textimage import SentenceImage, read_render_cache


@dataclass(frozen=True)
class WindowConfig:
    h: int = 32
    w: int = 32
    s: int = 16

    def __post_init__(self):
        if not 0 < self.s <= self.w:
            raise ValueError(f"stride must satisfy 0 < s <= w, got s={self.s}, w={self.w}")
        if self.h < 1:
            raise ValueError("window height must be positive")


@dataclass
class TokenSequence:
    windows: np.ndarray  # [n_tokens, h, w]
    source_width: int

    @property
    def n_tokens(self):
        return self.windows.shape[0]


@dataclass
class PixelBatch:
    data: np.ndarray  # [B, T_max, h, w]
    pad_mask: np.ndarray  # [B, T_max], True marks padding
    lang_tags: list

    @property
    def lengths(self):
        return (~self.pad_mask).sum(axis=1)


def window_count(width, cfg=WindowConfig()):
    if width < 1:
        raise ValueError("width must be >= 1")
    if width <= cfg.w:
        return 1
    return -(-(width - cfg.w) // cfg.s) + 1


def tokenize(img, cfg=WindowConfig()):
    pixels = img.pixels if isinstance(img, SentenceImage) else np.asarray(img)
    if pixels.shape[0] != cfg.h:
        raise ValueError(f"image height {pixels.shape[0]} does not match window height {cfg.h}")
    width = pixels.shape[1]
    n = window_count(width, cfg)
    windows = kernels.extract_windows(np.ascontiguousarray(pixels), cfg.w, cfg.s, n)
    return TokenSequence(windows, width)


def collate(seqs, tags=None):
    seqs = list(seqs)
    if not seqs:
        raise ValueError("cannot collate an empty list of sequences")
    h, w = seqs[0].windows.shape[1:]
    t_max = max(s.n_tokens for s in seqs)
    data = np.zeros((len(seqs), t_max, h, w), dtype=seqs[0].windows.dtype)
    pad = np.ones((len(seqs), t_max), dtype=bool)
    for i, s in enumerate(seqs):
        if s.windows.shape[1:] != (h, w):
            raise ValueError(f"window shape {s.windows.shape[1:]} != {(h, w)}")
        data[i, :s.n_tokens] = s.windows
        pad[i, :s.n_tokens] = False
    tags = list(tags) if tags is not None else [None] * len(seqs)
    return PixelBatch(data, pad, tags)


def uncollate(batch):
    """Split a batch back into per-example window stacks (padding dropped)."""
    return [batch.data[i, :n] for i, n in enumerate(batch.lengths)]


def stitch(windows, cfg=WindowConfig()):
    """Reassemble a window stack into an image; only valid when ``s == w``."""
    if cfg.s != cfg.w:
        raise ValueError("stitching requires non-overlapping windows (s == w)")
    return np.concatenate(list(windows), axis=1)


def tokenize_cache(path, cfg=WindowConfig()):
    height, images = read_render_cache(path)
    if height != cfg.h:
        raise ValueError(f"cache height {height} does not match window height {cfg.h}")
    return [tokenize(px, cfg) for px in images]

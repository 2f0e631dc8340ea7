"""Small procedural paired datasets for smoke tests and desk-scale experiments."""

from __future__ import annotations

import numpy as np

from .data import PairedSample
from .tensor import RngState

# fill colors in [-1, 1] RGB
SHAPE_COLORS = {
    "rect": (-0.8, -0.4, 0.9),   # blue
    "disc": (0.9, -0.6, -0.6),   # red
}
BACKGROUND = 1.0


def _disc_mask(h, w, cy, cx, r):
    yy, xx = np.mgrid[:h, :w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _rect_mask(h, w, top, left, bh, bw):
    m = np.zeros((h, w), bool)
    m[top:top + bh, left:left + bw] = True
    return m


def _edges(mask: np.ndarray) -> np.ndarray:
    """Inner boundary pixels of a binary mask (4-neighborhood)."""
    p = np.pad(mask, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return mask & ~interior


def edges_to_shapes_pair(rng: RngState, size: int = 64, max_shapes: int = 3, idx: str = "") -> PairedSample:
    """Input: black outlines on white (1 channel). Target: the outlined shapes
    filled with a per-kind color on white (3 channels); later shapes cover earlier ones."""
    h = w = size
    target = np.full((3, h, w), BACKGROUND, np.float32)
    edge = np.zeros((h, w), bool)
    n = int(rng.integers(1, max_shapes + 1))
    lo, hi = max(3, size // 8), max(4, size // 3)
    for _ in range(n):
        kind = "rect" if rng.uniform() < 0.5 else "disc"
        if kind == "rect":
            bh, bw = int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))
            m = _rect_mask(h, w, int(rng.integers(0, h - bh)), int(rng.integers(0, w - bw)), bh, bw)
        else:
            r = int(rng.integers(lo // 2 + 1, hi // 2 + 2))
            m = _disc_mask(h, w, int(rng.integers(r, h - r)), int(rng.integers(r, w - r)), r)
        target[:, m] = np.asarray(SHAPE_COLORS[kind], np.float32)[:, None]
        edge &= ~m
        edge |= _edges(m)
    x = np.where(edge, -1.0, 1.0).astype(np.float32)[None]
    return PairedSample(x, target, idx)


def edges_to_shapes(n: int, seed: int, size: int = 64) -> list[PairedSample]:
    rng = RngState(seed, (100,))
    return [edges_to_shapes_pair(rng, size, idx=f"shape{i:04d}") for i in range(n)]


def bimodal_color(n: int, seed: int, size: int = 16, color_a=(0.9, -0.7, -0.7), color_b=(-0.7, -0.7, 0.9),
                  noise: float = 0.5) -> list[PairedSample]:
    """Each target is a solid image of color A or B, half of each in shuffled order.

    Every sample shares one fixed noise input, so the input says nothing about
    which color to produce.
    """
    rng = RngState(seed, (101,))
    x = np.clip(rng.normal((1, size, size)) * noise, -1, 1).astype(np.float32)
    is_a = rng.permutation(n) < (n + 1) // 2
    out = []
    for i in range(n):
        c = color_a if is_a[i] else color_b
        y = np.broadcast_to(np.asarray(c, np.float32)[:, None, None], (3, size, size)).copy()
        out.append(PairedSample(x.copy(), y, f"bimodal{i:04d}"))
    return out


def overfit_pair(seed: int = 0, size: int = 64) -> PairedSample:
    """One structured pair: outlines in, filled shapes out (RGB in, RGB out)."""
    s = edges_to_shapes_pair(RngState(seed, (102,)), size, max_shapes=3, idx="overfit")
    return PairedSample(np.repeat(s.x, 3, axis=0), s.y, s.id)

"""Seeded synthetic cartoon animation used in place of real anime footage."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from .frames import Frame, Sequence


@dataclass
class Shape:
    kind: str  # disk | rect | polyline
    color: np.ndarray
    center: np.ndarray
    size: np.ndarray  # disk: (r,), rect: (half_h, half_w), polyline: (thickness,)
    velocity: np.ndarray
    scale_amp: float
    scale_freq: float
    phase: float
    points: np.ndarray | None = None  # polyline vertices relative to center


def _quantize(c: np.ndarray) -> np.ndarray:
    return np.round(np.clip(c, 0, 1) * 255.0) / 255.0


def _palette(rng: np.random.Generator, style: int, n: int) -> tuple:
    """Background colour and ``n`` shape colours for one sequence."""
    if style == 0:
        bg = rng.uniform(0.85, 0.97, 3)
        hues = rng.uniform(0, 1, n)
        cols = [_hsv(h, rng.uniform(0.5, 0.9), rng.uniform(0.45, 0.8)) for h in hues]
    elif style == 1:
        bg = rng.uniform(0.12, 0.25, 3)
        hues = rng.uniform(0, 1, n)
        cols = [_hsv(h, rng.uniform(0.6, 1.0), rng.uniform(0.75, 1.0)) for h in hues]
    else:
        raise ValueError(f"unknown style {style}")
    return _quantize(bg), [_quantize(c) for c in cols]


def _hsv(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def random_shapes(rng: np.random.Generator, size: int, style: int = 0, n_shapes: int | None = None) -> tuple:
    n = int(rng.integers(2, 6)) if n_shapes is None else n_shapes
    bg, colors = _palette(rng, style, n)
    unit = size / 64.0
    shapes = []
    for i in range(n):
        kind = ("disk", "rect", "polyline")[int(rng.integers(0, 3))]
        center = rng.uniform(0.25 * size, 0.75 * size, 2)
        if kind == "disk":
            dims = np.array([rng.uniform(5, 14) * unit])
            pts = None
        elif kind == "rect":
            dims = rng.uniform(4, 12, 2) * unit
            pts = None
        else:
            dims = np.array([rng.uniform(2.5, 5) * unit])
            pts = rng.uniform(-14, 14, (int(rng.integers(2, 4)), 2)) * unit
        angle = rng.uniform(0, 2 * np.pi)
        speed = rng.uniform(0.3, 1.0) * unit
        shapes.append(Shape(kind, colors[i], center, dims,
                            velocity=speed * np.array([np.sin(angle), np.cos(angle)]),
                            scale_amp=rng.uniform(0.05, 0.2), scale_freq=rng.uniform(0.1, 0.3),
                            phase=rng.uniform(0, 2 * np.pi), points=pts))
    return bg, shapes


def _segment_distance(yy, xx, a, b):
    ab = b - a
    denom = float(ab @ ab) or 1.0
    t = np.clip(((yy - a[0]) * ab[0] + (xx - a[1]) * ab[1]) / denom, 0, 1)
    py = a[0] + t * ab[0]
    px = a[1] + t * ab[1]
    return np.hypot(yy - py, xx - px)


def rasterize(shape: Shape, t: float, size: int, motion: float = 1.0) -> np.ndarray:
    """Boolean coverage of ``shape`` at frame ``t``."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = shape.center + motion * shape.velocity * t
    s = 1.0 + motion * shape.scale_amp * np.sin(shape.scale_freq * t + shape.phase)
    if shape.kind == "disk":
        r = shape.size[0] * s
        return (yy - c[0]) ** 2 + (xx - c[1]) ** 2 <= r * r
    if shape.kind == "rect":
        hh, hw = shape.size * s
        return (np.abs(yy - c[0]) <= hh) & (np.abs(xx - c[1]) <= hw)
    pts = c + shape.points * s
    half = 0.5 * shape.size[0] * s
    mask = np.zeros((size, size), dtype=bool)
    for a, b in zip(pts[:-1], pts[1:]):
        mask |= _segment_distance(yy, xx, a, b) <= half
    return mask


def render(bg: np.ndarray, shapes: List[Shape], t: float, size: int, motion: float = 1.0) -> np.ndarray:
    img = np.empty((size, size, 3))
    img[:] = bg
    for shape in shapes:
        img[rasterize(shape, t, size, motion)] = shape.color
    return img


def synth_sequence(seed: int, n_frames: int = 12, size: int = 64, style: int = 0,
                   motion: float = 1.0, n_shapes: int | None = None) -> Sequence:
    """Deterministic animation of 2–5 flat-coloured primitives with derived line art."""
    if n_frames < 8:
        raise ValueError("synthetic sequences need at least 8 frames")
    if size < 32:
        raise ValueError("synthetic frames need size >= 32")
    rng = np.random.default_rng(seed)
    bg, shapes = random_shapes(rng, size, style, n_shapes)
    frames = [Frame.from_color(render(bg, shapes, t, size, motion)) for t in range(n_frames)]
    return Sequence(frames, source_id=f"synth_s{style}_{seed}")


def synth_dataset(seed: int, count: int, n_frames: int = 12, size: int = 64, style: int = 0) -> List[Sequence]:
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, count)
    return [synth_sequence(int(s), n_frames, size, style) for s in seeds]

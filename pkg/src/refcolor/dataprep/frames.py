"""Frame, sequence and reference containers plus line extraction and window sampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .distance import distance_field

EDGE_THRESHOLD = 0.15
WINDOW = 8


@dataclass
class Frame:
    color: np.ndarray  # H×W×3 in [0, 1]
    line: np.ndarray  # H×W×1, 0 = ink, 1 = background
    dist: np.ndarray  # H×W×1, normalised distance to ink

    @classmethod
    def from_color(cls, color: np.ndarray, dilate: int = 0) -> "Frame":
        line = edges_from_color(color, dilate=dilate)
        return cls(color=np.asarray(color, dtype=np.float64), line=line[..., None],
                   dist=distance_field(line)[..., None])

    @classmethod
    def from_line(cls, line: np.ndarray, color: Optional[np.ndarray] = None) -> "Frame":
        line = np.asarray(line, dtype=np.float64)
        if line.ndim == 2:
            line = line[..., None]
        if color is None:
            color = np.zeros(line.shape[:2] + (3,))
        return cls(color=color, line=line, dist=distance_field(line)[..., None])

    @property
    def size(self) -> tuple:
        return self.color.shape[:2]


@dataclass
class Sequence:
    frames: List[Frame]
    source_id: str = ""

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i):
        return self.frames[i]


@dataclass
class ReferenceSet:
    refs: List[Frame] = field(default_factory=list)

    def __post_init__(self):
        if len(self.refs) < 1:
            raise ValueError("a reference set needs at least one reference")
        sizes = {f.size for f in self.refs}
        if len(sizes) != 1:
            raise ValueError(f"references disagree in size: {sizes}")

    @property
    def K(self) -> int:
        return len(self.refs)


def edge_mask(color: np.ndarray, threshold: float = EDGE_THRESHOLD) -> np.ndarray:
    """Pixels that differ from a 4-neighbour by more than ``threshold`` in some channel.

    Each differing neighbour pair marks only its brighter pixel (ties broken by
    raster order) so a boundary yields a one-pixel-wide stroke.
    """
    c = np.asarray(color, dtype=np.float64)
    H, W = c.shape[:2]
    bright = c.sum(axis=-1)
    mask = np.zeros((H, W), dtype=bool)
    # horizontal pairs (y, x) - (y, x+1)
    diff = np.abs(c[:, 1:] - c[:, :-1]).max(axis=-1) > threshold
    left_wins = bright[:, :-1] >= bright[:, 1:]
    mask[:, :-1] |= diff & left_wins
    mask[:, 1:] |= diff & ~left_wins
    # vertical pairs (y, x) - (y+1, x)
    diff = np.abs(c[1:] - c[:-1]).max(axis=-1) > threshold
    top_wins = bright[:-1] >= bright[1:]
    mask[:-1] |= diff & top_wins
    mask[1:] |= diff & ~top_wins
    return mask


def dilate_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return mask
    out = mask.copy()
    H, W = mask.shape
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            ys = slice(max(dy, 0), H + min(dy, 0))
            yd = slice(max(-dy, 0), H + min(-dy, 0))
            xs = slice(max(dx, 0), W + min(dx, 0))
            xd = slice(max(-dx, 0), W + min(-dx, 0))
            out[yd, xd] |= mask[ys, xs]
    return out


def edges_from_color(color: np.ndarray, threshold: float = EDGE_THRESHOLD, dilate: int = 0) -> np.ndarray:
    """Synthetic line art: 1 − (optionally dilated) edge mask, values in {0, 1}."""
    mask = dilate_mask(edge_mask(color, threshold), dilate)
    return 1.0 - mask.astype(np.float64)


def sample_window(seq: Sequence, rng: np.random.Generator, length: int = WINDOW):
    """Pick ``length`` consecutive frames; the ends are references, the rest targets.

    Returns ``(ReferenceSet, targets, start)``.
    """
    if len(seq) < length:
        raise ValueError(f"sequence of {len(seq)} frames is shorter than the {length}-frame window")
    start = int(rng.integers(0, len(seq) - length + 1))
    window = seq.frames[start:start + length]
    return ReferenceSet([window[0], window[-1]]), window[1:-1], start

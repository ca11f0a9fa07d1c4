"""Shot segmentation from RGB histogram features."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence as Seq

import numpy as np

from .frames import Frame, Sequence

BINS = 256
REFERENCE_PIXELS = 256 * 256


@dataclass
class ShotConfig:
    cut_threshold: float = 200.0
    uniform_threshold: float = 10.0
    min_length: int = 8
    # "raw": pixel counts; "scaled": counts rescaled to a 256×256 frame;
    # "normalized": fractions of the pixel count
    hist_mode: str = "scaled"
    min_luminance: float = 0.1
    min_channel_std: float = 0.02


def histogram_feature(color: np.ndarray, mode: str = "raw") -> np.ndarray:
    """Concatenated 256-bin R, G, B histograms (768 values); bin = floor(v·255)."""
    c = np.asarray(color, dtype=np.float64)
    q = np.clip(np.floor(c * 255.0), 0, 255).astype(np.int64)
    hist = np.concatenate([np.bincount(q[..., ch].ravel(), minlength=BINS) for ch in range(3)])
    hist = hist.astype(np.float64)
    npix = c.shape[0] * c.shape[1]
    if mode == "raw":
        return hist
    if mode == "scaled":
        return hist * (REFERENCE_PIXELS / npix)
    if mode == "normalized":
        return hist / npix
    raise ValueError(f"unknown histogram mode {mode!r}")


def feature_mse(a: np.ndarray, b: np.ndarray) -> float:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.mean(d * d))


def shot_boundaries(features: Seq[np.ndarray], cut_threshold: float = 200.0) -> List[tuple]:
    """Half-open (start, end) index ranges split wherever consecutive features differ by > threshold."""
    if len(features) == 0:
        return []
    ranges = []
    start = 0
    for i in range(1, len(features)):
        if feature_mse(features[i - 1], features[i]) > cut_threshold:
            ranges.append((start, i))
            start = i
    ranges.append((start, len(features)))
    return ranges


def is_uniform(features: Seq[np.ndarray], threshold: float) -> bool:
    """True when every pair of frames differs by less than ``threshold``."""
    n = len(features)
    for i in range(n):
        for j in range(i + 1, n):
            if feature_mse(features[i], features[j]) >= threshold:
                return False
    return True


def is_dark_or_faded(colors: Seq[np.ndarray], min_luminance: float, min_channel_std: float) -> bool:
    stack = np.stack([np.asarray(c, dtype=np.float64) for c in colors])
    lum = 0.299 * stack[..., 0] + 0.587 * stack[..., 1] + 0.114 * stack[..., 2]
    if lum.mean() < min_luminance:
        return True
    stds = stack.reshape(-1, 3).std(axis=0)
    return bool(stds.max() < min_channel_std)


def split_ranges(colors: Seq[np.ndarray], cfg: ShotConfig = ShotConfig()) -> List[tuple]:
    """Index ranges of the shots that survive all filters."""
    feats = [histogram_feature(c, cfg.hist_mode) for c in colors]
    kept = []
    for start, end in shot_boundaries(feats, cfg.cut_threshold):
        if end - start < cfg.min_length:
            continue
        if is_uniform(feats[start:end], cfg.uniform_threshold):
            continue
        if is_dark_or_faded(colors[start:end], cfg.min_luminance, cfg.min_channel_std):
            continue
        kept.append((start, end))
    return kept


def split_shots(colors: Seq[np.ndarray], cfg: ShotConfig = ShotConfig(), source_id: str = "video") -> List[Sequence]:
    """Cut a frame list into training-eligible shots with line art and distance fields."""
    shots = []
    for k, (start, end) in enumerate(split_ranges(colors, cfg)):
        frames = [Frame.from_color(c) for c in colors[start:end]]
        shots.append(Sequence(frames, source_id=f"{source_id}_shot{k:03d}_{start}-{end}"))
    return shots

"""Exact Euclidean distance fields for line art."""

from __future__ import annotations

import numpy as np

INF = 1e20


def _envelope_1d(f: np.ndarray) -> np.ndarray:
    """Lower envelope of parabolas: out[q] = min_p (q - p)^2 + f[p]."""
    n = f.shape[0]
    vals = f.tolist()
    sites: list = []
    bounds: list = []
    for q in range(n):
        fq = vals[q]
        if fq >= INF:
            continue
        s = -INF
        while sites:
            p = sites[-1]
            s = ((fq + q * q) - (vals[p] + p * p)) / (2.0 * (q - p))
            if s <= bounds[-1]:
                sites.pop()
                bounds.pop()
            else:
                break
        if not sites:
            s = -INF
        sites.append(q)
        bounds.append(s)
    if not sites:
        return np.full(n, INF)
    out = np.empty(n)
    k = 0
    last = len(sites) - 1
    for q in range(n):
        while k < last and bounds[k + 1] < q:
            k += 1
        p = sites[k]
        out[q] = (q - p) * (q - p) + vals[p]
    return out


def squared_distance_transform(mask: np.ndarray) -> np.ndarray:
    """Squared distance from every pixel to the nearest True pixel of ``mask``.

    Separable two-pass lower-envelope transform (columns, then rows).
    Pixels are INF when the mask is empty.
    """
    H, W = mask.shape
    f = np.where(mask, 0.0, INF)
    cols = np.empty((H, W))
    for x in range(W):
        cols[:, x] = _envelope_1d(f[:, x])
    out = np.empty((H, W))
    for y in range(H):
        out[y] = _envelope_1d(cols[y])
    return out


def distance_field(line: np.ndarray) -> np.ndarray:
    """Normalised distance to the nearest ink pixel (values < 0.5).

    Distances are divided by the image diagonal and clamped to [0, 1]; an
    image without ink maps to all ones.
    """
    line = np.asarray(line, dtype=np.float64)
    if line.ndim == 3:
        line = line[..., 0]
    ink = line < 0.5
    H, W = ink.shape
    if not ink.any():
        return np.ones((H, W))
    dist = np.sqrt(squared_distance_transform(ink))
    return np.clip(dist / np.hypot(H, W), 0.0, 1.0)

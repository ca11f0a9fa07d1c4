"""Shared constructions used by several test modules."""

import numpy as np

PALETTES = [
    (np.array([0.9, 0.8, 0.2]), np.array([0.1, 0.3, 0.7])),
    (np.array([0.2, 0.7, 0.3]), np.array([0.8, 0.2, 0.5])),
]


def shot_video(size: int = 32, n: int = 20, cut: int = 10):
    """Two palettes with an abrupt switch at ``cut``; each frame adds one foreground pixel.

    One pixel of change moves six histogram bins by 64 scaled counts, which
    keeps consecutive-frame feature MSE at 32 inside the (10, 200) band.
    """
    frames = []
    for t in range(n):
        bg, fg = PALETTES[t >= cut]
        img = np.empty((size, size, 3))
        img[:] = bg
        img[4:12, 4:20] = fg
        k = t % cut
        img[14, 4:4 + k] = fg
        frames.append(img)
    return frames

"""Temporal constraint network built from gated temporal-shift convolutions.

Volumes are N×C×T×H×W.  A "3-D" gated convolution is realised by shifting a
quarter of the channels one frame forward and another quarter one frame back
(blended in through a learned per-position gate), then running a 2-D
convolution on every frame.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .engine import Conv2d, Module, ShapeError, Tensor, ops
from .colornet import to_unit

HEAD_EPS = 1e-3


@dataclass
class TemporalNetConfig:
    channels: Tuple[int, int, int] = (32, 64, 128)
    dilations: Tuple[int, ...] = (2, 4, 8, 16)
    disc_channels: Tuple[int, int, int, int] = (32, 64, 128, 128)
    fold_fwd: float = 0.25
    fold_bwd: float = 0.25
    residual: bool = True  # predict a correction on top of the incoming colours
    spectral: bool = True
    spectral_disc: bool = True
    pad_mode: str = "zeros"

    @classmethod
    def tiny(cls) -> "TemporalNetConfig":
        return cls(channels=(4, 8, 8), disc_channels=(4, 8, 8, 8))

    @classmethod
    def small(cls) -> "TemporalNetConfig":
        return cls(channels=(8, 16, 32), disc_channels=(16, 32, 32, 32))


def to_frames(v: Tensor) -> Tensor:
    """N×C×T×H×W → (N·T)×C×H×W."""
    N, C, T, H, W = v.shape
    return ops.reshape(ops.transpose(v, (0, 2, 1, 3, 4)), (N * T, C, H, W))


def from_frames(x: Tensor, n: int) -> Tensor:
    """(N·T)×C×H×W → N×C×T×H×W."""
    NT, C, H, W = x.shape
    return ops.transpose(ops.reshape(x, (n, NT // n, C, H, W)), (0, 2, 1, 3, 4))


def _folds(channels: int, fwd: float, bwd: float) -> tuple:
    if channels % 4:
        raise ShapeError(f"temporal shift needs channels divisible by 4, got {channels}")
    return int(round(channels * fwd)), int(round(channels * bwd))


def temporal_shift(v: Tensor, gates, fold_fwd: float = 0.25, fold_bwd: float = 0.25) -> Tensor:
    """Blend ``v`` with its channel-group time shift: g·shift(v) + (1 − g)·v.

    ``gates`` broadcasts against ``v`` (typically N×1×T×H×W in [0, 1]).
    """
    if v.ndim != 5:
        raise ShapeError(f"temporal_shift needs N×C×T×H×W, got {v.shape}")
    a, b = _folds(v.shape[1], fold_fwd, fold_bwd)
    shifted = ops.time_shift(v, a, b)
    g = gates if isinstance(gates, Tensor) else Tensor(np.asarray(gates, dtype=v.data.dtype))
    return ops.add(ops.mul(g, shifted), ops.mul(ops.sub(1.0, g), v))


class ShiftGate(Module):
    """Learned per-position gate σ(1×1 conv) controlling how much shifted signal enters."""

    def __init__(self, rng, channels: int, fold_fwd: float, fold_bwd: float):
        _folds(channels, fold_fwd, fold_bwd)
        self.conv = Conv2d(rng, channels, 1, 1)
        self.fold_fwd = fold_fwd
        self.fold_bwd = fold_bwd

    def forward(self, v: Tensor) -> Tensor:
        g = from_frames(ops.sigmoid(self.conv(to_frames(v))), v.shape[0])
        return temporal_shift(v, g, self.fold_fwd, self.fold_bwd)


class GatedConv(Module):
    """Temporal shift, then feature and gate 2-D convs per frame: act(feature) · σ(gate)."""

    def __init__(self, rng, cin: int, cout: int, k: int = 3, stride: int = 1, dilation: int = 1,
                 spectral: bool = False, activation: str = "leaky_relu",
                 fold_fwd: float = 0.25, fold_bwd: float = 0.25, pad_mode: str = "zeros", gain: float = 1.0):
        self.shift = ShiftGate(rng, cin, fold_fwd, fold_bwd)
        self.feature = Conv2d(rng, cin, cout, k, stride, dilation=dilation, spectral=spectral, gain=gain)
        self.gate = Conv2d(rng, cin, cout, k, stride, dilation=dilation, spectral=spectral)
        self.activation = activation
        self.pad_mode = pad_mode

    def _conv(self, conv: Conv2d, x: Tensor) -> Tensor:
        return ops.conv2d(x, conv.effective_weight(), conv.bias, conv.stride, conv.padding,
                          conv.dilation, self.pad_mode)

    def forward(self, v: Tensor) -> Tensor:
        x = to_frames(self.shift(v))
        feat = ops.activation(self._conv(self.feature, x), self.activation)
        out = ops.mul(feat, ops.sigmoid(self._conv(self.gate, x)))
        return from_frames(out, v.shape[0])


def upsample_volume(v: Tensor, factor: int = 2) -> Tensor:
    return from_frames(ops.upsample_nearest(to_frames(v), factor), v.shape[0])


class TemporalGenerator(Module):
    """Encoder of 3 gated layers (strides 1, 2, 2), 4 dilated gated layers,
    then (×2 upsample → gated layer) twice and a final gated layer to RGB."""

    def __init__(self, cfg: TemporalNetConfig = TemporalNetConfig(), seed: int = 2):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        c0, c1, c2 = cfg.channels
        kw = dict(spectral=cfg.spectral, fold_fwd=cfg.fold_fwd, fold_bwd=cfg.fold_bwd, pad_mode=cfg.pad_mode)
        self.encoder = [
            GatedConv(rng, 4, c0, 3, 1, **kw),
            GatedConv(rng, c0, c1, 3, 2, **kw),
            GatedConv(rng, c1, c2, 3, 2, **kw),
        ]
        self.dilated = [GatedConv(rng, c2, c2, 3, 1, dilation=d, **kw) for d in cfg.dilations]
        self.decoder = [
            GatedConv(rng, c2, c1, 3, 1, **kw),
            GatedConv(rng, c1, c0, 3, 1, **kw),
        ]
        # unnormalised and small so the residual head starts close to the identity
        self.head = GatedConv(rng, c0, 3, 3, 1, activation="none", fold_fwd=cfg.fold_fwd,
                              fold_bwd=cfg.fold_bwd, pad_mode=cfg.pad_mode, gain=0.1)
        self.assign_names()

    def forward(self, lines: Tensor, colors: Tensor) -> Tensor:
        """``lines`` N×1×T×H×W, ``colors`` N×3×T×H×W in [0, 1] → refined N×3×T×H×W."""
        if lines.ndim != 5 or colors.ndim != 5:
            raise ShapeError("temporal generator expects N×C×T×H×W volumes")
        N, _, T, H, W = colors.shape
        if T < 3:
            raise ShapeError(f"temporal refinement needs at least 3 frames, got {T}")
        if lines.shape != (N, 1, T, H, W):
            raise ShapeError(f"line volume {lines.shape} does not match colour volume {colors.shape}")
        if H % 4 or W % 4:
            raise ShapeError(f"frame extents must be divisible by 4, got {H}x{W}")
        h = ops.concat([lines, colors], axis=1)
        for layer in self.encoder + self.dilated:
            h = layer(h)
        for layer in self.decoder:
            h = layer(upsample_volume(h, 2))
        delta = self.head(h)
        if not self.cfg.residual:
            return to_unit(delta)
        c = np.clip(colors.data, HEAD_EPS, 1.0 - HEAD_EPS)
        base = Tensor(np.arctanh(2.0 * c - 1.0), dtype=colors.data.dtype)
        return to_unit(ops.add(base, delta))


def stack_frames(frames: Sequence[np.ndarray], dtype=None) -> Tensor:
    """T arrays of H×W×C → a 1×C×T×H×W tensor."""
    arr = np.stack([np.asarray(f) for f in frames], axis=0)  # T×H×W×C
    return Tensor(arr.transpose(3, 0, 1, 2)[None], dtype=dtype)


def unstack_frames(v: Tensor) -> List[np.ndarray]:
    """1×C×T×H×W tensor → T arrays of H×W×C."""
    return [v.data[0, :, t].transpose(1, 2, 0) for t in range(v.shape[2])]


def refine_sequence(model: TemporalGenerator, lines: Sequence[np.ndarray],
                    colors_in: Sequence[np.ndarray]) -> List[np.ndarray]:
    """Refine a chronological [ref₀, coloured targets…, ref₁] run of H×W×{1,3} frames."""
    if len(lines) != len(colors_in):
        raise ShapeError("line and colour frame counts differ")
    if len(lines) < 3:
        raise ShapeError(f"temporal refinement needs at least 3 frames, got {len(lines)}")
    out = model(stack_frames(lines), stack_frames(colors_in))
    return unstack_frames(out)


class PatchDiscriminator(Module):
    """Four shift + stride-2 conv layers (spectral-normalised) and a final conv,
    scoring every spatio-temporal patch."""

    def __init__(self, cfg: TemporalNetConfig = TemporalNetConfig(), seed: int = 3):
        rng = np.random.default_rng(seed)
        self.convs = []
        cin = 4
        for w in cfg.disc_channels:
            _folds(cin, cfg.fold_fwd, cfg.fold_bwd)
            self.convs.append(Conv2d(rng, cin, w, 3, 2, spectral=cfg.spectral_disc))
            cin = w
        _folds(cin, cfg.fold_fwd, cfg.fold_bwd)
        self.last = Conv2d(rng, cin, 1, 3, 1)
        self.fold_fwd = cfg.fold_fwd
        self.fold_bwd = cfg.fold_bwd
        self.assign_names()

    def _shift(self, v: Tensor) -> Tensor:
        a, b = _folds(v.shape[1], self.fold_fwd, self.fold_bwd)
        return ops.time_shift(v, a, b)

    def forward(self, lines: Tensor, colors: Tensor) -> Tensor:
        """Returns an N×1×T×h×w logit grid."""
        n = colors.shape[0]
        v = ops.concat([lines, colors], axis=1)
        for conv in self.convs:
            v = from_frames(ops.leaky_relu(conv(to_frames(self._shift(v))), 0.2), n)
        return from_frames(self.last(to_frames(self._shift(v))), n)

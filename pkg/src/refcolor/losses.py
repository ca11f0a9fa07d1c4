"""Training objectives and the fixed feature pyramid they are measured in."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from .engine import ShapeError, Tensor, no_grad, ops

PYRAMID_MAGIC = b"RCPW"
PYRAMID_VERSION = 1


@dataclass
class LossWeights:
    perc: float = 1.0
    style: float = 1000.0
    latent: float = 1.0
    gan: float = 1.0
    l1: float = 10.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative")


class FeaturePyramid:
    """Five conv+ReLU stages at strides 1, 2, 4, 8, 16 with frozen seeded weights."""

    def __init__(self, seed: int = 19, channels: Sequence[int] = (16, 32, 48, 64, 64), in_channels: int = 3):
        rng = np.random.default_rng(seed)
        self.channels = tuple(channels)
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        cin = in_channels
        for cout in self.channels:
            w = rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / (cin * 9))
            self.weights.append(w)
            self.biases.append(rng.uniform(-0.05, 0.05, cout))
            cin = cout

    def __call__(self, img: Tensor) -> List[Tensor]:
        if img.shape[-1] % 16 or img.shape[-2] % 16:
            raise ShapeError(f"feature pyramid needs extents divisible by 16, got {img.shape[-2:]}")
        dtype = img.data.dtype
        x = ops.mul(ops.sub(img, 0.5), 2.0)
        levels = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if i:
                x = ops.avg_pool2(x)
            x = ops.relu(ops.conv2d(x, Tensor(w, dtype=dtype), Tensor(b, dtype=dtype), 1, 1))
            levels.append(x)
        return levels

    def save(self, path: Path) -> None:
        with open(path, "wb") as fh:
            fh.write(PYRAMID_MAGIC)
            fh.write(struct.pack("<II", PYRAMID_VERSION, len(self.weights)))
            for w in self.weights:
                fh.write(struct.pack("<4I", *w.shape))
            for w, b in zip(self.weights, self.biases):
                fh.write(w.astype("<f4").tobytes())
                fh.write(b.astype("<f4").tobytes())

    @classmethod
    def load(cls, path: Path) -> "FeaturePyramid":
        """Load externally supplied weights (e.g. converted pretrained filters)."""
        raw = Path(path).read_bytes()
        if raw[:4] != PYRAMID_MAGIC:
            raise ValueError(f"{path}: not a pyramid weights file")
        version, n = struct.unpack_from("<II", raw, 4)
        if version != PYRAMID_VERSION:
            raise ValueError(f"{path}: unsupported pyramid weights version {version}")
        if n != 5:
            raise ValueError(f"{path}: expected 5 layers, found {n}")
        off = 12
        shapes = []
        for _ in range(n):
            shapes.append(struct.unpack_from("<4I", raw, off))
            off += 16
        obj = cls.__new__(cls)
        obj.weights, obj.biases = [], []
        for shape in shapes:
            count = int(np.prod(shape))
            need = 4 * (count + shape[0])
            if off + need > len(raw):
                raise ValueError(f"{path}: truncated pyramid weights")
            obj.weights.append(np.frombuffer(raw, "<f4", count, off).astype(np.float64).reshape(shape))
            off += 4 * count
            obj.biases.append(np.frombuffer(raw, "<f4", shape[0], off).astype(np.float64))
            off += 4 * shape[0]
        obj.channels = tuple(s[0] for s in shapes)
        return obj


def _check_same(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"loss operands differ in shape: {a.shape} vs {b.shape}")


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    _check_same(pred, target)
    return ops.mean(ops.abs(ops.sub(pred, target)))


def perceptual_loss(pred: Tensor, target: Tensor, pyramid: FeaturePyramid) -> Tensor:
    """Σ_i ‖Φⁱ(pred) − Φⁱ(target)‖² / Nᵢ, with Nᵢ the element count of level i."""
    _check_same(pred, target)
    total = None
    for fp, ft in zip(pyramid(pred), pyramid(target)):
        d = ops.sub(fp, ft)
        term = ops.div(ops.sum(ops.mul(d, d)), float(d.data.size))
        total = term if total is None else ops.add(total, term)
    return total


def gram(features: Tensor, normalize: bool = True) -> Tensor:
    """Per-sample channel Gram matrix, divided by C·H·W when ``normalize``."""
    N, C, H, W = features.shape
    flat = ops.reshape(features, (N, C, H * W))
    g = ops.matmul(flat, ops.transpose(flat, (0, 2, 1)))
    return ops.div(g, float(C * H * W)) if normalize else g


def style_loss(pred: Tensor, target: Tensor, pyramid: FeaturePyramid, normalize: bool = True) -> Tensor:
    """Σ_i ‖G(Φⁱ(pred)) − G(Φⁱ(target))‖₁ over pyramid levels.

    With ``normalize`` the Gram matrices are divided by C·H·W and the L1 norm
    is averaged over the C×C entries (and the batch); otherwise raw Grams are
    compared with a plain entry sum per sample.
    """
    _check_same(pred, target)
    n = pred.shape[0]
    total = None
    for fp, ft in zip(pyramid(pred), pyramid(target)):
        diff = ops.abs(ops.sub(gram(fp, normalize), gram(ft, normalize)))
        term = ops.mean(diff) if normalize else ops.div(ops.sum(diff), float(n))
        total = term if total is None else ops.add(total, term)
    return total


def pyramid_losses(pred: Tensor, target: Tensor, pyramid: FeaturePyramid,
                   normalize: bool = True) -> Tuple[Tensor, Tensor]:
    """(perceptual, style) sharing one pyramid pass per image; the target side carries no graph.

    ``normalize`` has the same meaning as in :func:`style_loss`.
    """
    _check_same(pred, target)
    n = pred.shape[0]
    with no_grad():
        target_levels = pyramid(target)
    perc = style = None
    for fp, ft in zip(pyramid(pred), target_levels):
        d = ops.sub(fp, ft)
        p = ops.div(ops.sum(ops.mul(d, d)), float(d.data.size))
        diff = ops.abs(ops.sub(gram(fp, normalize), gram(ft, normalize)))
        st = ops.mean(diff) if normalize else ops.div(ops.sum(diff), float(n))
        perc = p if perc is None else ops.add(perc, p)
        style = st if style is None else ops.add(style, st)
    return perc, style


def latent_loss(y_sim: Tensor, y_mid: Tensor, target: Tensor) -> Tensor:
    return ops.add(l1_loss(y_sim, target), l1_loss(y_mid, target))


def discriminator_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """−E[log σ(real)] − E[log(1 − σ(fake))] via softplus."""
    return ops.add(ops.mean(ops.softplus(ops.neg(d_real))), ops.mean(ops.softplus(d_fake)))


def generator_gan_loss(d_fake: Tensor) -> Tensor:
    """Non-saturating −E[log σ(fake)]."""
    return ops.mean(ops.softplus(ops.neg(d_fake)))


def gan_losses(d_real: Tensor, d_fake: Tensor) -> tuple:
    return discriminator_loss(d_real, d_fake), generator_gan_loss(d_fake)


TERMS = ("perc", "style", "latent", "gan", "l1")


def total_loss(parts: Dict[str, Tensor], weights: LossWeights = LossWeights()) -> Tensor:
    """Weighted sum of whichever terms are present in ``parts``."""
    total = None
    for name in TERMS:
        if name not in parts or parts[name] is None:
            continue
        term = ops.mul(parts[name], float(getattr(weights, name)))
        total = term if total is None else ops.add(total, term)
    if total is None:
        return Tensor(0.0)
    return total


def frame_averaged(fn: Callable[[Tensor, Tensor], Tensor], preds: Sequence[Tensor], targets: Sequence[Tensor]) -> Tensor:
    """Apply ``fn`` to each (pred, target) frame pair and average the results."""
    if len(preds) != len(targets) or not preds:
        raise ShapeError("frame_averaged needs equally many, non-zero frames")
    acc = None
    for p, t in zip(preds, targets):
        v = fn(p, t)
        acc = v if acc is None else ops.add(acc, v)
    return ops.div(acc, float(len(preds)))

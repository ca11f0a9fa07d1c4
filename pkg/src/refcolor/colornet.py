"""Color transform network: encoders, similarity-based transform, style embedder,
AdaIN residual blocks, decoder, latent decoders and the image discriminator."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .engine import Conv2d, Linear, Module, ShapeError, Tensor, ops

N_BLOCKS = 8


@dataclass
class ColorNetConfig:
    channels: Tuple[int, int, int] = (64, 128, 256)
    reduced: Optional[int] = None  # C̃, defaults to C // 8
    embed_dim: int = 256
    mlp_hidden: int = 256
    n_blocks: int = N_BLOCKS
    disc_channels: Tuple[int, int, int, int] = (64, 128, 256, 256)
    mask_kernel: int = 1
    spectral_encoders: bool = True
    spectral_decoder: bool = True
    spectral_embedder: bool = False
    spectral_disc: bool = True

    @property
    def C(self) -> int:
        return self.channels[-1]

    @property
    def C_reduced(self) -> int:
        return self.reduced if self.reduced is not None else max(1, self.C // 8)

    @classmethod
    def tiny(cls) -> "ColorNetConfig":
        """Gradient-check scale: C = 16, C̃ = 2."""
        return cls(channels=(4, 8, 16), reduced=2, embed_dim=16, mlp_hidden=16,
                   disc_channels=(4, 8, 8, 8))

    @classmethod
    def small(cls) -> "ColorNetConfig":
        """Desk-scale training configuration."""
        return cls(channels=(16, 32, 64), reduced=8, embed_dim=64, mlp_hidden=64,
                   disc_channels=(16, 32, 64, 64))


def to_unit(t: Tensor) -> Tensor:
    """tanh followed by the affine map onto [0, 1]."""
    return ops.mul(ops.add(ops.tanh(t), 1.0), 0.5)


class Encoder(Module):
    """Three conv → instance norm → ReLU layers with strides 1, 2, 2."""

    def __init__(self, rng, cin: int, channels: Sequence[int], spectral: bool):
        c0, c1, c2 = channels
        self.convs = [
            Conv2d(rng, cin, c0, 3, 1, spectral=spectral),
            Conv2d(rng, c0, c1, 3, 2, spectral=spectral),
            Conv2d(rng, c1, c2, 3, 2, spectral=spectral),
        ]

    def forward(self, img: Tensor) -> Tensor:
        H, W = img.shape[-2:]
        if H % 4 or W % 4:
            raise ShapeError(f"encoder input extents must be divisible by 4, got {H}x{W}")
        x = img
        for conv in self.convs:
            x = ops.relu(ops.instance_norm(conv(x)))
        return x


@dataclass
class SimOutput:
    f_sim: Tensor  # projected back to C channels
    f_sim_reduced: Tensor  # before projection (C̃ channels)
    f_mat: Tensor
    masks_m: List[Tensor]
    masks_n: List[Tensor]
    match: Optional[Tensor] = None  # N × (H̃W̃K) × (H̃W̃), columns sum to 1


def match_transform(query: Tensor, keys: Sequence[Tensor], values: Sequence[Tensor]) -> tuple:
    """Softmax-weighted transport of reference values onto target positions.

    ``query`` N×c×h×w; each key/value N×c×h×w.  Returns ``(f_mat, weights)``
    where weights is N×P×(P·K) with rows summing to one (P = h·w).
    """
    N, c, h, w = query.shape
    P = h * w
    for k, v in zip(keys, values):
        if k.shape != query.shape or v.shape[0] != N or v.shape[2:] != (h, w):
            raise ShapeError(f"sim layer feature shapes disagree: {query.shape}, {k.shape}, {v.shape}")
    q = ops.transpose(ops.reshape(query, (N, c, P)), (0, 2, 1))  # N×P×c
    sims = [ops.matmul(q, ops.reshape(k, (N, c, P))) for k in keys]  # N×P×P each
    weights = ops.softmax(ops.concat(sims, axis=2), axis=2)  # N×P×PK
    f_c = ops.concat([ops.reshape(v, (N, v.shape[1], P)) for v in values], axis=2)  # N×c×PK
    f_mat = ops.matmul(f_c, ops.transpose(weights, (0, 2, 1)))  # N×c×P
    return ops.reshape(f_mat, (N, values[0].shape[1], h, w)), weights


class SimLayer(Module):
    def __init__(self, rng, channels: int, reduced: int, mask_kernel: int = 1):
        self.reduce_target = Conv2d(rng, channels, reduced, 1)
        self.reduce_ref = Conv2d(rng, channels, reduced, 1)
        self.reduce_color = Conv2d(rng, channels, reduced, 1)
        self.mask_select = Conv2d(rng, 2 * reduced, 1, mask_kernel)
        self.mask_blend = Conv2d(rng, 2 * reduced, 1, mask_kernel)
        self.project = Conv2d(rng, reduced, channels, 1)
        self.keep_match = False

    def forward(self, f_d: Tensor, refs: Sequence[tuple]) -> SimOutput:
        if not refs:
            raise ShapeError("sim layer needs at least one reference")
        for f_di, f_yi in refs:
            if f_di.shape != f_d.shape or f_yi.shape != f_d.shape:
                raise ShapeError(f"sim layer feature shapes disagree: {f_d.shape}, {f_di.shape}, {f_yi.shape}")
        q = self.reduce_target(f_d)
        keys = [self.reduce_ref(f_di) for f_di, _ in refs]
        vals = [self.reduce_color(f_yi) for _, f_yi in refs]
        f_mat, weights = match_transform(q, keys, vals)
        K = len(refs)
        ms, ns, acc = [], [], None
        for k, v in zip(keys, vals):
            both = ops.concat([k, q], axis=1)
            m = ops.sigmoid(self.mask_select(both))
            n = ops.sigmoid(self.mask_blend(both))
            f_my = ops.mul(v, m)
            term = ops.add(ops.mul(ops.sub(1.0, n), f_mat), ops.mul(f_my, n))
            acc = term if acc is None else ops.add(acc, term)
            ms.append(m)
            ns.append(n)
        reduced = ops.div(acc, float(K))
        match = ops.transpose(weights, (0, 2, 1)) if self.keep_match else None
        return SimOutput(self.project(reduced), reduced, f_mat, ms, ns, match)


@dataclass
class StyleEmbedding:
    sev: Tensor  # N × E
    p_em: List[List[tuple]]  # [block][layer] -> (gamma, beta), each N × C


class Embedder(Module):
    """Five stride-2 convs + global average pool per reference, mean over references,
    then a two-layer MLP producing the AdaIN parameters."""

    def __init__(self, rng, cfg: ColorNetConfig):
        c0, c1, c2 = cfg.channels
        widths = (c0, c1, c2, c2, cfg.embed_dim)
        cin = 4
        self.convs = []
        for w in widths:
            self.convs.append(Conv2d(rng, cin, w, 3, 2, spectral=cfg.spectral_embedder))
            cin = w
        self.n_blocks = cfg.n_blocks
        self.C = cfg.C
        self.fc1 = Linear(rng, cfg.embed_dim, cfg.mlp_hidden)
        self.fc2 = Linear(rng, cfg.mlp_hidden, cfg.n_blocks * 2 * 2 * cfg.C, gain=0.1)

    def latent(self, pair: Tensor) -> Tensor:
        x = pair
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = ops.relu(x)
        return ops.mean(x, axis=(2, 3))

    def forward(self, pairs: Sequence[Tensor]) -> StyleEmbedding:
        if len(pairs) == 0:
            raise ShapeError("embedder needs at least one reference")
        latents = [self.latent(p) for p in pairs]
        sev = ops.exchangeable_mean(ops.stack(latents, axis=0), axis=0)
        raw = self.fc2(ops.relu(self.fc1(sev)))
        N = raw.shape[0]
        raw = ops.reshape(raw, (N, self.n_blocks, 2, 2, self.C))
        p_em = []
        for b in range(self.n_blocks):
            layers = []
            for l in range(2):
                gamma = ops.add(raw[:, b, l, 0], 1.0)
                beta = raw[:, b, l, 1]
                layers.append((gamma, beta))
            p_em.append(layers)
        return StyleEmbedding(sev, p_em)


class ResBlock(Module):
    """AdaIN → ReLU → conv → AdaIN → ReLU → conv, added to the input."""

    def __init__(self, rng, channels: int):
        self.conv1 = Conv2d(rng, channels, channels, 3)
        self.conv2 = Conv2d(rng, channels, channels, 3, gain=0.5)

    def forward(self, x: Tensor, params: Sequence[tuple]) -> Tensor:
        (g1, b1), (g2, b2) = params
        h = self.conv1(ops.relu(ops.adain(x, g1, b1)))
        h = self.conv2(ops.relu(ops.adain(h, g2, b2)))
        return ops.add(x, h)


class MidBlocks(Module):
    def __init__(self, rng, channels: int, n_blocks: int = N_BLOCKS):
        self.blocks = [ResBlock(rng, channels) for _ in range(n_blocks)]

    def forward(self, x: Tensor, p_em: Sequence) -> Tensor:
        if len(p_em) != len(self.blocks) or any(len(layer) != 2 for layer in p_em):
            raise ShapeError(f"expected AdaIN parameters for {len(self.blocks)} blocks × 2 layers")
        for block, params in zip(self.blocks, p_em):
            x = block(x, params)
        return x


class Decoder(Module):
    """(upsample → conv → IN → ReLU) ×2, conv → IN → ReLU, conv → tanh → [0, 1]."""

    def __init__(self, rng, channels: Sequence[int], spectral: bool):
        c0, c1, c2 = channels
        self.conv1 = Conv2d(rng, c2, c1, 3, spectral=spectral)
        self.conv2 = Conv2d(rng, c1, c0, 3, spectral=spectral)
        self.conv3 = Conv2d(rng, c0, c0, 3, spectral=spectral)
        self.conv4 = Conv2d(rng, c0, 3, 3, spectral=spectral)

    def forward(self, f: Tensor) -> Tensor:
        x = ops.relu(ops.instance_norm(self.conv1(ops.upsample_nearest(f, 2))))
        x = ops.relu(ops.instance_norm(self.conv2(ops.upsample_nearest(x, 2))))
        x = ops.relu(ops.instance_norm(self.conv3(x)))
        return to_unit(self.conv4(x))


class LatentDecoder(Module):
    """Single conv to RGB at quarter resolution, nearest-neighbour ×4 to full size."""

    def __init__(self, rng, channels: int):
        self.conv = Conv2d(rng, channels, 3, 3)

    def forward(self, f: Tensor) -> Tensor:
        return ops.upsample_nearest(to_unit(self.conv(f)), 4)


@dataclass
class GeneratorOutput:
    y_trans: Tensor
    y_sim: Tensor
    y_mid: Tensor
    sim: SimOutput
    style: StyleEmbedding


class Generator(Module):
    def __init__(self, cfg: ColorNetConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        ch = cfg.channels
        self.enc_line = Encoder(rng, 1, ch, cfg.spectral_encoders)
        self.enc_dist = Encoder(rng, 1, ch, cfg.spectral_encoders)
        self.enc_color = Encoder(rng, 3, ch, cfg.spectral_encoders)
        self.sim = SimLayer(rng, cfg.C, cfg.C_reduced, cfg.mask_kernel)
        self.embedder = Embedder(rng, cfg)
        self.mid = MidBlocks(rng, cfg.C, cfg.n_blocks)
        self.decoder = Decoder(rng, ch, cfg.spectral_decoder)
        self.lat_sim = LatentDecoder(rng, cfg.C)
        self.lat_mid = LatentDecoder(rng, cfg.C)
        self.assign_names()

    def encode(self, img: Tensor, which: str) -> Tensor:
        enc = {"line": self.enc_line, "dist": self.enc_dist, "color": self.enc_color}[which]
        return enc(img)

    def embed_style(self, ref_lines: Sequence[Tensor], ref_colors: Sequence[Tensor]) -> StyleEmbedding:
        return self.embedder([ops.concat([x, y], axis=1) for x, y in zip(ref_lines, ref_colors)])

    def forward(self, x: Tensor, d: Tensor, refs: Sequence[tuple]) -> GeneratorOutput:
        """``x``, ``d``: N×1×H×W target line art and distance field;
        ``refs``: K tuples (line, dist, color) of N×{1,1,3}×H×W."""
        if len(refs) < 1:
            raise ShapeError("generator needs at least one reference")
        N = x.shape[0]
        K = len(refs)
        f_line = self.enc_line(x)
        dists = self.enc_dist(ops.concat([d] + [r[1] for r in refs], axis=0))
        f_d = dists[0:N]
        f_dr = [dists[(i + 1) * N:(i + 2) * N] for i in range(K)]
        colors = self.enc_color(ops.concat([r[2] for r in refs], axis=0))
        f_yr = [colors[i * N:(i + 1) * N] for i in range(K)]
        sim = self.sim(f_d, list(zip(f_dr, f_yr)))
        style = self.embed_style([r[0] for r in refs], [r[2] for r in refs])
        f_mid = self.mid(ops.add(f_line, sim.f_sim), style.p_em)
        return GeneratorOutput(self.decoder(f_mid), self.lat_sim(sim.f_sim), self.lat_mid(f_mid), sim, style)


class Discriminator(Module):
    """Five convs on line ⊙ colour; spectral norm on all but the last; LeakyReLU."""

    def __init__(self, cfg: ColorNetConfig, seed: int = 1, in_channels: int = 4):
        rng = np.random.default_rng(seed)
        self.convs = []
        cin = in_channels
        for w in cfg.disc_channels:
            self.convs.append(Conv2d(rng, cin, w, 3, 2, spectral=cfg.spectral_disc))
            cin = w
        self.last = Conv2d(rng, cin, 1, 3, 1)
        self.assign_names()

    def forward(self, x: Tensor, y: Tensor) -> Tensor:
        h = ops.concat([x, y], axis=1)
        for conv in self.convs:
            h = ops.leaky_relu(conv(h), 0.2)
        return ops.mean(self.last(h), axis=(2, 3))

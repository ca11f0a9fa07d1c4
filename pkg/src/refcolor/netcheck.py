"""Finite-difference checks of whole networks under their training losses.

Each check builds a tiny network at 64-bit, then compares backprop against
central differences: once along a random unit direction per parameter
tensor and once on a few sampled entries per tensor.  Perturbed passes
replay the base point's relu/abs branches (see ``ops.frozen_branches``),
so a step of 1e-4 never straddles a kink.
"""

from __future__ import annotations

from typing import Callable, Dict

import numpy as np

from .colornet import ColorNetConfig, Discriminator, Generator
from .engine import Tensor, precision
from .engine.gradcheck import check_directional, check_entries
from .losses import (
    FeaturePyramid,
    discriminator_loss,
    generator_gan_loss,
    l1_loss,
    latent_loss,
    perceptual_loss,
    style_loss,
    total_loss,
)
from .temporalnet import PatchDiscriminator, TemporalGenerator, TemporalNetConfig

NET_SIZE = 32
NET_FRAMES = 4


def _check(f: Callable[[], Tensor], module, h: float, entries: int, seed: int) -> dict:
    names, params = zip(*module.named_parameters())
    rng = np.random.default_rng(seed)
    per_tensor = check_directional(f, params, h=h, rng=rng, freeze=True, names=names)
    sampled = check_entries(f, params, h=h, max_entries=entries, rng=rng, freeze=True)
    worst = max(max(per_tensor.values()), sampled)
    return {"max_rel_error": worst, "directional": per_tensor, "entries": sampled}


def color_checks(seed: int = 0, h: float = 1e-4, entries: int = 3, size: int = NET_SIZE) -> Dict[str, dict]:
    with precision(np.float64):
        rng = np.random.default_rng(seed)
        cfg = ColorNetConfig.tiny()
        G = Generator(cfg, seed=seed).eval()
        D = Discriminator(cfg, seed=seed + 1).eval()
        pyramid = FeaturePyramid()

        def img(c):
            return Tensor(rng.uniform(0, 1, (1, c, size, size)))

        x, d, y = img(1), img(1), img(3)
        refs = [(img(1), img(1), img(3)) for _ in range(2)]

        def g_loss():
            out = G(x, d, refs)
            return total_loss({
                "l1": l1_loss(out.y_trans, y),
                "perc": perceptual_loss(out.y_trans, y, pyramid),
                "style": style_loss(out.y_trans, y, pyramid),
                "latent": latent_loss(out.y_sim, out.y_mid, y),
                "gan": generator_gan_loss(D(x, out.y_trans)),
            })

        fake = Tensor(G(x, d, refs).y_trans.data)

        def d_loss():
            return discriminator_loss(D(x, y), D(x, fake))

        return {"generator": _check(g_loss, G, h, entries, seed),
                "discriminator": _check(d_loss, D, h, entries, seed)}


def temporal_checks(seed: int = 0, h: float = 1e-4, entries: int = 3, size: int = NET_SIZE,
                    frames: int = NET_FRAMES) -> Dict[str, dict]:
    from .trainer import temporal_parts

    with precision(np.float64):
        rng = np.random.default_rng(seed)
        cfg = TemporalNetConfig.tiny()
        TG = TemporalGenerator(cfg, seed=seed).eval()
        TD = PatchDiscriminator(cfg, seed=seed + 1).eval()
        pyramid = FeaturePyramid()
        lines = Tensor(rng.uniform(0, 1, (1, 1, frames, size, size)))
        colors = Tensor(rng.uniform(0.05, 0.95, (1, 3, frames, size, size)))
        truth = Tensor(rng.uniform(0, 1, (1, 3, frames, size, size)))

        def g_loss():
            out = TG(lines, colors)
            parts = temporal_parts(out, truth, pyramid)
            parts["gan"] = generator_gan_loss(TD(lines, out))
            return total_loss(parts)

        fake = Tensor(TG(lines, colors).data)

        def d_loss():
            return discriminator_loss(TD(lines, truth), TD(lines, fake))

        return {"temporal_generator": _check(g_loss, TG, h, entries, seed),
                "patch_discriminator": _check(d_loss, TD, h, entries, seed)}


def run_net_suite(seed: int = 0, h: float = 1e-4) -> Dict[str, dict]:
    results = color_checks(seed, h)
    results.update(temporal_checks(seed, h))
    return results

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from refcolor.dataprep import synth_sequence
from refcolor.engine import ShapeError, Tensor, ops
from refcolor.losses import (
    FeaturePyramid,
    LossWeights,
    discriminator_loss,
    frame_averaged,
    gan_losses,
    generator_gan_loss,
    gram,
    l1_loss,
    latent_loss,
    perceptual_loss,
    pyramid_losses,
    style_loss,
    total_loss,
)

unit_images = arrays(np.float64, (1, 3, 16, 16), elements=st.floats(0, 1))


def pyramid_loop(img, pyramid):
    """Plain numpy forward of the fixed pyramid."""
    from scipy.signal import correlate

    x = (img - 0.5) * 2
    levels = []
    for i, (w, b) in enumerate(zip(pyramid.weights, pyramid.biases)):
        if i:
            N, C, H, W = x.shape
            x = x.reshape(N, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        out = np.stack([np.stack([sum(correlate(xp[n, c], w[f, c], mode="valid") for c in range(w.shape[1])) + b[f]
                                  for f in range(w.shape[0])]) for n in range(x.shape[0])])
        x = np.maximum(out, 0)
        levels.append(x)
    return levels


def test_default_weights():
    w = LossWeights()
    assert (w.perc, w.style, w.latent, w.gan, w.l1) == (1, 1000, 1, 1, 10)
    with pytest.raises(ValueError):
        LossWeights(style=-1)


# ---- pyramid --------------------------------------------------------------

def test_pyramid_level_sizes(rng):
    levels = FeaturePyramid()(Tensor(rng.uniform(0, 1, (1, 3, 64, 64))))
    assert [l.shape[-1] for l in levels] == [64, 32, 16, 8, 4]
    sizes = [l.data.size for l in levels]
    assert all(a > b for a, b in zip(sizes, sizes[1:]))


def test_pyramid_rejects_indivisible():
    with pytest.raises(ShapeError):
        FeaturePyramid()(Tensor(np.zeros((1, 3, 24, 24))))


def test_pyramid_is_seeded():
    a, b = FeaturePyramid(5), FeaturePyramid(5)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.weights, b.weights))


def test_pyramid_matches_numpy_forward(rng):
    p = FeaturePyramid()
    img = rng.uniform(0, 1, (1, 3, 16, 16))
    for got, want in zip(p(Tensor(img)), pyramid_loop(img, p)):
        np.testing.assert_allclose(got.data, want, atol=1e-10)


def test_pyramid_deep_level_sees_content():
    p = FeaturePyramid()
    a = synth_sequence(0, 8, 64).frames[0].color
    b = synth_sequence(1, 8, 64).frames[0].color
    shifted = np.roll(a, 1, axis=1)
    as_t = lambda im: Tensor(im.transpose(2, 0, 1)[None])
    deep = lambda im: p(as_t(im))[4].data
    assert np.linalg.norm(deep(a) - deep(b)) > np.linalg.norm(deep(a) - deep(shifted))


def test_pyramid_weights_file_round_trip(tmp_path):
    p = FeaturePyramid(3)
    p.save(tmp_path / "w.bin")
    q = FeaturePyramid.load(tmp_path / "w.bin")
    for a, b in zip(p.weights, q.weights):
        np.testing.assert_allclose(a, b, atol=1e-6)
    raw = (tmp_path / "w.bin").read_bytes()
    (tmp_path / "short.bin").write_bytes(raw[:-10])
    with pytest.raises(ValueError):
        FeaturePyramid.load(tmp_path / "short.bin")
    (tmp_path / "bad.bin").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        FeaturePyramid.load(tmp_path / "bad.bin")


# ---- pixel and feature losses ---------------------------------------------

def test_l1_cases(rng):
    y = rng.uniform(0, 1, (2, 3, 4, 4))
    assert l1_loss(Tensor(y), Tensor(y)).item() == 0
    assert l1_loss(Tensor(y + 0.1), Tensor(y)).item() == pytest.approx(0.1, abs=1e-12)
    p = rng.uniform(0, 1, y.shape)
    oracle = sum(abs(a - b) for a, b in zip(p.ravel(), y.ravel())) / y.size
    assert abs(l1_loss(Tensor(p), Tensor(y)).item() - oracle) < 1e-12
    with pytest.raises(ShapeError):
        l1_loss(Tensor(p), Tensor(p[:1]))


def test_perceptual_matches_loop(rng):
    pyr = FeaturePyramid()
    a, b = rng.uniform(0, 1, (1, 3, 16, 16)), rng.uniform(0, 1, (1, 3, 16, 16))
    oracle = sum(((fa - fb) ** 2).sum() / fa.size for fa, fb in zip(pyramid_loop(a, pyr), pyramid_loop(b, pyr)))
    assert abs(perceptual_loss(Tensor(a), Tensor(b), pyr).item() - oracle) < 1e-8


def gram_loop(f):
    N, C, H, W = f.shape
    g = np.zeros((N, C, C))
    for n in range(N):
        for i in range(C):
            for j in range(C):
                g[n, i, j] = sum(f[n, i, y, x] * f[n, j, y, x] for y in range(H) for x in range(W))
    return g / (C * H * W)


def test_style_matches_loop(rng):
    pyr = FeaturePyramid(channels=(2, 3, 3, 2, 2))
    a, b = rng.uniform(0, 1, (1, 3, 16, 16)), rng.uniform(0, 1, (1, 3, 16, 16))
    oracle = sum(np.abs(gram_loop(fa) - gram_loop(fb)).mean()
                 for fa, fb in zip(pyramid_loop(a, pyr), pyramid_loop(b, pyr)))
    assert abs(style_loss(Tensor(a), Tensor(b), pyr).item() - oracle) < 1e-8


def test_single_channel_gram():
    v = np.arange(1.0, 7.0).reshape(1, 1, 2, 3)
    assert gram(Tensor(v)).item() == pytest.approx((v ** 2).sum() / 6, abs=1e-15)


def test_shared_pass_equals_separate_losses(rng):
    pyr = FeaturePyramid()
    a, b = Tensor(rng.uniform(0, 1, (2, 3, 16, 16))), Tensor(rng.uniform(0, 1, (2, 3, 16, 16)))
    for normalize in (True, False):
        perc, sty = pyramid_losses(a, b, pyr, normalize)
        assert perc.item() == pytest.approx(perceptual_loss(a, b, pyr).item(), rel=1e-13)
        assert sty.item() == pytest.approx(style_loss(a, b, pyr, normalize).item(), rel=1e-13)


def test_style_is_invariant_to_spatial_permutation(rng):
    f = rng.standard_normal((1, 4, 3, 3))
    perm = rng.permutation(9)
    g = f.reshape(1, 4, 9)[:, :, perm].reshape(1, 4, 3, 3)
    np.testing.assert_allclose(gram(Tensor(f)).data, gram(Tensor(g)).data, rtol=0, atol=1e-13)


@settings(max_examples=10, deadline=None)
@given(unit_images, unit_images)
def test_feature_losses_nonnegative_and_zero_on_identity(a, b):
    pyr = FeaturePyramid(channels=(2, 2, 2, 2, 2))
    ta, tb = Tensor(a), Tensor(b)
    for fn in (perceptual_loss, style_loss):
        assert fn(ta, tb, pyr).item() >= 0
        assert fn(ta, ta, pyr).item() == 0
    assert l1_loss(ta, tb).item() >= 0 and l1_loss(ta, ta).item() == 0


# ---- latent, adversarial, total -------------------------------------------

def test_latent_cases(rng):
    y = rng.uniform(0, 1, (1, 3, 4, 4))
    assert latent_loss(Tensor(y), Tensor(y), Tensor(y)).item() == 0
    assert latent_loss(Tensor(y + 0.2), Tensor(y), Tensor(y)).item() == pytest.approx(0.2, abs=1e-12)
    s, m = rng.uniform(0, 1, y.shape), rng.uniform(0, 1, y.shape)
    oracle = np.abs(y - s).mean() + np.abs(y - m).mean()
    assert abs(latent_loss(Tensor(s), Tensor(m), Tensor(y)).item() - oracle) < 1e-12


def test_gan_losses_values(rng):
    d, g = gan_losses(Tensor(np.zeros((4, 1))), Tensor(np.zeros((4, 1))))
    assert d.item() == pytest.approx(2 * np.log(2), abs=1e-12)
    assert g.item() == pytest.approx(np.log(2), abs=1e-12)
    assert discriminator_loss(Tensor([[60.0]]), Tensor([[-60.0]])).item() < 1e-20
    real, fake = rng.standard_normal((5, 1)) * 3, rng.standard_normal((5, 1)) * 3
    sig = lambda z: 1 / (1 + np.exp(-z))
    oracle_d = -np.mean(np.log(sig(real))) - np.mean(np.log(1 - sig(fake)))
    oracle_g = -np.mean(np.log(sig(fake)))
    assert abs(discriminator_loss(Tensor(real), Tensor(fake)).item() - oracle_d) < 1e-10
    assert abs(generator_gan_loss(Tensor(fake)).item() - oracle_g) < 1e-10


def test_gan_losses_finite_for_extreme_logits():
    d, g = gan_losses(Tensor([[1e4], [-1e4]]), Tensor([[1e4], [-1e4]]))
    assert np.isfinite(d.item()) and np.isfinite(g.item())


def test_total_loss(rng):
    names = ("perc", "style", "latent", "gan", "l1")
    assert total_loss({k: Tensor(0.0) for k in names}).item() == 0
    assert total_loss({k: Tensor(1.0) for k in names}).item() == 1013
    vals = dict(zip(names, rng.uniform(0, 1, 5)))
    w = LossWeights(2.0, 3.0, 4.0, 5.0, 6.0)
    oracle = 2 * vals["perc"] + 3 * vals["style"] + 4 * vals["latent"] + 5 * vals["gan"] + 6 * vals["l1"]
    assert total_loss({k: Tensor(v) for k, v in vals.items()}, w).item() == oracle


def test_frame_average(rng):
    preds = [Tensor(rng.uniform(0, 1, (1, 3, 4, 4))) for _ in range(3)]
    targets = [Tensor(rng.uniform(0, 1, (1, 3, 4, 4))) for _ in range(3)]
    want = np.mean([l1_loss(p, t).item() for p, t in zip(preds, targets)])
    assert frame_averaged(l1_loss, preds, targets).item() == pytest.approx(want, abs=1e-15)
    with pytest.raises(ShapeError):
        frame_averaged(l1_loss, preds, targets[:2])


def test_losses_backpropagate_to_prediction(rng):
    pyr = FeaturePyramid()
    y = Tensor(rng.uniform(0, 1, (1, 3, 16, 16)))
    p = Tensor(rng.uniform(0, 1, (1, 3, 16, 16)), requires_grad=True)
    total_loss({"l1": l1_loss(p, y), "perc": perceptual_loss(p, y, pyr), "style": style_loss(p, y, pyr)}).backward()
    assert p.grad is not None and np.all(np.isfinite(p.grad)) and np.abs(p.grad).sum() > 0

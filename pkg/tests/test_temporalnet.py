import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from refcolor.engine import Conv2d, ShapeError, Tensor, ops
from refcolor.engine.gradcheck import check_entries
from refcolor.losses import FeaturePyramid, l1_loss, pyramid_losses
from refcolor.temporalnet import (
    GatedConv,
    PatchDiscriminator,
    TemporalGenerator,
    TemporalNetConfig,
    from_frames,
    refine_sequence,
    temporal_shift,
    to_frames,
)
from refcolor.trainer import temporal_parts

TINY = TemporalNetConfig.tiny()


def shift_loop(x):
    """Explicit per-frame copy: first quarter from t-1, second quarter from t+1."""
    N, C, T, H, W = x.shape
    q = C // 4
    out = np.zeros_like(x)
    for t in range(T):
        if t > 0:
            out[:, :q, t] = x[:, :q, t - 1]
        if t < T - 1:
            out[:, q:2 * q, t] = x[:, q:2 * q, t + 1]
        out[:, 2 * q:, t] = x[:, 2 * q:, t]
    return out


def volumes(rng, T=4, size=16, n=1):
    lines = Tensor(rng.uniform(0, 1, (n, 1, T, size, size)))
    colors = Tensor(rng.uniform(0.05, 0.95, (n, 3, T, size, size)))
    return lines, colors


# ---- temporal shift -------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (1, 8, 3, 2, 2), elements=st.floats(-5, 5)))
def test_shift_with_closed_gate_is_identity(v):
    out = temporal_shift(Tensor(v), np.zeros((1, 1, 3, 2, 2)))
    assert out.data.tobytes() == v.tobytes()


def test_shift_single_frame_zeroes_shifted_groups(rng):
    v = rng.standard_normal((1, 8, 1, 3, 3))
    out = temporal_shift(Tensor(v), 1.0).data
    np.testing.assert_array_equal(out[:, :4], 0)
    np.testing.assert_array_equal(out[:, 4:], v[:, 4:])


def test_shift_matches_frame_copy_loop(rng):
    v = rng.standard_normal((2, 8, 4, 4, 4))
    np.testing.assert_array_equal(temporal_shift(Tensor(v), 1.0).data, shift_loop(v))


def test_shift_rejects_channels_not_divisible_by_four(rng):
    with pytest.raises(ShapeError):
        temporal_shift(Tensor(rng.standard_normal((1, 6, 3, 2, 2))), 0.5)


def test_frame_reshape_round_trip(rng):
    v = rng.standard_normal((2, 3, 5, 4, 4))
    flat = to_frames(Tensor(v))
    assert flat.shape == (10, 3, 4, 4)
    np.testing.assert_array_equal(flat.data[1 * 5 + 2], v[1, :, 2])
    np.testing.assert_array_equal(from_frames(flat, 2).data, v)


# ---- gated convolution ----------------------------------------------------

def test_saturated_gate_reduces_to_plain_conv(rng):
    layer = GatedConv(rng, 4, 8, activation="leaky_relu")
    layer.gate.weight.data[...] = 0
    layer.gate.bias.data[...] = 1e3
    layer.shift.conv.weight.data[...] = 0
    layer.shift.conv.bias.data[...] = -1e3  # shift gate closed: no mixing in time
    v = Tensor(rng.standard_normal((1, 4, 3, 8, 8)))
    got = layer(v).data
    plain = from_frames(ops.leaky_relu(ops.conv2d(to_frames(v), layer.feature.effective_weight(),
                                                  layer.feature.bias, 1, 1), 0.2), 1).data
    np.testing.assert_allclose(got, plain, atol=1e-6)


def test_gated_conv_keeps_frame_count(rng):
    layer = GatedConv(rng, 4, 8, dilation=2)
    assert layer(Tensor(rng.standard_normal((2, 4, 5, 8, 8)))).shape == (2, 8, 5, 8, 8)


def test_gated_conv_gradient(rng):
    layer = GatedConv(rng, 4, 4, spectral=True).eval()
    v = Tensor(rng.standard_normal((1, 4, 3, 4, 4)))
    w = rng.standard_normal((1, 4, 3, 4, 4))
    err = check_entries(lambda: ops.sum(ops.mul(layer(v), Tensor(w))), layer.parameters() + [v],
                        max_entries=5, freeze=True)
    assert err < 1e-4


# ---- temporal generator ---------------------------------------------------

def test_refine_sequence_contract(rng):
    TG = TemporalGenerator(TINY).eval()
    lines = [rng.uniform(0, 1, (16, 16, 1)) for _ in range(5)]
    colors = [rng.uniform(0, 1, (16, 16, 3)) for _ in range(5)]
    out = refine_sequence(TG, lines, colors)
    assert len(out) == 5
    for f in out:
        assert f.shape == (16, 16, 3) and f.min() >= 0 and f.max() <= 1


def test_refine_needs_three_frames(rng):
    TG = TemporalGenerator(TINY)
    with pytest.raises(ShapeError):
        refine_sequence(TG, [np.zeros((16, 16, 1))] * 2, [np.zeros((16, 16, 3))] * 2)
    with pytest.raises(ShapeError):
        TG(*volumes(rng, T=2))


def test_layer_plan():
    TG = TemporalGenerator(TemporalNetConfig())
    assert len(TG.encoder) == 3 and [l.feature.stride for l in TG.encoder] == [1, 2, 2]
    assert [l.feature.dilation for l in TG.dilated] == [2, 4, 8, 16]
    assert len(TG.decoder) + 1 == 3  # two upsampling stages plus the head


def test_translation_equivariance_with_circular_padding(rng):
    cfg = TemporalNetConfig(channels=(4, 8, 8), disc_channels=(4, 8, 8, 8), pad_mode="circular")
    TG = TemporalGenerator(cfg).eval()
    lines, colors = volumes(rng, T=3, size=32)
    out = TG(lines, colors).data
    roll = lambda a: np.roll(a, (4, -4), axis=(-2, -1))
    moved = TG(Tensor(roll(lines.data)), Tensor(roll(colors.data))).data
    assert np.abs(moved - roll(out)).max() < 1e-3


def test_temporal_loss_is_per_frame_average(rng):
    pyramid = FeaturePyramid()
    pred = Tensor(rng.uniform(0, 1, (2, 3, 4, 16, 16)))
    truth = Tensor(rng.uniform(0, 1, (2, 3, 4, 16, 16)))
    parts = temporal_parts(pred, truth, pyramid)
    l1 = perc = style = 0.0
    for t in range(4):
        p, y = Tensor(pred.data[:, :, t]), Tensor(truth.data[:, :, t])
        l1 += l1_loss(p, y).item()
        a, b = pyramid_losses(p, y, pyramid)
        perc += a.item()
        style += b.item()
    assert parts["l1"].item() == pytest.approx(l1 / 4, rel=0, abs=1e-15)
    assert parts["perc"].item() == pytest.approx(perc / 4, rel=0, abs=1e-15)
    assert parts["style"].item() == pytest.approx(style / 4, rel=0, abs=1e-15)


# ---- patch discriminator --------------------------------------------------

def test_patch_discriminator_returns_grid(rng):
    TD = PatchDiscriminator(TINY)
    out = TD(*volumes(rng, T=4, size=32))
    assert out.ndim == 5 and out.shape[:3] == (1, 1, 4) and out.data.size > 1


def test_patch_discriminator_normalization(rng):
    TD = PatchDiscriminator(TINY)
    for _ in range(30):
        TD(*volumes(rng, T=3, size=32))
    assert all(c.spectral for c in TD.convs) and not TD.last.spectral
    for c in TD.convs:
        w = c.effective_weight().data
        assert np.linalg.svd(w.reshape(w.shape[0], -1), compute_uv=False)[0] <= 1 + 1e-2


def test_patch_discriminator_gradient(rng):
    TD = PatchDiscriminator(TINY).eval()
    lines, colors = volumes(rng, T=3, size=32)
    err = check_entries(lambda: ops.mean(TD(lines, colors)), TD.parameters(), max_entries=4, freeze=True)
    assert err < 1e-4

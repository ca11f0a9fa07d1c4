import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from fixtures import shot_video
from refcolor.dataprep import (
    Frame,
    ReferenceSet,
    Sequence,
    ShotConfig,
    distance_field,
    edges_from_color,
    histogram_feature,
    sample_window,
    split_ranges,
    split_shots,
    synth_sequence,
)
from refcolor.dataprep.io import load_split, read_sequence, write_manifest, write_sequence
from refcolor.dataprep.shots import feature_mse
from refcolor.dataprep.synth import Shape, render


def brute_distance(line):
    H, W = line.shape
    ink = np.argwhere(line < 0.5)
    if len(ink) == 0:
        return np.ones((H, W))
    yy, xx = np.mgrid[0:H, 0:W]
    d = np.full((H, W), np.inf)
    for y, x in ink:
        d = np.minimum(d, np.hypot(yy - y, xx - x))
    return np.clip(d / np.hypot(H, W), 0, 1)


def naive_edges(color, thr=0.15):
    H, W = color.shape[:2]
    bright = color.sum(-1)
    ink = np.zeros((H, W), bool)
    for y in range(H):
        for x in range(W):
            for dy, dx in ((0, 1), (1, 0), (0, -1), (-1, 0)):
                ny, nx = y + dy, x + dx
                if not (0 <= ny < H and 0 <= nx < W):
                    continue
                if np.abs(color[y, x] - color[ny, nx]).max() <= thr:
                    continue
                # the brighter side of a boundary carries the ink; ties go to the earlier pixel
                earlier = (dy, dx) in ((0, 1), (1, 0))
                if bright[y, x] > bright[ny, nx] or (bright[y, x] == bright[ny, nx] and earlier):
                    ink[y, x] = True
    return 1.0 - ink


def seq_of(n, size=32):
    return Sequence([Frame.from_color(np.full((size, size, 3), i / n)) for i in range(n)], "s")


# ---- histogram features ---------------------------------------------------

def test_histogram_length_and_single_bin():
    h = histogram_feature(np.zeros((16, 16, 3)))
    assert h.shape == (768,)
    for ch in range(3):
        assert h[256 * ch] == 256 and h[256 * ch + 1:256 * (ch + 1)].sum() == 0


def test_histogram_matches_per_pixel_binning(rng):
    img = rng.uniform(0, 1, (9, 7, 3))
    ref = np.zeros(768)
    for y in range(9):
        for x in range(7):
            for ch in range(3):
                ref[256 * ch + int(np.floor(img[y, x, ch] * 255))] += 1
    np.testing.assert_array_equal(histogram_feature(img), ref)


def test_histogram_modes_are_rescalings(rng):
    img = rng.uniform(0, 1, (32, 32, 3))
    raw = histogram_feature(img, "raw")
    np.testing.assert_allclose(histogram_feature(img, "scaled"), raw * 64)
    np.testing.assert_allclose(histogram_feature(img, "normalized"), raw / 1024)
    with pytest.raises(ValueError):
        histogram_feature(img, "bogus")


# ---- shot splitting -------------------------------------------------------

def test_constructed_video_splits_at_palette_change():
    frames = shot_video()
    feats = [histogram_feature(f, "scaled") for f in frames]
    jumps = [feature_mse(feats[i], feats[i + 1]) for i in range(19)]
    assert all(10 < j < 200 for k, j in enumerate(jumps) if k != 9)
    assert jumps[9] > 200
    assert split_ranges(frames) == [(0, 10), (10, 20)]
    shots = split_shots(frames)
    assert [len(s) for s in shots] == [10, 10]


def test_identical_frames_yield_no_shot():
    frames = [shot_video()[3]] * 20
    assert split_shots(frames) == []


def test_short_video_is_dropped(rng):
    frames = [rng.uniform(0, 1, (16, 16, 3)) ** (i + 1) for i in range(7)]
    assert split_shots(frames) == []


def test_dark_shots_are_dropped():
    frames = [f * 0.05 for f in shot_video()]
    assert split_ranges(frames, ShotConfig(cut_threshold=1e12)) == []


def test_split_is_a_pure_function():
    frames = shot_video()
    assert split_ranges(frames) == split_ranges([f.copy() for f in frames])


# ---- distance fields ------------------------------------------------------

def test_distance_all_ink_is_zero():
    np.testing.assert_array_equal(distance_field(np.zeros((5, 6))), 0)


def test_distance_all_background_is_one():
    np.testing.assert_array_equal(distance_field(np.ones((5, 6))), 1)


def test_distance_single_corner_pixel():
    line = np.ones((3, 3))
    line[0, 0] = 0
    raw = np.array([[0, 1, 2], [1, np.sqrt(2), np.sqrt(5)], [2, np.sqrt(5), np.sqrt(8)]])
    np.testing.assert_allclose(distance_field(line), raw / np.sqrt(18), atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_distance_matches_brute_force(seed):
    r = np.random.default_rng(seed)
    line = np.where(r.uniform(size=(32, 32)) < 0.03, 0.0, 1.0)
    np.testing.assert_allclose(distance_field(line), brute_distance(line), atol=1e-9)


def test_distance_matches_scipy_edt(rng):
    line = np.where(rng.uniform(size=(40, 24)) < 0.05, 0.0, 1.0)
    ref = ndimage.distance_transform_edt(line >= 0.5) / np.hypot(40, 24)
    np.testing.assert_allclose(distance_field(line), ref, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (12, 10), elements=st.sampled_from([0.0, 0.3, 0.7, 1.0])))
def test_distance_zero_exactly_on_ink(line):
    d = distance_field(line)
    assert np.array_equal(d == 0, line < 0.5) or not np.any(line < 0.5)
    assert np.all((d >= 0) & (d <= 1))


@settings(max_examples=30, deadline=None)
@given(arrays(np.bool_, (10, 10)))
def test_distance_monotone_in_true_distance(mask):
    if not mask.any():
        return
    line = np.where(mask, 0.0, 1.0)
    d = distance_field(line).ravel()
    true = brute_distance(line).ravel()
    order = np.argsort(true, kind="stable")
    assert np.all(np.diff(d[order]) >= -1e-12)


# ---- line extraction ------------------------------------------------------

def test_constant_image_has_no_ink():
    np.testing.assert_array_equal(edges_from_color(np.full((8, 8, 3), 0.4)), 1)


def test_vertical_step_gives_vertical_stroke():
    img = np.zeros((6, 8, 3))
    img[:, 4:] = 1.0
    line = edges_from_color(img)
    assert set(np.unique(line)) == {0.0, 1.0}
    ink_cols = np.unique(np.argwhere(line < 0.5)[:, 1])
    assert ink_cols.tolist() == [4]
    assert (line[:, 4] == 0).all()


def test_edges_match_naive_oracle():
    frame = synth_sequence(3, 8, 32).frames[2]
    np.testing.assert_array_equal(edges_from_color(frame.color), naive_edges(frame.color))


def test_disk_outline_is_ring_of_expected_length():
    disk = Shape("disk", np.array([0.2, 0.3, 0.8]), np.array([20.0, 20.0]), np.array([8.0]),
                 np.zeros(2), 0.0, 0.0, 0.0)
    line = edges_from_color(render(np.array([0.95, 0.95, 0.95]), [disk], 0, 40, 0.0))
    yy, xx = np.mgrid[0:40, 0:40]
    inside = (yy - 20) ** 2 + (xx - 20) ** 2 <= 64
    touching = np.zeros_like(inside)
    for ax, sh in ((0, 1), (0, -1), (1, 1), (1, -1)):
        touching |= np.roll(inside, sh, ax)
    ring = touching & ~inside
    np.testing.assert_array_equal(line < 0.5, ring)
    assert abs(ring.sum() - 2 * np.pi * 8) <= 0.2 * 2 * np.pi * 8


# ---- windows --------------------------------------------------------------

def test_window_of_eight_is_forced(rng):
    refs, targets, start = sample_window(seq_of(8), rng)
    assert start == 0 and len(targets) == 6 and refs.K == 2


def test_windows_cover_every_start():
    seq = seq_of(12)
    r = np.random.default_rng(0)
    starts = {sample_window(seq, r)[2] for _ in range(200)}
    assert starts == {0, 1, 2, 3, 4}


def test_window_refs_are_extremes(rng):
    seq = seq_of(12)
    for _ in range(20):
        refs, targets, s = sample_window(seq, rng)
        assert refs.refs[0] is seq[s] and refs.refs[1] is seq[s + 7]
        ids = [next(i for i, f in enumerate(seq.frames) if f is t) for t in targets]
        assert ids == list(range(s + 1, s + 7))


def test_short_sequence_rejected(rng):
    with pytest.raises(ValueError):
        sample_window(seq_of(7), rng)


def test_reference_set_validation():
    with pytest.raises(ValueError):
        ReferenceSet([])
    a = Frame.from_color(np.zeros((8, 8, 3)))
    b = Frame.from_color(np.zeros((16, 16, 3)))
    with pytest.raises(ValueError):
        ReferenceSet([a, b])


# ---- synthetic animation --------------------------------------------------

def test_synth_is_deterministic():
    a, b = synth_sequence(5, 8, 32), synth_sequence(5, 8, 32)
    for fa, fb in zip(a.frames, b.frames):
        assert fa.color.tobytes() == fb.color.tobytes()
        assert fa.line.tobytes() == fb.line.tobytes() and fa.dist.tobytes() == fb.dist.tobytes()


def test_synth_static_when_motion_zero():
    seq = synth_sequence(2, 8, 32, motion=0.0)
    for f in seq.frames[1:]:
        np.testing.assert_array_equal(f.color, seq.frames[0].color)


def test_synth_frames_respect_invariants():
    for seed in range(4):
        seq = synth_sequence(seed, 8, 32, style=seed % 2)
        for f in seq.frames:
            assert f.color.shape == (32, 32, 3) and f.line.shape == (32, 32, 1)
            assert f.color.min() >= 0 and f.color.max() <= 1
            np.testing.assert_array_equal(f.dist == 0, f.line < 0.5)


def test_synth_rejects_bad_arguments():
    with pytest.raises(ValueError):
        synth_sequence(0, 7, 32)
    with pytest.raises(ValueError):
        synth_sequence(0, 8, 16)


def test_sequence_directory_round_trip(tmp_path):
    seq = synth_sequence(1, 8, 32)
    write_sequence(seq, tmp_path / "seq_a")
    write_manifest(tmp_path, [("seq_a", "train")])
    back = read_sequence(tmp_path / "seq_a")
    assert len(back) == 8
    for f, g in zip(seq.frames, back.frames):
        np.testing.assert_allclose(g.color, f.color, atol=0.5 / 255 + 1e-12)
        np.testing.assert_array_equal(g.line, f.line)
    assert len(load_split(tmp_path, "train")) == 1 and load_split(tmp_path, "test") == []

import numpy as np
import pytest

from vivim.data import (AREA_RANGE, VideoClip, eval_seeds, generate_clip, generate_dataset,
                        is_train_seed, load_clip, parse_seed_range, read_pgm, save_clip,
                        train_seeds, write_pgm)


def test_same_seed_is_bitwise_identical():
    a, b = generate_clip(17), generate_clip(17)
    assert a.frames.tobytes() == b.frames.tobytes()
    assert a.masks.tobytes() == b.masks.tobytes()


def test_different_seeds_differ():
    assert not np.array_equal(generate_clip(1).masks, generate_clip(2).masks)


@pytest.mark.parametrize("seed", range(0, 40))
def test_mask_area_and_value_range(seed):
    clip = generate_clip(seed)
    assert clip.frames.shape == (5, 3, 64, 64) and clip.masks.shape == (5, 64, 64)
    assert clip.frames.min() >= 0.0 and clip.frames.max() <= 1.0
    area = clip.masks.reshape(5, -1).mean(axis=1)
    assert np.all((area >= AREA_RANGE[0]) & (area <= AREA_RANGE[1]))


@pytest.mark.parametrize("seed", range(0, 40))
def test_area_matches_sampled_axes(seed):
    clip = generate_clip(seed)
    geo = clip.geometry
    analytic = np.pi * geo[..., 2] * geo[..., 3]  # (ellipses, T)
    pixels = clip.masks.reshape(clip.T, -1).sum(axis=1)
    perimeter = 2 * np.pi * np.sqrt((geo[..., 2] ** 2 + geo[..., 3] ** 2) / 2)
    # union cannot exceed the sum of areas; pixelisation error scales with the perimeter
    assert np.all(pixels <= analytic.sum(axis=0) + perimeter.sum(axis=0))
    if geo.shape[0] == 1:
        assert np.all(np.abs(pixels - analytic[0]) <= perimeter[0])
    assert np.all(analytic.sum(axis=0) / (64 * 64) >= AREA_RANGE[0] * 0.5)


def test_ellipses_stay_inside_the_frame():
    for seed in range(20):
        clip = generate_clip(seed)
        m = clip.masks
        assert not m[:, 0, :].any() and not m[:, -1, :].any()
        assert not m[:, :, 0].any() and not m[:, :, -1].any()


def test_motion_is_smooth():
    clip = generate_clip(3, T=8)
    centres = clip.geometry[..., :2]
    steps = np.linalg.norm(np.diff(centres, axis=1), axis=-1)
    assert steps.max() < 6.0


def test_difficulty_shrinks_contrast():
    def gap(d):
        vals = []
        for s in range(10):
            c = generate_clip(s, difficulty=d)
            f, m = c.frames[:, 0], c.masks > 0
            vals.append(abs(f[m].mean() - f[~m].mean()))
        return np.mean(vals)

    assert gap(0.9) < gap(0.1)


def test_needs_a_frame():
    with pytest.raises(ValueError):
        generate_clip(0, T=0)


def test_clip_invariants():
    with pytest.raises(ValueError):
        VideoClip(np.zeros((2, 3, 4, 4)), np.zeros((3, 4, 4)), 0, 0)
    with pytest.raises(ValueError):
        VideoClip(np.zeros((1, 3, 4, 4)), np.full((1, 4, 4), 0.5), 0, 0)


def test_seed_pools_are_disjoint():
    tr, ev = set(train_seeds(200)), set(eval_seeds(50))
    assert not tr & ev
    assert all(is_train_seed(s) for s in tr) and not any(is_train_seed(s) for s in ev)


def test_parse_seed_range():
    assert parse_seed_range("1..9:2") == [1, 3, 5, 7, 9]
    assert parse_seed_range("4..6") == [4, 5, 6]
    for bad in ("9..1", "a..b", "1-5"):
        with pytest.raises(ValueError):
            parse_seed_range(bad)


def test_pgm_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, size=(7, 9)).astype(np.uint8)
    write_pgm(tmp_path / "x.pgm", img)
    raw = (tmp_path / "x.pgm").read_bytes()
    assert raw.startswith(b"P5\n9 7\n255\n")
    assert np.array_equal(read_pgm(tmp_path / "x.pgm"), img)


def test_clip_directory_layout(tmp_path):
    clip = generate_clip(5, T=3, H=32, W=32)
    d = save_clip(clip, tmp_path)
    assert d.name == "clip_5"
    assert sorted(p.name for p in d.iterdir()) == [
        "frame_0.pgm", "frame_1.pgm", "frame_2.pgm", "mask_0.pgm", "mask_1.pgm", "mask_2.pgm"]
    assert set(np.unique(read_pgm(d / "mask_0.pgm"))) <= {0, 255}
    back = load_clip(d)
    assert np.array_equal(back.masks, clip.masks)
    assert np.max(np.abs(back.frames - clip.frames)) <= 0.5 / 255 + 1e-12


def test_generate_dataset(tmp_path):
    paths = generate_dataset(10, 3, 2, 32, tmp_path)
    assert [p.name for p in paths] == ["clip_10", "clip_11", "clip_12"]

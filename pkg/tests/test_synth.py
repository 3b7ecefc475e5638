import math

import numpy as np
import pytest
import torch

from bracket_restore.core import load_bracket, load_image, pack_array
from bracket_restore.flow import backward_warp
from bracket_restore.synth import (
    DegradationParams,
    SceneSource,
    make_dataset,
    read_manifest,
    render_bracket,
    synth_scene,
)

QUIET = dict(read_noise_sigma=0.0, shot_noise_gain=0.0)


def test_scene_deterministic():
    a = synth_scene(np.random.default_rng(4), 32, 48)
    b = synth_scene(np.random.default_rng(4), 32, 48)
    assert np.array_equal(a.clean, b.clean)
    assert np.array_equal(a.motions, b.motions)


@pytest.mark.parametrize("seed", range(5))
def test_dynamic_range_and_reference_motion(seed):
    s = synth_scene(np.random.default_rng(seed), 64, 64)
    c = s.clean
    assert c.min() > 0 and c.max() / c.min() >= 100
    assert np.all(s.motions[0] == 0)
    assert s.motions.shape == (5, 2)


def test_odd_dims_rejected():
    with pytest.raises(ValueError):
        synth_scene(np.random.default_rng(0), 31, 32)


def test_degenerate_identity():
    p = DegradationParams(exposure_ratios=(1, 4), blur_kernel_sizes=(1, 1), max_drift=0, jitter=0, **QUIET)
    rng = np.random.default_rng(1)
    scene = synth_scene(rng, 32, 32, p)
    b, gt = render_bracket(scene, p, rng)
    clean = pack_array(scene.clean)
    assert np.array_equal(b.frames[0], np.clip(clean, 0, 1).astype(np.float32))
    assert np.array_equal(gt.data, clean.astype(np.float32))


def test_long_exposure_saturation():
    p = DegradationParams(max_drift=0, jitter=0, blur_kernel_sizes=(1,) * 5, **QUIET)
    rng = np.random.default_rng(2)
    scene = synth_scene(rng, 32, 32, p)
    b, _ = render_bracket(scene, p, rng)
    clean = pack_array(scene.clean)
    assert np.array_equal(b.frames[4] == 1.0, clean >= 1 / 256)


def test_noise_variance_matches_model():
    read, shot, level = 0.01, 0.01, 0.3
    p = DegradationParams(exposure_ratios=(1, 2), blur_kernel_sizes=(1, 1), read_noise_sigma=read,
                          shot_noise_gain=shot, max_drift=0, jitter=0)
    scene = SceneSource.flat(level, 128, 128)
    rng = np.random.default_rng(3)
    draws = np.stack([render_bracket(scene, p, rng)[0].frames[0] for _ in range(1000)])
    empirical = draws.var(axis=0, ddof=1).mean()
    expected = read**2 + shot * level
    assert abs(empirical / expected - 1) < 0.10


def test_saturation_monotone_in_exposure():
    p = DegradationParams()
    for seed in range(3):
        rng = np.random.default_rng(seed)
        b, _ = render_bracket(synth_scene(rng, 64, 64, p), p, rng)
        counts = [(f >= 1).sum() for f in b.frames]
        assert counts == sorted(counts)


@pytest.mark.parametrize("seed", range(3))
def test_stored_motion_aligns_frames(seed):
    # unclipped, noise-free, blur-free renders: the stored motion is the exact flow
    p = DegradationParams(blur_kernel_sizes=(1,) * 5, saturation=1e9, **QUIET)
    rng = np.random.default_rng(seed)
    scene = synth_scene(rng, 96, 96, p)
    b, _ = render_bracket(scene, p, rng)
    frames = torch.tensor(b.frames, dtype=torch.float64)
    ref = frames[0, :, 6:-6, 6:-6]
    for i in range(1, 5):
        flow = torch.tensor(scene.motions[i] / 2).reshape(2, 1, 1).expand(2, 48, 48)
        warped = backward_warp(frames[i], flow)[:, 6:-6, 6:-6] / b.exposures[i]
        aligned = (warped - ref).abs().mean()
        unaligned = (frames[i, :, 6:-6, 6:-6] / b.exposures[i] - ref).abs().mean()
        assert aligned < 0.05
        if np.abs(scene.motions[i]).max() > 0.5:
            assert aligned < unaligned


def test_make_dataset_reproducible(tmp_path):
    p = DegradationParams()
    m1 = make_dataset(5, (16, 16), p, 7, tmp_path / "a")
    make_dataset(5, (16, 16), p, 7, tmp_path / "b")
    files = sorted(x.relative_to(tmp_path / "a") for x in (tmp_path / "a").rglob("*") if x.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    rows = read_manifest(m1)
    assert len(rows) == 5
    assert [r.split for r in rows] == ["train"] * math.ceil(0.9 * 5)
    b = load_bracket(rows[0].bracket_path)
    assert b.frames.shape == (5, 4, 16, 16)
    assert load_image(rows[0].gt_path).hw == (16, 16)
    assert rows[0].motions().shape == (5, 2)


def test_split_proportions(tmp_path):
    rows = read_manifest(make_dataset(20, (8, 8), DegradationParams(), 0, tmp_path))
    assert [r.split for r in rows].count("train") == 18
    assert rows[-1].split == "val"


def test_make_dataset_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        make_dataset(2, (8, 8), DegradationParams(), 0, blocker / "sub")
    assert not (blocker.parent / "manifest.tsv").exists()


def test_params_validation():
    with pytest.raises(ValueError):
        DegradationParams(exposure_ratios=(1, 4, 4, 8, 9))
    with pytest.raises(ValueError):
        DegradationParams(blur_kernel_sizes=(1, 2, 3, 3, 5))
    with pytest.raises(ValueError):
        DegradationParams(read_noise_sigma=-1)

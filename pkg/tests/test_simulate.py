import json

import numpy as np
import pytest
from scipy.signal import convolve2d

from turbsplat.errors import NumericalError, UsageError
from turbsplat.imgcore import Image
from turbsplat.metrics import psnr
from turbsplat.simulate import (Cn2Profile, TurbulenceParams, degrade_sequence,
                                gen_tilt_field, isoplanatic_angle_horizontal,
                                isoplanatic_angle_profile, kernel_support_for,
                                read_bundle, region_pixel_count,
                                sample_frame_kernels, synth_kernel, write_bundle)
from turbsplat.tilt import warp_image
from conftest import make_scene


def test_params_validation():
    with pytest.raises(UsageError):
        TurbulenceParams(fried_r0=0.0)
    with pytest.raises(UsageError):
        TurbulenceParams(tilt_sigma=-1.0)
    with pytest.raises(UsageError):
        TurbulenceParams(kernel_sigma_range=(2.0, 1.0))


def test_tilt_zero_strength():
    params = TurbulenceParams(tilt_sigma=0.0)
    field = gen_tilt_field(params, 0, 32, 32)
    assert np.all(field.dx == 0) and np.all(field.dy == 0)


def test_tilt_deterministic():
    params = TurbulenceParams(tilt_sigma=1.0, seed=42)
    a = gen_tilt_field(params, 3, 64, 64)
    b = gen_tilt_field(params, 3, 64, 64)
    assert np.array_equal(a.dx, b.dx) and np.array_equal(a.dy, b.dy)
    c = gen_tilt_field(params, 4, 64, 64)
    assert not np.array_equal(a.dx, c.dx)


def test_tilt_marginal_std():
    params = TurbulenceParams(tilt_sigma=1.5, tilt_corr_len=8.0, seed=7)
    field = gen_tilt_field(params, 0, 256, 256)
    for plane in (field.dx, field.dy):
        assert abs(plane.std() - 1.5) < 0.15


def test_tilt_ensemble_mean_clt():
    """Monte-Carlo oracle: the 500-frame mean field concentrates at zero at
    the 1/sqrt(N) rate at (nearly) every pixel."""
    params = TurbulenceParams(tilt_sigma=1.0, tilt_corr_len=6.0, seed=3)
    n = 500
    acc = np.zeros((64, 64))
    for t in range(n):
        acc += gen_tilt_field(params, t, 64, 64).dx
    mean = np.abs(acc / n)
    bound = 3.0 * 1.0 / np.sqrt(n)
    assert np.mean(mean < bound) >= 0.99


def test_synth_kernel_delta_limit():
    k = synth_kernel([1.0], [0.0], [(1e-3, 1e-3)], 3)
    assert k[1, 1] >= 0.99
    assert k.sum() == pytest.approx(1.0, abs=1e-12)


def test_synth_kernel_separable():
    k = synth_kernel([1.0], [0.0], [(2.0, 1.0)], 15)
    xs = np.arange(-7, 8, dtype=np.float64)
    gx = np.exp(-0.5 * (xs / 2.0) ** 2)
    gy = np.exp(-0.5 * (xs / 1.0) ** 2)
    sep = np.outer(gy, gx)
    sep /= sep.sum()
    assert np.allclose(k, sep, atol=1e-12)


def test_synth_kernel_convex_duplicate():
    a = synth_kernel([0.5, 0.5], [0.3, 0.3], [(1.5, 0.8), (1.5, 0.8)], 13)
    b = synth_kernel([1.0], [0.3], [(1.5, 0.8)], 13)
    assert np.allclose(a, b, atol=1e-12)


def test_synth_kernel_normalized_nonnegative_property():
    rng = np.random.default_rng(0)
    for _ in range(25):
        k_count = rng.integers(1, 4)
        sig = rng.uniform(0.3, 1.8, (k_count, 2))
        k = synth_kernel(rng.dirichlet(np.ones(k_count)),
                         rng.uniform(0, np.pi, k_count), sig,
                         kernel_support_for(sig.max()))
        assert abs(k.sum() - 1.0) < 1e-9
        assert k.min() >= 0.0


def test_synth_kernel_truncation_error():
    with pytest.raises(UsageError):
        synth_kernel([1.0], [0.0], [(3.0, 3.0)], 5)


def test_degrade_no_degradation_limit(scene_64):
    params = TurbulenceParams(tilt_sigma=0.0, kernel_count_K=1,
                              kernel_sigma_range=(1e-3, 1e-3), seed=1)
    seq = degrade_sequence(scene_64, params, 2, (2, 2))
    assert psnr(seq.frames[0], scene_64) > 50.0


def test_degrade_single_region_matches_full_convolution(scene_64):
    params = TurbulenceParams(tilt_sigma=0.0, kernel_count_K=2,
                              kernel_sigma_range=(0.5, 1.2), seed=9)
    seq = degrade_sequence(scene_64, params, 1, (1, 1))
    fk = seq.kernels[0]
    kern = synth_kernel(fk.weights[0, 0], fk.angles[0, 0], fk.sigmas[0, 0],
                        seq.support)
    m = seq.support // 2
    padded = np.pad(scene_64.data[:, :, 0].astype(np.float64),
                    m, mode="edge")
    oracle = convolve2d(padded, kern, mode="valid")
    assert np.abs(seq.frames[0].data[:, :, 0] - oracle).max() < 1e-6


def test_degrade_tilt_mean_over_frames(scene_64):
    params = TurbulenceParams(tilt_sigma=1.0, tilt_corr_len=6.0,
                              kernel_sigma_range=(1e-3, 1e-3),
                              kernel_count_K=1, seed=5)
    seq = degrade_sequence(scene_64, params, 50, (1, 1))
    acc = np.zeros((64, 64))
    for t in seq.tilts:
        acc += t.dx
    mean = np.abs(acc / 50)
    assert np.mean(mean < 3.0 / np.sqrt(50)) >= 0.99


def test_degrade_playback_inverts_tilt(scene_128):
    """No-blur ground-truth playback: warping frame t by -tilt_t recovers the
    clean image up to interpolation error."""
    params = TurbulenceParams(tilt_sigma=1.2, tilt_corr_len=10.0,
                              kernel_sigma_range=(1e-3, 1e-3),
                              kernel_count_K=1, seed=2)
    seq = degrade_sequence(scene_128, params, 3, (1, 1))
    from turbsplat.imgcore import FlowField
    for frame, tilt in zip(seq.frames, seq.tilts):
        undone = warp_image(frame, FlowField(-tilt.dx, -tilt.dy))
        assert psnr(undone, scene_128) > 35.0


def test_degrade_grid_must_divide(scene_64):
    with pytest.raises(UsageError):
        degrade_sequence(scene_64, TurbulenceParams(), 1, (3, 3))


def test_isoplanatic_profile_closed_form():
    """Constant Cn2 = C on [0, H]: integral C h^{5/3} dh = C * (3/8) H^{8/3}."""
    c_val, h_top, lam = 1e-15, 1000.0, 550e-9
    heights = np.linspace(1e-6, h_top, 1000)
    profile = Cn2Profile(heights, np.full(1000, c_val))
    theta = isoplanatic_angle_profile(profile, lam)
    integral = c_val * (3.0 / 8.0) * h_top ** (8.0 / 3.0)
    expected = 0.058 * lam ** 1.2 * integral ** (-0.6)
    assert theta == pytest.approx(expected, rel=5e-3)


def test_isoplanatic_profile_homogeneity():
    heights = np.linspace(1.0, 500.0, 64)
    vals = np.exp(-heights / 200.0) * 1e-14
    p1 = Cn2Profile(heights, vals)
    p2 = Cn2Profile(heights, 2.0 * vals)
    t1 = isoplanatic_angle_profile(p1, 550e-9)
    assert isoplanatic_angle_profile(p2, 550e-9) == pytest.approx(t1 * 2 ** (-0.6), rel=1e-12)
    assert isoplanatic_angle_profile(p1, 1100e-9) == pytest.approx(t1 * 2 ** 1.2, rel=1e-12)


def test_isoplanatic_profile_zero_integral():
    profile = Cn2Profile(np.array([1.0, 2.0]), np.array([0.0, 0.0]))
    with pytest.raises(NumericalError):
        isoplanatic_angle_profile(profile, 550e-9)


def test_isoplanatic_horizontal():
    assert isoplanatic_angle_horizontal(0.05, 500.0) == pytest.approx(5.3e-5, rel=1e-12)
    assert isoplanatic_angle_horizontal(0.1, 1000.0) == pytest.approx(5.3e-5, rel=1e-12)
    base = isoplanatic_angle_horizontal(0.07, 800.0)
    assert isoplanatic_angle_horizontal(0.07 * 3, 800.0 * 3) == pytest.approx(base, rel=1e-12)
    with pytest.raises(UsageError):
        isoplanatic_angle_horizontal(-0.1, 100.0)


def test_region_pixel_count_modes():
    # literal: alpha = FOV / (H*W); theta = 16 alpha -> N = 16 -> 32x32 grid at 512
    fov = 0.01
    alpha = fov / (512 * 512)
    n, grid = region_pixel_count(fov, 512, 512, 16 * alpha, mode="literal")
    assert n == pytest.approx(16.0)
    assert grid == (32, 32)
    # unit ratio clamps at 1
    n, _ = region_pixel_count(fov, 512, 512, alpha, mode="literal")
    assert n == 1.0
    # per-axis: alpha = FOV / max(H, W)
    n, _ = region_pixel_count(0.01, 512, 512, 3.125e-4, mode="per-axis")
    assert n == pytest.approx(16.0)
    with pytest.raises(UsageError):
        region_pixel_count(0.01, 512, 512, 1e-4, mode="bogus")


def test_bundle_roundtrip(tmp_path, scene_64):
    params = TurbulenceParams(tilt_sigma=0.8, kernel_sigma_range=(0.5, 1.0), seed=4)
    seq = degrade_sequence(scene_64, params, 3, (2, 2))
    write_bundle(tmp_path / "b", scene_64, seq, params, 3)
    assert (tmp_path / "b" / "frame_002.f32").exists()
    assert (tmp_path / "b" / "tilt_000.flo32").exists()
    clean, frames, tilts, meta = read_bundle(tmp_path / "b")
    assert np.array_equal(clean.data, scene_64.data)
    assert len(frames) == 3 and len(tilts) == 3
    assert meta["n_frames"] == 3
    kern = json.loads((tmp_path / "b" / "kernels.json").read_text())
    assert len(kern["frames"]) == 3
    assert np.asarray(kern["frames"][0]["weights"]).shape == (2, 2, 2)


def test_frame_kernel_sampling_deterministic():
    params = TurbulenceParams(seed=10)
    a = sample_frame_kernels(params, 5, (3, 2))
    b = sample_frame_kernels(params, 5, (3, 2))
    assert np.array_equal(a.weights, b.weights)
    assert np.array_equal(a.sigmas, b.sigmas)
    assert a.weights.shape == (2, 3, 2)
    assert np.allclose(a.weights.sum(axis=2), 1.0)

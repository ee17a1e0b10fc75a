import numpy as np
import pytest

from turbsplat.errors import UsageError
from turbsplat.imgcore import FlowField, Image
from turbsplat.metrics import psnr
from turbsplat.simulate import TurbulenceParams, degrade_sequence, gen_tilt_field
from turbsplat.tilt import (FlowConfig, average_flows, correct_reference,
                            estimate_flow, negate_flow, warp_image)
from conftest import make_noise_image, make_scene


def const_flow(h, w, dx, dy):
    return FlowField(np.full((h, w), dx, np.float32), np.full((h, w), dy, np.float32))


def test_warp_zero_flow_identity(scene_64):
    out = warp_image(scene_64, const_flow(64, 64, 0.0, 0.0))
    assert np.array_equal(out.data, scene_64.data)


def test_warp_ramp_closed_form():
    w, h = 16, 8
    ramp = Image((np.tile(np.arange(w), (h, 1)) / (w - 1))[:, :, None])
    out = warp_image(ramp, const_flow(h, w, 1.0, 0.0))
    xs = np.minimum(np.arange(w) + 1, w - 1) / (w - 1)
    assert np.allclose(out.data[:, :, 0], np.tile(xs, (h, 1)), atol=1e-6)


def test_warp_round_trip(scene_128):
    params = TurbulenceParams(tilt_sigma=1.0, tilt_corr_len=12.0, seed=8)
    field = gen_tilt_field(params, 0, 128, 128)
    there = warp_image(scene_128, field)
    back = warp_image(there, negate_flow(field))
    assert psnr(back, scene_128) > 35.0


def test_warp_dimension_mismatch(scene_64):
    with pytest.raises(UsageError):
        warp_image(scene_64, const_flow(32, 32, 0.0, 0.0))


def test_estimate_flow_zero_motion(scene_128):
    flow = estimate_flow(scene_128, scene_128)
    assert np.hypot(flow.dx, flow.dy).max() < 0.05
    assert not flow.unreliable


def test_estimate_flow_flat_images_flagged():
    flat = Image(np.full((64, 64, 1), 0.4))
    flow = estimate_flow(flat, flat)
    assert flow.unreliable
    assert np.all(flow.dx == 0)


def test_estimate_flow_integer_shift():
    ref = make_noise_image(128, 128, seed=11)
    target = warp_image(ref, const_flow(128, 128, 2.0, 0.0))
    flow = estimate_flow(ref, target)
    interior = np.s_[16:-16, 16:-16]
    assert np.abs(flow.dx[interior] - 2.0).max() < 0.3
    assert np.abs(flow.dy[interior]).max() < 0.3


def test_estimate_flow_smooth_field():
    ref = make_noise_image(192, 192, seed=12)
    params = TurbulenceParams(tilt_sigma=0.8, tilt_corr_len=18.0, seed=13)
    field = gen_tilt_field(params, 0, 192, 192)
    assert np.hypot(field.dx, field.dy).max() <= 3.5
    target = warp_image(ref, field)
    flow = estimate_flow(ref, target)
    interior = np.s_[16:-16, 16:-16]
    epe = np.hypot(flow.dx - field.dx, flow.dy - field.dy)[interior]
    assert np.percentile(epe, 90) < 0.5


def test_estimate_flow_size_mismatch(scene_64, scene_128):
    with pytest.raises(UsageError):
        estimate_flow(scene_64, scene_128)


def test_average_flows_basic():
    f = const_flow(4, 4, 1.0, -0.5)
    avg = average_flows([f, f, f])
    assert np.allclose(avg.dx, 1.0) and np.allclose(avg.dy, -0.5)
    avg = average_flows([f, negate_flow(f)])
    assert np.all(avg.dx == 0) and np.all(avg.dy == 0)
    avg = average_flows([const_flow(2, 2, 1, 0), const_flow(2, 2, 3, 0),
                         const_flow(2, 2, 2, 0)])
    assert np.allclose(avg.dx, 2.0)


def test_average_flows_linearity():
    rng = np.random.default_rng(1)
    fields = [FlowField(rng.normal(size=(8, 8)).astype(np.float32),
                        rng.normal(size=(8, 8)).astype(np.float32))
              for _ in range(4)]
    a = 2.5
    scaled = [FlowField(a * f.dx, a * f.dy) for f in fields]
    m1 = average_flows(scaled)
    m0 = average_flows(fields)
    assert np.allclose(m1.dx, a * m0.dx, atol=1e-5)
    assert np.allclose(m1.dy, a * m0.dy, atol=1e-5)


def test_average_flows_errors():
    with pytest.raises(UsageError):
        average_flows([])
    with pytest.raises(UsageError):
        average_flows([const_flow(4, 4, 0, 0), const_flow(5, 4, 0, 0)])


def test_correct_reference_identical_frames(scene_64):
    corrected, flow = correct_reference([scene_64, scene_64, scene_64])
    assert np.abs(corrected.data - scene_64.data).max() < 1e-3
    assert np.hypot(flow.dx, flow.dy).max() < 0.05


def test_correct_reference_needs_two_frames(scene_64):
    with pytest.raises(UsageError):
        correct_reference([scene_64])


def test_correct_reference_gains_on_tilt_sequence():
    """Zero-mean tilt, no blur: the corrected reference must beat the raw
    reference by a clear margin (small-scale analog of the full criterion)."""
    clean = make_scene(128, 128, seed=21)
    params = TurbulenceParams(tilt_sigma=1.5, tilt_corr_len=12.0,
                              kernel_sigma_range=(1e-3, 1e-3), kernel_count_K=1,
                              seed=31)
    seq = degrade_sequence(clean, params, 20, (1, 1))
    corrected, _ = correct_reference(seq.frames)
    assert psnr(corrected, clean) >= psnr(seq.frames[0], clean) + 3.0


def test_residual_shrinks_with_frame_count():
    """||mean flow + tilt_ref|| falls with N (zero-mean prior at work)."""
    clean = make_noise_image(128, 128, seed=22)
    params = TurbulenceParams(tilt_sigma=1.2, tilt_corr_len=12.0,
                              kernel_sigma_range=(1e-3, 1e-3), kernel_count_K=1,
                              seed=17)
    seq = degrade_sequence(clean, params, 50, (1, 1))
    resid = {}
    for n in (5, 20, 50):
        _, flow = correct_reference(seq.frames[:n])
        err = np.hypot(flow.dx + seq.tilts[0].dx, flow.dy + seq.tilts[0].dy)
        resid[n] = float(np.sqrt(np.mean(err ** 2)))
    assert resid[50] < resid[20] < resid[5]


def test_correct_reference_median_mode(scene_64):
    frames = [scene_64, scene_64, scene_64]
    corrected, _ = correct_reference(frames, ref_mode="median")
    assert np.abs(corrected.data - scene_64.data).max() < 1e-3
    with pytest.raises(UsageError):
        correct_reference(frames, ref_mode="mystery")


def test_blur_insensitivity_of_averaged_flow():
    """The averaged field with blur on differs from the no-blur averaged field
    by a small RMS (multi-frame averaging suppresses blur-induced noise)."""
    clean = make_scene(128, 128, seed=23)
    base = dict(tilt_sigma=1.2, tilt_corr_len=12.0, kernel_count_K=1, seed=19)
    no_blur = degrade_sequence(clean, TurbulenceParams(
        kernel_sigma_range=(1e-3, 1e-3), **base), 20, (1, 1))
    blurred = degrade_sequence(clean, TurbulenceParams(
        kernel_sigma_range=(0.8, 1.2), **base), 20, (2, 2))
    _, f0 = correct_reference(no_blur.frames)
    _, f1 = correct_reference(blurred.frames)
    rms = np.sqrt(np.mean((f0.dx - f1.dx) ** 2 + (f0.dy - f1.dy) ** 2))
    assert rms < 0.3

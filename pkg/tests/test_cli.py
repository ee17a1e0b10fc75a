import csv
import json

import numpy as np
import pytest

from turbsplat.basis import read_basis
from turbsplat.cli import main
from turbsplat.imgcore import _write_raw, read_flow, read_image, write_image
from turbsplat.simulate import synth_kernel
from conftest import make_scene


@pytest.fixture(scope="module")
def clean_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("clean") / "clean.f32"
    write_image(make_scene(32, 32, seed=30), path)
    return path


@pytest.fixture(scope="module")
def sim_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    path.write_text(json.dumps({
        "simulate": {
            "tilt_sigma": 0.8, "tilt_corr_len": 6.0,
            "kernel_sigma_range": [0.5, 1.0], "kernel_count_K": 1,
            "seed": 3, "n_frames": 5, "region_grid": [2, 2],
        },
        "flow": {"levels": 3, "iterations": 60},
        "restore": {
            "max_iters": 25, "convergence_window": 50, "region_grid": [2, 2],
            "n_components": 4, "weight_warmup": 5, "frame_batch": 0,
        },
        "basis": {"support": 11, "n_components": 4, "ensemble_size": 24},
    }))
    return path


def bundle_files(out):
    return sorted(p.name for p in out.iterdir())


def test_simulate_file_contract(tmp_path, clean_file, sim_config):
    out = tmp_path / "bundle"
    rc = main(["simulate", "--config", str(sim_config), "--clean", str(clean_file),
               "--out", str(out)])
    assert rc == 0
    names = bundle_files(out)
    assert sum(n.startswith("frame_") and n.endswith(".f32") for n in names) == 5
    assert sum(n.startswith("tilt_") and n.endswith(".flo32") for n in names) == 5
    assert "params.json" in names and "kernels.json" in names and "clean.f32" in names


def test_simulate_deterministic(tmp_path, clean_file, sim_config):
    out1, out2 = tmp_path / "b1", tmp_path / "b2"
    assert main(["simulate", "--config", str(sim_config), "--clean", str(clean_file),
                 "--out", str(out1)]) == 0
    assert main(["simulate", "--config", str(sim_config), "--clean", str(clean_file),
                 "--out", str(out2)]) == 0
    for name in bundle_files(out1):
        if name.endswith((".f32", ".flo32")):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), name


def test_simulate_zero_frames_usage_error(tmp_path, clean_file, sim_config):
    rc = main(["simulate", "--config", str(sim_config), "--clean", str(clean_file),
               "--out", str(tmp_path / "x"), "--frames", "0"])
    assert rc == 1


def test_simulate_missing_clean_is_usage_error(tmp_path, sim_config):
    rc = main(["simulate", "--config", str(sim_config), "--out", str(tmp_path / "y")])
    assert rc == 1


def test_basis_two_kernel_mean(tmp_path):
    k1 = synth_kernel([1.0], [0.0], [(1.5, 0.8)], 11)
    k2 = synth_kernel([1.0], [0.7], [(0.9, 1.3)], 11)
    _write_raw(tmp_path / "ens.f32", np.stack([k1, k2]).astype(np.float32))
    rc = main(["basis", "--kernels", str(tmp_path / "ens.f32"),
               "--n-components", "1", "--out", str(tmp_path / "basis.f32")])
    assert rc == 0
    basis = read_basis(tmp_path / "basis.f32")
    assert np.allclose(basis.principal, (k1 + k2) / 2, atol=1e-7)


def test_basis_from_config_ensemble(tmp_path, sim_config):
    rc = main(["basis", "--config", str(sim_config), "--out", str(tmp_path / "b.f32")])
    assert rc == 0
    basis = read_basis(tmp_path / "b.f32")
    assert basis.n_components == 4 and basis.support == 11


def test_flow_identical_frames(tmp_path, clean_file):
    bundle = tmp_path / "ident"
    bundle.mkdir()
    img = read_image(clean_file)
    for t in range(3):
        write_image(img, bundle / f"frame_{t:03d}.f32")
    (bundle / "params.json").write_text("{}")
    out = tmp_path / "flows"
    rc = main(["flow", "--bundle", str(bundle), "--out", str(out)])
    assert rc == 0
    for t in range(3):
        flow = read_flow(out / f"flow_{t:03d}.flo32")
        assert np.hypot(flow.dx, flow.dy).max() < 0.05
    assert (out / "flow_mean.flo32").exists()
    assert (out / "corrected.f32").exists()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, clean_file, sim_config):
    """simulate + basis once; reused by the restore/evaluate tests."""
    root = tmp_path_factory.mktemp("pipe")
    bundle = root / "bundle"
    assert main(["simulate", "--config", str(sim_config), "--clean", str(clean_file),
                 "--out", str(bundle)]) == 0
    basis_path = root / "basis.f32"
    assert main(["basis", "--config", str(sim_config), "--out", str(basis_path)]) == 0
    return root, bundle, basis_path


def test_restore_pipeline(tmp_path, pipeline, sim_config):
    root, bundle, basis_path = pipeline
    out = tmp_path / "restored"
    rc = main(["restore", "--bundle", str(bundle), "--basis", str(basis_path),
               "--config", str(sim_config), "--out", str(out)])
    assert rc == 0
    assert (out / "restored.f32").exists()
    assert (out / "corrected.f32").exists()
    assert (out / "gaussians.json").exists()
    with (out / "trace.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iteration", "loss", "psnr"]
    assert len(rows) == 26  # header + max_iters
    losses = [float(r[1]) for r in rows[1:]]
    assert all(np.isfinite(l) for l in losses)
    assert rows[1][2] != ""  # clean.f32 present -> psnr column filled


def test_restore_single_frame(tmp_path, pipeline, sim_config):
    root, bundle, basis_path = pipeline
    single = tmp_path / "single"
    single.mkdir()
    (single / "frame_000.f32").write_bytes((bundle / "frame_000.f32").read_bytes())
    (single / "frame_000.f32.json").write_text((bundle / "frame_000.f32.json").read_text())
    (single / "params.json").write_text("{}")
    rc = main(["restore", "--bundle", str(single), "--basis", str(basis_path),
               "--config", str(sim_config), "--out", str(tmp_path / "r1")])
    assert rc == 0


def test_restore_missing_basis(tmp_path, pipeline, sim_config):
    root, bundle, _ = pipeline
    rc = main(["restore", "--bundle", str(bundle), "--basis",
               str(tmp_path / "missing.f32"), "--config", str(sim_config),
               "--out", str(tmp_path / "r2")])
    assert rc == 2


def test_restore_empty_bundle(tmp_path, pipeline, sim_config):
    root, _, basis_path = pipeline
    empty = tmp_path / "empty"
    empty.mkdir()
    rc = main(["restore", "--bundle", str(empty), "--basis", str(basis_path),
               "--config", str(sim_config), "--out", str(tmp_path / "r3")])
    assert rc == 2


def test_evaluate_self(tmp_path, clean_file):
    out = tmp_path / "metrics.csv"
    rc = main(["evaluate", str(clean_file), str(clean_file), "--out", str(out)])
    assert rc == 0
    with out.open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["method", "psnr", "ssim", "gcl", "brisque"]
    assert float(rows[1][1]) == 99.0
    assert float(rows[1][2]) == 1.0
    assert rows[1][4] == "n/a"


def test_unknown_config_key_is_usage_error(tmp_path, clean_file):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"simulate": {"fried": 1.0}}))
    rc = main(["simulate", "--config", str(cfg), "--clean", str(clean_file),
               "--out", str(tmp_path / "z")])
    assert rc == 1


def test_bad_usage_exit_code():
    assert main(["simulate"]) == 1  # missing required --out

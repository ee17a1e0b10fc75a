"""Command-line pipeline: simulate -> basis -> flow -> restore -> evaluate.

One JSON config file carries per-stage sections; flags override config keys.
Exit codes are stable for harness scripting: 0 success, 1 usage/config
error, 2 IO error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .basis import build_pca_basis, read_basis, write_basis
from .errors import FileFormatError, NumericalError, UsageError
from .imgcore import Image, read_image, write_flow, write_image
from .metrics import gcl, psnr, ssim
from .restore import RestoreConfig, mitigate
from .simulate import (
    TurbulenceParams,
    degrade_sequence,
    read_bundle,
    sample_frame_kernels,
    synth_kernel,
    write_bundle,
)
from .tilt import FlowConfig, average_flows, correct_reference, estimate_flow


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise FileFormatError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return cfg


def _turb_params(section: dict, seed_override: int | None) -> TurbulenceParams:
    known = {f for f in TurbulenceParams.__dataclass_fields__}
    extra = set(section) - known
    if extra:
        raise UsageError(f"unknown simulate config keys: {sorted(extra)}")
    section = dict(section)
    if "kernel_sigma_range" in section:
        section["kernel_sigma_range"] = tuple(section["kernel_sigma_range"])
    if seed_override is not None:
        section["seed"] = seed_override
    return TurbulenceParams(**section)


def _flow_config(section: dict) -> FlowConfig:
    known = {f for f in FlowConfig.__dataclass_fields__}
    extra = set(section) - known
    if extra:
        raise UsageError(f"unknown flow config keys: {sorted(extra)}")
    return FlowConfig(**section)


def _restore_config(section: dict, args) -> RestoreConfig:
    known = {f for f in RestoreConfig.__dataclass_fields__}
    extra = set(section) - known
    if extra:
        raise UsageError(f"unknown restore config keys: {sorted(extra)}")
    section = dict(section)
    if "region_grid" in section:
        section["region_grid"] = tuple(section["region_grid"])
    if getattr(args, "region_grid", None):
        section["region_grid"] = tuple(args.region_grid)
    if getattr(args, "n_components", None) is not None:
        section["n_components"] = args.n_components
    if getattr(args, "lambda_", None) is not None:
        section["sparsity_lambda"] = args.lambda_
    if getattr(args, "seed", None) is not None:
        section["seed"] = args.seed
    return RestoreConfig(**section)


def cmd_simulate(args) -> int:
    cfg = _load_config(args.config)
    sim = cfg.get("simulate", {})
    n_frames = args.frames if args.frames is not None else sim.pop("n_frames", 5)
    grid = tuple(args.region_grid or sim.pop("region_grid", (2, 2)))
    if n_frames < 1:
        raise UsageError(f"n_frames must be >= 1, got {n_frames}")
    params = _turb_params(sim, args.seed)
    clean_src = cfg.get("clean_image", None) if args.clean is None else args.clean
    if clean_src is None:
        raise UsageError("simulate needs a clean image (--clean or config 'clean_image')")
    clean = read_image(clean_src)
    seq = degrade_sequence(clean, params, n_frames, grid)
    write_bundle(args.out, clean, seq, params, n_frames)
    print(f"wrote {n_frames}-frame bundle to {args.out}")
    return 0


def cmd_basis(args) -> int:
    cfg = _load_config(args.config)
    section = cfg.get("basis", {})
    support = args.support or section.get("support", 21)
    n_components = args.n_components or section.get("n_components", 100)
    if args.kernels:
        from .imgcore import _read_raw

        planes = _read_raw(Path(args.kernels))
        ensemble = planes.astype(np.float64)
    else:
        size = args.ensemble_size or section.get("ensemble_size", 512)
        params = _turb_params(cfg.get("simulate", {}), args.seed)
        ensemble = np.stack([
            synth_kernel(
                fk.weights[0, 0], fk.angles[0, 0], fk.sigmas[0, 0], support
            )
            for fk in (
                sample_frame_kernels(params, i, (1, 1)) for i in range(size)
            )
        ])
    basis = build_pca_basis(ensemble, n_components)
    write_basis(basis, args.out)
    print(f"wrote basis ({basis.n_components} components, support {basis.support}) to {args.out}")
    return 0


def _read_frames(args) -> list[Image]:
    frames = [read_image(p) for p in sorted(Path(args.bundle).glob("frame_*.f32"))]
    if not frames:
        raise FileFormatError(f"no frame_*.f32 files under {args.bundle}")
    return frames


def cmd_flow(args) -> int:
    cfg = _load_config(args.config)
    fcfg = _flow_config(cfg.get("flow", {}))
    frames = _read_frames(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reference = frames[args.ref_index]
    flows = [
        estimate_flow(reference, f, fcfg.levels, fcfg.iterations, fcfg.smoothness)
        for f in frames
    ]
    for t, flow in enumerate(flows):
        write_flow(flow, out / f"flow_{t:03d}.flo32")
    write_flow(average_flows(flows), out / "flow_mean.flo32")
    corrected, _ = correct_reference(frames, args.ref_index, fcfg)
    write_image(corrected, out / "corrected.f32")
    print(f"wrote {len(flows)} flow fields + mean + corrected reference to {out}")
    return 0


def cmd_restore(args) -> int:
    cfg = _load_config(args.config)
    rcfg = _restore_config(cfg.get("restore", {}), args)
    fcfg = _flow_config(cfg.get("flow", {}))
    frames = _read_frames(args)
    basis = read_basis(Path(args.basis))
    clean_path = Path(args.bundle) / "clean.f32"
    clean = read_image(clean_path) if clean_path.exists() else None

    result = mitigate(frames, basis, rcfg, fcfg, ref_index=args.ref_index, clean=clean)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_image(result.restored, out / "restored.f32")
    write_image(result.corrected, out / "corrected.f32")
    result.state.gaussians.to_json(out / "gaussians.json")
    wf = result.state.weights
    from .imgcore import _write_raw

    _write_raw(out / "weights.f32",
               wf.weights.reshape(wf.n_frames, wf.gh * wf.gw, wf.n_components)
               .astype(np.float32))
    with (out / "trace.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss", "psnr"])
        for it, loss, p in result.trace:
            writer.writerow([it, f"{loss:.10e}", "" if p is None else f"{p:.6f}"])
    final_loss = result.trace[-1][1]
    print(f"final loss {final_loss:.6e} after {result.state.iteration} iterations")
    if clean is not None:
        degraded = np.mean([psnr(f, clean) for f in frames])
        restored_psnr = psnr(result.restored, clean)
        print(f"restored PSNR {restored_psnr:.2f} dB / SSIM {ssim(result.restored, clean):.4f} "
              f"(mean degraded PSNR {degraded:.2f} dB)")
    return 0


def cmd_evaluate(args) -> int:
    img = read_image(args.image)
    rows = []
    if args.ref:
        ref = read_image(args.ref)
        rows.append([Path(args.image).stem, f"{psnr(img, ref):.6f}",
                     f"{ssim(img, ref):.6f}", f"{gcl(img):.6f}", "n/a"])
    else:
        rows.append([Path(args.image).stem, "", "", f"{gcl(img):.6f}", "n/a"])
    out = Path(args.out)
    with out.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "psnr", "ssim", "gcl", "brisque"])
        writer.writerows(rows)
    print(f"wrote metrics to {out}")
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; keep 1 for usage
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="turbsplat",
                     description="atmospheric-turbulence simulation and mitigation")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config with per-stage sections")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--deterministic", action="store_true",
                        help="force single-threaded execution")

    p = sub.add_parser("simulate", parents=[common])
    p.add_argument("--out", required=True)
    p.add_argument("--clean", help="clean input image (png or .f32)")
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--region-grid", type=int, nargs=2, metavar=("GW", "GH"))
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("basis", parents=[common])
    p.add_argument("--out", required=True)
    p.add_argument("--kernels", help=".f32 stack of kernels to decompose")
    p.add_argument("--ensemble-size", type=int, default=None)
    p.add_argument("--support", type=int, default=None)
    p.add_argument("--n-components", type=int, default=None)
    p.set_defaults(func=cmd_basis)

    p = sub.add_parser("flow", parents=[common])
    p.add_argument("--bundle", required=True, help="directory with frame_*.f32")
    p.add_argument("--out", required=True)
    p.add_argument("--ref-index", type=int, default=0)
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("restore", parents=[common])
    p.add_argument("--bundle", required=True, help="directory with frame_*.f32")
    p.add_argument("--basis", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ref-index", type=int, default=0)
    p.add_argument("--region-grid", type=int, nargs=2, metavar=("GW", "GH"))
    p.add_argument("--n-components", type=int, default=None)
    p.add_argument("--lambda", dest="lambda_", type=float, default=None)
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("evaluate", parents=[common])
    p.add_argument("image")
    p.add_argument("ref", nargs="?", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.deterministic:
            import numba

            numba.set_num_threads(1)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileFormatError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

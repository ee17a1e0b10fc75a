"""Synthetic turbulence degradation and isoplanatic-patch arithmetic.

A degraded frame is built in two stages: the clean image is warped by a
smooth zero-mean random tilt field, then each cell of a region grid is
convolved with its own anisotropic Gaussian mixture kernel. All randomness
is keyed by (seed, frame index, purpose tag) so frames can be generated in
any order, or in parallel, with identical results.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.signal import convolve2d

from .errors import NumericalError, UsageError
from .imgcore import FlowField, Image, read_flow, read_image, write_flow, write_image
from .tilt import warp_image

_TAG_TILT_X = 101
_TAG_TILT_Y = 102
_TAG_KERNEL = 103


@dataclass
class TurbulenceParams:
    fried_r0: float = 0.05          # m
    path_length_L: float = 500.0    # m
    wavelength_lambda: float = 550e-9  # m
    fov: float = 0.01               # rad
    tilt_sigma: float = 1.5         # px
    tilt_corr_len: float = 12.0     # px
    kernel_count_K: int = 2
    kernel_sigma_range: tuple[float, float] = (0.5, 1.5)  # px
    seed: int = 0

    def __post_init__(self) -> None:
        positive = {
            "fried_r0": self.fried_r0,
            "path_length_L": self.path_length_L,
            "wavelength_lambda": self.wavelength_lambda,
            "fov": self.fov,
            "tilt_corr_len": self.tilt_corr_len,
        }
        for name, value in positive.items():
            if not value > 0:
                raise UsageError(f"{name} must be strictly positive, got {value}")
        if self.tilt_sigma < 0:
            raise UsageError(f"tilt_sigma must be >= 0, got {self.tilt_sigma}")
        if self.kernel_count_K < 1:
            raise UsageError(f"kernel_count_K must be >= 1, got {self.kernel_count_K}")
        lo, hi = self.kernel_sigma_range
        if not (0 < lo <= hi):
            raise UsageError(f"kernel_sigma_range must satisfy 0 < min <= max, got {self.kernel_sigma_range}")


@dataclass
class Cn2Profile:
    """Refractive-index structure "constant" sampled over height, m^(-2/3)."""

    heights: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        h = np.asarray(self.heights, dtype=np.float64)
        v = np.asarray(self.values, dtype=np.float64)
        if h.ndim != 1 or h.shape != v.shape or h.size < 2:
            raise UsageError("profile needs matching 1D height/value arrays with >= 2 samples")
        if np.any(np.diff(h) <= 0):
            raise UsageError("profile heights must be strictly increasing")
        if np.any(v < 0):
            raise UsageError("Cn^2 values must be non-negative")
        self.heights, self.values = h, v


def _rng(seed: int, frame_index: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, frame_index, tag])


def gen_tilt_field(params: TurbulenceParams, frame_index: int,
                   width: int, height: int) -> FlowField:
    """Smooth zero-mean tilt: Gaussian-filtered white noise, rescaled so each
    component's marginal standard deviation equals tilt_sigma."""
    if params.tilt_sigma == 0.0:
        z = np.zeros((height, width), dtype=np.float32)
        return FlowField(z, z.copy())
    sigma = params.tilt_corr_len
    # self-energy of the separable filter sets the variance shrinkage
    radius = int(4.0 * sigma + 0.5)
    x = np.arange(-radius, radius + 1)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    g /= g.sum()
    gain = float(np.sum(g * g))  # per-axis; 2D std shrinks by gain
    planes = []
    for tag in (_TAG_TILT_X, _TAG_TILT_Y):
        noise = _rng(params.seed, frame_index, tag).standard_normal((height, width))
        smooth = gaussian_filter(noise, sigma=sigma, mode="wrap", truncate=4.0)
        planes.append(smooth * (params.tilt_sigma / gain))
    return FlowField(planes[0], planes[1])


def synth_kernel(weights, angles, sigmas, support: int) -> np.ndarray:
    """Mixture of anisotropic Gaussians N(0, R(theta) diag(s1^2, s2^2) R(theta)^T),
    discretized on an odd support and normalized to sum exactly 1."""
    weights = np.asarray(weights, dtype=np.float64).ravel()
    angles = np.asarray(angles, dtype=np.float64).ravel()
    sigmas = np.atleast_2d(np.asarray(sigmas, dtype=np.float64))
    if not (len(weights) == len(angles) == sigmas.shape[0]):
        raise UsageError("weights, angles, sigmas must have equal length")
    if np.any(weights < 0) or weights.sum() <= 0:
        raise UsageError("mixture weights must be non-negative with positive sum")
    if np.any(sigmas <= 0):
        raise UsageError("kernel sigmas must be positive")
    if support < 3 or support % 2 == 0:
        raise UsageError(f"support must be odd and >= 3, got {support}")
    r = support // 2
    xs = np.arange(-r, r + 1, dtype=np.float64)
    X, Y = np.meshgrid(xs, xs)
    kernel = np.zeros((support, support))
    for w, theta, (s1, s2) in zip(weights, angles, sigmas):
        c, s = np.cos(theta), np.sin(theta)
        # coordinates in the kernel's principal frame
        u = c * X + s * Y
        v = -s * X + c * Y
        comp = np.exp(-0.5 * ((u / s1) ** 2 + (v / s2) ** 2))
        kernel += (w / (2.0 * np.pi * s1 * s2)) * comp
    # truncation estimate: mass on the outermost ring. The bound accepts any
    # support covering 3 sigma per axis (a 3-sigma box leaves ~5.4e-3 outside,
    # of which the border ring carries a fraction).
    ring = kernel.sum() - kernel[1:-1, 1:-1].sum()
    if ring > 6e-3 * kernel.sum():
        raise UsageError(
            f"support {support} too small for sigmas (border mass fraction {ring / kernel.sum():.2e})"
        )
    return kernel / kernel.sum()


def kernel_support_for(sigma_max: float) -> int:
    """Smallest odd support covering 3.5 sigma per side (minimum 3)."""
    s = int(np.ceil(7.0 * sigma_max + 1.0))
    s = max(s, 3)
    return s if s % 2 == 1 else s + 1


@dataclass
class FrameKernels:
    """Per-region mixture parameters for one frame."""

    weights: np.ndarray  # (gh, gw, K)
    angles: np.ndarray   # (gh, gw, K)
    sigmas: np.ndarray   # (gh, gw, K, 2)


@dataclass
class DegradedSequence:
    frames: list[Image]
    tilts: list[FlowField]
    kernels: list[FrameKernels]
    support: int
    region_grid: tuple[int, int] = (1, 1)


def sample_frame_kernels(params: TurbulenceParams, frame_index: int,
                         region_grid: tuple[int, int]) -> FrameKernels:
    """theta ~ U[0, pi), sigma ~ log-uniform on the configured range,
    omega ~ symmetric Dirichlet; drawn in fixed region order."""
    gw, gh = region_grid
    k = params.kernel_count_K
    rng = _rng(params.seed, frame_index, _TAG_KERNEL)
    angles = rng.uniform(0.0, np.pi, size=(gh, gw, k))
    lo, hi = params.kernel_sigma_range
    sigmas = np.exp(rng.uniform(np.log(lo), np.log(hi), size=(gh, gw, k, 2)))
    weights = rng.dirichlet(np.ones(k), size=(gh, gw))
    return FrameKernels(weights=weights, angles=angles, sigmas=sigmas)


def _regionwise_convolve(data: np.ndarray, kernels: FrameKernels, support: int) -> np.ndarray:
    """Each output cell is the 'valid' convolution of the padded input crop with
    that cell's kernel; replicate padding at image borders only."""
    h, w, n_ch = data.shape
    gh, gw = kernels.weights.shape[:2]
    rh, rw = h // gh, w // gw
    m = support // 2
    padded = np.pad(data, ((m, m), (m, m), (0, 0)), mode="edge")
    out = np.empty_like(data)
    for ry in range(gh):
        for rx in range(gw):
            kern = synth_kernel(
                kernels.weights[ry, rx], kernels.angles[ry, rx],
                kernels.sigmas[ry, rx], support,
            )
            y0, x0 = ry * rh, rx * rw
            crop = padded[y0:y0 + rh + 2 * m, x0:x0 + rw + 2 * m]
            for ch in range(n_ch):
                out[y0:y0 + rh, x0:x0 + rw, ch] = convolve2d(
                    crop[:, :, ch], kern, mode="valid"
                )
    return out


def degrade_sequence(clean: Image, params: TurbulenceParams, n_frames: int,
                     region_grid: tuple[int, int]) -> DegradedSequence:
    """Tilt-then-blur frame synthesis with full ground truth."""
    if n_frames < 1:
        raise UsageError(f"n_frames must be >= 1, got {n_frames}")
    gw, gh = region_grid
    if gw < 1 or gh < 1 or clean.width % gw or clean.height % gh:
        raise UsageError(
            f"region grid {region_grid} does not divide image {clean.width}x{clean.height}"
        )
    support = kernel_support_for(params.kernel_sigma_range[1])
    frames: list[Image] = []
    tilts: list[FlowField] = []
    kernels: list[FrameKernels] = []
    for t in range(n_frames):
        tilt = gen_tilt_field(params, t, clean.width, clean.height)
        warped = warp_image(clean, tilt)
        fk = sample_frame_kernels(params, t, region_grid)
        blurred = _regionwise_convolve(warped.data.astype(np.float64), fk, support)
        frames.append(Image(blurred))
        tilts.append(tilt)
        kernels.append(fk)
    return DegradedSequence(frames=frames, tilts=tilts, kernels=kernels,
                            support=support, region_grid=(gw, gh))


def isoplanatic_angle_profile(profile: Cn2Profile, lam: float) -> float:
    """theta = 0.058 * lambda^(6/5) * [integral Cn^2(h) h^(5/3) dh]^(-3/5),
    trapezoidal quadrature over the sample list."""
    if lam <= 0:
        raise UsageError(f"wavelength must be positive, got {lam}")
    integrand = profile.values * profile.heights ** (5.0 / 3.0)
    integral = float(np.trapezoid(integrand, profile.heights))
    if integral <= 0:
        raise NumericalError("zero turbulence integral: isoplanatic angle is unbounded")
    return 0.058 * lam ** 1.2 * integral ** (-0.6)


def isoplanatic_angle_horizontal(r0: float, path_len: float) -> float:
    """Horizontal-path simplification theta ~= 0.53 * r0 / L."""
    if r0 <= 0 or path_len <= 0:
        raise UsageError(f"r0 and L must be positive, got r0={r0}, L={path_len}")
    return 0.53 * r0 / path_len


def region_pixel_count(fov: float, height: int, width: int, theta: float,
                       mode: str = "literal") -> tuple[float, tuple[int, int]]:
    """Isoplanatic patch edge in pixels plus the resulting region grid (gw, gh).

    'literal' divides the field of view by the pixel COUNT (alpha = FOV / (H*W));
    'per-axis' uses the conventional per-pixel angle alpha = FOV / max(H, W).
    """
    if fov <= 0 or theta <= 0 or height <= 0 or width <= 0:
        raise UsageError("fov, theta and image dimensions must be positive")
    if mode == "literal":
        alpha = fov / (height * width)
    elif mode == "per-axis":
        alpha = fov / max(height, width)
    else:
        raise UsageError(f"mode must be 'literal' or 'per-axis', got {mode!r}")
    n = max(theta / alpha, 1.0)
    grid = (int(np.ceil(width / n)), int(np.ceil(height / n)))
    return n, grid


# ---------------------------------------------------------------------------
# ground-truth bundle layout:
#   clean.f32, frame_%03d.f32, tilt_%03d.flo32, kernels.json, params.json
# ---------------------------------------------------------------------------

def write_bundle(out_dir: str | Path, clean: Image, seq: DegradedSequence,
                 params: TurbulenceParams, n_frames: int) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_image(clean, out / "clean.f32")
    for t, (frame, tilt) in enumerate(zip(seq.frames, seq.tilts)):
        write_image(frame, out / f"frame_{t:03d}.f32")
        write_flow(tilt, out / f"tilt_{t:03d}.flo32")
    kern_records = [
        {
            "weights": fk.weights.tolist(),
            "angles": fk.angles.tolist(),
            "sigmas": fk.sigmas.tolist(),
        }
        for fk in seq.kernels
    ]
    (out / "kernels.json").write_text(json.dumps({
        "support": seq.support,
        "region_grid": list(seq.region_grid),
        "frames": kern_records,
    }))
    meta = asdict(params)
    meta["kernel_sigma_range"] = list(params.kernel_sigma_range)
    meta["n_frames"] = n_frames
    meta["region_grid"] = list(seq.region_grid)
    (out / "params.json").write_text(json.dumps(meta, indent=2))


def read_bundle(bundle_dir: str | Path):
    """Returns (clean or None, frames, tilts, params dict)."""
    bundle = Path(bundle_dir)
    meta = json.loads((bundle / "params.json").read_text())
    clean_path = bundle / "clean.f32"
    clean = read_image(clean_path) if clean_path.exists() else None
    frames = [read_image(p) for p in sorted(bundle.glob("frame_*.f32"))]
    tilts = [read_flow(p) for p in sorted(bundle.glob("tilt_*.flo32"))]
    return clean, frames, tilts, meta

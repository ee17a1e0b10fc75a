"""Planar Gaussian scene representation and the differentiable splat renderer.

A scene is an ordered list of 2D Gaussians (mean, scale, rotation, opacity,
color) composited front-to-back in list order:

    C(p) = sum_i T_i * c_i * a_i(p),   T_i = prod_{j<i} (1 - a_j(p)),
    a_i(p) = alpha_i * exp(-0.5 * d^T Sigma_i^{-1} d),   d = p - mean_i.

Covariances come from a rotation/scale factorization Sigma = R S S^T R^T so
positive-definiteness survives unconstrained optimization. Blur enters by
adding a kernel covariance, rotated by each Gaussian's own angle, to its
base covariance; the renderer then scales opacity by
sqrt(det Sigma / det Sigma') so a blurred render conserves flux and matches
a discrete convolution of the sharp render.

Gradients are analytic and returned on the unconstrained parameterization
(mean, log-scale, rotation angle, opacity logit, color).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _raster
from .errors import NumericalError, UsageError
from .imgcore import Image

DET_TOL = 1e-12  # covariance determinant below this is degenerate (px^4)


@dataclass
class Cov2:
    """Symmetric 2x2 covariance [[a, b], [b, c]] in pixel^2 units."""

    a: float
    b: float
    c: float

    def as_matrix(self) -> np.ndarray:
        return np.array([[self.a, self.b], [self.b, self.c]], dtype=np.float64)

    def det(self) -> float:
        return self.a * self.c - self.b * self.b


@dataclass
class Gaussian2D:
    mean: tuple[float, float]
    scale: tuple[float, float]
    rotation: float = 0.0
    opacity: float = 1.0
    color: tuple[float, ...] = (1.0,)

    def covariance(self) -> Cov2:
        return build_covariance(self.rotation, self.scale)


def build_covariance(phi: float, scale: tuple[float, float]) -> Cov2:
    """Sigma = R(phi) diag(s1^2, s2^2) R(phi)^T."""
    s1, s2 = float(scale[0]), float(scale[1])
    if s1 <= 0.0 or s2 <= 0.0:
        raise UsageError(f"scales must be positive, got {scale}")
    if not np.isfinite(phi):
        raise UsageError("rotation angle must be finite")
    c, s = np.cos(phi), np.sin(phi)
    v1, v2 = s1 * s1, s2 * s2
    return Cov2(
        a=c * c * v1 + s * s * v2,
        b=c * s * (v1 - v2),
        c=s * s * v1 + c * c * v2,
    )


def eval_gaussian(g: Gaussian2D, p: tuple[float, float]) -> float:
    """Unnormalized density exp(-0.5 d^T Sigma^{-1} d); 1 exactly at the mean."""
    cov = g.covariance()
    det = cov.det()
    if det < DET_TOL:
        raise NumericalError(f"degenerate covariance, det={det:.3e}")
    dx = p[0] - g.mean[0]
    dy = p[1] - g.mean[1]
    q = 0.5 * (cov.c * dx * dx - 2.0 * cov.b * dx * dy + cov.a * dy * dy) / det
    return float(np.exp(-q))


def blur_covariance(
    base: Cov2,
    basis_covs: Sequence[Cov2],
    weights: Sequence[float],
    phi: float,
) -> Cov2:
    """base + sum_k w_k * R(phi) Sigma_k R(phi)^T (kernel covariances follow the Gaussian's rotation)."""
    if len(basis_covs) != len(weights):
        raise UsageError(f"{len(basis_covs)} kernel covariances vs {len(weights)} weights")
    c, s = np.cos(phi), np.sin(phi)
    rot = np.array([[c, -s], [s, c]])
    total = base.as_matrix()
    for cov, w in zip(basis_covs, weights):
        if w < 0.0:
            raise UsageError(f"blur weights must be non-negative, got {w}")
        total = total + w * (rot @ cov.as_matrix() @ rot.T)
    return Cov2(a=float(total[0, 0]), b=float(total[0, 1]), c=float(total[1, 1]))


class GaussianSet:
    """Ordered Gaussians stored as parallel arrays; compositing order = index."""

    def __init__(self, means, scales, rotations, opacities, colors):
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        self.scales = np.atleast_2d(np.asarray(scales, dtype=np.float64))
        self.rotations = np.asarray(rotations, dtype=np.float64).ravel()
        self.opacities = np.asarray(opacities, dtype=np.float64).ravel()
        colors = np.asarray(colors, dtype=np.float64)
        if colors.ndim == 1:
            colors = colors[:, None]
        self.colors = colors
        n = len(self)
        if not (self.scales.shape == (n, 2) and self.rotations.shape == (n,)
                and self.opacities.shape == (n,) and self.colors.shape[0] == n):
            raise UsageError("gaussian parameter arrays have inconsistent lengths")
        if np.any(self.scales <= 0.0):
            raise UsageError("all scales must be positive")
        if np.any((self.opacities < 0.0) | (self.opacities > 1.0)):
            raise UsageError("opacities must lie in [0, 1]")

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def channels(self) -> int:
        return self.colors.shape[1]

    @classmethod
    def empty(cls, channels: int = 1) -> "GaussianSet":
        return cls(
            np.zeros((0, 2)), np.ones((0, 2)), np.zeros(0), np.zeros(0),
            np.zeros((0, channels)),
        )

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian2D]) -> "GaussianSet":
        if not gaussians:
            return cls.empty()
        return cls(
            [g.mean for g in gaussians],
            [g.scale for g in gaussians],
            [g.rotation for g in gaussians],
            [g.opacity for g in gaussians],
            [g.color for g in gaussians],
        )

    def __getitem__(self, i: int) -> Gaussian2D:
        return Gaussian2D(
            mean=(float(self.means[i, 0]), float(self.means[i, 1])),
            scale=(float(self.scales[i, 0]), float(self.scales[i, 1])),
            rotation=float(self.rotations[i]),
            opacity=float(self.opacities[i]),
            color=tuple(float(v) for v in self.colors[i]),
        )

    def base_covariances(self) -> np.ndarray:
        """(N, 3) array of (a, b, c) entries of each R S S^T R^T."""
        c = np.cos(self.rotations)
        s = np.sin(self.rotations)
        v1 = self.scales[:, 0] ** 2
        v2 = self.scales[:, 1] ** 2
        return np.stack(
            [c * c * v1 + s * s * v2, c * s * (v1 - v2), s * s * v1 + c * c * v2],
            axis=1,
        )

    def to_json(self, path: str | Path) -> None:
        records = [
            {
                "mean": [float(x) for x in self.means[i]],
                "scale": [float(x) for x in self.scales[i]],
                "rot": float(self.rotations[i]),
                "alpha": float(self.opacities[i]),
                "color": [float(x) for x in self.colors[i]],
            }
            for i in range(len(self))
        ]
        Path(path).write_text(json.dumps(records))

    @classmethod
    def from_json(cls, path: str | Path) -> "GaussianSet":
        records = json.loads(Path(path).read_text())
        if not records:
            return cls.empty()
        return cls(
            [r["mean"] for r in records],
            [r["scale"] for r in records],
            [r["rot"] for r in records],
            [r["alpha"] for r in records],
            [r["color"] for r in records],
        )


@dataclass
class RasterGrads:
    """Loss gradients on the unconstrained parameterization."""

    mean: np.ndarray           # (N, 2)
    log_scale: np.ndarray      # (N, 2)
    rotation: np.ndarray       # (N,)
    opacity_logit: np.ndarray  # (N,)
    color: np.ndarray          # (N, C)
    blur_cov: np.ndarray | None = None  # (R, 3): d/d(w11, w12, w22) per region


def _augmented_covs(gset: GaussianSet, region_index, region_covs):
    """Per-Gaussian composited covariance entries and E = diag(s^2) + W terms.

    region_covs rows are (w11, w12, w22) of the blur covariance added in each
    Gaussian's local frame; region_index maps Gaussians to rows (None = no blur).
    """
    v1 = gset.scales[:, 0] ** 2
    v2 = gset.scales[:, 1] ** 2
    if region_covs is None:
        e11, e12, e22 = v1, np.zeros_like(v1), v2
    else:
        w = np.asarray(region_covs, dtype=np.float64)[np.asarray(region_index)]
        e11, e12, e22 = v1 + w[:, 0], w[:, 1], v2 + w[:, 2]
    c = np.cos(gset.rotations)
    s = np.sin(gset.rotations)
    cov_a = c * c * e11 - 2 * c * s * e12 + s * s * e22
    cov_b = c * s * e11 + (c * c - s * s) * e12 - c * s * e22
    cov_c = s * s * e11 + 2 * c * s * e12 + c * c * e22
    covs = np.stack([cov_a, cov_b, cov_c], axis=1)
    return covs, e11, e12, e22


def _prepare(gset: GaussianSet, width, height, covs, flux_ratio):
    det = covs[:, 0] * covs[:, 2] - covs[:, 1] ** 2
    if len(gset) and det.min() < DET_TOL:
        raise NumericalError(
            f"degenerate covariance at index {int(det.argmin())}, det={det.min():.3e}"
        )
    icovs = np.stack([covs[:, 2] / det, -covs[:, 1] / det, covs[:, 0] / det], axis=1)
    rx = 3.0 * np.sqrt(covs[:, 0])
    ry = 3.0 * np.sqrt(covs[:, 2])
    bboxes = np.stack(
        [
            np.maximum(np.ceil(gset.means[:, 0] - rx), 0),
            np.minimum(np.floor(gset.means[:, 0] + rx), width - 1),
            np.maximum(np.ceil(gset.means[:, 1] - ry), 0),
            np.minimum(np.floor(gset.means[:, 1] + ry), height - 1),
        ],
        axis=1,
    ).astype(np.int64)
    aeff = gset.opacities * flux_ratio
    return icovs, bboxes, aeff


def render_raw(
    gset: GaussianSet,
    width: int,
    height: int,
    region_index=None,
    region_covs=None,
    flux_compensate: bool = True,
):
    """Unclamped float64 render (H, W, C) plus the per-pixel final transmittance.

    With region_covs given, each Gaussian's covariance is augmented by its
    region's blur covariance and its opacity scaled by
    sqrt(det Sigma_base / det Sigma_aug) when flux_compensate is on.
    """
    if width <= 0 or height <= 0:
        raise UsageError(f"image dimensions must be positive, got {width}x{height}")
    n_ch = gset.channels if len(gset) else 1
    if len(gset) == 0:
        return np.zeros((height, width, n_ch)), np.ones((height, width))
    covs, e11, e12, e22 = _augmented_covs(gset, region_index, region_covs)
    if region_covs is not None and flux_compensate:
        det_e = e11 * e22 - e12 * e12
        flux = gset.scales[:, 0] * gset.scales[:, 1] / np.sqrt(det_e)
    else:
        flux = np.ones(len(gset))
    icovs, bboxes, aeff = _prepare(gset, width, height, covs, flux)
    entry_gauss, tile_start, tile_end, tiles_x = _raster.bin_gaussians(bboxes, width, height)
    img = np.zeros((height, width, n_ch))
    trans = np.ones((height, width))
    _raster.forward(
        gset.means, icovs, aeff, np.ascontiguousarray(gset.colors), bboxes,
        entry_gauss, tile_start, tile_end, tiles_x, height, width, img, trans,
    )
    return img, trans


def rasterize(gset: GaussianSet, width: int, height: int, channels: int = 1) -> Image:
    """Alpha-composite the set onto a blank canvas; empty set gives all zeros."""
    if len(gset) and gset.channels != channels:
        raise UsageError(f"set has {gset.channels} color channels, requested {channels}")
    img, _ = render_raw(gset, width, height, flux_compensate=False)
    if len(gset) == 0 and channels != 1:
        return Image(np.zeros((height, width, channels), dtype=np.float32))
    return Image(img)


def render_blurred(
    gset: GaussianSet,
    blur_cov: Cov2,
    width: int,
    height: int,
) -> np.ndarray:
    """Render with every Gaussian's covariance augmented by one shared kernel
    covariance (applied in each Gaussian's own frame), flux conserved."""
    rc = np.array([[blur_cov.a, blur_cov.b, blur_cov.c]])
    img, _ = render_raw(
        gset, width, height,
        region_index=np.zeros(len(gset), dtype=np.int64), region_covs=rc,
    )
    return img


def render_with_grads(
    gset: GaussianSet,
    width: int,
    height: int,
    upstream: np.ndarray,
    region_index=None,
    region_covs=None,
    flux_compensate: bool = True,
    forward_state=None,
):
    """Forward render plus analytic gradients of L = sum(upstream * render).

    Returns (raw render, RasterGrads). upstream has shape (H, W, C) and is
    dL/d(pixel); gradients come back on the unconstrained parameterization
    and, when region_covs is supplied, include d/d(region blur covariance).
    forward_state may carry the (img, transmittance) pair of a render_raw
    call with identical arguments to skip the redundant forward pass.
    """
    upstream = np.ascontiguousarray(upstream, dtype=np.float64)
    n = len(gset)
    n_ch = gset.channels if n else upstream.shape[2]
    if upstream.shape != (height, width, n_ch):
        raise UsageError(
            f"upstream shape {upstream.shape} does not match {height}x{width}x{n_ch}"
        )
    n_regions = 0 if region_covs is None else len(region_covs)
    grads = RasterGrads(
        mean=np.zeros((n, 2)),
        log_scale=np.zeros((n, 2)),
        rotation=np.zeros(n),
        opacity_logit=np.zeros(n),
        color=np.zeros((n, n_ch)),
        blur_cov=np.zeros((n_regions, 3)) if region_covs is not None else None,
    )
    if n == 0:
        return np.zeros((height, width, n_ch)), grads

    covs, e11, e12, e22 = _augmented_covs(gset, region_index, region_covs)
    compensating = region_covs is not None and flux_compensate
    if compensating:
        det_e = e11 * e22 - e12 * e12
        flux = gset.scales[:, 0] * gset.scales[:, 1] / np.sqrt(det_e)
    else:
        det_e = None
        flux = np.ones(n)
    icovs, bboxes, aeff = _prepare(gset, width, height, covs, flux)
    entry_gauss, tile_start, tile_end, tiles_x = _raster.bin_gaussians(bboxes, width, height)
    colors = np.ascontiguousarray(gset.colors)
    if forward_state is not None:
        img, trans = forward_state
    else:
        img = np.zeros((height, width, n_ch))
        trans = np.ones((height, width))
        _raster.forward(
            gset.means, icovs, aeff, colors, bboxes,
            entry_gauss, tile_start, tile_end, tiles_x, height, width, img, trans,
        )
    entry_grads = np.zeros((len(entry_gauss), 6 + n_ch))
    _raster.backward(
        gset.means, icovs, aeff, colors, bboxes,
        entry_gauss, tile_start, tile_end, tiles_x, height, width, trans,
        upstream, entry_grads,
    )
    # fixed-order reduction of per-(tile, Gaussian) partials
    per_g = np.empty((n, 6 + n_ch))
    for k in range(6 + n_ch):
        per_g[:, k] = np.bincount(entry_gauss, weights=entry_grads[:, k], minlength=n)

    grads.mean[:, 0] = per_g[:, 0]
    grads.mean[:, 1] = per_g[:, 1]
    d_cov = per_g[:, 2:5]  # d/d(A, B, C) of the composited covariance
    d_aeff = per_g[:, 5]
    grads.color[:] = per_g[:, 6:]

    c = np.cos(gset.rotations)
    s = np.sin(gset.rotations)
    # rotate covariance gradient back into the local frame: Q = R^T P R
    half_b = 0.5 * d_cov[:, 1]
    q11 = c * c * d_cov[:, 0] + 2 * c * s * half_b + s * s * d_cov[:, 2]
    q12 = -c * s * d_cov[:, 0] + (c * c - s * s) * half_b + c * s * d_cov[:, 2]
    q22 = s * s * d_cov[:, 0] - 2 * c * s * half_b + c * c * d_cov[:, 2]

    v1 = gset.scales[:, 0] ** 2
    v2 = gset.scales[:, 1] ** 2
    grads.log_scale[:, 0] = q11 * 2.0 * v1
    grads.log_scale[:, 1] = q22 * 2.0 * v2
    grads.rotation[:] = (
        d_cov[:, 0] * (-2.0 * covs[:, 1])
        + d_cov[:, 1] * (covs[:, 0] - covs[:, 2])
        + d_cov[:, 2] * (2.0 * covs[:, 1])
    )
    d_alpha = d_aeff * flux
    if compensating:
        d_flux = d_aeff * gset.opacities
        grads.log_scale[:, 0] += d_flux * flux * (1.0 - v1 * e22 / det_e)
        grads.log_scale[:, 1] += d_flux * flux * (1.0 - v2 * e11 / det_e)
    alpha = gset.opacities
    grads.opacity_logit[:] = d_alpha * alpha * (1.0 - alpha)

    if region_covs is not None:
        idx = np.asarray(region_index)
        d_w11 = q11.copy()
        d_w12 = 2.0 * q12
        d_w22 = q22.copy()
        if compensating:
            d_w11 += d_flux * (-0.5 * flux * e22 / det_e)
            d_w12 += d_flux * (flux * e12 / det_e)
            d_w22 += d_flux * (-0.5 * flux * e11 / det_e)
        for k, dw in enumerate((d_w11, d_w12, d_w22)):
            grads.blur_cov[:, k] = np.bincount(idx, weights=dw, minlength=n_regions)
    return img, grads


def rasterize_with_grads(
    gset: GaussianSet,
    width: int,
    height: int,
    residual: Image | np.ndarray,
) -> RasterGrads:
    """Gradients of L = sum(residual * render) for a plain (unblurred) render."""
    upstream = residual.data if isinstance(residual, Image) else residual
    _, grads = render_with_grads(
        gset, width, height, np.asarray(upstream, dtype=np.float64),
        flux_compensate=False,
    )
    return grads

"""PCA kernel basis: one principal kernel (the ensemble mean) plus up to 100
orthonormal zero-sum components, and constrained recomposition of blur
kernels from non-negative weights.

The decomposition runs on the sample Gram matrix (ensembles are far smaller
than the flattened kernel dimension), diagonalized by a cyclic Jacobi sweep.
Composed kernels are clamped at zero and renormalized so any non-negative
weight vector yields a valid kernel; the second moments of the composed
kernel are what the renderer adds to Gaussian covariances, and their
gradient with respect to the weights is provided for the optimizer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from .errors import FileFormatError, NumericalError, UsageError
from .imgcore import _read_raw, _write_raw

MAX_COMPONENTS = 100


@njit(cache=True)
def jacobi_eigh(mat):
    """Cyclic-by-row Jacobi diagonalization of a symmetric matrix.

    Rotations below a per-sweep threshold are skipped (classical threshold
    strategy), which keeps early sweeps cheap without hurting the quadratic
    tail. Returns (eigenvalues, eigenvectors as columns), unsorted.
    """
    n = mat.shape[0]
    a = mat.copy()
    v = np.eye(n)
    norm2 = 0.0
    for i in range(n):
        for j in range(n):
            norm2 += a[i, j] * a[i, j]
    stop = 1e-24 * norm2 + 1e-300
    for sweep in range(60):
        off2 = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                off2 += a[p, q] * a[p, q]
        if 2.0 * off2 <= stop:
            break
        thresh = 0.0 if sweep >= 4 else np.sqrt(2.0 * off2) / (n * 2.0)
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= thresh or apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = 1.0 / (abs(theta) + np.sqrt(1.0 + theta * theta))
                if theta < 0.0:
                    t = -t
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                for k in range(n):
                    akp = a[p, k]
                    akq = a[q, k]
                    a[p, k] = c * akp - s * akq
                    a[q, k] = s * akp + c * akq
                for k in range(n):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(n):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq
    eig = np.empty(n)
    for i in range(n):
        eig[i] = a[i, i]
    return eig, v


@dataclass
class KernelBasis:
    support: int
    principal: np.ndarray      # (S, S), sums to 1
    components: np.ndarray     # (K, S, S), zero-sum, orthonormal
    eigenvalues: np.ndarray    # (K,), non-increasing

    def __post_init__(self) -> None:
        s = self.support
        if self.principal.shape != (s, s):
            raise UsageError("principal kernel shape does not match support")
        if self.components.ndim != 3 or self.components.shape[1:] != (s, s):
            raise UsageError("component shapes do not match support")
        if self.components.shape[0] > MAX_COMPONENTS:
            raise UsageError(f"at most {MAX_COMPONENTS} components are supported")

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    def truncated(self, n: int) -> "KernelBasis":
        """Leading-n sub-basis (nested model family for ablations)."""
        if not 0 <= n <= self.n_components:
            raise UsageError(f"cannot truncate {self.n_components} components to {n}")
        return KernelBasis(
            support=self.support,
            principal=self.principal,
            components=self.components[:n],
            eigenvalues=self.eigenvalues[:n],
        )


@dataclass
class RegionWeightField:
    """Non-negative basis weights per (frame, region)."""

    gw: int
    gh: int
    weights: np.ndarray  # (n_frames, gh, gw, K)
    validate: bool = True

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 4 or w.shape[1] != self.gh or w.shape[2] != self.gw:
            raise UsageError(
                f"weights shape {w.shape} does not match grid {self.gw}x{self.gh}"
            )
        if not np.all(np.isfinite(w)):
            raise UsageError("weights contain non-finite values")
        if self.validate and np.any(w < 0):
            raise UsageError("weights must be non-negative")
        self.weights = w

    @property
    def n_frames(self) -> int:
        return self.weights.shape[0]

    @property
    def n_components(self) -> int:
        return self.weights.shape[3]


def build_pca_basis(ensemble, n_components: int) -> KernelBasis:
    """Mean kernel plus leading eigenvectors of the centered sample covariance
    (computed via the Gram matrix, so cost scales with ensemble size)."""
    kernels = np.asarray(ensemble, dtype=np.float64)
    if kernels.ndim != 3 or kernels.shape[1] != kernels.shape[2]:
        raise UsageError(f"ensemble must be (n, S, S), got shape {kernels.shape}")
    n, support = kernels.shape[0], kernels.shape[1]
    if not 1 <= n_components <= MAX_COMPONENTS:
        raise UsageError(f"n_components must be in [1, {MAX_COMPONENTS}], got {n_components}")
    if n < n_components + 1:
        raise UsageError(f"need at least n_components + 1 kernels, got {n}")
    sums = kernels.reshape(n, -1).sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise UsageError("ensemble kernels must each sum to 1")

    flat = kernels.reshape(n, -1)
    mean = flat.mean(axis=0)
    centered = flat - mean
    gram = centered @ centered.T
    eigvals, eigvecs = jacobi_eigh(gram)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    if eigvals[0] <= 1e-18:
        raise NumericalError("degenerate ensemble: zero variance, no components exist")
    if eigvals[n_components - 1] <= 1e-14 * eigvals[0]:
        rank = int(np.sum(eigvals > 1e-14 * eigvals[0]))
        raise NumericalError(
            f"ensemble rank {rank} cannot support {n_components} components"
        )
    comps = (centered.T @ eigvecs[:, :n_components]) / np.sqrt(eigvals[:n_components])
    # tiny trailing eigenvalues amplify Jacobi residuals; one QR pass restores
    # orthonormality to machine precision without moving the leading directions
    comps, r_diag = np.linalg.qr(comps)
    comps = comps * np.sign(np.diag(r_diag))[None, :]
    comps = comps.T
    return KernelBasis(
        support=support,
        principal=mean.reshape(support, support),
        components=comps.reshape(n_components, support, support),
        eigenvalues=eigvals[:n_components] / (n - 1),
    )


def project_weights(basis: KernelBasis, kernel: np.ndarray) -> np.ndarray:
    """Coefficients of (kernel - principal) on each component."""
    diff = (np.asarray(kernel, dtype=np.float64) - basis.principal).ravel()
    return basis.components.reshape(basis.n_components, -1) @ diff


def compose_kernel(basis: KernelBasis, weights) -> np.ndarray:
    """principal + sum_k w_k comp_k, clamped at 0 and renormalized to sum 1.

    The pre-clamp combination always sums to 1 (components are zero-sum), so
    the clamped sum is >= 1 and renormalization is always well defined.
    """
    weights = np.asarray(weights, dtype=np.float64).ravel()
    if weights.shape[0] != basis.n_components:
        raise UsageError(
            f"{weights.shape[0]} weights for {basis.n_components} components"
        )
    flat = basis.principal.ravel().copy()
    if basis.n_components:
        flat += weights @ basis.components.reshape(basis.n_components, -1)
    clamped = np.maximum(flat, 0.0)
    return (clamped / clamped.sum()).reshape(basis.support, basis.support)


def sparsity_penalty(weights: RegionWeightField, lam: float) -> float:
    """lam * sum |w| over all frames, regions, and components."""
    if lam < 0:
        raise UsageError(f"sparsity weight must be non-negative, got {lam}")
    return float(lam * np.abs(weights.weights).sum())


# ---------------------------------------------------------------------------
# composed-kernel second moments (what the renderer adds to covariances)
# ---------------------------------------------------------------------------

def _grids(support: int):
    r = support // 2
    xs = np.arange(-r, r + 1, dtype=np.float64)
    gx, gy = np.meshgrid(xs, xs)
    return gx.ravel(), gy.ravel()


def kernel_covariance(kernel: np.ndarray) -> np.ndarray:
    """Central second moments (w11, w12, w22) of a normalized kernel."""
    kernel = np.asarray(kernel, dtype=np.float64)
    gx, gy = _grids(kernel.shape[0])
    k = kernel.ravel() / kernel.sum()
    mx = k @ gx
    my = k @ gy
    return np.array([
        k @ (gx * gx) - mx * mx,
        k @ (gx * gy) - mx * my,
        k @ (gy * gy) - my * my,
    ])


class ComposeCovCache:
    """Intermediates of compose_cov_batch needed by its backward pass."""

    __slots__ = ("basis", "k", "mask", "z", "mx", "my", "gx", "gy")

    def __init__(self, basis, k, mask, z, mx, my, gx, gy):
        self.basis = basis
        self.k = k
        self.mask = mask
        self.z = z
        self.mx = mx
        self.my = my
        self.gx = gx
        self.gy = gy


def compose_cov_batch(basis: KernelBasis, weights: np.ndarray):
    """Covariances of the composed kernels for a batch of weight rows.

    weights: (R, K). Returns (covs (R, 3), cache for the backward pass).
    """
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    if weights.shape[1] != basis.n_components and basis.n_components > 0:
        raise UsageError(
            f"{weights.shape[1]} weights for {basis.n_components} components"
        )
    gx, gy = _grids(basis.support)
    flat = basis.principal.ravel()[None, :]
    if basis.n_components:
        flat = flat + weights @ basis.components.reshape(basis.n_components, -1)
    else:
        flat = np.repeat(flat, weights.shape[0], axis=0)
    mask = flat > 0.0
    clamped = np.where(mask, flat, 0.0)
    z = clamped.sum(axis=1)
    k = clamped / z[:, None]
    mx = k @ gx
    my = k @ gy
    covs = np.stack([
        k @ (gx * gx) - mx * mx,
        k @ (gx * gy) - mx * my,
        k @ (gy * gy) - my * my,
    ], axis=1)
    return covs, ComposeCovCache(basis, k, mask, z, mx, my, gx, gy)


def compose_cov_batch_backward(cache: ComposeCovCache, d_covs: np.ndarray) -> np.ndarray:
    """Chain d(loss)/d(covs) -> d(loss)/d(weights) through clamp + renormalize
    + central moments. d_covs: (R, 3) for (w11, w12, w22). Returns (R, K)."""
    gx, gy = cache.gx, cache.gy
    k, mx, my = cache.k, cache.mx, cache.my
    l11 = d_covs[:, 0][:, None]
    l12 = d_covs[:, 1][:, None]
    l22 = d_covs[:, 2][:, None]
    # d(cov entries)/d(k[x]) contracted with upstream
    psi = (
        l11 * (gx * gx - 2.0 * mx[:, None] * gx)
        + l12 * (gx * gy - mx[:, None] * gy - my[:, None] * gx)
        + l22 * (gy * gy - 2.0 * my[:, None] * gy)
    )
    d_kc = (psi - np.sum(psi * k, axis=1, keepdims=True)) / cache.z[:, None]
    d_pre = np.where(cache.mask, d_kc, 0.0)
    if cache.basis.n_components == 0:
        return np.zeros((d_covs.shape[0], 0))
    return d_pre @ cache.basis.components.reshape(cache.basis.n_components, -1).T


# ---------------------------------------------------------------------------
# serialization: basis.f32 planes (principal first) + JSON sidecar
# ---------------------------------------------------------------------------

def write_basis(basis: KernelBasis, path: str | Path) -> None:
    path = Path(path)
    planes = np.concatenate([basis.principal[None], basis.components]).astype(np.float32)
    _write_raw(path, planes)
    side = Path(str(path) + ".json")
    header = json.loads(side.read_text())
    header.update({
        "support": basis.support,
        "n_components": basis.n_components,
        "eigenvalues": [float(v) for v in basis.eigenvalues],
    })
    side.write_text(json.dumps(header) + "\n")


def read_basis(path: str | Path) -> KernelBasis:
    path = Path(path)
    planes = _read_raw(path)
    side = json.loads(Path(str(path) + ".json").read_text())
    try:
        support = int(side["support"])
        n_comp = int(side["n_components"])
        eigenvalues = np.asarray(side["eigenvalues"], dtype=np.float64)
    except KeyError as exc:
        raise FileFormatError(f"{path}: basis sidecar missing {exc}") from exc
    if planes.shape != (n_comp + 1, support, support):
        raise FileFormatError(f"{path}: plane layout does not match sidecar")
    return KernelBasis(
        support=support,
        principal=planes[0].astype(np.float64),
        components=planes[1:].astype(np.float64),
        eigenvalues=eigenvalues,
    )

"""Scratch: covariance-addition blur vs discrete convolution, plus raster timing."""
import time

import numpy as np
from scipy.signal import fftconvolve

from turbsplat.gaussians import Cov2, GaussianSet, blur_covariance, render_blurred, render_raw, render_with_grads, build_covariance

# --- identity check (64x64, one gaussian) ---
W = H = 64
g = GaussianSet(means=[[31.3, 33.7]], scales=[[3.0, 2.0]], rotations=[0.6],
                opacities=[0.8], colors=[[0.9]])
phi = 0.6
sig_b = Cov2(4.0, 0.0, 1.0)  # anisotropic kernel covariance

blurred = render_blurred(g, sig_b, W, H)[:, :, 0]

sharp, _ = render_raw(g, W, H, flux_compensate=False)
sharp = sharp[:, :, 0]
# discretize N(0, R(phi) Sig_b R(phi)^T) on odd support
c, s = np.cos(phi), np.sin(phi)
R = np.array([[c, -s], [s, c]])
K = R @ sig_b.as_matrix() @ R.T
r = 10
xs = np.arange(-r, r + 1)
X, Y = np.meshgrid(xs, xs)
Minv = np.linalg.inv(K)
q = 0.5 * (Minv[0, 0] * X**2 + 2 * Minv[0, 1] * X * Y + Minv[1, 1] * Y**2)
kern = np.exp(-q)
kern /= kern.sum()
conv = fftconvolve(sharp, kern, mode="same")
err = np.sqrt(np.mean((conv - blurred) ** 2))
print(f"RMS error blur-vs-conv: {err:.2e}  (max |diff| {np.abs(conv-blurred).max():.2e})")

# --- timing at production scale ---
rng = np.random.default_rng(0)
n = 256 * 256
W = H = 256
ys, xs = np.divmod(np.arange(n), W)
gset = GaussianSet(
    means=np.column_stack([xs.astype(float), ys.astype(float)]),
    scales=np.full((n, 2), 0.7),
    rotations=np.zeros(n),
    opacities=np.full(n, 0.9),
    colors=rng.uniform(0, 1, (n, 1)),
)
region_index = (ys // 16) * 16 + (xs // 16)
region_covs = np.tile([0.8, 0.1, 0.6], (256, 1))
up = rng.normal(0, 1, (H, W, 1))

# warm up jit
render_with_grads(gset, W, H, up, region_index=region_index, region_covs=region_covs)
t0 = time.perf_counter()
reps = 5
for _ in range(reps):
    img, grads = render_with_grads(gset, W, H, up, region_index=region_index, region_covs=region_covs)
t1 = time.perf_counter()
print(f"render+grads 256x256, 65536 gaussians, blur cov ~1.0: {(t1-t0)/reps*1000:.1f} ms/frame")

t0 = time.perf_counter()
for _ in range(reps):
    img2, _ = render_raw(gset, W, H, region_index=region_index, region_covs=region_covs)
t1 = time.perf_counter()
print(f"forward only: {(t1-t0)/reps*1000:.1f} ms/frame")

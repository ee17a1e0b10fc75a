"""Scratch: cycle-loss FD gradient check + loopback self-consistency oracle."""
import time

import numpy as np

from turbsplat.basis import RegionWeightField, build_pca_basis, compose_cov_batch
from turbsplat.gaussians import GaussianSet, render_raw, rasterize
from turbsplat.imgcore import Image
from turbsplat.metrics import psnr
from turbsplat.restore import (RestoreConfig, RestoreState, cycle_loss,
                               cycle_loss_gradients, forward_blur, init_gaussians,
                               optimize, region_index_of)
from turbsplat.simulate import sample_frame_kernels, synth_kernel, TurbulenceParams

rng = np.random.default_rng(42)

# small basis from a random mixture ensemble
params = TurbulenceParams(kernel_sigma_range=(0.6, 1.4), kernel_count_K=2, seed=5)
ens = []
for i in range(64):
    fk = sample_frame_kernels(params, i, (1, 1))
    ens.append(synth_kernel(fk.weights[0, 0], fk.angles[0, 0], fk.sigmas[0, 0], 13))
basis = build_pca_basis(np.array(ens), 5)

# ---- FD check of cycle_loss gradients: 16x16, 8 gaussians, 4 regions ----
H = W = 16
n = 8
gset = GaussianSet(
    means=np.column_stack([rng.uniform(2, W - 2, n), rng.uniform(2, H - 2, n)]),
    scales=rng.uniform(0.8, 2.0, (n, 2)),
    rotations=rng.uniform(0, 2 * np.pi, n),
    opacities=rng.uniform(0.3, 0.8, n),
    colors=rng.uniform(0.2, 0.9, (n, 1)),
)
config = RestoreConfig(region_grid=(2, 2), n_components=5, sparsity_lambda=1e-3,
                       norm="l1")
n_frames = 2
wf = rng.uniform(0.01, 0.08, (n_frames, 2, 2, 5))
state = RestoreState(gaussians=gset,
                     weights=RegionWeightField(gw=2, gh=2, weights=wf))
frames = [Image(rng.uniform(0.1, 0.9, (H, W, 1))) for _ in range(n_frames)]

t0 = time.perf_counter()
loss0, grads = cycle_loss_gradients(frames, state, basis, config)
print("analytic loss:", loss0, "vs cycle_loss:", cycle_loss(frames, state, basis, config))

h = 1e-4
worst = 0.0
count = 0


def fd_loss(gs, w):
    st = RestoreState(gaussians=gs, weights=RegionWeightField(gw=2, gh=2, weights=w))
    return cycle_loss(frames, st, basis, config)


def clone(**over):
    kw = dict(means=gset.means.copy(), scales=gset.scales.copy(),
              rotations=gset.rotations.copy(), opacities=gset.opacities.copy(),
              colors=gset.colors.copy())
    kw.update(over)
    return GaussianSet(**kw)


def check(name, analytic, fd):
    global worst, count
    if abs(analytic) <= 1e-6:
        return
    rel = abs(analytic - fd) / max(abs(analytic), abs(fd))
    count += 1
    if rel > worst:
        worst = rel
    if rel > 1e-4:
        print(f"BAD {name}: analytic={analytic:.6e} fd={fd:.6e} rel={rel:.2e}")


for i in range(n):
    for ax in range(2):
        m1 = gset.means.copy(); m1[i, ax] += h
        m2 = gset.means.copy(); m2[i, ax] -= h
        check(f"mean[{i},{ax}]", grads["mean"][i, ax],
              (fd_loss(clone(means=m1), wf) - fd_loss(clone(means=m2), wf)) / (2 * h))
        s1 = gset.scales.copy(); s1[i, ax] *= np.exp(h)
        s2 = gset.scales.copy(); s2[i, ax] *= np.exp(-h)
        check(f"lscale[{i},{ax}]", grads["log_scale"][i, ax],
              (fd_loss(clone(scales=s1), wf) - fd_loss(clone(scales=s2), wf)) / (2 * h))
    r1 = gset.rotations.copy(); r1[i] += h
    r2 = gset.rotations.copy(); r2[i] -= h
    check(f"rot[{i}]", grads["rotation"][i],
          (fd_loss(clone(rotations=r1), wf) - fd_loss(clone(rotations=r2), wf)) / (2 * h))
    a = gset.opacities[i]; logit = np.log(a / (1 - a))
    o1 = gset.opacities.copy(); o1[i] = 1 / (1 + np.exp(-(logit + h)))
    o2 = gset.opacities.copy(); o2[i] = 1 / (1 + np.exp(-(logit - h)))
    check(f"logit[{i}]", grads["opacity_logit"][i],
          (fd_loss(clone(opacities=o1), wf) - fd_loss(clone(opacities=o2), wf)) / (2 * h))
    c1 = gset.colors.copy(); c1[i, 0] += h
    c2 = gset.colors.copy(); c2[i, 0] -= h
    check(f"color[{i}]", grads["color"][i, 0],
          (fd_loss(clone(colors=c1), wf) - fd_loss(clone(colors=c2), wf)) / (2 * h))

for f in range(n_frames):
    for ry in range(2):
        for rx in range(2):
            for k in range(5):
                w1 = wf.copy(); w1[f, ry, rx, k] += h
                w2 = wf.copy(); w2[f, ry, rx, k] -= h
                check(f"w[{f},{ry},{rx},{k}]", grads["weights"][f, ry, rx, k],
                      (fd_loss(gset, w1) - fd_loss(gset, w2)) / (2 * h))

print(f"FD check: {count} components, worst rel err {worst:.3e}  "
      f"[{time.perf_counter()-t0:.1f}s]")

# ---- loopback oracle: frames generated by the model itself ----
H = W = 32
base = Image(np.clip(
    0.15 + 0.7 * np.abs(np.sin(np.linspace(0, 6, W))[None, :] * np.cos(np.linspace(0, 5, H))[:, None]),
    0, 1)[:, :, None])
true_set = init_gaussians(base)
n_frames = 3
grid = (2, 2)
true_w = rng.uniform(0.0, 0.15, (n_frames, 4, 5))
frames = []
ridx = region_index_of(true_set.means, W, H, grid)
for f in range(n_frames):
    covs, _ = compose_cov_batch(basis, true_w[f])
    img, _ = render_raw(true_set, W, H, region_index=ridx, region_covs=covs)
    frames.append(Image(img))
sharp_render = rasterize(true_set, W, H)

config = RestoreConfig(max_iters=400, convergence_window=60, tolerance=1e-5,
                       region_grid=grid, n_components=5, sparsity_lambda=1e-5,
                       lr_mean=5e-3)
t0 = time.perf_counter()
result = optimize(frames, basis, config, init_image=base)
dt = time.perf_counter() - t0
final_loss = result.trace[-1][1]
p = psnr(result.restored, sharp_render)
print(f"loopback: final loss={final_loss:.2e}, restored-vs-sharp PSNR={p:.2f} dB, "
      f"iters={result.state.iteration} [{dt:.1f}s]")

"""Scratch finite-difference check of the rasterizer backward pass."""
import numpy as np

from turbsplat.gaussians import GaussianSet, render_with_grads, render_raw

rng = np.random.default_rng(7)
n, W, H, C = 6, 24, 20, 3
gset = GaussianSet(
    means=np.column_stack([rng.uniform(3, W - 3, n), rng.uniform(3, H - 3, n)]),
    scales=rng.uniform(0.8, 3.0, (n, 2)),
    rotations=rng.uniform(0, 2 * np.pi, n),
    opacities=rng.uniform(0.2, 0.9, n),
    colors=rng.uniform(0.1, 0.9, (n, C)),
)
upstream = rng.normal(0, 1, (H, W, C))

n_regions = 2
region_index = rng.integers(0, n_regions, n)
# random PSD region covariances
region_covs = []
for _ in range(n_regions):
    m = rng.normal(0, 1, (2, 2))
    p = m @ m.T + 0.3 * np.eye(2)
    region_covs.append([p[0, 0], p[0, 1], p[1, 1]])
region_covs = np.array(region_covs)


def loss(gs, rc):
    img, _ = render_raw(gs, W, H, region_index=region_index, region_covs=rc)
    return float(np.sum(upstream * img))


_, grads = render_with_grads(gset, W, H, upstream, region_index=region_index,
                             region_covs=region_covs)

h = 1e-5


def clone(**over):
    kw = dict(means=gset.means.copy(), scales=gset.scales.copy(),
              rotations=gset.rotations.copy(), opacities=gset.opacities.copy(),
              colors=gset.colors.copy())
    kw.update(over)
    return GaussianSet(**kw)


worst = 0.0


def check(name, analytic, fd):
    global worst
    denom = max(abs(analytic), abs(fd), 1e-8)
    rel = abs(analytic - fd) / denom
    if abs(analytic) > 1e-7 or abs(fd) > 1e-7:
        worst = max(worst, rel)
        if rel > 1e-4:
            print(f"BAD {name}: analytic={analytic:.8e} fd={fd:.8e} rel={rel:.2e}")


for i in range(n):
    for ax in range(2):
        for sign in (+1, -1):
            pass
        m1 = gset.means.copy(); m1[i, ax] += h
        m2 = gset.means.copy(); m2[i, ax] -= h
        fd = (loss(clone(means=m1), region_covs) - loss(clone(means=m2), region_covs)) / (2 * h)
        check(f"mean[{i},{ax}]", grads.mean[i, ax], fd)
    for ax in range(2):
        s1 = gset.scales.copy(); s1[i, ax] *= np.exp(h)
        s2 = gset.scales.copy(); s2[i, ax] *= np.exp(-h)
        fd = (loss(clone(scales=s1), region_covs) - loss(clone(scales=s2), region_covs)) / (2 * h)
        check(f"logscale[{i},{ax}]", grads.log_scale[i, ax], fd)
    r1 = gset.rotations.copy(); r1[i] += h
    r2 = gset.rotations.copy(); r2[i] -= h
    fd = (loss(clone(rotations=r1), region_covs) - loss(clone(rotations=r2), region_covs)) / (2 * h)
    check(f"rot[{i}]", grads.rotation[i], fd)
    # opacity via logit
    a = gset.opacities[i]
    logit = np.log(a / (1 - a))
    o1 = gset.opacities.copy(); o1[i] = 1 / (1 + np.exp(-(logit + h)))
    o2 = gset.opacities.copy(); o2[i] = 1 / (1 + np.exp(-(logit - h)))
    fd = (loss(clone(opacities=o1), region_covs) - loss(clone(opacities=o2), region_covs)) / (2 * h)
    check(f"logit[{i}]", grads.opacity_logit[i], fd)
    for ch in range(C):
        c1 = gset.colors.copy(); c1[i, ch] += h
        c2 = gset.colors.copy(); c2[i, ch] -= h
        fd = (loss(clone(colors=c1), region_covs) - loss(clone(colors=c2), region_covs)) / (2 * h)
        check(f"color[{i},{ch}]", grads.color[i, ch], fd)

for r in range(n_regions):
    for k in range(3):
        rc1 = region_covs.copy(); rc1[r, k] += h
        rc2 = region_covs.copy(); rc2[r, k] -= h
        fd = (loss(gset, rc1) - loss(gset, rc2)) / (2 * h)
        check(f"W[{r},{k}]", grads.blur_cov[r, k], fd)

print(f"worst relative error: {worst:.3e}")

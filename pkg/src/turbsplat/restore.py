"""Multi-frame restoration by joint gradient descent on the Gaussian scene and
per-frame region blur weights.

The forward model for frame i renders the shared Gaussian set with each
Gaussian's covariance augmented by the composed-kernel covariance of the
region its mean falls in. Matching those renders against the observed
(de-tilted) frames under an L1 cyclic-consistency loss, plus a sparsity
penalty on the weights, drives the set toward the latent sharp image: the
principal kernel is always applied, so the set must stay sharper than the
frames by at least that much.

Optimization is Adam on unconstrained parameterizations (log scales,
opacity logits), with weights projected to >= 0 and colors clipped to [0, 1]
after every step. All reductions run in fixed order so a run is bit
reproducible for a given config.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .basis import (
    KernelBasis,
    RegionWeightField,
    compose_cov_batch,
    compose_cov_batch_backward,
    sparsity_penalty,
)
from .errors import NumericalError, UsageError
from .gaussians import GaussianSet, rasterize, render_raw, render_with_grads
from .imgcore import Image
from .metrics import psnr
from .tilt import FlowConfig, correct_reference, estimate_flow, negate_flow, warp_image

_LOG_SCALE_MIN = np.log(0.05)
_LOG_SCALE_MAX = np.log(100.0)
_ADAM_EPS = 1e-8


@dataclass
class RestoreConfig:
    max_iters: int = 2000
    convergence_window: int = 50
    tolerance: float = 1e-4          # relative best-loss improvement over the window
    lr_mean: float = 1e-2
    lr_log_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_color: float = 1e-2
    lr_weights: float = 1e-2
    sparsity_lambda: float = 1e-3
    region_grid: tuple[int, int] = (16, 16)  # (gw, gh)
    n_components: int = 100
    seed: int = 0
    norm: str = "l1"                 # "l1" | "l2"
    optimize_color: bool = True
    positivity: bool = True
    frame_batch: int = 0             # frames per iteration; 0 = all
    weight_warmup: int = 50          # weight-only iterations before joint descent
    lr_decay: str = "none"           # "none" | "cosine" (anneal to 5% by max_iters)
    init_scale: float = 0.7
    init_opacity: float = 0.9

    def __post_init__(self) -> None:
        lrs = (self.lr_mean, self.lr_log_scale, self.lr_rotation,
               self.lr_opacity, self.lr_color, self.lr_weights)
        if any(lr <= 0 for lr in lrs):
            raise UsageError("all learning rates must be positive")
        if self.tolerance <= 0 or self.max_iters < 1 or self.convergence_window < 1:
            raise UsageError("invalid stopping configuration")
        if self.sparsity_lambda < 0:
            raise UsageError("sparsity_lambda must be non-negative")
        if self.weight_warmup < 0:
            raise UsageError("weight_warmup must be non-negative")
        if self.norm not in ("l1", "l2"):
            raise UsageError(f"norm must be 'l1' or 'l2', got {self.norm!r}")
        if self.lr_decay not in ("none", "cosine"):
            raise UsageError(f"lr_decay must be 'none' or 'cosine', got {self.lr_decay!r}")
        gw, gh = self.region_grid
        if gw < 1 or gh < 1:
            raise UsageError(f"invalid region grid {self.region_grid}")


@dataclass
class RestoreState:
    gaussians: GaussianSet
    weights: RegionWeightField
    iteration: int = 0
    loss_history: list = field(default_factory=list)


def init_gaussians(base: Image, scale: float = 0.7, opacity: float = 0.9) -> GaussianSet:
    """One Gaussian per pixel, centered on it, colored by it."""
    h, w = base.height, base.width
    ys, xs = np.divmod(np.arange(h * w), w)
    return GaussianSet(
        means=np.column_stack([xs.astype(np.float64), ys.astype(np.float64)]),
        scales=np.full((h * w, 2), scale),
        rotations=np.zeros(h * w),
        opacities=np.full(h * w, opacity),
        colors=base.data.reshape(h * w, base.channels).astype(np.float64),
    )


def region_index_of(means: np.ndarray, width: int, height: int,
                    region_grid: tuple[int, int]) -> np.ndarray:
    """Row-major region id of the cell containing each mean (out-of-image means clamp)."""
    gw, gh = region_grid
    rx = np.clip((means[:, 0] * gw / width).astype(np.int64), 0, gw - 1)
    ry = np.clip((means[:, 1] * gh / height).astype(np.int64), 0, gh - 1)
    return ry * gw + rx


def forward_blur(gset: GaussianSet, frame_weights: np.ndarray, basis: KernelBasis,
                 width: int, height: int, region_grid: tuple[int, int]) -> Image:
    """Render the set blurred by each region's composed kernel covariance.

    frame_weights: (gh, gw, K) non-negative weights for one frame.
    """
    gw, gh = region_grid
    w = np.asarray(frame_weights, dtype=np.float64)
    if w.shape[:2] != (gh, gw):
        raise UsageError(f"weights shape {w.shape} does not match grid {region_grid}")
    covs, _ = compose_cov_batch(basis, w.reshape(gh * gw, -1))
    ridx = region_index_of(gset.means, width, height, region_grid)
    img, _ = render_raw(gset, width, height, region_index=ridx, region_covs=covs)
    return Image(img)


def _data_norm(residual: np.ndarray, norm: str):
    """Mean per-sample penalty and its derivative w.r.t. the prediction."""
    n = residual.size
    if norm == "l1":
        return float(np.abs(residual).mean()), np.sign(residual) / n
    return float((residual ** 2).mean()), 2.0 * residual / n


def cycle_loss(frames: Sequence[Image], state: RestoreState, basis: KernelBasis,
               config: RestoreConfig) -> float:
    """(1/N) sum_i ||forward_blur(set, w_i) - frame_i|| + sparsity penalty.

    Evaluated in float64 end to end (no intermediate quantization) so central
    finite differences on the loss resolve gradients to ~1e-4 relative.
    """
    if len(frames) != state.weights.n_frames:
        raise UsageError(
            f"{len(frames)} frames vs weights for {state.weights.n_frames}"
        )
    w, h = frames[0].width, frames[0].height
    gw, gh = config.region_grid
    basis = basis.truncated(min(config.n_components, basis.n_components))
    ridx = region_index_of(state.gaussians.means, w, h, config.region_grid)
    total = 0.0
    for i, frame in enumerate(frames):
        if (frame.height, frame.width) != (h, w):
            raise UsageError("frames must share dimensions")
        covs, _ = compose_cov_batch(
            basis, state.weights.weights[i].reshape(gw * gh, -1))
        pred, _ = render_raw(state.gaussians, w, h,
                             region_index=ridx, region_covs=covs)
        value, _ = _data_norm(pred - frame.data.astype(np.float64), config.norm)
        total += value
    return total / len(frames) + sparsity_penalty(state.weights, config.sparsity_lambda)


def _loss_and_grads(gset: GaussianSet, weights: np.ndarray, frames64, basis: KernelBasis,
                    config: RestoreConfig, rows, lam_eff: float):
    """Batch loss and its gradients on the unconstrained parameterization.

    weights: (n_frames, n_regions, K). Returns (loss, per-parameter grads,
    per-frame weight grads). With rows covering every frame and
    lam_eff = sparsity_lambda this evaluates exactly cycle_loss.
    """
    h, w = frames64[0].shape[:2]
    n = len(gset)
    n_ch = gset.channels
    batch = len(rows)
    ridx = region_index_of(gset.means, w, h, config.region_grid)
    g_mean = np.zeros((n, 2))
    g_scale = np.zeros((n, 2))
    g_rot = np.zeros(n)
    g_logit = np.zeros(n)
    g_color = np.zeros((n, n_ch))
    g_weights = np.zeros_like(weights)
    loss = 0.0
    for r in rows:
        covs, cache = compose_cov_batch(basis, weights[r])
        img, trans = render_raw(gset, w, h, region_index=ridx, region_covs=covs)
        value, d_pred = _data_norm(img - frames64[r], config.norm)
        loss += value / batch
        _, grads = render_with_grads(gset, w, h, d_pred,
                                     region_index=ridx, region_covs=covs,
                                     forward_state=(img, trans))
        g_mean += grads.mean / batch
        g_scale += grads.log_scale / batch
        g_rot += grads.rotation / batch
        g_logit += grads.opacity_logit / batch
        g_color += grads.color / batch
        d_w = compose_cov_batch_backward(cache, grads.blur_cov)
        g_weights[r] = d_w / batch + lam_eff * np.sign(weights[r])
    loss += lam_eff * float(np.abs(weights[rows]).sum())
    return loss, (g_mean, g_scale, g_rot, g_logit, g_color), g_weights


def cycle_loss_gradients(frames: Sequence[Image], state: RestoreState,
                         basis: KernelBasis, config: RestoreConfig):
    """Analytic gradients of cycle_loss at the given state.

    Returns (loss, dict) with gradients keyed mean / log_scale / rotation /
    opacity_logit / color / weights, all on the unconstrained parameterization.
    """
    basis = basis.truncated(min(config.n_components, basis.n_components))
    frames64 = [f.data.astype(np.float64) for f in frames]
    gw, gh = config.region_grid
    weights = state.weights.weights.reshape(len(frames), gw * gh, -1)
    rows = list(range(len(frames)))
    loss, gparams, g_weights = _loss_and_grads(
        state.gaussians, weights, frames64, basis, config, rows,
        config.sparsity_lambda,
    )
    g_mean, g_scale, g_rot, g_logit, g_color = gparams
    return loss, {
        "mean": g_mean,
        "log_scale": g_scale,
        "rotation": g_rot,
        "opacity_logit": g_logit,
        "color": g_color,
        "weights": g_weights.reshape(state.weights.weights.shape),
    }


class _Adam:
    def __init__(self, shape, lr):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.lr = lr

    def step(self, x, grad, scale=1.0):
        self.t += 1
        self.m = 0.9 * self.m + 0.1 * grad
        self.v = 0.999 * self.v + 0.001 * grad * grad
        m_hat = self.m / (1.0 - 0.9 ** self.t)
        v_hat = self.v / (1.0 - 0.999 ** self.t)
        return x - scale * self.lr * m_hat / (np.sqrt(v_hat) + _ADAM_EPS)


class _FrameAdam:
    """Adam with independent timestep per frame row (for batched frame visits)."""

    def __init__(self, shape, lr):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = np.zeros(shape[0], dtype=np.int64)
        self.lr = lr

    def step(self, x, grad, rows, scale=1.0):
        out = x.copy()
        for r in rows:
            self.t[r] += 1
            self.m[r] = 0.9 * self.m[r] + 0.1 * grad[r]
            self.v[r] = 0.999 * self.v[r] + 0.001 * grad[r] * grad[r]
            m_hat = self.m[r] / (1.0 - 0.9 ** self.t[r])
            v_hat = self.v[r] / (1.0 - 0.999 ** self.t[r])
            out[r] = x[r] - scale * self.lr * m_hat / (np.sqrt(v_hat) + _ADAM_EPS)
        return out


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 1e-6, 1.0 - 1e-6)
    return np.log(p / (1.0 - p))


@dataclass
class OptimizeResult:
    restored: Image
    state: RestoreState
    trace: list                     # rows (iteration, loss, psnr or None)
    best_history: list = field(default_factory=list)  # running min of the loss


def optimize(frames: Sequence[Image], basis: KernelBasis, config: RestoreConfig,
             init_image: Image | None = None, clean: Image | None = None,
             init_weights: np.ndarray | None = None) -> OptimizeResult:
    """Joint descent on Gaussian parameters and per-frame region weights.

    frames must already share a common (tilt-corrected) geometry. The
    restored image is the plain rasterization of the final set.
    """
    if not frames:
        raise UsageError("need at least one frame")
    h, w, n_ch = frames[0].height, frames[0].width, frames[0].channels
    for f in frames:
        if (f.height, f.width, f.channels) != (h, w, n_ch):
            raise UsageError("frames must share dimensions and channel count")
    basis = basis.truncated(min(config.n_components, basis.n_components))
    gw, gh = config.region_grid
    n_frames = len(frames)
    n_regions = gw * gh
    n_comp = basis.n_components
    frames64 = [f.data.astype(np.float64) for f in frames]

    base = init_image if init_image is not None else frames[0]
    gset = init_gaussians(base, config.init_scale, config.init_opacity)
    n = len(gset)
    means = gset.means.copy()
    log_scales = np.log(gset.scales)
    rotations = gset.rotations.copy()
    logits = _logit(gset.opacities)
    colors = gset.colors.copy()
    if init_weights is not None:
        weights = np.asarray(init_weights, dtype=np.float64).reshape(
            n_frames, n_regions, n_comp).copy()
    else:
        weights = np.zeros((n_frames, n_regions, n_comp))

    opt_mean = _Adam((n, 2), config.lr_mean)
    opt_scale = _Adam((n, 2), config.lr_log_scale)
    opt_rot = _Adam((n,), config.lr_rotation)
    opt_logit = _Adam((n,), config.lr_opacity)
    opt_color = _Adam((n, n_ch), config.lr_color)
    opt_w = _FrameAdam((n_frames, n_regions, n_comp), config.lr_weights)

    batch = config.frame_batch if 0 < config.frame_batch < n_frames else n_frames
    lam_eff = config.sparsity_lambda * n_frames / batch

    def materialize() -> GaussianSet:
        return GaussianSet(
            means=means, scales=np.exp(log_scales), rotations=rotations,
            opacities=1.0 / (1.0 + np.exp(-logits)), colors=np.clip(colors, 0.0, 1.0),
        )

    trace: list = []
    best_series: list[float] = []
    # batch losses from different frame subsets are not comparable, so the
    # stopping statistic is the best mean loss over full passes through the data
    cycle = (n_frames + batch - 1) // batch
    epoch_hist: list[tuple[int, float]] = []  # (iteration, best epoch mean so far)
    epoch_acc = 0.0
    best_epoch = np.inf
    stop_at = config.max_iters
    for it in range(config.max_iters):
        if batch == n_frames:
            rows = list(range(n_frames))
        else:
            rows = [(it * batch + j) % n_frames for j in range(batch)]
        warmup = it < config.weight_warmup
        cur = materialize()
        loss, gparams, g_weights = _loss_and_grads(
            cur, weights, frames64, basis, config, rows, lam_eff,
        )
        g_mean, g_scale, g_rot, g_logit, g_color = gparams
        if not np.isfinite(loss):
            raise NumericalError(
                f"loss diverged at iteration {it}; try smaller learning rates"
            )

        if config.lr_decay == "cosine":
            lr_scale = 0.05 + 0.95 * 0.5 * (1.0 + np.cos(np.pi * it / config.max_iters))
        else:
            lr_scale = 1.0
        if not warmup:
            means = opt_mean.step(means, g_mean, lr_scale)
            log_scales = np.clip(opt_scale.step(log_scales, g_scale, lr_scale),
                                 _LOG_SCALE_MIN, _LOG_SCALE_MAX)
            rotations = opt_rot.step(rotations, g_rot, lr_scale)
            logits = np.clip(opt_logit.step(logits, g_logit, lr_scale), -9.0, 9.0)
            if config.optimize_color:
                colors = np.clip(opt_color.step(colors, g_color, lr_scale), 0.0, 1.0)
        if n_comp:
            weights = opt_w.step(weights, g_weights, rows, lr_scale)
            if config.positivity:
                weights = np.maximum(weights, 0.0)

        best_series.append(loss if not best_series else min(best_series[-1], loss))
        if clean is not None:
            cur_psnr = psnr(Image(render_raw(materialize(), w, h,
                                             flux_compensate=False)[0]), clean)
        else:
            cur_psnr = None
        trace.append((it, loss, cur_psnr))

        epoch_acc += loss
        if (it + 1) % cycle == 0:
            best_epoch = min(best_epoch, epoch_acc / cycle)
            epoch_acc = 0.0
            epoch_hist.append((it, best_epoch))
            win = config.convergence_window
            if it >= config.weight_warmup + win:
                old = None
                for j, b in reversed(epoch_hist):
                    if j <= it - win:
                        old = b
                        break
                if old is not None and (old - best_epoch) / max(old, 1e-12) < config.tolerance:
                    stop_at = it + 1
                    break

    final = materialize()
    restored = rasterize(final, w, h, n_ch)
    wfield = RegionWeightField(
        gw=gw, gh=gh,
        weights=weights.reshape(n_frames, gh, gw, n_comp),
        validate=config.positivity,
    )
    state = RestoreState(gaussians=final, weights=wfield, iteration=stop_at,
                         loss_history=[row[1] for row in trace])
    return OptimizeResult(restored=restored, state=state, trace=trace,
                          best_history=best_series)


@dataclass
class MitigationResult:
    restored: Image
    corrected: Image
    state: RestoreState
    trace: list
    best_history: list = field(default_factory=list)


def mitigate(frames: Sequence[Image], basis: KernelBasis, config: RestoreConfig,
             flow_config: FlowConfig | None = None, ref_index: int = 0,
             clean: Image | None = None) -> MitigationResult:
    """Full pipeline: correct the reference, de-tilt every frame against it,
    then run the joint optimization."""
    if not frames:
        raise UsageError("need at least one frame")
    flow_cfg = flow_config or FlowConfig()
    if len(frames) == 1:
        corrected = frames[0]
        aligned = [frames[0]]
    else:
        corrected, _ = correct_reference(frames, ref_index, flow_cfg)
        aligned = []
        for frame in frames:
            flow = estimate_flow(corrected, frame, flow_cfg.levels,
                                 flow_cfg.iterations, flow_cfg.smoothness)
            aligned.append(warp_image(frame, negate_flow(flow)))
    result = optimize(aligned, basis, config, init_image=corrected, clean=clean)
    return MitigationResult(restored=result.restored, corrected=corrected,
                            state=result.state, trace=result.trace,
                            best_history=result.best_history)

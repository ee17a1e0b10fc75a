"""Multi-frame tilt correction.

Turbulence tilt is zero-mean over time, so averaging the per-frame optical
flow fields estimated against a reference recovers the reference's own
distortion; sampling the reference along that averaged field yields a
tilt-free image.

Flow convention used throughout the package: estimate_flow(a, b) returns F
such that b(p) ~= a(p + F(p)), and warp_image(img, flow) samples
img(p + flow(p)) bilinearly with coordinates clamped to the image rectangle.
This composes directly: warping the reference by the averaged field yields
the corrected image.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import cv2
import numpy as np
from scipy.ndimage import convolve

from .errors import UsageError
from .imgcore import FlowField, Image

# 8-neighbour average used by the Horn-Schunck update
_HS_AVG = np.array([
    [1 / 12, 1 / 6, 1 / 12],
    [1 / 6, 0.0, 1 / 6],
    [1 / 12, 1 / 6, 1 / 12],
])


@dataclass
class FlowConfig:
    levels: int = 4
    iterations: int = 100
    smoothness: float = 0.5  # alpha on unit-interval intensities

    def __post_init__(self) -> None:
        if self.levels < 1 or self.iterations < 1 or self.smoothness <= 0:
            raise UsageError(f"invalid flow configuration {self}")


def _bilinear_sample(plane: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear gather with clamp-to-edge coordinates."""
    h, w = plane.shape
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    top = plane[y0, x0] * (1.0 - fx) + plane[y0, x1] * fx
    bot = plane[y1, x0] * (1.0 - fx) + plane[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def warp_image(img: Image, flow: FlowField) -> Image:
    """img sampled at p + flow(p); zero flow reproduces img bit-exactly."""
    if (flow.height, flow.width) != (img.height, img.width):
        raise UsageError(
            f"flow {flow.width}x{flow.height} does not match image {img.width}x{img.height}"
        )
    ys, xs = np.mgrid[0:img.height, 0:img.width].astype(np.float64)
    sx = xs + flow.dx
    sy = ys + flow.dy
    out = np.empty(img.data.shape, dtype=np.float64)
    for ch in range(img.channels):
        out[:, :, ch] = _bilinear_sample(img.data[:, :, ch].astype(np.float64), sx, sy)
    return Image(out)


def _warp_plane(plane: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return _bilinear_sample(plane, xs + u, ys + v)


def _hs_level(i1: np.ndarray, i2: np.ndarray, u: np.ndarray, v: np.ndarray,
              iterations: int, alpha: float):
    """Incremental Horn-Schunck: solve i1(p) ~= i2(p + w) for the residual of w."""
    i2w = _warp_plane(i2, u, v)
    gy1, gx1 = np.gradient(i1)
    gy2, gx2 = np.gradient(i2w)
    ix = 0.5 * (gx1 + gx2)
    iy = 0.5 * (gy1 + gy2)
    it = i2w - i1
    denom = alpha * alpha + ix * ix + iy * iy
    du = np.zeros_like(u)
    dv = np.zeros_like(v)
    for _ in range(iterations):
        du_bar = convolve(du, _HS_AVG, mode="nearest")
        dv_bar = convolve(dv, _HS_AVG, mode="nearest")
        t = (ix * du_bar + iy * dv_bar + it) / denom
        du = du_bar - ix * t
        dv = dv_bar - iy * t
    return u + du, v + dv


def estimate_flow(reference: Image, target: Image,
                  levels: int = 4, iterations: int = 100,
                  smoothness: float = 0.5) -> FlowField:
    """Coarse-to-fine Horn-Schunck estimate of F with target(p) ~= reference(p + F(p)).

    Flat (zero-variance) inputs yield a zero field flagged unreliable.
    """
    if (reference.height, reference.width) != (target.height, target.width):
        raise UsageError("reference and target must have equal dimensions")
    FlowConfig(levels=levels, iterations=iterations, smoothness=smoothness)
    ref = reference.gray()
    tgt = target.gray()
    if ref.std() < 1e-6 or tgt.std() < 1e-6:
        zeros = np.zeros_like(ref, dtype=np.float32)
        return FlowField(zeros, zeros.copy(), unreliable=True)

    # pyramid of (i1, i2) = (target, reference): classic HS solves
    # i1(p) ~= i2(p + w), which is exactly the convention above
    pyr = [(tgt, ref)]
    for _ in range(levels - 1):
        t_prev, r_prev = pyr[-1]
        if min(t_prev.shape) < 16:
            break
        size = (t_prev.shape[1] // 2, t_prev.shape[0] // 2)
        pyr.append((
            cv2.resize(t_prev, size, interpolation=cv2.INTER_AREA),
            cv2.resize(r_prev, size, interpolation=cv2.INTER_AREA),
        ))

    u = np.zeros_like(pyr[-1][0])
    v = np.zeros_like(pyr[-1][0])
    for lvl in range(len(pyr) - 1, -1, -1):
        i1, i2 = pyr[lvl]
        if u.shape != i1.shape:
            size = (i1.shape[1], i1.shape[0])
            u = cv2.resize(u, size, interpolation=cv2.INTER_LINEAR) * 2.0
            v = cv2.resize(v, size, interpolation=cv2.INTER_LINEAR) * 2.0
        u, v = _hs_level(i1, i2, u, v, iterations, smoothness)
    return FlowField(u.astype(np.float32), v.astype(np.float32))


def average_flows(flows: Sequence[FlowField]) -> FlowField:
    """Per-pixel arithmetic mean, reduced in list order."""
    if not flows:
        raise UsageError("cannot average an empty list of flows")
    shape = (flows[0].height, flows[0].width)
    for f in flows:
        if (f.height, f.width) != shape:
            raise UsageError("flow dimensions differ")
    dx = np.zeros(shape, dtype=np.float64)
    dy = np.zeros(shape, dtype=np.float64)
    for f in flows:
        dx += f.dx
        dy += f.dy
    n = float(len(flows))
    return FlowField((dx / n).astype(np.float32), (dy / n).astype(np.float32))


def negate_flow(flow: FlowField) -> FlowField:
    return FlowField(-flow.dx, -flow.dy, unreliable=flow.unreliable)


def temporal_median(frames: Sequence[Image]) -> Image:
    stack = np.stack([f.data for f in frames])
    return Image(np.median(stack, axis=0))


def correct_reference(frames: Sequence[Image], ref_index: int = 0,
                      config: FlowConfig | None = None,
                      ref_mode: str = "index") -> tuple[Image, FlowField]:
    """Estimate all frame->reference flows, average them (self-flow included),
    and warp the reference along the mean field. Returns (corrected, applied flow)."""
    if len(frames) < 2:
        raise UsageError(f"need at least 2 frames, got {len(frames)}")
    if not 0 <= ref_index < len(frames):
        raise UsageError(f"ref_index {ref_index} out of range for {len(frames)} frames")
    cfg = config or FlowConfig()
    if ref_mode == "index":
        reference = frames[ref_index]
    elif ref_mode == "median":
        reference = temporal_median(frames)
    else:
        raise UsageError(f"ref_mode must be 'index' or 'median', got {ref_mode!r}")
    flows = [
        estimate_flow(reference, frame, cfg.levels, cfg.iterations, cfg.smoothness)
        for frame in frames
    ]
    mean_flow = average_flows(flows)
    return warp_image(reference, mean_flow), mean_flow

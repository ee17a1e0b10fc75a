"""turbsplat: atmospheric-turbulence simulation and multi-frame mitigation
built on a differentiable 2D Gaussian-splat renderer."""

from .imgcore import FlowField, Image, read_flow, read_image, write_flow, write_image
from .gaussians import (
    Cov2,
    Gaussian2D,
    GaussianSet,
    blur_covariance,
    build_covariance,
    eval_gaussian,
    rasterize,
    rasterize_with_grads,
)

__version__ = "0.1.0"

__all__ = [
    "FlowField",
    "Image",
    "read_flow",
    "read_image",
    "write_flow",
    "write_image",
    "Cov2",
    "Gaussian2D",
    "GaussianSet",
    "blur_covariance",
    "build_covariance",
    "eval_gaussian",
    "rasterize",
    "rasterize_with_grads",
    "__version__",
]

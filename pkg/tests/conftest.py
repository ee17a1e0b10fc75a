import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from turbsplat.imgcore import Image


def make_scene(height, width, seed=0, channels=1):
    """Deterministic band-limited test scene: gradient + blobs + bars.

    Smoothed so it is representable by the splat renderer and warps cleanly,
    but with enough edge content for flow estimation and sharpness metrics.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    img = 0.25 + 0.3 * (xx / width) + 0.15 * np.sin(yy / height * 4.1)
    for _ in range(12):
        cx, cy = rng.uniform(0.1, 0.9) * width, rng.uniform(0.1, 0.9) * height
        r = rng.uniform(0.03, 0.12) * min(height, width)
        img += rng.uniform(-0.45, 0.45) * np.exp(
            -((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r * r))
    for _ in range(6):
        x0, y0 = rng.uniform(0.1, 0.7) * width, rng.uniform(0.1, 0.7) * height
        bw, bh = rng.uniform(0.05, 0.2) * width, rng.uniform(0.02, 0.1) * height
        img += rng.uniform(-0.35, 0.35) * (
            (xx > x0) & (xx < x0 + bw) & (yy > y0) & (yy < y0 + bh))
    img = gaussian_filter(img, 1.2)
    lo, hi = img.min(), img.max()
    norm = (img - lo) / (hi - lo) * 0.9 + 0.05
    if channels == 3:
        planes = [norm, np.roll(norm, height // 3, axis=0), 1.0 - norm]
        return Image(np.stack(planes, axis=2))
    return Image(norm[:, :, None])


def make_noise_image(height, width, seed=0, sigma=1.5):
    """Smoothed-noise texture, useful for flow estimation tests."""
    rng = np.random.default_rng(seed)
    base = gaussian_filter(rng.uniform(0, 1, (height, width)), sigma)
    lo, hi = base.min(), base.max()
    return Image(((base - lo) / (hi - lo) * 0.85 + 0.05)[:, :, None])


@pytest.fixture(scope="session")
def scene_64():
    return make_scene(64, 64, seed=3)


@pytest.fixture(scope="session")
def scene_128():
    return make_scene(128, 128, seed=5)

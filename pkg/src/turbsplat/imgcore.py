"""Pixel and flow containers plus bit-exact file IO.

Two on-disk families:

* PNG, 8- or 16-bit, 1 or 3 channels (lossy by quantization).
* Raw-float: little-endian float32 planes (channel-planar, row-major)
  with a JSON sidecar ``<file>.json`` holding ``{width, height, channels}``.
  ``.f32`` carries images, ``.flo32`` carries flow fields (dx plane, dy plane).
  Raw-float round-trips are bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import FileFormatError, UsageError

# ITU-R BT.601 luma weights
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


@dataclass
class Image:
    """H x W x C grid of float32 intensities in [0, 1].

    ``data`` is always 3-axis (height, width, channels) even for grayscale.
    Construction clamps to [0, 1] and rejects non-finite samples.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise UsageError(f"image data must be HxW or HxWxC, got shape {arr.shape}")
        if arr.shape[2] not in (1, 3):
            raise UsageError(f"channel count must be 1 or 3, got {arr.shape[2]}")
        if not np.all(np.isfinite(arr)):
            raise UsageError("image data contains non-finite samples")
        self.data = np.clip(arr, 0.0, 1.0).astype(np.float32)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def gray(self) -> np.ndarray:
        """Single-plane float64 view: BT.601 luma for RGB, the plane itself for mono."""
        if self.channels == 1:
            return self.data[:, :, 0].astype(np.float64)
        return self.data.astype(np.float64) @ _LUMA

    def copy(self) -> "Image":
        return Image(self.data.copy())


@dataclass
class FlowField:
    """Per-pixel (dx, dy) displacement in pixels, float32, finite."""

    dx: np.ndarray
    dy: np.ndarray
    unreliable: bool = field(default=False, compare=False)

    def __post_init__(self) -> None:
        dx = np.asarray(self.dx, dtype=np.float32)
        dy = np.asarray(self.dy, dtype=np.float32)
        if dx.ndim != 2 or dx.shape != dy.shape:
            raise UsageError(f"flow planes must be 2D and equal shape, got {dx.shape} vs {dy.shape}")
        if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dy))):
            raise UsageError("flow field contains non-finite components")
        self.dx, self.dy = dx, dy

    @property
    def height(self) -> int:
        return self.dx.shape[0]

    @property
    def width(self) -> int:
        return self.dx.shape[1]


def _sidecar(path: Path) -> Path:
    return Path(str(path) + ".json")


def _write_raw(path: Path, planes: np.ndarray) -> None:
    """planes: (C, H, W) float32, written plane after plane, row-major, little-endian."""
    c, h, w = planes.shape
    payload = planes.astype("<f4").tobytes(order="C")
    try:
        path.write_bytes(payload)
        _sidecar(path).write_text(
            json.dumps({"width": w, "height": h, "channels": c}) + "\n"
        )
    except OSError as exc:
        raise FileFormatError(f"cannot write {path}: {exc}") from exc


def _read_raw(path: Path) -> np.ndarray:
    """Returns (C, H, W) float32 from a raw-float file plus sidecar."""
    side = _sidecar(path)
    if not path.exists() or not side.exists():
        raise FileFormatError(f"missing raw-float file or sidecar for {path}")
    try:
        header = json.loads(side.read_text())
        w, h, c = int(header["width"]), int(header["height"]), int(header["channels"])
    except (OSError, ValueError, KeyError) as exc:
        raise FileFormatError(f"bad sidecar {side}: {exc}") from exc
    payload = path.read_bytes()
    expected = w * h * c * 4
    if len(payload) != expected:
        raise FileFormatError(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(c, h, w).copy()


def read_image(path: str | Path) -> Image:
    """Read a PNG (8/16-bit, 1 or 3 channels) or raw-float .f32 image, scaled to [0, 1]."""
    path = Path(path)
    if path.suffix == ".f32":
        planes = _read_raw(path)
        if planes.shape[0] not in (1, 3):
            raise FileFormatError(f"{path}: channel count {planes.shape[0]} not 1 or 3")
        return Image(np.moveaxis(planes, 0, 2))
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FileFormatError(f"cannot read image file {path}")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise FileFormatError(f"{path}: unsupported sample type {raw.dtype}")
    if raw.ndim == 2:
        data = raw[:, :, None].astype(np.float32) / scale
    elif raw.ndim == 3 and raw.shape[2] == 3:
        data = raw[:, :, ::-1].astype(np.float32) / scale  # BGR -> RGB
    else:
        raise FileFormatError(f"{path}: unsupported channel layout {raw.shape}")
    return Image(data)


def write_image(img: Image, path: str | Path, bit_depth: int = 8) -> None:
    """Write PNG (8- or 16-bit, round-half-away-from-zero) or lossless raw-float .f32."""
    path = Path(path)
    if path.suffix == ".f32":
        _write_raw(path, np.moveaxis(img.data, 2, 0))
        return
    if bit_depth == 8:
        quant = np.floor(img.data.astype(np.float64) * 255.0 + 0.5).astype(np.uint8)
    elif bit_depth == 16:
        quant = np.floor(img.data.astype(np.float64) * 65535.0 + 0.5).astype(np.uint16)
    else:
        raise UsageError(f"bit_depth must be 8 or 16, got {bit_depth}")
    if img.channels == 3:
        quant = quant[:, :, ::-1]  # RGB -> BGR
    else:
        quant = quant[:, :, 0]
    ok = cv2.imwrite(str(path), quant)
    if not ok:
        raise FileFormatError(f"cannot write image file {path}")


def read_flow(path: str | Path) -> FlowField:
    """Read a .flo32 flow field (dx plane then dy plane)."""
    planes = _read_raw(Path(path))
    if planes.shape[0] != 2:
        raise FileFormatError(f"{path}: flow files need 2 channels, got {planes.shape[0]}")
    return FlowField(planes[0], planes[1])


def write_flow(flow: FlowField, path: str | Path) -> None:
    """Write a .flo32 flow field losslessly."""
    _write_raw(Path(path), np.stack([flow.dx, flow.dy]))


def to_grayscale(img: Image) -> Image:
    """BT.601 luma conversion; mono images pass through unchanged."""
    if img.channels == 1:
        return img.copy()
    return Image(img.gray().astype(np.float32)[:, :, None])

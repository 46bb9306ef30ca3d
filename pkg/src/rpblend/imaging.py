"""Image, mask and region types plus the raster I/O and compositing helpers.

Pixel values live in ``[0, 1]`` as float64 while in memory.  Conversion to
8-bit happens only when reading or writing files.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError

from .errors import (
    DecodeError,
    EmptyMaskError,
    ImageIOError,
    OutOfBoundsError,
    ShapeMismatchError,
)

# BT.601 luma weights for RGB-packed masks.
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def _frozen(arr: np.ndarray) -> np.ndarray:
    if arr.flags.writeable:
        arr = arr.copy()
        arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Image:
    """An ``H x W x C`` raster with ``C`` in {1, 3} and values in [0, 1]."""

    data: np.ndarray
    source_depth: int = 8

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ShapeMismatchError(f"expected HxWx1 or HxWx3 data, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeMismatchError("image must have at least one pixel")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        object.__setattr__(self, "data", _frozen(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.data, other.data))

    __hash__ = None

    def to_rgb(self) -> "Image":
        if self.channels == 3:
            return self
        return Image(np.repeat(self.data, 3, axis=2), self.source_depth)

    def to_uint8(self) -> np.ndarray:
        return to_uint8(self.data)

    @classmethod
    def from_uint8(cls, arr) -> "Image":
        arr = np.asarray(arr)
        if arr.dtype != np.uint8:
            raise DecodeError(f"expected uint8 data, got {arr.dtype}")
        return cls(arr.astype(np.float64) / 255.0, source_depth=8)


@dataclass(frozen=True, eq=False)
class Mask:
    """Strictly binary ``H x W`` foreground mask (True = foreground)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 3 and arr.shape[2] == 1:
            arr = arr[:, :, 0]
        if arr.ndim != 2:
            raise ShapeMismatchError(f"mask must be 2-D, got shape {arr.shape}")
        if arr.dtype != np.bool_:
            if not np.all((arr == 0) | (arr == 1)):
                raise ValueError("mask values must be 0 or 1; threshold soft masks first")
            arr = arr.astype(bool)
        object.__setattr__(self, "data", _frozen(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return bool(np.array_equal(self.data, other.data))

    __hash__ = None

    def invert(self) -> "Mask":
        return Mask(~self.data)

    def count(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True)
class Region:
    """Axis-aligned pixel rectangle; ``top``/``left`` are inclusive."""

    top: int
    left: int
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError(f"region must be at least 1x1, got {self.height}x{self.width}")

    @property
    def bottom(self) -> int:
        return self.top + self.height

    @property
    def right(self) -> int:
        return self.left + self.width

    @property
    def slices(self):
        return slice(self.top, self.bottom), slice(self.left, self.right)

    @property
    def area(self) -> int:
        return self.height * self.width

    def fits_in(self, height: int, width: int) -> bool:
        return self.top >= 0 and self.left >= 0 and self.bottom <= height and self.right <= width

    def has_ring_in(self, height: int, width: int) -> bool:
        """True if a one-pixel ring around the region lies inside ``height x width``."""
        return self.top >= 1 and self.left >= 1 and self.bottom <= height - 1 and self.right <= width - 1

    def shifted(self, dy: int, dx: int) -> "Region":
        return Region(self.top + dy, self.left + dx, self.height, self.width)

    def moved_to(self, top: int, left: int) -> "Region":
        return Region(top, left, self.height, self.width)

    def as_dict(self) -> dict:
        return {"top": self.top, "left": self.left, "height": self.height, "width": self.width}


def to_uint8(values: np.ndarray) -> np.ndarray:
    """Quantize [0, 1] floats to 8-bit with round-half-up and clamping."""
    return np.clip(np.floor(np.asarray(values) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def _open_raster(path):
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            im.load()
            return im.copy(), im.format
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        raise ImageIOError(f"cannot read {path}: {exc}") from exc
    except (UnidentifiedImageError, SyntaxError, OSError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc


def load_image(path) -> Image:
    """Read an 8-bit grayscale or RGB PNG/JPEG into an :class:`Image`."""
    im, fmt = _open_raster(path)
    if fmt not in ("PNG", "JPEG"):
        raise DecodeError(f"{path}: unsupported format {fmt}")
    if im.mode == "P":
        im = im.convert("RGB")
    if im.mode not in ("L", "RGB"):
        raise DecodeError(f"{path}: unsupported mode {im.mode} (8-bit L or RGB only)")
    return Image.from_uint8(np.asarray(im))


def load_mask(path, threshold: float = 0.5) -> Mask:
    """Read a mask file and binarize it at ``threshold`` (fraction of 255).

    RGB-packed masks are reduced to luminance with BT.601 weights first.
    """
    im, _ = _open_raster(path)
    if im.mode == "1":
        im = im.convert("L")
    elif im.mode == "P":
        im = im.convert("RGB")
    if im.mode == "L":
        lum = np.asarray(im).astype(np.float64)
    elif im.mode == "RGB":
        lum = np.asarray(im).astype(np.float64) @ LUMA_WEIGHTS
    else:
        raise DecodeError(f"{path}: unsupported mask mode {im.mode}")
    return Mask(lum / 255.0 >= threshold)


def save_image(image: Image, path) -> Path:
    """Write ``image`` as a lossless 8-bit PNG."""
    path = Path(path)
    arr = image.to_uint8()
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    try:
        PILImage.fromarray(arr).save(path, format="PNG")
    except OSError as exc:
        raise ImageIOError(f"cannot write {path}: {exc}") from exc
    return path


def save_mask(mask: Mask, path) -> Path:
    path = Path(path)
    try:
        PILImage.fromarray(mask.data.astype(np.uint8) * 255).save(path, format="PNG")
    except OSError as exc:
        raise ImageIOError(f"cannot write {path}: {exc}") from exc
    return path


def composite(foreground: Image, background: Image, mask: Mask) -> Image:
    """Per-pixel select: foreground where the mask is set, background elsewhere."""
    if foreground.shape != background.shape:
        raise ShapeMismatchError(f"foreground {foreground.shape} vs background {background.shape}")
    if mask.shape != foreground.shape[:2]:
        raise ShapeMismatchError(f"mask {mask.shape} vs image {foreground.shape[:2]}")
    out = np.where(mask.data[:, :, None], foreground.data, background.data)
    return Image(out, background.source_depth)


def foreground_ratio(mask: Mask) -> float:
    return mask.count() / (mask.height * mask.width)


def bbox_of_mask(mask: Mask) -> Region:
    """Tightest region containing every foreground pixel."""
    rows = np.flatnonzero(mask.data.any(axis=1))
    if rows.size == 0:
        raise EmptyMaskError("mask has no foreground pixels")
    cols = np.flatnonzero(mask.data.any(axis=0))
    return Region(int(rows[0]), int(cols[0]), int(rows[-1] - rows[0] + 1), int(cols[-1] - cols[0] + 1))


def _check_bounds(region: Region, height: int, width: int):
    if not region.fits_in(height, width):
        raise OutOfBoundsError(f"{region} does not fit in a {height}x{width} raster")


def crop(image: Image, region: Region) -> Image:
    _check_bounds(region, image.height, image.width)
    return Image(image.data[region.slices], image.source_depth)


def crop_mask(mask: Mask, region: Region) -> Mask:
    _check_bounds(region, mask.height, mask.width)
    return Mask(mask.data[region.slices])


def paste(dest: Image, patch: Image, region: Region) -> Image:
    """Return a copy of ``dest`` with ``patch`` written over ``region``."""
    _check_bounds(region, dest.height, dest.width)
    if patch.shape != (region.height, region.width, dest.channels):
        raise ShapeMismatchError(f"patch {patch.shape} does not match {region} with {dest.channels} channels")
    out = dest.data.copy()
    out[region.slices] = patch.data
    return Image(out, dest.source_depth)

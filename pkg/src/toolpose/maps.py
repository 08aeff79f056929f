"""Per-pixel raster layers exchanged between stages, and their PNG encodings.

Depth and disparity carry an explicit validity channel; invalid pixels hold
0.0 in `values` so arithmetic never meets NaN.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

DEFAULT_DEPTH_SCALE = 0.1  # mm per 16-bit PNG unit


def _readonly(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class _ValuedMap:
    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise ValueError(f"expected a 2-D raster, got shape {vals.shape}")
        valid = np.array(self.valid, dtype=bool)
        if valid.shape != vals.shape:
            raise ValueError(f"validity shape {valid.shape} != values shape {vals.shape}")
        valid &= np.isfinite(vals) & (vals > 0)
        vals[~valid] = 0.0
        object.__setattr__(self, "values", _readonly(vals, np.float64))
        object.__setattr__(self, "valid", _readonly(valid, bool))

    @classmethod
    def from_array(cls, a):
        """Wrap a float array; non-finite or non-positive entries become invalid."""
        a = np.asarray(a, dtype=np.float64)
        return cls(np.where(np.isfinite(a), a, 0.0), np.isfinite(a) & (a > 0))

    @classmethod
    def invalid(cls, height: int, width: int):
        return cls(np.zeros((height, width)), np.zeros((height, width), dtype=bool))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def valid_fraction(self) -> float:
        return float(self.valid.mean())

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return bool(np.array_equal(self.values, other.values) and np.array_equal(self.valid, other.valid))


class DisparityMap(_ValuedMap):
    """Left-referenced disparities in pixels: left x matches right x - d."""


class DepthMap(_ValuedMap):
    """Per-pixel depth along the optical axis, millimetres."""

    def masked(self, mask: "BinaryMask") -> "DepthMap":
        return DepthMap(self.values, self.valid & mask.bits)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise ValueError(f"expected a 2-D mask, got shape {bits.shape}")
        object.__setattr__(self, "bits", _readonly(bits != 0, bool))

    @classmethod
    def empty(cls, height: int, width: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    def count(self) -> int:
        return int(self.bits.sum())

    def __and__(self, other: "BinaryMask") -> "BinaryMask":
        return BinaryMask(self.bits & other.bits)

    def __or__(self, other: "BinaryMask") -> "BinaryMask":
        return BinaryMask(self.bits | other.bits)

    def issubset(self, other: "BinaryMask") -> bool:
        return not bool((self.bits & ~other.bits).any())

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return bool(np.array_equal(self.bits, other.bits))


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Intensity image with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ValueError(f"expected a 2-D image, got shape {px.shape}")
        if not np.isfinite(px).all() or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("gray image values must be finite and within [0, 1]")
        object.__setattr__(self, "pixels", _readonly(px, np.float64))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


# ---------------------------------------------------------------- PNG codecs


def _read_png_array(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im)


def write_depth_png(depth: DepthMap, path, scale: float = DEFAULT_DEPTH_SCALE) -> None:
    """16-bit PNG, value * scale = millimetres, 0 = invalid."""
    q = np.rint(depth.values / scale)
    q = np.where(depth.valid, np.clip(q, 1, 65535), 0).astype(np.uint16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(q).save(path, format="PNG")


def read_depth_png(path, scale: float = DEFAULT_DEPTH_SCALE) -> DepthMap:
    raw = _read_png_array(path)
    if raw.ndim != 2:
        raise ValueError(f"{path}: depth PNG must be single-channel, got shape {raw.shape}")
    raw = raw.astype(np.float64)
    return DepthMap(raw * scale, raw > 0)


def write_mask_png(mask: BinaryMask, path) -> None:
    """8-bit PNG, 0 = background, 255 = object."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.where(mask.bits, 255, 0).astype(np.uint8)).save(path, format="PNG")


def read_mask_png(path) -> BinaryMask:
    raw = _read_png_array(path)
    if raw.ndim == 3:
        raw = raw[..., 0]
    return BinaryMask(raw > 0)


def read_gray_png(path) -> GrayImage:
    """8- or 16-bit PNG (RGB is averaged) normalised to [0, 1]."""
    with Image.open(path) as im:
        mode = im.mode
        raw = np.array(im)
    if raw.ndim == 3:
        raw = raw[..., :3].astype(np.float64).mean(axis=2)
    if mode.startswith("I") or raw.dtype == np.uint16 or raw.max(initial=0) > 255:
        return GrayImage(raw.astype(np.float64) / 65535.0)
    return GrayImage(raw.astype(np.float64) / 255.0)


def write_gray_png(img: GrayImage, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.rint(img.pixels * 255.0).astype(np.uint8)).save(path, format="PNG")

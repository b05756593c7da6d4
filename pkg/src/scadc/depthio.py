"""Depth-map data model, 16-bit PNG codec, stereo geometry, cropping and
lidar coverage statistics.

Depth PNGs follow the KITTI depth-completion convention: a single-channel
16-bit image whose stored value is ``round(depth_m * 256)`` and where 0
means "no measurement".
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ArgumentError, CodecError, DimensionError, FormatError, RangeError

DEPTH_SCALE = 256.0
MAX_STORED = 65535

__all__ = [
    "DepthMap",
    "CameraRig",
    "CropSpec",
    "decode_depth_png",
    "encode_depth_png",
    "read_depth_png",
    "write_depth_png",
    "quantize_depth",
    "disparity_to_depth",
    "bottom_crop",
    "scanline_density_stats",
]


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Dense H x W depth in meters with an explicit validity mask.

    Invalid pixels hold exactly 0 and valid pixels hold a positive depth, so
    ``values > 0`` and ``valid`` always agree.
    """

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if values.ndim != 2:
            raise DimensionError(f"depth map must be 2-D, got shape {values.shape}")
        if valid.shape != values.shape:
            raise DimensionError(f"mask shape {valid.shape} != values shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ArgumentError("depth values must be finite")
        if np.any(values < 0):
            raise ArgumentError("depth values must be non-negative")
        if np.any((values > 0) != valid):
            raise ArgumentError("validity mask must equal (values > 0)")
        values.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def from_values(cls, values, valid=None) -> "DepthMap":
        """Build a map from raw depths; non-positive or masked-out pixels become invalid."""
        values = np.array(values, dtype=np.float64)
        keep = np.isfinite(values) & (values > 0)
        if valid is not None:
            keep &= np.asarray(valid, dtype=bool)
        values[~keep] = 0.0
        return cls(values, keep)

    @classmethod
    def empty(cls, height: int, width: int) -> "DepthMap":
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

    def __eq__(self, other):
        if not isinstance(other, DepthMap):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.values, other.values)

    def __repr__(self):
        return f"DepthMap({self.height}x{self.width}, {int(self.valid.sum())} valid)"


@dataclass(frozen=True)
class CameraRig:
    focal: float
    baseline: float

    def __post_init__(self):
        if not self.focal > 0 or not self.baseline > 0:
            raise ArgumentError("focal and baseline must be positive")


@dataclass(frozen=True)
class CropSpec:
    target_height: int = 352
    target_width: int = 1216

    def __post_init__(self):
        if self.target_height < 1 or self.target_width < 1:
            raise ArgumentError("crop dimensions must be positive")


def quantize_depth(values: np.ndarray) -> np.ndarray:
    """Map depths in meters to stored u16 values (round half up).

    A positive depth that would round to 0 is stored as 1 so that it stays
    valid after a round trip.
    """
    values = np.asarray(values, dtype=np.float64)
    stored = np.floor(values * DEPTH_SCALE + 0.5)
    if np.any(stored > MAX_STORED):
        raise RangeError(f"depth {values.max():.4f} m exceeds the 16-bit PNG range (< 256 m)")
    stored = np.where(values > 0, np.maximum(stored, 1), 0)
    return stored.astype(np.uint16)


def encode_depth_png(depth: DepthMap) -> bytes:
    stored = quantize_depth(depth.values)
    buf = io.BytesIO()
    Image.fromarray(stored).save(buf, format="PNG")
    return buf.getvalue()


def _decode_u16_png(data: bytes) -> np.ndarray:
    try:
        image = Image.open(io.BytesIO(data))
        image.load()
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise CodecError(f"cannot decode PNG: {exc}") from exc
    if image.format != "PNG":
        raise FormatError(f"expected a PNG file, got {image.format}")
    if image.mode not in ("I;16", "I;16B", "I;16L", "I"):
        raise FormatError(f"expected a 16-bit single-channel PNG, got mode {image.mode!r}")
    array = np.asarray(image)
    if array.ndim != 2:
        raise FormatError("expected a single-channel image")
    if image.mode == "I" and (array.min() < 0 or array.max() > MAX_STORED):
        raise FormatError("pixel values outside the 16-bit range")
    return array.astype(np.uint16)


def decode_depth_png(data: bytes) -> DepthMap:
    stored = _decode_u16_png(data)
    return DepthMap(stored.astype(np.float64) / DEPTH_SCALE, stored > 0)


def read_depth_png(path) -> DepthMap:
    return decode_depth_png(Path(path).read_bytes())


def write_depth_png(path, depth: DepthMap) -> None:
    Path(path).write_bytes(encode_depth_png(depth))


def disparity_to_depth(disparity, rig: CameraRig) -> DepthMap:
    """Convert a disparity map (pixels) to depth with ``focal * baseline / disparity``."""
    disparity = np.asarray(disparity, dtype=np.float64)
    if disparity.ndim != 2:
        raise DimensionError(f"disparity must be 2-D, got shape {disparity.shape}")
    if np.any(disparity < 0):
        raise ArgumentError("disparities must be non-negative")
    positive = disparity > 0
    depth = np.zeros_like(disparity)
    depth[positive] = rig.focal * rig.baseline / disparity[positive]
    return DepthMap(depth, positive)


def crop_window(height: int, width: int, spec: CropSpec) -> tuple[slice, slice]:
    """Row/column slices of the bottom-center crop window."""
    if spec.target_height > height or spec.target_width > width:
        raise DimensionError(
            f"crop {spec.target_height}x{spec.target_width} does not fit in {height}x{width}"
        )
    left = (width - spec.target_width) // 2
    top = height - spec.target_height
    return slice(top, height), slice(left, left + spec.target_width)


def bottom_crop(depth: DepthMap, spec: CropSpec) -> DepthMap:
    """Keep the bottom rows and a horizontally centered window.

    When the discarded width is odd, the extra column is dropped on the right.
    """
    rows, cols = crop_window(depth.height, depth.width, spec)
    return DepthMap(depth.values[rows, cols].copy(), depth.valid[rows, cols].copy())


def scanline_density_stats(
    maps: Iterable[DepthMap],
    row_band: tuple[int, int] | None = None,
    n_bins: int = 3,
) -> np.ndarray:
    """Fraction of valid pixels per horizontal bin inside ``row_band``.

    The band is a half-open row range ``(start, stop)``; ``None`` means every
    row. Bins split the width into ``n_bins`` near-equal parts (left to right)
    and the per-map fractions are averaged over all maps.
    """
    maps = list(maps)
    if not maps:
        raise ArgumentError("need at least one depth map")
    if n_bins < 1:
        raise ArgumentError("n_bins must be >= 1")
    fractions = []
    for depth in maps:
        start, stop = (0, depth.height) if row_band is None else row_band
        band = depth.valid[start:stop]
        if band.size == 0:
            raise ArgumentError(f"row band {row_band} selects no rows")
        if depth.width < n_bins:
            raise ArgumentError("more bins than columns")
        bins = np.array_split(band, n_bins, axis=1)
        fractions.append([b.mean() for b in bins])
    return np.mean(fractions, axis=0)


def stack_values(maps: Sequence[DepthMap]) -> np.ndarray:
    """Stack depth values into an (N, 1, H, W) batch array."""
    return np.stack([m.values for m in maps])[:, None]

"""Guiding confidence built from raw lidar points, and its supervision loss."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .depthio import DepthMap, _decode_u16_png
from .errors import ArgumentError, DimensionError

__all__ = [
    "ConfidenceMap",
    "DilationSpec",
    "make_guiding_confidence",
    "confidence_loss",
    "stereo_confidence",
    "encode_confidence_png",
    "decode_confidence_png",
]


@dataclass(frozen=True, eq=False)
class ConfidenceMap:
    """Per-pixel confidence in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise DimensionError(f"confidence map must be 2-D, got shape {values.shape}")
        if not np.all((values >= 0.0) & (values <= 1.0)):
            raise ArgumentError("confidence values must lie in [0, 1]")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def shape(self):
        return self.values.shape

    def __eq__(self, other):
        if not isinstance(other, ConfidenceMap):
            return NotImplemented
        return np.array_equal(self.values, other.values)


@dataclass(frozen=True)
class DilationSpec:
    kernel_size: int = 3
    half_distance: float = 1.0
    combine: str = "max"

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ArgumentError("kernel_size must be odd and >= 1")
        if not self.half_distance > 0:
            raise ArgumentError("half_distance must be positive")
        if self.combine not in ("max", "sum"):
            raise ArgumentError("combine must be 'max' or 'sum'")

    @property
    def variance(self) -> float:
        # exp(-h^2 / (2 s^2)) = 1/2  =>  s^2 = h^2 / (2 ln 2)
        return self.half_distance**2 / (2.0 * math.log(2.0))

    def kernel(self) -> np.ndarray:
        r = self.kernel_size // 2
        dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
        return np.exp(-(dy**2 + dx**2) / (2.0 * self.variance))


def make_guiding_confidence(sparse: DepthMap, spec: DilationSpec = DilationSpec()) -> ConfidenceMap:
    """Stamp a Gaussian at every valid lidar pixel.

    The kernel peaks at 1 and falls to 0.5 at ``spec.half_distance`` pixels.
    Overlapping stamps are merged with a pointwise max, or summed and clamped
    to 1 when ``spec.combine == "sum"``. Stamps are truncated at the borders.
    """
    kernel = spec.kernel()
    r = spec.kernel_size // 2
    h, w = sparse.shape
    points = np.pad(sparse.valid, r).astype(np.float64)
    out = np.zeros((h, w))
    for i in range(spec.kernel_size):
        for j in range(spec.kernel_size):
            # the stamp centred at p contributes kernel[i, j] at p + (i - r, j - r)
            shifted = points[2 * r - i : 2 * r - i + h, 2 * r - j : 2 * r - j + w] * kernel[i, j]
            if spec.combine == "max":
                np.maximum(out, shifted, out=out)
            else:
                out += shifted
    if spec.combine == "sum":
        np.minimum(out, 1.0, out=out)
    return ConfidenceMap(out)


def confidence_loss(m: ConfidenceMap, g: ConfidenceMap) -> float:
    """Mean squared difference over all pixels."""
    a = np.asarray(getattr(m, "values", m), dtype=np.float64)
    b = np.asarray(getattr(g, "values", g), dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"confidence shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def stereo_confidence(m_lidar: ConfidenceMap) -> ConfidenceMap:
    return ConfidenceMap(1.0 - m_lidar.values)


def encode_confidence_png(conf: ConfidenceMap) -> bytes:
    """Diagnostic 16-bit export, ``round(conf * 65535)``; lossy."""
    stored = np.floor(conf.values * 65535.0 + 0.5).astype(np.uint16)
    buf = io.BytesIO()
    Image.fromarray(stored).save(buf, format="PNG")
    return buf.getvalue()


def decode_confidence_png(data: bytes) -> ConfidenceMap:
    return ConfidenceMap(_decode_u16_png(data).astype(np.float64) / 65535.0)


def read_confidence_png(path) -> ConfidenceMap:
    return decode_confidence_png(Path(path).read_bytes())


def write_confidence_png(path, conf: ConfidenceMap) -> None:
    Path(path).write_bytes(encode_confidence_png(conf))

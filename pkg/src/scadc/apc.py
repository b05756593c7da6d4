"""Sparsity-attentional convolution, the lidar confidence network, and fusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .confidence import ConfidenceMap
from .depthio import DepthMap
from .errors import ArgumentError, DimensionError
from .layers import BatchNorm2d, Conv2d, Module
from .tensorcore import ConvSpec, Tensor, add, as_tensor, conv2d, mul, relu, sigmoid

MASS_EPS = 1e-8


@dataclass
class MaskedFeature:
    """Features (N, C, H, W) with a per-pixel visibility in [0, 1] of shape (N, 1, H, W)."""

    features: Tensor
    visibility: np.ndarray

    def __post_init__(self):
        self.features = as_tensor(self.features)
        self.visibility = np.asarray(self.visibility, dtype=np.float64)
        f, v = self.features.shape, self.visibility.shape
        if len(f) != 4 or v != (f[0], 1, f[2], f[3]):
            raise DimensionError(f"visibility {v} does not match features {f}")
        if np.any((self.visibility < 0) | (self.visibility > 1)):
            raise ArgumentError("visibility must lie in [0, 1]")


def _window_reduce(v, spec: ConvSpec, how):
    k, s, p = spec.kernel, spec.stride, spec.pad
    vp = np.pad(v, ((0, 0), (0, 0), (p, p), (p, p))) if p else v
    ho, wo = spec.output_size(v.shape[2], v.shape[3])
    win = sliding_window_view(vp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    return win.sum(axis=(-2, -1)) if how == "sum" else win.max(axis=(-2, -1))


def saconv(inp: MaskedFeature, w, b, spec: ConvSpec | None = None) -> MaskedFeature:
    """Masked convolution renormalised by the visible mass in each window.

    ``out = conv(features * vis) * K / max(mass, eps)`` where ``mass`` is the
    summed visibility in the window and ``K`` counts the window positions that
    fall inside the image. Windows with no visible pixel give 0, and the
    output visibility is the window max of the input visibility.
    """
    w = as_tensor(w)
    if spec is None:
        spec = ConvSpec(w.shape[1], w.shape[0], w.shape[2])
    vis = inp.visibility
    x = mul(inp.features, np.broadcast_to(vis, inp.features.shape))
    y = conv2d(x, w, b, spec)

    mass = _window_reduce(vis, spec, "sum")
    inside = _window_reduce(np.ones((1, 1) + vis.shape[2:]), spec, "sum")
    scale = np.where(mass > 0, inside / np.maximum(mass, MASS_EPS), 0.0)
    out = mul(y, np.broadcast_to(scale, y.shape))
    return MaskedFeature(out, _window_reduce(vis, spec, "max"))


class SAConv(Module):
    def __init__(self, in_channels, out_channels, kernel=3, rng=None):
        self.conv = Conv2d(in_channels, out_channels, kernel, rng)

    def __call__(self, inp: MaskedFeature) -> MaskedFeature:
        return saconv(inp, self.conv.weight, self.conv.bias, self.conv.spec)


@dataclass(frozen=True)
class ApcConfig:
    widths: tuple = (16, 16, 16)
    kernel: int = 3
    prior: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(c) for c in self.widths))
        if not self.widths or min(self.widths) < 1:
            raise ArgumentError("APC needs at least one layer of positive width")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ArgumentError("APC kernel must be odd")
        if not 0 < self.prior < 1:
            raise ArgumentError("prior must lie in (0, 1)")


class APC(Module):
    """Regresses lidar confidence in (0, 1) from a sparse lidar depth map.

    Blocks are saconv -> batch norm -> ReLU with the visibility carried along,
    followed by a one-channel saconv, a learned scalar offset and a sigmoid.
    The offset is what lets regions no lidar point ever reaches (where the
    saconv response is exactly 0) learn a confidence other than 0.5. It
    starts at ``logit(config.prior)``: most pixels of a guiding map are 0.
    """

    def __init__(self, config: ApcConfig = ApcConfig(), rng=None, dense=False):
        self.config = config
        self.dense = dense
        chans = (1,) + config.widths
        self.convs = [SAConv(a, b, config.kernel, rng) for a, b in zip(chans[:-1], chans[1:])]
        self.norms = [BatchNorm2d(c) for c in config.widths]
        self.head = SAConv(chans[-1], 1, config.kernel, rng)
        self.offset = Tensor(np.full(1, np.log(config.prior / (1.0 - config.prior))), True)

    def _conv(self, layer: SAConv, feat: MaskedFeature) -> MaskedFeature:
        if self.dense:
            return MaskedFeature(layer.conv(feat.features), feat.visibility)
        return layer(feat)

    def __call__(self, depth, valid, train=True) -> Tensor:
        depth = np.asarray(depth, dtype=np.float64)
        if depth.ndim != 4 or depth.shape[1] != 1:
            raise DimensionError(f"APC expects (N, 1, H, W) depth, got {depth.shape}")
        feat = MaskedFeature(Tensor(depth), np.asarray(valid, dtype=np.float64))
        for conv, norm in zip(self.convs, self.norms):
            feat = self._conv(conv, feat)
            feat = MaskedFeature(relu(norm(feat.features, train)), feat.visibility)
        feat = self._conv(self.head, feat)
        return sigmoid(add(feat.features, self.offset))


def apc_forward(sparse: DepthMap, model: APC, train: bool = False) -> ConfidenceMap:
    """Lidar confidence for a single sparse map (eval-mode batch norm by default)."""
    out = model(sparse.values[None, None], sparse.valid[None, None], train)
    return ConfidenceMap(out.data[0, 0])


# ---------------------------------------------------------------- fusion


def _fusion_weights(stereo_valid, lidar_valid):
    both = stereo_valid & lidar_valid
    lidar_only = lidar_valid & ~stereo_valid
    return both, lidar_only


def fuse(d_stereo: DepthMap, d_lidar: DepthMap, m_lidar: ConfidenceMap) -> DepthMap:
    """``D_stereo * (1 - M) + D_lidar * M`` on pixels where both are valid.

    A pixel valid in only one modality takes that modality's depth; a pixel
    valid in neither stays invalid.
    """
    if not (d_stereo.shape == d_lidar.shape == m_lidar.shape):
        raise DimensionError(
            f"fusion inputs differ in size: {d_stereo.shape}, {d_lidar.shape}, {m_lidar.shape}"
        )
    s, l, m = d_stereo.values, d_lidar.values, m_lidar.values
    mixed = s * (1.0 - m) + l * m
    # rounding must not push a convex combination outside its endpoints
    mixed = np.clip(mixed, np.minimum(s, l), np.maximum(s, l))
    both, lidar_only = _fusion_weights(d_stereo.valid, d_lidar.valid)
    out = np.where(both, mixed, np.where(lidar_only, l, s))
    return DepthMap.from_values(out, d_stereo.valid | d_lidar.valid)


def fuse_tensor(stereo, stereo_valid, lidar, lidar_valid, m_lidar: Tensor) -> Tensor:
    """Differentiable fusion over (N, 1, H, W) arrays; gradient flows into ``m_lidar``."""
    stereo = np.asarray(stereo, dtype=np.float64)
    lidar = np.asarray(lidar, dtype=np.float64)
    both, lidar_only = _fusion_weights(np.asarray(stereo_valid, bool), np.asarray(lidar_valid, bool))
    base = np.where(lidar_only, lidar, np.where(both | np.asarray(stereo_valid, bool), stereo, 0.0))
    gap = np.where(both, lidar - stereo, 0.0)
    return add(mul(m_lidar, gap), base)

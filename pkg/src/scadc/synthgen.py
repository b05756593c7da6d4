"""Deterministic synthetic driving scenes.

A scene is a flat ground plane under a far sky plus a handful of
fronto-parallel boxes standing on the ground (cars and trucks near the
camera, now and then a building or tree line far away), seen by a
forward-looking camera. From the rendered depth we derive

* a sparse, noiseless lidar map: a few scanlines below the lidar horizon,
  thinned more at the image sides than at the center;
* a dense stereo map: range-dependent Gaussian noise plus foreground
  "bleeding" past object contours;
* a groundtruth map restricted to rows below the groundtruth horizon.

The upper rows are therefore unscanned and unsupervised, as in the driving
benchmarks, while stereo still covers them.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from .depthio import DepthMap, quantize_depth, read_depth_png, write_depth_png, DEPTH_SCALE
from .errors import ArgumentError

SKY = -1
GROUND = 0


@dataclass(frozen=True)
class SynthConfig:
    height: int = 64
    width: int = 192
    lidar_horizon_frac: float = 1 / 3
    gt_horizon_frac: float = 1 / 3
    n_scanlines: int = 12
    dropout_center: float = 0.55
    dropout_side: float = 0.70
    stereo_noise_coeff: float = 0.002
    bleed_radius: int = 2
    min_objects: int = 2
    max_objects: int = 6
    min_depth: float = 1.0
    max_depth: float = 80.0
    camera_height: float = 1.65
    focal_frac: float = 0.58
    ground_horizon_frac: float = 0.40
    object_depth_range: tuple = (5.0, 40.0)
    backdrop_prob: float = 0.35
    backdrop_depth_range: tuple = (40.0, 75.0)

    def __post_init__(self):
        for name in ("object_depth_range", "backdrop_depth_range"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        if self.height < 2 or self.width < 2:
            raise ArgumentError("image must be at least 2x2")
        for name in ("lidar_horizon_frac", "gt_horizon_frac", "ground_horizon_frac"):
            if not 0 < getattr(self, name) < 1:
                raise ArgumentError(f"{name} must lie in (0, 1)")
        for name in ("dropout_center", "dropout_side"):
            if not 0 <= getattr(self, name) < 1:
                raise ArgumentError(f"{name} must lie in [0, 1)")
        if not 0 < self.min_depth < self.max_depth < 256:
            raise ArgumentError("need 0 < min_depth < max_depth < 256")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ArgumentError("need 1 <= min_objects <= max_objects")
        for name in ("object_depth_range", "backdrop_depth_range"):
            lo, hi = getattr(self, name)
            if not self.min_depth <= lo < hi <= self.max_depth:
                raise ArgumentError(f"{name} must lie inside the depth range")
        if not 0 <= self.backdrop_prob <= 1:
            raise ArgumentError("backdrop_prob must lie in [0, 1]")
        if self.n_scanlines < 1 or self.bleed_radius < 0 or self.stereo_noise_coeff < 0:
            raise ArgumentError("n_scanlines >= 1, bleed_radius >= 0, noise >= 0 required")
        if self.n_scanlines > self.height - self.lidar_horizon_row:
            raise ArgumentError("more scanlines than rows below the lidar horizon")

    @property
    def lidar_horizon_row(self) -> int:
        return int(round(self.lidar_horizon_frac * self.height))

    @property
    def gt_horizon_row(self) -> int:
        return int(round(self.gt_horizon_frac * self.height))

    @property
    def focal(self) -> float:
        return self.focal_frac * self.width

    def scanline_rows(self) -> np.ndarray:
        return np.unique(np.round(np.linspace(self.lidar_horizon_row, self.height - 1, self.n_scanlines)).astype(int))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["object_depth_range"] = list(self.object_depth_range)
        d["backdrop_depth_range"] = list(self.backdrop_depth_range)
        return d

    @classmethod
    def from_dict(cls, d) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ArgumentError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Box:
    depth: float
    left: float
    right: float
    height_m: float


@dataclass(frozen=True, eq=False)
class SceneSample:
    d_stereo: DepthMap
    d_lidar_sparse: DepthMap
    d_gt: DepthMap
    d_full: DepthMap
    seed: int
    lidar_horizon: int
    gt_horizon: int
    surface_ids: np.ndarray | None = None
    boxes: tuple = ()

    @property
    def image_height(self) -> int:
        return self.d_full.height

    @property
    def image_width(self) -> int:
        return self.d_full.width


def _quantized(values):
    return quantize_depth(values).astype(np.float64) / DEPTH_SCALE


def _draw_boxes(rng, cfg: SynthConfig) -> list[Box]:
    """Vehicles near the camera and, occasionally, a far building or tree line."""
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    boxes = []
    for i in range(n):
        backdrop = i > 0 and rng.uniform() < cfg.backdrop_prob
        if backdrop:
            lo, hi = cfg.backdrop_depth_range
            depth = rng.uniform(lo, hi)
            height_m = rng.uniform(6.0, 25.0)
            width_m = rng.uniform(8.0, 30.0)
        else:
            lo, hi = cfg.object_depth_range
            if i == 0:
                # always one tall vehicle reaching into the unscanned rows
                depth = rng.uniform(lo, min(hi, 3 * lo))
                height_m = rng.uniform(3.0, 4.5)
            else:
                depth = rng.uniform(lo, hi)
                height_m = rng.uniform(1.4, 4.5)
            width_m = rng.uniform(1.6, 3.0)
        center = rng.uniform(0.0, cfg.width)
        half = 0.5 * width_m * cfg.focal / depth
        boxes.append(Box(depth, center - half, center + half, height_m))
    return boxes


def render(cfg: SynthConfig, boxes) -> tuple[np.ndarray, np.ndarray]:
    """Depth of the nearest surface per pixel center, and a surface id map.

    Ids: -1 sky, 0 ground, k + 1 for ``boxes[k]``.
    """
    h, w, f = cfg.height, cfg.width, cfg.focal
    v0 = cfg.ground_horizon_frac * h
    rows = np.arange(h) + 0.5
    cols = np.arange(w) + 0.5
    slope = (rows - v0) / f
    ground = np.where(slope > 0, cfg.camera_height / np.where(slope > 0, slope, 1.0), np.inf)
    depth = np.broadcast_to(np.minimum(ground, cfg.max_depth)[:, None], (h, w)).copy()
    ids = np.where(np.isfinite(ground) & (ground <= cfg.max_depth), GROUND, SKY)[:, None].repeat(w, axis=1)
    for k, box in enumerate(boxes):
        top = v0 + f * (cfg.camera_height - box.height_m) / box.depth
        bottom = v0 + f * cfg.camera_height / box.depth
        inside = ((rows >= top) & (rows < bottom))[:, None] & ((cols >= box.left) & (cols < box.right))[None, :]
        nearer = inside & (box.depth < depth)
        depth[nearer] = box.depth
        ids[nearer] = k + 1
    return np.clip(depth, cfg.min_depth, cfg.max_depth), ids


def _bleed(surface, ids, boxes, radius):
    """Spread each box's depth ``radius`` pixels onto farther neighbours."""
    out = surface.copy()
    if radius == 0:
        return out
    structure = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    for k in sorted(range(len(boxes)), key=lambda i: -boxes[i].depth):
        own = ids == k + 1
        if not own.any():
            continue
        ring = ndimage.binary_dilation(own, structure) & ~own & (out > boxes[k].depth)
        out[ring] = boxes[k].depth
    return out


def gen_scene(seed: int, config: SynthConfig = SynthConfig()) -> SceneSample:
    cfg = config
    rng = np.random.default_rng(seed)
    boxes = _draw_boxes(rng, cfg)
    full, ids = render(cfg, boxes)
    full = _quantized(full)
    h, w = full.shape

    rows = np.arange(h)[:, None]
    gt_mask = np.broadcast_to(rows >= cfg.gt_horizon_row, (h, w))

    # dropout grows linearly from the center column to either side
    offset = np.abs(2.0 * (np.arange(w) + 0.5) / w - 1.0)
    keep_prob = 1.0 - (cfg.dropout_center + (cfg.dropout_side - cfg.dropout_center) * offset)
    lidar_mask = np.zeros((h, w), dtype=bool)
    scan_rows = cfg.scanline_rows()
    lidar_mask[scan_rows] = rng.uniform(size=(len(scan_rows), w)) < keep_prob[None, :]

    surface = _bleed(full, ids, boxes, cfg.bleed_radius)
    sigma = cfg.stereo_noise_coeff * surface**2
    stereo = surface + rng.normal(size=(h, w)) * sigma
    stereo = _quantized(np.clip(stereo, 0.5 * cfg.min_depth, 255.0))

    return SceneSample(
        d_stereo=DepthMap.from_values(stereo),
        d_lidar_sparse=DepthMap.from_values(full, lidar_mask),
        d_gt=DepthMap.from_values(full, gt_mask),
        d_full=DepthMap.from_values(full),
        seed=int(seed),
        lidar_horizon=cfg.lidar_horizon_row,
        gt_horizon=cfg.gt_horizon_row,
        surface_ids=ids,
        boxes=tuple(boxes),
    )


# ---------------------------------------------------------------- datasets

KINDS = ("stereo", "lidar", "gt", "full")


def _frame_paths(index: int) -> dict[str, str]:
    return {kind: f"frames/{index:06d}_{kind}.png" for kind in KINDS}


def _write_frame(job):
    out_dir, index, seed, cfg_dict = job
    sample = gen_scene(seed, SynthConfig.from_dict(cfg_dict))
    paths = _frame_paths(index)
    maps = dict(zip(KINDS, (sample.d_stereo, sample.d_lidar_sparse, sample.d_gt, sample.d_full)))
    for kind, rel in paths.items():
        target = Path(out_dir) / rel
        try:
            write_depth_png(target, maps[kind])
        except OSError as exc:
            raise OSError(f"cannot write {target}: {exc}") from exc
    return {**paths, "seed": seed}


def gen_dataset(n_frames: int, base_seed: int, config: SynthConfig, out_dir, jobs: int = 1) -> dict:
    """Write ``n_frames`` scenes as depth PNGs plus ``manifest.json``.

    Frame ``i`` uses seed ``base_seed + i``. Paths in the manifest are
    relative to ``out_dir``.
    """
    if n_frames < 0:
        raise ArgumentError("n_frames must be >= 0")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if n_frames:
        (out_dir / "frames").mkdir(exist_ok=True)
    work = [(str(out_dir), i, base_seed + i, config.to_dict()) for i in range(n_frames)]
    if jobs > 1 and n_frames > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            frames = list(pool.map(_write_frame, work))
    else:
        frames = [_write_frame(job) for job in work]
    manifest = {"config": config.to_dict(), "base_seed": base_seed, "frames": frames}
    write_manifest(out_dir / "manifest.json", manifest)
    return manifest


def write_manifest(path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_manifest(path) -> tuple[dict, list[dict]]:
    """Read a manifest; frame paths are resolved against the manifest's folder."""
    path = Path(path)
    manifest = json.loads(path.read_text())
    base = path.parent
    frames = []
    for record in manifest.get("frames", []):
        resolved = {k: str(base / v) if k in KINDS or k in ("pred", "confidence") else v for k, v in record.items()}
        frames.append(resolved)
    return manifest, frames


def load_frame(record: dict, config: SynthConfig | None = None) -> SceneSample:
    """Load one manifest record. ``full`` is optional (real data has none)."""
    stereo = read_depth_png(record["stereo"])
    lidar = read_depth_png(record["lidar"])
    gt = read_depth_png(record["gt"]) if record.get("gt") else DepthMap.empty(*stereo.shape)
    full = read_depth_png(record["full"]) if record.get("full") else None
    cfg = config
    lidar_h = cfg.lidar_horizon_row if cfg else _first_valid_row(lidar)
    gt_h = cfg.gt_horizon_row if cfg else _first_valid_row(gt)
    return SceneSample(stereo, lidar, gt, full, int(record.get("seed", -1)), lidar_h, gt_h)


def _first_valid_row(depth: DepthMap) -> int:
    rows = np.flatnonzero(depth.valid.any(axis=1))
    return int(rows[0]) if rows.size else depth.height


def config_from_manifest(manifest: dict) -> SynthConfig | None:
    cfg = manifest.get("config")
    return SynthConfig.from_dict(cfg) if cfg else None


__all__ = [
    "SynthConfig",
    "SceneSample",
    "gen_scene",
    "gen_dataset",
    "load_manifest",
    "load_frame",
    "render",
]

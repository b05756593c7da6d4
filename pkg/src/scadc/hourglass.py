"""Stacked hourglass refiner, staged losses, training loop and inference.

The full model is: confidence network on the sparse lidar map -> fusion of
the stereo and completed-lidar depths -> a cascade of encoder-decoders, each
emitting a depth estimate. Later stages see every earlier estimate and, with
dense connections on, every earlier stage's decoder features at the matching
resolution.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensorcore as tc
from .apc import APC, ApcConfig, fuse_tensor
from .completion import complete_lidar_nearest
from .confidence import ConfidenceMap, DilationSpec, make_guiding_confidence
from .depthio import DepthMap
from .errors import ArgumentError, DimensionError, NonFiniteError, TrainingError
from .layers import Conv2d, ConvBNReLU, Module
from .tensorcore import Tensor, concat_channels, maxpool2d, mse_masked, relu, upsample_nearest

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HourglassConfig:
    stages: int = 3
    levels: int = 2
    base_channels: int = 16
    confidence_input: bool = True
    dense: bool = True

    def __post_init__(self):
        if self.stages < 1 or self.levels < 1 or self.base_channels < 1:
            raise ArgumentError("stages, levels and base_channels must be >= 1")

    @property
    def input_channels(self) -> int:
        return 2 if self.confidence_input else 1


class Hourglass(Module):
    """One encoder-decoder stage."""

    def __init__(self, in_channels, config: HourglassConfig, earlier: int, rng):
        c, levels = config.base_channels, config.levels
        self.stem = ConvBNReLU(in_channels, c, 3, rng)
        self.down = [ConvBNReLU(c, c, 3, rng) for _ in range(levels)]
        self.up = [ConvBNReLU(2 * c, c, 3, rng) for _ in range(levels)]
        # merges encoder features with the matching decoder features of earlier stages
        self.merge = [ConvBNReLU((earlier + 1) * c, c, 1, rng) for _ in range(levels + 1)] if earlier else []
        self.head = Conv2d(c, 1, 3, rng)

    def __call__(self, x, earlier_feats, train):
        enc = []
        h = self.stem(x, train)
        for level in range(len(self.down) + 1):
            if level:
                h = self.down[level - 1](maxpool2d(h), train)
            if self.merge:
                h = self.merge[level](concat_channels([h] + [f[level] for f in earlier_feats]), train)
            enc.append(h)
        dec = [None] * len(enc)
        dec[-1] = h
        for level in range(len(enc) - 2, -1, -1):
            h = self.up[level](concat_channels([upsample_nearest(h), enc[level]]), train)
            dec[level] = h
        return relu(self.head(h)), dec


class StackedHourglass(Module):
    def __init__(self, config: HourglassConfig = HourglassConfig(), rng=None):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stages = [
            Hourglass(config.input_channels + k, config, k if config.dense else 0, rng)
            for k in range(config.stages)
        ]

    def __call__(self, fused: Tensor, confidence: Tensor | None = None, train=True) -> list[Tensor]:
        fused = tc.as_tensor(fused)
        n, ch, h, w = fused.shape
        step = 2**self.config.levels
        if h % step or w % step:
            raise DimensionError(f"input {h}x{w} must be divisible by {step}; pad it first")
        base = [fused]
        if self.config.confidence_input:
            if confidence is None:
                raise ArgumentError("this configuration expects a confidence channel")
            base.append(tc.as_tensor(confidence))
        outputs, feats = [], []
        for stage in self.stages:
            s, dec = stage(concat_channels(base + outputs), feats if self.config.dense else [], train)
            outputs.append(s)
            feats.append(dec)
        return outputs


def hourglass_forward(d_f: DepthMap, model: StackedHourglass, confidence: ConfidenceMap | None = None, train=False):
    """Stage outputs S1..Sn for a single fused map."""
    conf = None if confidence is None else confidence.values[None, None]
    outs = model(Tensor(d_f.values[None, None]), conf, train)
    return [DepthMap.from_values(s.data[0, 0]) for s in outs]


def stage_losses(outputs: Sequence, d_gt) -> list:
    """Masked MSE of every stage against the valid groundtruth pixels.

    ``outputs`` may be Tensors (N, 1, H, W) with ``d_gt`` a pair of arrays
    ``(values, valid)``, or DepthMaps with ``d_gt`` a DepthMap.
    """
    if isinstance(d_gt, DepthMap):
        target, valid = d_gt.values, d_gt.valid
        preds = [Tensor(s.values if isinstance(s, DepthMap) else s) for s in outputs]
    else:
        target, valid = d_gt
        preds = list(outputs)
    if not np.any(valid):
        raise ArgumentError("groundtruth has no valid pixels")
    return [mse_masked(p, target, valid) for p in preds]


def total_loss(stage: Sequence, l_c) -> Tensor:
    out = tc.as_tensor(l_c)
    for loss in stage:
        out = tc.add(loss, out)
    return out


# ---------------------------------------------------------------- full model


class ScadcModel(Module):
    def __init__(self, apc_config=ApcConfig(), hg_config=HourglassConfig(), seed=0):
        rng = np.random.default_rng(seed)
        self.apc = APC(apc_config, rng)
        self.hg = StackedHourglass(hg_config, rng)

    def __call__(self, batch: "Batch", train=True):
        m = self.apc(batch.lidar_sparse, batch.lidar_valid, train)
        fused = fuse_tensor(batch.stereo, batch.stereo_valid, batch.lidar_dense, batch.lidar_dense_valid, m)
        outs = self.hg(fused, m if self.hg.config.confidence_input else None, train)
        return m, fused, outs


@dataclass
class Batch:
    stereo: np.ndarray
    stereo_valid: np.ndarray
    lidar_sparse: np.ndarray
    lidar_valid: np.ndarray
    lidar_dense: np.ndarray
    lidar_dense_valid: np.ndarray
    gt: np.ndarray
    gt_valid: np.ndarray
    guide: np.ndarray

    @classmethod
    def stack(cls, items: Sequence["Batch"]) -> "Batch":
        return cls(**{f.name: np.concatenate([getattr(i, f.name) for i in items]) for f in fields(cls)})


def prepare_frame(stereo: DepthMap, lidar: DepthMap, gt: DepthMap | None, dilation=DilationSpec()) -> Batch:
    """Arrays (1, 1, H, W) for one frame; the lidar branch is a nearest fill of the scan."""
    dense = complete_lidar_nearest(lidar)
    gt = gt if gt is not None else DepthMap.empty(*stereo.shape)
    guide = make_guiding_confidence(lidar, dilation)

    def arr(x):
        return np.asarray(x, dtype=np.float64)[None, None]

    return Batch(
        arr(stereo.values), arr(stereo.valid) > 0,
        arr(lidar.values), arr(lidar.valid) > 0,
        arr(dense.values), arr(dense.valid) > 0,
        arr(gt.values), arr(gt.valid) > 0,
        arr(guide.values),
    )


def compute_losses(model: ScadcModel, batch: Batch, train=True):
    m, fused, outs = model(batch, train)
    stages = stage_losses(outs, (batch.gt, batch.gt_valid))
    l_c = mse_masked(m, batch.guide, np.ones(m.shape, dtype=bool))
    return stages, l_c, total_loss(stages, l_c)


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class HyperParams:
    lr: float = 1e-3
    momentum: float = 0.9
    iterations: int = 200
    seed: int = 7
    batch_size: int = 4

    def __post_init__(self):
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ArgumentError("need lr >= 0 and 0 <= momentum < 1")
        if self.iterations < 0 or self.batch_size < 1:
            raise ArgumentError("need iterations >= 0 and batch_size >= 1")


@dataclass(frozen=True)
class TrainConfig:
    apc: ApcConfig = ApcConfig()
    hourglass: HourglassConfig = HourglassConfig()
    dilation: DilationSpec = DilationSpec()

    def to_dict(self) -> dict:
        d = {"apc": asdict(self.apc), "hourglass": asdict(self.hourglass), "dilation": asdict(self.dilation)}
        d["apc"]["widths"] = list(self.apc.widths)
        return d

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        return cls(
            ApcConfig(**d.get("apc", {})),
            HourglassConfig(**d.get("hourglass", {})),
            DilationSpec(**d.get("dilation", {})),
        )


LOSS_FIELDS = ("iteration", "l1", "l2", "l3", "lc", "total")


@dataclass
class TrainingResult:
    checkpoint: "ModelCheckpoint"
    curve: list = field(default_factory=list)

    def curve_csv(self) -> str:
        return loss_curve_csv(self.curve, self.checkpoint.metadata["config"]["hourglass"]["stages"])


def loss_curve_csv(curve, stages) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    names = [f"l{i + 1}" for i in range(stages)]
    writer.writerow(["iteration", *names, "lc", "total"])
    for row in curve:
        writer.writerow([row["iteration"], *(repr(row[n]) for n in names), repr(row["lc"]), repr(row["total"])])
    return buf.getvalue()


def run_training(
    frames: Sequence[Batch],
    config: TrainConfig = TrainConfig(),
    hyper: HyperParams = HyperParams(),
    callback: Callable[[dict], None] | None = None,
) -> TrainingResult:
    """Train the full model on prepared frames with momentum SGD.

    Batches are drawn by walking seeded permutations of the frames. The
    parameter init and the batch order each get their own stream spawned from
    ``hyper.seed``, so (seed, frames, config, hyper) fix every number.
    """
    if not frames:
        raise ArgumentError("no training frames")
    init_seq, order_seq = np.random.SeedSequence(hyper.seed).spawn(2)
    model = ScadcModel(config.apc, config.hourglass, seed=int(init_seq.generate_state(1)[0]))
    order_rng = np.random.default_rng(order_seq)
    optim = tc.SGD(model.named_parameters(), hyper.lr, hyper.momentum)

    queue: list[int] = []
    curve = []
    for it in range(hyper.iterations):
        while len(queue) < hyper.batch_size:
            queue.extend(order_rng.permutation(len(frames)).tolist())
        picked, queue = queue[: hyper.batch_size], queue[hyper.batch_size :]
        batch = Batch.stack([frames[i] for i in picked])
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                stages, l_c, total = compute_losses(model, batch, train=True)
                if not np.isfinite(total.item()):
                    raise NonFiniteError("loss is not finite")
                optim.zero_grad()
                total.backward()
                optim.step()
            for p in optim.params.values():
                tc._check_finite(p.data, "parameters")
        except NonFiniteError as exc:
            raise TrainingError(f"training diverged at iteration {it}: {exc}", it) from exc
        row = {"iteration": it, "lc": l_c.item(), "total": total.item()}
        row.update({f"l{i + 1}": s.item() for i, s in enumerate(stages)})
        curve.append(row)
        if callback:
            callback(row)
        log.debug("iter %d total %.4f", it, row["total"])

    meta = {
        "config": config.to_dict(),
        "hyper": asdict(hyper),
        "iterations_run": hyper.iterations,
    }
    return TrainingResult(ModelCheckpoint.from_model(model, meta), curve)


# ---------------------------------------------------------------- checkpoints & inference


@dataclass
class ModelCheckpoint:
    tensors: dict
    metadata: dict

    @classmethod
    def from_model(cls, model: ScadcModel, metadata: dict) -> "ModelCheckpoint":
        return cls(model.state_dict(), dict(metadata))

    @property
    def config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.metadata["config"])

    def build_model(self, config: TrainConfig | None = None) -> ScadcModel:
        if config is not None and config.to_dict() != self.metadata["config"]:
            raise ArgumentError("checkpoint was trained with a different configuration")
        cfg = self.config
        model = ScadcModel(cfg.apc, cfg.hourglass)
        model.load_state_dict(self.tensors)
        return model

    def to_bytes(self) -> bytes:
        return tc.encode_checkpoint(self.tensors, self.metadata)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelCheckpoint":
        tensors, meta = tc.decode_checkpoint(data)
        return cls(tensors, meta)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        return cls.from_bytes(Path(path).read_bytes())


def _pad_to(arr, step):
    h, w = arr.shape[-2:]
    ph, pw = (-h) % step, (-w) % step
    if not ph and not pw:
        return arr
    return np.pad(arr, [(0, 0)] * (arr.ndim - 2) + [(0, ph), (0, pw)], mode="edge")


DEPTH_RANGE = (1e-3, 80.0)


def run_inference(
    frame,
    checkpoint: ModelCheckpoint,
    config: TrainConfig | None = None,
    model=None,
    depth_range: tuple[float, float] | None = DEPTH_RANGE,
):
    """Final-stage depth and lidar confidence for one frame (eval-mode batch norm).

    ``frame`` needs ``d_stereo`` and ``d_lidar_sparse``. Inputs whose size is
    not a multiple of ``2 ** levels`` are edge-padded and the outputs cropped.
    Depth is clipped to ``depth_range`` (the usual 80 m evaluation cap);
    pass None for the raw network output.
    """
    model = model if model is not None else checkpoint.build_model(config)
    cfg = checkpoint.config
    prepared = prepare_frame(frame.d_stereo, frame.d_lidar_sparse, None, cfg.dilation)
    h, w = frame.d_stereo.shape
    step = 2**cfg.hourglass.levels
    padded = Batch(**{f.name: _pad_to(getattr(prepared, f.name), step) for f in fields(Batch)})
    m, _, outs = model(padded, train=False)
    values = outs[-1].data[0, 0, :h, :w]
    if depth_range is not None:
        values = np.clip(values, *depth_range)
    depth = DepthMap.from_values(values)
    return depth, ConfidenceMap(m.data[0, 0, :h, :w])


def frames_from_samples(samples, dilation=DilationSpec()) -> list[Batch]:
    return [prepare_frame(s.d_stereo, s.d_lidar_sparse, s.d_gt, dilation) for s in samples]


def save_training_outputs(result: TrainingResult, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result.checkpoint.save(out_dir / "checkpoint.bin")
    (out_dir / "losses.csv").write_text(result.curve_csv())


__all__ = [
    "HourglassConfig",
    "StackedHourglass",
    "ScadcModel",
    "HyperParams",
    "TrainConfig",
    "ModelCheckpoint",
    "hourglass_forward",
    "stage_losses",
    "total_loss",
    "run_training",
    "run_inference",
    "prepare_frame",
    "DEPTH_RANGE",
]

"""Command line front end: ``scadc {gen,confidence,fuse,train,eval,stats}``.

Every subcommand resolves its parameters from built-in defaults, then an
optional JSON ``--config`` file, then explicit flags (flags win). Relative
paths are taken against ``--root``. The resolved parameters are written as
``run_config.json`` next to the outputs.

Exit status: 0 on success, 2 for usage or input errors, 3 for runtime and
numeric failures such as a diverging training run.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from functools import lru_cache
from pathlib import Path

from .apc import fuse
from .completion import complete_lidar_nearest
from .confidence import DilationSpec, make_guiding_confidence, read_confidence_png, write_confidence_png
from .depthio import CropSpec, bottom_crop, read_depth_png, scanline_density_stats, write_depth_png
from .errors import ArgumentError, ScadcError, TrainingError
from .hourglass import (
    HyperParams,
    ModelCheckpoint,
    TrainConfig,
    frames_from_samples,
    run_inference,
    run_training,
    save_training_outputs,
)
from .metrics import REGIONS, EvalReport, aggregate, completeness_report, evaluate
from .synthgen import SynthConfig, config_from_manifest, gen_dataset, load_frame, load_manifest

log = logging.getLogger("scadc")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
RUN_CONFIG = "run_config.json"


class UsageError(ScadcError):
    """Bad or missing input detected by the front end."""


# ---------------------------------------------------------------- config resolution

DEFAULTS = {
    "gen": {"frames": 200, "seed": 7, "out": "data", "jobs": 1, "synth": {}},
    "confidence": {
        "manifest": "data/manifest.json",
        "out": "confidence",
        "jobs": 1,
        "seed": None,
        "dilation": {},
    },
    "fuse": {"stereo": None, "lidar": None, "confidence": None, "out": None, "lidar_fill": "none", "seed": None},
    "train": {
        "manifest": "data/manifest.json",
        "out": "run",
        "seed": 7,
        "lr": 1e-3,
        "momentum": 0.9,
        "iterations": 200,
        "batch_size": 4,
        "jobs": 1,
        "apc": {},
        "hourglass": {},
        "dilation": {},
    },
    "eval": {
        "manifest": "data/manifest.json",
        "out": "eval",
        "checkpoint": None,
        "predictions": None,
        "baseline": None,
        "reference": "auto",
        "save_predictions": False,
        "jobs": 1,
        "seed": None,
    },
    "stats": {
        "manifest": None,
        "dir": None,
        "out": "stats",
        "row_band": None,
        "bins": 3,
        "crop": False,
        "seed": None,
        "jobs": 1,
    },
}

# flags that land inside a nested section of the resolved config
NESTED = {
    "height": ("synth", "height"),
    "width": ("synth", "width"),
    "kernel_size": ("dilation", "kernel_size"),
    "half_distance": ("dilation", "half_distance"),
    "combine": ("dilation", "combine"),
    "stages": ("hourglass", "stages"),
    "levels": ("hourglass", "levels"),
    "base_channels": ("hourglass", "base_channels"),
    "no_dense": ("hourglass", "dense"),
    "no_confidence_input": ("hourglass", "confidence_input"),
}


def _load_config_file(path: Path) -> dict:
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return data


def resolve(command: str, args: argparse.Namespace, file_cfg: dict | None) -> dict:
    """defaults < config file (top level, then its ``command`` section) < flags."""
    defaults = DEFAULTS[command]
    cfg = json.loads(json.dumps(defaults))
    layers = []
    if file_cfg:
        layers.append({k: v for k, v in file_cfg.items() if k not in DEFAULTS})
        section = file_cfg.get(command, {})
        if not isinstance(section, dict):
            raise UsageError(f"config section '{command}' must be an object")
        layers.append(section)
    for layer in layers:
        for key, value in layer.items():
            if key not in defaults:
                log.debug("ignoring config key %r for %s", key, command)
                continue
            if isinstance(defaults[key], dict):
                if not isinstance(value, dict):
                    raise UsageError(f"config key '{key}' must be an object")
                cfg[key].update(value)
            else:
                cfg[key] = value
    for key, value in vars(args).items():
        if value is None or key in ("command", "config", "root", "verbose", "handler"):
            continue
        if key in NESTED:
            section, name = NESTED[key]
            if section in cfg:
                # the --no-* switches store False
                cfg[section][name] = value
        elif key in cfg:
            cfg[key] = value
    return cfg


def _path(root: Path, value) -> Path | None:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else root / p


def _write_run_config(out_dir: Path, command: str, cfg: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, **cfg}
    (out_dir / RUN_CONFIG).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _require_file(path: Path, what: str) -> Path:
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def _map_jobs(fn, items, jobs: int):
    items = list(items)
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def _frames_of(manifest_path: Path):
    _require_file(manifest_path, "manifest")
    try:
        manifest, records = load_manifest(manifest_path)
    except json.JSONDecodeError as exc:
        raise UsageError(f"manifest {manifest_path} is not valid JSON: {exc}") from None
    return manifest, records, config_from_manifest(manifest)


# ---------------------------------------------------------------- subcommands


def cmd_gen(cfg: dict, root: Path) -> int:
    out = _path(root, cfg["out"])
    synth = SynthConfig.from_dict(cfg["synth"])
    cfg["synth"] = synth.to_dict()
    manifest = gen_dataset(int(cfg["frames"]), int(cfg["seed"]), synth, out, jobs=int(cfg["jobs"]))
    _write_run_config(out, "gen", cfg)
    print(f"wrote {len(manifest['frames'])} frames to {out}")
    return EXIT_OK


def _confidence_job(job):
    lidar_path, target, spec = job
    write_confidence_png(target, make_guiding_confidence(read_depth_png(lidar_path), DilationSpec(**spec)))
    return str(target)


def cmd_confidence(cfg: dict, root: Path) -> int:
    _, records, _ = _frames_of(_path(root, cfg["manifest"]))
    spec = DilationSpec(**cfg["dilation"])
    cfg["dilation"] = asdict(spec)
    out = _path(root, cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(r["lidar"], out / f"{i:06d}_guide.png", cfg["dilation"]) for i, r in enumerate(records)]
    written = _map_jobs(_confidence_job, jobs, int(cfg["jobs"]))
    _write_run_config(out, "confidence", cfg)
    print(f"wrote {len(written)} confidence maps to {out}")
    return EXIT_OK


def cmd_fuse(cfg: dict, root: Path) -> int:
    for key in ("stereo", "lidar", "confidence", "out"):
        if cfg[key] is None:
            raise UsageError(f"fuse needs --{key}")
    stereo = read_depth_png(_require_file(_path(root, cfg["stereo"]), "stereo map"))
    lidar = read_depth_png(_require_file(_path(root, cfg["lidar"]), "lidar map"))
    conf = read_confidence_png(_require_file(_path(root, cfg["confidence"]), "confidence map"))
    if cfg["lidar_fill"] == "nearest":
        lidar = complete_lidar_nearest(lidar)
    fused = fuse(stereo, lidar, conf)
    out = _path(root, cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_depth_png(out, fused)
    _write_run_config(out.parent, "fuse", cfg)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_train(cfg: dict, root: Path) -> int:
    _, records, synth = _frames_of(_path(root, cfg["manifest"]))
    if not records:
        raise UsageError("manifest lists no frames")
    config = TrainConfig.from_dict({k: cfg[k] for k in ("apc", "hourglass", "dilation")})
    hyper = HyperParams(
        lr=float(cfg["lr"]),
        momentum=float(cfg["momentum"]),
        iterations=int(cfg["iterations"]),
        seed=int(cfg["seed"]),
        batch_size=int(cfg["batch_size"]),
    )
    cfg.update(config.to_dict())
    samples = [load_frame(r, synth) for r in records]
    frames = frames_from_samples(samples, config.dilation)
    log.info("training on %d frames for %d iterations", len(frames), hyper.iterations)

    def progress(row):
        if row["iteration"] % 10 == 0:
            log.info("iter %d total %.4f", row["iteration"], row["total"])

    result = run_training(frames, config, hyper, progress)
    out = _path(root, cfg["out"])
    save_training_outputs(result, out)
    _write_run_config(out, "train", cfg)
    print(f"wrote {out / 'checkpoint.bin'} and {out / 'losses.csv'}")
    if result.curve:
        print(f"total loss {result.curve[0]['total']:.4f} -> {result.curve[-1]['total']:.4f}")
    return EXIT_OK


@lru_cache(maxsize=2)
def _load_model(path: str):
    checkpoint = ModelCheckpoint.load(path)
    return checkpoint, checkpoint.build_model()


def _eval_job(job):
    index, record, mode, source, reference, horizon, pred_dir = job
    frame = load_frame(record)
    if mode == "checkpoint":
        checkpoint, model = _load_model(source)
        pred, _ = run_inference(frame, checkpoint, model=model)
    elif mode == "predictions":
        pred = read_depth_png(Path(source) / f"{index:06d}.png")
    elif source == "lidar":
        pred = complete_lidar_nearest(frame.d_lidar_sparse)
    else:
        pred = frame.d_stereo
    if pred_dir is not None:
        write_depth_png(Path(pred_dir) / f"{index:06d}.png", pred)
    if reference == "full":
        ref = frame.d_full
        reports = {"full": evaluate(pred, ref, None, "full")}
        reports.update(completeness_report(pred, ref, horizon))
    else:
        reports = {"full": evaluate(pred, frame.d_gt, None, "full")}
    return {region: r.to_dict() for region, r in reports.items()}


def cmd_eval(cfg: dict, root: Path) -> int:
    sources = [k for k in ("checkpoint", "predictions", "baseline") if cfg[k] is not None]
    if len(sources) != 1:
        raise UsageError("eval needs exactly one of --checkpoint, --predictions, --baseline")
    mode = sources[0]
    if mode == "checkpoint":
        source = str(_require_file(_path(root, cfg["checkpoint"]), "checkpoint"))
    elif mode == "predictions":
        source = str(_path(root, cfg["predictions"]))
        if not Path(source).is_dir():
            raise UsageError(f"predictions directory not found: {source}")
    else:
        if cfg["baseline"] not in ("lidar", "stereo"):
            raise UsageError("--baseline must be 'lidar' or 'stereo'")
        source = cfg["baseline"]

    _, records, synth = _frames_of(_path(root, cfg["manifest"]))
    if not records:
        raise UsageError("manifest lists no frames")
    reference = cfg["reference"]
    if reference == "auto":
        reference = "full" if all(r.get("full") for r in records) else "gt"
    if reference == "full" and not all(r.get("full") for r in records):
        raise UsageError("--reference full needs dense reference maps in the manifest")
    if mode == "predictions":
        for i in range(len(records)):
            _require_file(Path(source) / f"{i:06d}.png", "prediction")

    out = _path(root, cfg["out"])
    (out / "frames").mkdir(parents=True, exist_ok=True)
    pred_dir = None
    if cfg["save_predictions"]:
        pred_dir = out / "predictions"
        pred_dir.mkdir(exist_ok=True)
    horizons = [synth.lidar_horizon_row if synth else load_frame(r).lidar_horizon for r in records]
    jobs = [
        (i, r, mode, source, reference, horizons[i], None if pred_dir is None else str(pred_dir))
        for i, r in enumerate(records)
    ]
    per_frame = _map_jobs(_eval_job, jobs, int(cfg["jobs"]))

    for i, (record, reports) in enumerate(zip(records, per_frame)):
        payload = {"index": i, "seed": record.get("seed"), "reports": reports}
        (out / "frames" / f"{i:06d}.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    summary = {}
    for region in REGIONS:
        reps = [EvalReport.from_dict(f[region]) for f in per_frame if region in f]
        if reps:
            summary[region] = aggregate(reps, region).to_dict()
    (out / "aggregate.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    cfg["reference"] = reference
    _write_run_config(out, "eval", cfg)
    for region, rep in summary.items():
        print(EvalReport.from_dict(rep).format_row(region))
    return EXIT_OK


def _stats_maps(cfg: dict, root: Path):
    if (cfg["manifest"] is None) == (cfg["dir"] is None):
        raise UsageError("stats needs exactly one of --manifest or --dir")
    if cfg["manifest"] is not None:
        _, records, _ = _frames_of(_path(root, cfg["manifest"]))
        paths = [Path(r["lidar"]) for r in records]
    else:
        folder = _path(root, cfg["dir"])
        if not folder.is_dir():
            raise UsageError(f"directory not found: {folder}")
        paths = sorted(folder.glob("*.png"))
    if not paths:
        raise UsageError("no lidar maps to summarise")
    for p in paths:
        depth = read_depth_png(p)
        yield bottom_crop(depth, CropSpec()) if cfg["crop"] else depth


def cmd_stats(cfg: dict, root: Path) -> int:
    band = tuple(int(x) for x in cfg["row_band"]) if cfg["row_band"] is not None else None
    if band is not None and (len(band) != 2 or not 0 <= band[0] < band[1]):
        raise UsageError("--row-band needs START STOP with 0 <= START < STOP")
    maps = list(_stats_maps(cfg, root))
    density = scanline_density_stats(maps, band, int(cfg["bins"]))
    out = _path(root, cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    report = {"n_maps": len(maps), "row_band": list(band) if band else None, "density": density.tolist()}
    (out / "stats.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _write_run_config(out, "stats", cfg)
    print("bin density: " + "  ".join(f"{100 * d:.1f}%" for d in density))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _non_negative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with parameter defaults; flags override it")
    common.add_argument("--root", default=".", help="base directory for relative paths (default: .)")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=_positive_int, help="worker processes for per-frame work")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="scadc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="write a synthetic dataset and manifest")
    p.add_argument("--frames", type=_non_negative_int)
    p.add_argument("--out")
    p.add_argument("--height", type=_positive_int)
    p.add_argument("--width", type=_positive_int)
    p.set_defaults(handler=cmd_gen)

    p = sub.add_parser("confidence", parents=[common], help="guiding confidence maps for a manifest")
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--kernel-size", type=_positive_int)
    p.add_argument("--half-distance", type=float)
    p.add_argument("--combine", choices=("max", "sum"))
    p.set_defaults(handler=cmd_confidence)

    p = sub.add_parser("fuse", parents=[common], help="fuse one stereo/lidar pair with a confidence map")
    p.add_argument("--stereo")
    p.add_argument("--lidar")
    p.add_argument("--confidence")
    p.add_argument("--out")
    p.add_argument("--lidar-fill", choices=("none", "nearest"))
    p.set_defaults(handler=cmd_fuse)

    p = sub.add_parser("train", parents=[common], help="train the confidence network and refiner")
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--iterations", type=_non_negative_int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--stages", type=_positive_int)
    p.add_argument("--levels", type=_positive_int)
    p.add_argument("--base-channels", type=_positive_int)
    p.add_argument("--no-dense", action="store_const", const=False, default=None)
    p.add_argument("--no-confidence-input", action="store_const", const=False, default=None)
    p.add_argument("--half-distance", type=float)
    p.add_argument("--combine", choices=("max", "sum"))
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score predictions against groundtruth")
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--checkpoint")
    p.add_argument("--predictions", help="directory of NNNNNN.png maps in manifest order")
    p.add_argument("--baseline", choices=("lidar", "stereo"))
    p.add_argument("--reference", choices=("auto", "full", "gt"))
    p.add_argument("--save-predictions", action="store_const", const=True, default=None)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("stats", parents=[common], help="lidar scanline density per column bin")
    p.add_argument("--manifest")
    p.add_argument("--dir", help="directory of sparse lidar PNGs")
    p.add_argument("--out")
    p.add_argument("--row-band", type=int, nargs=2, metavar=("START", "STOP"))
    p.add_argument("--bins", type=_positive_int)
    p.add_argument("--crop", action="store_const", const=True, default=None, help="bottom crop to 352x1216 first")
    p.set_defaults(handler=cmd_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    root = Path(args.root)
    try:
        file_cfg = _load_config_file(_path(root, args.config)) if args.config else None
        cfg = resolve(args.command, args, file_cfg)
        return args.handler(cfg, root)
    except TrainingError as exc:
        print(f"scadc {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ArgumentError, UsageError, FileNotFoundError, ValueError) as exc:
        print(f"scadc {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ScadcError as exc:
        print(f"scadc {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ArithmeticError) as exc:
        print(f"scadc {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

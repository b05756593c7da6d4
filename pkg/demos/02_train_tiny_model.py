"""Train a small model for a few iterations and evaluate it on held-out scenes.

This is a quick, scaled-down version of the full experiment in the acceptance
suite (200 frames, 200 iterations, default architecture). Defaults here finish
in well under a minute on one core.

    python3 demos/02_train_tiny_model.py [iterations] [frames]
"""

import sys
import time

from scadc import (
    ApcConfig,
    HourglassConfig,
    HyperParams,
    TrainConfig,
    aggregate,
    complete_lidar_nearest,
    completeness_report,
    gen_scene,
    run_inference,
    run_training,
)
from scadc.hourglass import frames_from_samples

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 40
n_frames = int(sys.argv[2]) if len(sys.argv) > 2 else 24
config = TrainConfig(ApcConfig(widths=(8, 8)), HourglassConfig(stages=2, base_channels=8))

start = time.perf_counter()
frames = frames_from_samples([gen_scene(7 + i) for i in range(n_frames)])
result = run_training(
    frames,
    config,
    HyperParams(iterations=iterations),
    callback=lambda row: row["iteration"] % 10 == 0 and print(f"iter {row['iteration']:4d}  total {row['total']:10.3f}"),
)
print(f"trained in {time.perf_counter() - start:.1f}s: loss {result.curve[0]['total']:.2f} -> {result.curve[-1]['total']:.2f}")

model = result.checkpoint.build_model()
reports = {"model": [], "lidar fill": []}
for i in range(10):
    scene = gen_scene(1000 + i)
    pred, _ = run_inference(scene, result.checkpoint, model=model)
    reports["model"].append(completeness_report(pred, scene.d_full, scene.lidar_horizon))
    reports["lidar fill"].append(completeness_report(complete_lidar_nearest(scene.d_lidar_sparse), scene.d_full,
                                                     scene.lidar_horizon))
for name, reps in reports.items():
    lower = aggregate(r["lower"] for r in reps).rmse
    upper = aggregate(r["upper"] for r in reps).rmse
    print(f"{name:<11} lower RMSE {lower:6.3f}   upper RMSE {upper:6.3f}")

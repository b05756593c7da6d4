"""Walk through one synthetic frame without any training.

Generates a scene, builds the guiding confidence from the lidar scan, fuses
stereo with the nearest-filled lidar under that confidence, and compares the
three depth maps above and below the lidar horizon.

    python3 demos/01_fusion_walkthrough.py [seed]
"""

import sys

from scadc import complete_lidar_nearest, completeness_report, fuse, gen_scene, make_guiding_confidence

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 7
scene = gen_scene(seed)
h = scene.lidar_horizon
print(f"scene {seed}: {scene.image_height}x{scene.image_width}, lidar reaches rows {h}..{scene.image_height - 1}, "
      f"{int(scene.d_lidar_sparse.valid.sum())} lidar points")

guide = make_guiding_confidence(scene.d_lidar_sparse)
lidar = complete_lidar_nearest(scene.d_lidar_sparse)
fused = fuse(scene.d_stereo, lidar, guide)

print(f"guiding confidence: mean {guide.values[h:].mean():.3f} below the horizon, "
      f"{guide.values[:h].mean():.3f} above it")
for name, depth in (("stereo", scene.d_stereo), ("lidar fill", lidar), ("fused", fused)):
    r = completeness_report(depth, scene.d_full, h)
    print(f"{name:<11} lower RMSE {r['lower'].rmse:6.3f}   upper RMSE {r['upper'].rmse:6.3f}")

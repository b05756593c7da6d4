"""Stereo and lidar depth fusion with learned lidar confidence.

A small numpy reimplementation of a confidence-weighted stereo/lidar depth
fusion pipeline: depth-map I/O, guiding confidence, a reverse-mode autodiff
core, sparsity-aware convolutions, a stacked hourglass refiner, a synthetic
scene generator, metrics and a command line front end.
"""

from .apc import APC, ApcConfig, MaskedFeature, apc_forward, fuse, saconv
from .completion import complete_lidar_nearest
from .confidence import (
    ConfidenceMap,
    DilationSpec,
    confidence_loss,
    make_guiding_confidence,
    stereo_confidence,
)
from .depthio import (
    CameraRig,
    CropSpec,
    DepthMap,
    bottom_crop,
    decode_depth_png,
    disparity_to_depth,
    encode_depth_png,
    read_depth_png,
    scanline_density_stats,
    write_depth_png,
)
from .errors import (
    ArgumentError,
    CodecError,
    DimensionError,
    FormatError,
    GraphError,
    NonFiniteError,
    RangeError,
    ScadcError,
    TrainingError,
)
from .hourglass import (
    HourglassConfig,
    HyperParams,
    ModelCheckpoint,
    ScadcModel,
    StackedHourglass,
    TrainConfig,
    hourglass_forward,
    run_inference,
    run_training,
    stage_losses,
    total_loss,
)
from .metrics import EvalReport, aggregate, completeness_report, evaluate
from .synthgen import SceneSample, SynthConfig, gen_dataset, gen_scene, load_frame, load_manifest
from .tensorcore import ConvSpec, Tensor, grad_check

__version__ = "0.1.0"

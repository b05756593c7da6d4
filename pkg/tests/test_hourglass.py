import numpy as np
import pytest

from scadc import tensorcore as tc
from scadc.apc import ApcConfig
from scadc.depthio import DepthMap
from scadc.errors import ArgumentError, DimensionError, TrainingError
from scadc.hourglass import (
    DEPTH_RANGE,
    HourglassConfig,
    HyperParams,
    ModelCheckpoint,
    StackedHourglass,
    TrainConfig,
    frames_from_samples,
    hourglass_forward,
    run_inference,
    run_training,
    stage_losses,
    total_loss,
)
from scadc.synthgen import SynthConfig, gen_scene
from scadc.tensorcore import Tensor

SMALL = TrainConfig(ApcConfig(widths=(4, 4)), HourglassConfig(stages=2, levels=1, base_channels=4))
SCENE = SynthConfig(height=16, width=32, n_scanlines=5)


@pytest.fixture(scope="module")
def frames():
    return frames_from_samples([gen_scene(s, SCENE) for s in range(4)])


# ---------------------------------------------------------------- architecture


@pytest.mark.parametrize("stages", [1, 2, 3])
@pytest.mark.parametrize("levels", [1, 2])
@pytest.mark.parametrize("dense", [True, False])
def test_stage_output_shapes(rng, stages, levels, dense):
    cfg = HourglassConfig(stages=stages, levels=levels, base_channels=4, dense=dense)
    model = StackedHourglass(cfg, rng)
    x = rng.uniform(1, 20, size=(2, 1, 8, 12))
    outs = model(x, rng.uniform(size=x.shape))
    assert len(outs) == stages
    for s in outs:
        assert s.shape == x.shape
        assert np.all(s.data >= 0)


def test_dense_connections_add_parameters(rng):
    a = StackedHourglass(HourglassConfig(stages=3, dense=True), rng)
    b = StackedHourglass(HourglassConfig(stages=3, dense=False), rng)
    assert sum(p.data.size for p in a.parameters()) > sum(p.data.size for p in b.parameters())


def test_zero_heads_give_zero_depth(rng):
    model = StackedHourglass(HourglassConfig(stages=2, levels=1, base_channels=4, confidence_input=False), rng)
    for stage in model.stages:
        for p in stage.head.parameters():
            p.data = np.zeros_like(p.data)
    outs = hourglass_forward(DepthMap.from_values(rng.uniform(1, 9, size=(4, 6))), model, train=True)
    assert all(not o.values.any() for o in outs)


def test_hourglass_input_errors(rng):
    model = StackedHourglass(HourglassConfig(stages=1, levels=2, base_channels=2), rng)
    with pytest.raises(DimensionError):
        model(np.ones((1, 1, 6, 8)), np.ones((1, 1, 6, 8)))
    with pytest.raises(ArgumentError):
        model(np.ones((1, 1, 8, 8)))
    with pytest.raises(ArgumentError):
        HourglassConfig(stages=0)


# ---------------------------------------------------------------- losses


def test_stage_loss_examples():
    gt = DepthMap.from_values(np.full((2, 3), 5.0))
    outs = [DepthMap.from_values(np.full((2, 3), 5.0 + k)) for k in (1, 2, 3)]
    assert [l.item() for l in stage_losses(outs, gt)] == [1.0, 4.0, 9.0]
    with pytest.raises(ArgumentError):
        stage_losses(outs, DepthMap.empty(2, 3))


def test_stage_loss_ignores_invalid_gt_pixels(rng):
    values = rng.uniform(1, 10, size=(4, 4))
    valid = rng.uniform(size=(4, 4)) < 0.5
    valid[0, 0] = True
    pred = rng.uniform(1, 10, size=(1, 1, 4, 4))
    base = stage_losses([Tensor(pred)], (values[None, None], valid[None, None]))[0].item()
    pred2 = np.where(valid[None, None], pred, 1e6)
    assert stage_losses([Tensor(pred2)], (values[None, None], valid[None, None]))[0].item() == base


def test_total_loss_is_the_sum():
    assert total_loss([Tensor(np.array(1.0)), Tensor(np.array(4.0))], 0.5).item() == 5.5
    assert total_loss([], 0.25).item() == 0.25


def test_total_loss_gradient_is_sum_of_terms(rng):
    x = rng.normal(size=(1, 1, 3, 3))
    target = rng.normal(size=x.shape)
    mask = np.ones(x.shape, bool)

    def grads(scales):
        t = Tensor(x, True)
        terms = [tc.mse_masked(tc.mul(t, s), target, mask) for s in scales]
        total_loss(terms[:-1], terms[-1]).backward()
        return t.grad

    whole = grads([1.0, 2.0, 3.0])
    parts = sum(grads([s]) for s in (1.0, 2.0, 3.0))
    assert np.allclose(whole, parts, atol=1e-12)


# ---------------------------------------------------------------- training


def test_zero_learning_rate_keeps_parameters(frames):
    result = run_training(frames, SMALL, HyperParams(lr=0.0, iterations=3, batch_size=4))
    fresh = run_training(frames, SMALL, HyperParams(lr=0.0, iterations=0, batch_size=4))
    for name, arr in fresh.checkpoint.tensors.items():
        if "running" not in name:
            assert np.array_equal(arr, result.checkpoint.tensors[name]), name
    # every step sees the full set, so the curve is flat
    assert len({row["total"] for row in result.curve}) == 1


def test_training_is_deterministic(frames):
    hyper = HyperParams(iterations=3, batch_size=2)
    a = run_training(frames, SMALL, hyper)
    b = run_training(frames, SMALL, hyper)
    assert a.checkpoint.to_bytes() == b.checkpoint.to_bytes()
    assert a.curve_csv() == b.curve_csv()


def test_divergence_names_the_iteration(frames):
    with pytest.raises(TrainingError, match="iteration"):
        run_training(frames, SMALL, HyperParams(lr=1e100, iterations=20, batch_size=2))


def test_training_reduces_loss(frames):
    result = run_training(frames, SMALL, HyperParams(lr=1e-3, iterations=30, batch_size=2))
    assert result.curve[-1]["total"] < result.curve[0]["total"]


def test_training_argument_errors(frames):
    with pytest.raises(ArgumentError):
        run_training([], SMALL)
    with pytest.raises(ArgumentError):
        HyperParams(momentum=1.0)
    with pytest.raises(ArgumentError):
        HyperParams(batch_size=0)


def test_curve_csv_header(frames):
    result = run_training(frames, SMALL, HyperParams(iterations=2, batch_size=2))
    lines = result.curve_csv().splitlines()
    assert lines[0] == "iteration,l1,l2,lc,total"
    assert len(lines) == 3


# ---------------------------------------------------------------- checkpoints and inference


@pytest.fixture(scope="module")
def checkpoint(frames):
    return run_training(frames, SMALL, HyperParams(iterations=2, batch_size=2)).checkpoint


def test_checkpoint_round_trip(checkpoint, tmp_path):
    checkpoint.save(tmp_path / "c.bin")
    back = ModelCheckpoint.load(tmp_path / "c.bin")
    assert back.metadata == checkpoint.metadata
    assert back.to_bytes() == checkpoint.to_bytes()
    assert back.config == SMALL


def test_checkpoint_config_mismatch(checkpoint):
    with pytest.raises(ArgumentError):
        checkpoint.build_model(TrainConfig())
    checkpoint.build_model(SMALL)


def test_inference_contract(checkpoint):
    scene = gen_scene(99, SynthConfig(height=15, width=30, n_scanlines=5))
    depth, conf = run_inference(scene, checkpoint)
    assert depth.shape == conf.shape == (15, 30)
    lo, hi = DEPTH_RANGE
    assert np.all(depth.valid) and depth.values.min() >= lo and depth.values.max() <= hi
    assert np.all((conf.values > 0) & (conf.values < 1))
    again, _ = run_inference(scene, checkpoint)
    assert again == depth
    # the rows above the lidar horizon get an estimate too
    assert depth.valid[: scene.lidar_horizon].all()
    raw, _ = run_inference(scene, checkpoint, depth_range=None)
    assert np.all(raw.values >= 0)

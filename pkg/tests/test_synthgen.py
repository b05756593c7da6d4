import hashlib
from pathlib import Path

import numpy as np
import pytest
from scipy import ndimage

from scadc.depthio import quantize_depth, scanline_density_stats
from scadc.errors import ArgumentError
from scadc.synthgen import SynthConfig, config_from_manifest, gen_dataset, gen_scene, load_frame, load_manifest

CFG = SynthConfig()


def test_same_seed_same_scene():
    a, b = gen_scene(3), gen_scene(3)
    for name in ("d_stereo", "d_lidar_sparse", "d_gt", "d_full"):
        assert getattr(a, name) == getattr(b, name)
    assert gen_scene(4).d_stereo != a.d_stereo


def test_frozen_values_seed_7():
    s = gen_scene(7)
    assert s.d_stereo.values.sum() == 334536.6953125
    assert s.d_full.values.sum() == 349675.0078125
    assert int(s.d_lidar_sparse.valid.sum()) == 872
    assert len(s.boxes) == 6
    assert hashlib.sha256(s.d_stereo.values.tobytes()).hexdigest()[:16] == "19c3093126567df5"


@pytest.mark.parametrize("seed", range(5))
def test_region_contracts(seed):
    s = gen_scene(seed)
    assert s.lidar_horizon == s.gt_horizon == 21
    assert not s.d_lidar_sparse.valid[: s.lidar_horizon].any()
    assert not s.d_gt.valid[: s.gt_horizon].any()
    assert s.d_gt.valid[s.gt_horizon :].all()
    assert s.d_full.valid.all() and s.d_stereo.valid.all()
    # lidar is exact: scan pixels carry the full-scene depth
    lv = s.d_lidar_sparse.valid
    assert np.array_equal(s.d_lidar_sparse.values[lv], s.d_full.values[lv])
    assert set(np.flatnonzero(lv.any(axis=1))) <= set(CFG.scanline_rows())
    assert np.all(s.d_full.values >= CFG.min_depth) and np.all(s.d_full.values <= CFG.max_depth)


def test_stereo_noise_grows_with_depth():
    near, far = [], []
    for seed in range(100):
        s = gen_scene(seed)
        err = np.abs(s.d_stereo.values - s.d_full.values)
        d = s.d_full.values
        near.append(err[(d >= 1) & (d <= 10)])
        far.append(err[(d >= 40) & (d <= 80)])
    assert np.mean(np.concatenate(far)) > np.mean(np.concatenate(near))


def test_edge_bleed_spreads_foreground_depth():
    # without noise the stereo map is exactly the bled surface
    cfg = SynthConfig(stereo_noise_coeff=0.0)
    structure = np.ones((2 * cfg.bleed_radius + 1,) * 2, bool)
    checked = 0
    for seed in range(20):
        s = gen_scene(seed, cfg)
        stereo, full = s.d_stereo.values, s.d_full.values
        assert np.all(stereo <= full)
        near_box = np.zeros(full.shape, bool)
        for k, box in enumerate(s.boxes):
            own = s.surface_ids == k + 1
            if not own.any():
                continue
            reach = ndimage.binary_dilation(own, structure)
            near_box |= reach
            ring = reach & ~own
            box_depth = quantize_depth(np.array(box.depth))[()] / 256
            assert np.all(stereo[ring] <= box_depth)
            behind = ring & (full > box_depth)
            if behind.any():
                # at least one pixel past the true edge takes the object's depth
                assert np.any(stereo[behind] == box_depth)
                checked += 1
        assert np.array_equal(stereo[~near_box], full[~near_box])
    assert checked > 40


def test_scanline_density_center_exceeds_sides():
    maps = [gen_scene(s).d_lidar_sparse for s in range(30)]
    stats = scanline_density_stats(maps, (CFG.lidar_horizon_row, CFG.height), 3)
    assert stats[1] > stats[0] and stats[1] > stats[2]


def test_config_validation():
    for bad in (
        dict(height=1),
        dict(lidar_horizon_frac=0.0),
        dict(dropout_center=1.0),
        dict(min_depth=0.0),
        dict(min_objects=0),
        dict(object_depth_range=(0.5, 10.0)),
        dict(backdrop_prob=1.5),
        dict(n_scanlines=100),
    ):
        with pytest.raises(ArgumentError):
            SynthConfig(**bad)
    with pytest.raises(ArgumentError):
        SynthConfig.from_dict({"nope": 1})
    assert SynthConfig.from_dict(CFG.to_dict()) == CFG


def tree_digest(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_dataset_round_trip(tmp_path):
    cfg = SynthConfig(height=16, width=32, n_scanlines=4)
    gen_dataset(3, 11, cfg, tmp_path / "a")
    gen_dataset(3, 11, cfg, tmp_path / "b", jobs=2)
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    manifest, records = load_manifest(tmp_path / "a" / "manifest.json")
    assert len(records) == 3 and config_from_manifest(manifest) == cfg
    for i, record in enumerate(records):
        loaded = load_frame(record, cfg)
        fresh = gen_scene(11 + i, cfg)
        assert loaded.d_stereo == fresh.d_stereo and loaded.d_gt == fresh.d_gt
        assert loaded.d_lidar_sparse == fresh.d_lidar_sparse and loaded.d_full == fresh.d_full
        # without a config the horizons come from the data
        assert load_frame(record).gt_horizon == cfg.gt_horizon_row


def test_empty_dataset(tmp_path):
    manifest = gen_dataset(0, 1, CFG, tmp_path)
    assert manifest["frames"] == []
    assert load_manifest(tmp_path / "manifest.json")[1] == []
    with pytest.raises(ArgumentError):
        gen_dataset(-1, 1, CFG, tmp_path)

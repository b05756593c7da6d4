import json

import numpy as np
import pytest

from scadc.depthio import DepthMap
from scadc.errors import ArgumentError, DimensionError
from scadc.metrics import REFERENCE_TABLE, EvalReport, aggregate, completeness_report, evaluate, format_table


def const(value, shape=(3, 4)):
    return DepthMap.from_values(np.full(shape, value))


def test_identity_is_perfect(rng):
    gt = DepthMap.from_values(rng.uniform(1, 80, size=(5, 6)))
    r = evaluate(gt, gt)
    assert (r.rmse, r.rel, r.delta1, r.delta2, r.delta3, r.n_pixels) == (0.0, 0.0, 100.0, 100.0, 100.0, 30)


def test_hand_case():
    r = evaluate(const(1.3), const(1.0))
    assert r.rmse == pytest.approx(0.3, abs=1e-12)
    assert r.rel == pytest.approx(0.3, abs=1e-12)
    assert (r.delta1, r.delta2, r.delta3) == (0.0, 100.0, 100.0)


def test_ratio_is_symmetric():
    # 1/1.3 is as far off as 1.3
    r = evaluate(const(1.0), const(1.3))
    assert (r.delta1, r.delta2, r.delta3) == (0.0, 100.0, 100.0)


def test_delta_monotone_on_random_maps(rng):
    for _ in range(1000):
        gt = DepthMap.from_values(np.where(rng.uniform(size=(4, 4)) < 0.8, rng.uniform(1, 80, (4, 4)), 0))
        if not gt.valid.any():
            continue
        pred = DepthMap.from_values(np.where(rng.uniform(size=(4, 4)) < 0.9, rng.uniform(0.5, 90, (4, 4)), 0))
        r = evaluate(pred, gt)
        assert 0 <= r.delta1 <= r.delta2 <= r.delta3 <= 100
        assert r.rmse >= 0 and r.rel >= 0


def test_invalid_prediction_counts_as_zero():
    gt = const(2.0, (1, 2))
    pred = DepthMap.from_values(np.array([[2.0, 0.0]]))
    r = evaluate(pred, gt)
    assert r.rmse == pytest.approx(np.sqrt(2.0))
    assert r.rel == 0.5
    assert r.delta3 == 50.0


def test_pixels_without_groundtruth_are_ignored(rng):
    gt = DepthMap.from_values(np.array([[5.0, 0.0], [0.0, 7.0]]))
    a = evaluate(DepthMap.from_values(np.array([[5.5, 1.0], [2.0, 7.0]])), gt)
    b = evaluate(DepthMap.from_values(np.array([[5.5, 60.0], [0.0, 7.0]])), gt)
    assert a == b and a.n_pixels == 2


def test_regions_partition_the_rows(rng):
    gt = DepthMap.from_values(rng.uniform(1, 50, size=(10, 8)))
    pred = DepthMap.from_values(rng.uniform(1, 50, size=(10, 8)))
    parts = completeness_report(pred, gt, 4)
    full = evaluate(pred, gt)
    assert parts["lower"].n_pixels + parts["upper"].n_pixels == full.n_pixels
    assert parts["upper"] == evaluate(pred, gt, (0, 4), "upper")
    assert aggregate(parts.values(), "full").rmse == pytest.approx(full.rmse, abs=1e-12)


def test_evaluate_errors():
    with pytest.raises(ArgumentError):
        evaluate(const(1.0), DepthMap.empty(3, 4))
    with pytest.raises(ArgumentError):
        evaluate(const(1.0), const(1.0), (5, 9))
    with pytest.raises(DimensionError):
        evaluate(const(1.0, (2, 2)), const(1.0))
    with pytest.raises(ArgumentError):
        aggregate([])


def test_aggregate_is_pixel_weighted(rng):
    gts = [DepthMap.from_values(rng.uniform(1, 50, size=s)) for s in [(2, 3), (5, 7)]]
    preds = [DepthMap.from_values(rng.uniform(1, 50, size=g.shape)) for g in gts]
    agg = aggregate(evaluate(p, g) for p, g in zip(preds, gts))
    err = np.concatenate([(p.values - g.values).ravel() for p, g in zip(preds, gts)])
    d = np.concatenate([g.values.ravel() for g in gts])
    assert agg.n_pixels == 41
    assert agg.rmse == pytest.approx(np.sqrt(np.mean(err**2)), abs=1e-12)
    assert agg.rel == pytest.approx(np.mean(np.abs(err) / d), abs=1e-12)


def test_report_serialisation():
    r = evaluate(const(1.3), const(1.0))
    d = json.loads(r.to_json())
    assert set(d) == {"region", "rmse", "rel", "delta1", "delta2", "delta3", "n_pixels"}
    assert EvalReport.from_dict(d) == r
    assert "RMSE 0.3000" in r.format_row("x")


def test_format_table():
    text = format_table(list(REFERENCE_TABLE.items()))
    lines = text.splitlines()
    assert lines[0].startswith("Methods") and len(lines) == 4
    assert "1.0096" in lines[3] and "100.0" in lines[3]

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import guiding_confidence_brute
from scadc.confidence import (
    ConfidenceMap,
    DilationSpec,
    confidence_loss,
    decode_confidence_png,
    encode_confidence_png,
    make_guiding_confidence,
    stereo_confidence,
)
from scadc.depthio import DepthMap
from scadc.errors import ArgumentError, DimensionError


def sparse_from(mask, depth=7.0):
    return DepthMap.from_values(np.where(mask, depth, 0.0))


def test_spec_validation_and_variance():
    assert DilationSpec().variance == pytest.approx(1 / (2 * math.log(2)))
    assert DilationSpec().variance == pytest.approx(0.7213475204444817, abs=1e-15)
    for bad in (dict(kernel_size=2), dict(kernel_size=0), dict(half_distance=0.0), dict(combine="mean")):
        with pytest.raises(ArgumentError):
            DilationSpec(**bad)


def test_isolated_point_values():
    mask = np.zeros((7, 7), bool)
    mask[3, 3] = True
    g = make_guiding_confidence(sparse_from(mask)).values
    assert g[3, 3] == 1.0
    assert g[3, 4] == pytest.approx(0.5, abs=1e-15)
    assert g[2, 3] == pytest.approx(0.5, abs=1e-15)
    assert g[2, 2] == pytest.approx(0.25, abs=1e-15)
    # outside the 3x3 reach
    assert g[3, 5] == 0.0 and g[0, 0] == 0.0


def test_half_distance_controls_the_falloff():
    mask = np.zeros((9, 9), bool)
    mask[4, 4] = True
    g = make_guiding_confidence(sparse_from(mask), DilationSpec(5, 2.0)).values
    assert g[4, 6] == pytest.approx(0.5, abs=1e-15)
    assert g[4, 5] == pytest.approx(2 ** -0.25, abs=1e-15)


def test_empty_map_gives_zero():
    g = make_guiding_confidence(DepthMap.empty(5, 6))
    assert g.shape == (5, 6) and not g.values.any()


def test_truncated_at_borders():
    mask = np.zeros((3, 3), bool)
    mask[0, 0] = True
    g = make_guiding_confidence(sparse_from(mask)).values
    np.testing.assert_allclose(g, [[1.0, 0.5, 0.0], [0.5, 0.25, 0.0], [0.0, 0.0, 0.0]], atol=1e-15)


@given(arrays(np.bool_, st.tuples(st.integers(1, 32), st.integers(1, 32)), elements=st.booleans()))
def test_matches_nearest_point_oracle(mask):
    g = make_guiding_confidence(sparse_from(mask)).values
    assert np.max(np.abs(g - guiding_confidence_brute(mask)), initial=0.0) <= 1e-12
    assert np.all(g[mask] == 1.0)


@given(arrays(np.bool_, (12, 12), elements=st.booleans()))
def test_sum_combine_clamped(mask):
    g = make_guiding_confidence(sparse_from(mask), DilationSpec(combine="sum")).values
    assert np.all((g >= 0) & (g <= 1))
    assert np.all(g >= make_guiding_confidence(sparse_from(mask)).values - 1e-15)


def test_translation_equivariance(rng):
    mask = np.zeros((20, 20), bool)
    mask[6:14, 6:14] = rng.uniform(size=(8, 8)) < 0.3
    g = make_guiding_confidence(sparse_from(mask)).values
    shifted = make_guiding_confidence(sparse_from(np.roll(mask, (2, 3), axis=(0, 1)))).values
    assert np.array_equal(np.roll(g, (2, 3), axis=(0, 1)), shifted)


def test_loss_examples():
    g = ConfidenceMap(np.zeros((2, 2)))
    assert confidence_loss(g, g) == 0.0
    assert confidence_loss(ConfidenceMap(np.ones((2, 2))), g) == 1.0
    assert confidence_loss(ConfidenceMap(np.array([[1.0, 0], [0, 0]])), g) == 0.25
    with pytest.raises(DimensionError):
        confidence_loss(ConfidenceMap(np.zeros((2, 3))), g)


def test_stereo_confidence():
    assert not stereo_confidence(ConfidenceMap(np.ones((2, 2)))).values.any()
    assert stereo_confidence(ConfidenceMap(np.array([[0.3]]))).values[0, 0] == pytest.approx(0.7)


@given(arrays(np.float64, (4, 5), elements=st.floats(0, 1)))
def test_stereo_confidence_complement_and_involution(values):
    m = ConfidenceMap(values)
    s = stereo_confidence(m)
    assert np.all(s.values + m.values == 1.0)
    # 1 - (1 - m) loses the low bits of tiny m; exact up to half an ulp of 1
    assert np.max(np.abs(stereo_confidence(s).values - m.values)) <= np.finfo(float).eps / 2
    assert np.all((s.values >= 0) & (s.values <= 1))


def test_confidence_map_validation():
    with pytest.raises(ArgumentError):
        ConfidenceMap(np.array([[1.5]]))
    with pytest.raises(DimensionError):
        ConfidenceMap(np.zeros(3))


def test_png_export_is_close(rng):
    m = ConfidenceMap(rng.uniform(size=(6, 7)))
    back = decode_confidence_png(encode_confidence_png(m))
    assert np.max(np.abs(back.values - m.values)) <= 0.5 / 65535 + 1e-15
    ones = ConfidenceMap(np.ones((2, 2)))
    assert decode_confidence_png(encode_confidence_png(ones)) == ones

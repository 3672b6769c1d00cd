import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sharpopt.params import LayoutMismatch, ParamVector, cosine, flat_layout
from sharpopt.perturbation import (PerturbConfig, ZeroGradient, apply, normalize_to_ball,
                                   random_direction, revert)
from sharpopt.rng import Rng

vectors = arrays(np.float64, 6, elements=st.floats(-1e6, 1e6, allow_nan=False))


def _v(*xs):
    return ParamVector(flat_layout(len(xs)), np.array(xs, dtype=float))


def test_normalize_examples():
    np.testing.assert_allclose(normalize_to_ball(_v(3, 4), 1.0).data, [0.6, 0.8], atol=1e-15)
    np.testing.assert_allclose(normalize_to_ball(_v(1, 0), 0.05).data, [0.05, 0.0], atol=1e-17)
    with pytest.raises(ZeroGradient):
        normalize_to_ball(_v(0, 0), 1.0)


def test_below_threshold_raises():
    with pytest.raises(ZeroGradient):
        normalize_to_ball(_v(1e-13, 0), 1.0, threshold=1e-12)


@given(vectors, st.floats(1e-4, 10.0))
def test_norm_is_rho_and_direction_kept(x, rho):
    if np.linalg.norm(x) <= 1e-9:
        return
    eps = normalize_to_ball(ParamVector(flat_layout(6), x), rho, threshold=1e-12)
    assert abs(eps.norm() - rho) <= 1e-9
    assert cosine(eps.data, x) == pytest.approx(1.0, abs=1e-12)


@given(vectors, st.floats(1e-6, 1e6))
def test_scale_invariance(x, c):
    if np.linalg.norm(x) <= 1e-6:
        return
    layout = flat_layout(6)
    a = normalize_to_ball(ParamVector(layout, x), 0.05)
    b = normalize_to_ball(ParamVector(layout, c * x), 0.05)
    np.testing.assert_allclose(a.data, b.data, rtol=0, atol=1e-12)


def test_extreme_magnitudes_do_not_overflow():
    big = normalize_to_ball(_v(1e300, 1e300), 1.0)
    tiny = normalize_to_ball(_v(1e-200, 0.0), 1.0, threshold=1e-300)
    assert big.norm() == pytest.approx(1.0)
    np.testing.assert_allclose(tiny.data, [1.0, 0.0])


def test_apply_revert_example():
    w = _v(1, 1)
    e = _v(0.1, -0.1)
    wp = apply(w, e)
    np.testing.assert_allclose(wp.data, [1.1, 0.9])
    assert revert(wp, e).equals(w)
    assert apply(w, _v(0, 0)).equals(w)


@given(st.integers(0, 2**32 - 1))
def test_apply_revert_bit_exact_large(seed):
    rng = Rng(seed)
    layout = flat_layout(10_000)
    w = ParamVector(layout, rng.normal(10_000) * 10.0 ** rng.integers(-8, 8, 10_000))
    e = ParamVector(layout, rng.normal(10_000) * 1e-3)
    assert revert(apply(w, e), e).equals(w)


def test_revert_of_plain_vector_subtracts():
    w = _v(0.5, 2.0)
    e = _v(0.25, 0.5)
    np.testing.assert_array_equal(revert(w, e).data, [0.25, 1.5])


def test_layout_mismatch():
    with pytest.raises(LayoutMismatch):
        apply(_v(1, 2), ParamVector(flat_layout(2, "other"), [0.0, 0.0]))


def test_random_direction_norm_and_determinism():
    layout = flat_layout(1000)
    r1 = random_direction(Rng(4), layout, 0.05)
    assert abs(r1.norm() - 0.05) <= 1e-9
    assert random_direction(Rng(4), layout, 0.05).equals(r1)


def test_random_directions_near_orthogonal():
    layout = flat_layout(10_000)
    c = cosine(random_direction(Rng(1), layout, 1.0).data, random_direction(Rng(2), layout, 1.0).data)
    assert -0.1 < c < 0.1


def test_config_validation():
    with pytest.raises(ValueError):
        PerturbConfig(rho=0.0)
    with pytest.raises(ValueError):
        PerturbConfig(zero_grad_threshold=0.0)

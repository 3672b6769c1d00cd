import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import golden_case
from sharpopt import oracle
from sharpopt.models import PassCounter
from sharpopt.optimizers import sam_step, OptimizerState
from sharpopt.perturbation import PerturbConfig, ZeroGradient, random_direction
from sharpopt.reweighting import (ETA_GRID, InstanceWeights, ProbeLosses, delta_sam_direction,
                                  estimate_curvature, instance_weights, probe,
                                  sample_instance_weights)
from sharpopt.rng import Rng


def _p(l0, lp, lm):
    return ProbeLosses(np.array([l0]), np.array([lp]), np.array([lm]), 1.0)


def test_weight_formula_examples():
    assert instance_weights(_p(1.0, 1.3, 0.9), 1e-4).g[0] == pytest.approx(0.5)
    assert instance_weights(_p(1.0, 1.0, 1.0), 1e-4).g[0] == 0.0
    assert instance_weights(_p(1.0, 1.2, 1.2), 1e-3).g[0] == pytest.approx(400.0)


def test_eta_grid_and_validation():
    assert ETA_GRID == (1e-4, 2e-4, 5e-4, 1e-3)
    with pytest.raises(ValueError):
        instance_weights(_p(1, 1, 1), 0.0)
    with pytest.raises(ValueError):
        InstanceWeights(np.array([1.0, -1.0]), 1e-4)
    with pytest.raises(ValueError):
        ProbeLosses(np.zeros(2), np.zeros(3), np.zeros(2), 1.0)


@given(st.lists(st.tuples(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10)), min_size=1,
                max_size=10), st.sampled_from(ETA_GRID))
def test_weights_finite_nonnegative(rows, eta):
    l0, lp, lm = (np.array(c) for c in zip(*rows))
    g = instance_weights(ProbeLosses(l0, lp, lm, 1.0), eta).g
    assert np.all(np.isfinite(g)) and np.all(g >= 0)


def test_probe_zero_direction():
    spec, w, batch = golden_case()
    p = probe(spec, w, batch, w.layout.zeros())
    np.testing.assert_array_equal(p.l_plus, p.l0)
    np.testing.assert_array_equal(p.l_minus, p.l0)


def test_probe_counts_three_unrecorded_forwards():
    spec, w, batch = golden_case()
    c = PassCounter()
    probe(spec, w, batch, random_direction(Rng(0), w.layout, 0.05), c)
    assert c.as_tuple() == (0, 3, 0)
    assert c.instance_evals == 3 * len(batch)


@given(st.integers(0, 10_000), st.floats(1e-3, 1.0))
def test_probe_second_difference_exact_on_quadratics(seed, sigma):
    p = oracle.make_problem(seed, n=5, dim=7)
    r = random_direction(Rng(seed, (1,)), p.w.layout, sigma)
    pl = probe(p.model, p.w, p.batch, r)
    z = p.B @ r.data
    np.testing.assert_allclose(pl.second_difference, p.a * z * z, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(pl.first_difference, 2 * z, rtol=1e-9, atol=1e-12)


def test_estimate_curvature_rank1_example():
    p = oracle.QuadraticProblem.from_gradients(np.array([[1.0, 0.0]]), 2.0)
    est = estimate_curvature(p.model, p.w, p.batch, 0.1, 10_000, Rng(0))
    assert est.grad_norm_sq_hat[0] == pytest.approx(1.0, rel=0.02)
    assert est.a_hat[0] == pytest.approx(2.0, rel=0.02)
    assert not est.degenerate[0]


def test_estimate_curvature_linear_loss():
    p = oracle.QuadraticProblem.from_gradients(np.array([[0.5, -1.0, 2.0]]), 0.0)
    est = estimate_curvature(p.model, p.w, p.batch, 0.1, 10_000, Rng(1))
    assert abs(est.a_hat[0]) <= 0.02


def test_estimate_curvature_zero_gradient_flagged():
    # H = 0 along b = 0: every probe is flat
    p = oracle.QuadraticProblem.from_gradients(np.zeros((1, 3)), 1.0)
    est = estimate_curvature(p.model, p.w, p.batch, 0.1, 100, Rng(2))
    assert est.degenerate[0] and est.a_hat[0] == 0.0
    assert np.all(est.grad_norm_sq_hat >= 0)


def test_estimate_curvature_validates():
    spec, w, batch = golden_case()
    with pytest.raises(ValueError):
        estimate_curvature(spec, w, batch, 0.0, 10, Rng(0))
    with pytest.raises(ValueError):
        estimate_curvature(spec, w, batch, 0.1, 0, Rng(0))


def test_direction_uniform_weights_equals_sam():
    spec, w, batch = golden_case()
    n = len(batch)
    cfg = PerturbConfig(0.05)
    eps = delta_sam_direction(spec, w, batch, InstanceWeights(np.full(n, 1.0 / n), 1e-4), 0.05)
    _, rep = sam_step(OptimizerState(), spec, w, batch, cfg)
    np.testing.assert_allclose(eps.data, rep.perturbation.data, rtol=0, atol=1e-12)


def test_direction_oracle_example():
    p = oracle.QuadraticProblem.from_gradients(np.eye(2), np.array([1.0, 2.0]))
    eps = delta_sam_direction(p.model, p.w, p.batch, InstanceWeights(np.array([1.0, 2.0]), 1e-4), 1.0)
    np.testing.assert_allclose(eps.data, np.array([1.0, 2.0]) / np.sqrt(5), atol=1e-15)
    np.testing.assert_allclose(oracle.grad_r_inst(p, 1.0), [0.5, 1.0], atol=1e-15)


@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_direction_weight_scale_invariance(seed, c):
    p = oracle.make_problem(seed, n=6, dim=9)
    g = InstanceWeights(Rng(seed).uniform(6) + 0.01, 1e-4)
    a = delta_sam_direction(p.model, p.w, p.batch, g, 0.05)
    b = delta_sam_direction(p.model, p.w, p.batch, InstanceWeights(c * g.g, 1e-4), 0.05)
    np.testing.assert_allclose(a.data, b.data, rtol=0, atol=1e-12)


def test_direction_zero_gradient():
    p = oracle.QuadraticProblem.from_gradients(np.ones((2, 3)), 1.0)
    with pytest.raises(ZeroGradient):
        delta_sam_direction(p.model, p.w, p.batch, InstanceWeights(np.zeros(2), 1e-4), 0.05)


def test_sample_weights_track_exact_weights_on_rank1():
    # averaged over many probes, g_i is proportional to a_i ||b_i||
    p = oracle.make_problem(3, n=5, dim=12)
    g, l0 = sample_instance_weights(p.model, p.w, p.batch, Rng(0), 0.05, 1e-4, 4000)
    exact = p.a * np.linalg.norm(p.B, axis=1)
    assert np.corrcoef(g.g, exact)[0, 1] > 0.99
    np.testing.assert_array_equal(l0, p.c)

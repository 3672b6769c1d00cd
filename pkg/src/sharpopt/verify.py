"""Invariant battery behind ``sharpopt verify`` and the acceptance tests.

Each check returns a :class:`CheckResult`; none of them raise on a failed
property, so a caller can print the whole table.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import oracle
from .data import make_two_moons
from .models import Batch, MlpSpec, mean_loss_gradient, per_instance_losses
from .optimizers import (OptimizerState, TrainConfig, TrainerMode, delta_sam_step,
                         expected_passes, per_instance_sam_step, run_step, sam_step, train)
from .params import ParamVector, flat_layout
from .perturbation import PerturbConfig, normalize_to_ball
from .reweighting import InstanceWeights, delta_sam_direction, estimate_curvature
from .rng import Rng, gaussian_vector


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        # no timing here so that reruns print identical reports
        return f"{status}  {self.name:<16} {self.detail}"


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        result = fn(*args, **kwargs)
        result.seconds = time.perf_counter() - t0
        return result
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _rel_err(x, y, floor=1e-8):
    x, y = np.asarray(x), np.asarray(y)
    return float(np.max(np.abs(x - y) / np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)))


@_timed
def check_norm_contract(seed: int = 0, trials: int = 1000, rho: float = 0.05) -> CheckResult:
    """||eps*|| = rho within 1e-9; eps* invariant to scaling the instance weights (1e-12)."""
    rng = Rng(seed, (101,))
    worst_norm = 0.0
    for k in range(trials):
        dim = int(rng.integers(1, 200, 1)[0])
        v = gaussian_vector(rng, flat_layout(dim), float(10.0 ** (4 * rng.uniform(1)[0] - 2)))
        eps = normalize_to_ball(v, rho)
        worst_norm = max(worst_norm, abs(eps.norm() - rho))
    worst_scale = 0.0
    for k in range(50):
        p = oracle.make_problem(seed * 1000 + k, n=6, dim=10)
        g = InstanceWeights(p.a * rng.uniform(p.n), 1e-4)
        base = delta_sam_direction(p.model, p.w, p.batch, g, rho)
        for c in (1e-3, 0.5, 7.0, 1e4):
            scaled = delta_sam_direction(p.model, p.w, p.batch, InstanceWeights(c * g.g, 1e-4), rho)
            worst_scale = max(worst_scale, float(np.max(np.abs(scaled.data - base.data))))
    ok = worst_norm <= 1e-9 and worst_scale <= 1e-12
    return CheckResult("norm_contract", ok,
                       f"max |norm-rho|={worst_norm:.2e} (tol 1e-9); "
                       f"max scale drift={worst_scale:.2e} (tol 1e-12)")


@_timed
def check_closed_forms(seed: int = 0, rho: float = 0.05) -> CheckResult:
    """grad_r_inst vs finite differences (50 problems), exact-weight cosine, positivity (100)."""
    worst_fd = 0.0
    worst_cos = 0.0
    for k in range(50):
        p = oracle.make_problem(seed * 1000 + k)
        numeric = oracle.central_difference(lambda w: oracle.sharpness_inst(p, rho, w), p.w0, 1e-5)
        worst_fd = max(worst_fd, _rel_err(numeric, oracle.grad_r_inst(p, rho), floor=1e-6))
        worst_cos = max(worst_cos, abs(oracle.exact_weight_equivalence(p, rho) - 1.0))
    positive = 0
    inst_ge_batch = 0
    for k in range(100):
        rep = oracle.positivity_check(oracle.make_problem(seed * 1000 + 500 + k), rho)
        positive += rep.dot > 0
        inst_ge_batch += rep.r_inst >= rep.r_batch
    ok = worst_fd < 1e-6 and worst_cos <= 1e-10 and positive == 100 and inst_ge_batch == 100
    return CheckResult("closed_forms", ok,
                       f"fd rel err={worst_fd:.2e} (tol 1e-6); |cos-1|={worst_cos:.1e} (tol 1e-10); "
                       f"dot>0 {positive}/100; R_inst>=R_batch {inst_ge_batch}/100")


@_timed
def check_estimators(seed: int = 0, mc_samples: int = 10_000, sigma: float = 0.1) -> CheckResult:
    """Probe identities on quadratics: exact per-sample, and Monte-Carlo within 3 SE."""
    p = oracle.make_problem(seed * 1000 + 900, n=8, dim=20)
    model, w, batch = p.model, p.w, p.batch
    rng = Rng(seed, (103,))
    # per-sample exactness of the second and first differences
    worst_exact = 0.0
    l0 = per_instance_losses(model, w, batch)
    for _ in range(200):
        r = gaussian_vector(rng, w.layout, sigma)
        lp = per_instance_losses(model, w + r, batch)
        lm = per_instance_losses(model, w - r, batch)
        z = p.B @ r.data
        worst_exact = max(worst_exact,
                          float(np.max(np.abs((lp + lm - 2 * l0) - p.a * z * z) / np.maximum(1.0, p.a * z * z))),
                          float(np.max(np.abs((lp - lm) - 2 * z) / np.maximum(1.0, np.abs(2 * z)))))
    est = estimate_curvature(model, w, batch, sigma, mc_samples, rng)
    gn2 = np.sum(p.B ** 2, axis=1)
    want_first = 4 * sigma ** 2 * gn2
    want_second = p.a * sigma ** 2 * gn2
    z_first = np.abs(est.first_sq_mean - want_first) / est.first_sq_se
    z_second = np.abs(est.second_mean - want_second) / est.second_se
    rel_tol = float(np.max(3 * est.first_sq_se / want_first))
    rel = float(max(np.max(np.abs(est.first_sq_mean / want_first - 1)),
                    np.max(np.abs(est.second_mean / want_second - 1))))
    ok = worst_exact <= 1e-9 and np.all(z_first <= 3) and np.all(z_second <= 3)
    # from 1e5 samples on, also hold the means to 1% relative error
    tight = mc_samples >= 100_000
    if tight:
        ok = ok and rel <= 0.01
    return CheckResult("estimators", ok,
                       f"per-sample err={worst_exact:.1e} (tol 1e-9); max |z| first={z_first.max():.2f}, "
                       f"second={z_second.max():.2f} (tol 3 SE, ~{100 * rel_tol:.1f}% rel at n={mc_samples}); "
                       f"max rel err={100 * rel:.2f}%" + (" (tol 1%)" if tight else ""))


def _mlp_problem(seed: int, n: int = 4):
    spec = MlpSpec((3, 5, 2), "tanh")
    rng = Rng(seed, (104,))
    w = spec.init_params(rng)
    x = rng.normal(n * 3).reshape(n, 3)
    y = rng.integers(0, 2, n)
    return spec, w, Batch(x, y)


@_timed
def check_reductions(seed: int = 0, rho: float = 0.05) -> CheckResult:
    """Uniform weights => delta-SAM == SAM; N=1 => per-instance == SAM; duplicated batch agreement."""
    cfg = PerturbConfig(rho)
    spec, w, batch = _mlp_problem(seed)
    dup = batch.subset([0] * 4)

    def sgd():
        return OptimizerState("sgd", 0.1)

    w_sam, _ = sam_step(sgd(), spec, w, dup, cfg)
    w_delta, rep = delta_sam_step(sgd(), spec, w, dup, cfg, Rng(seed, (105,)))
    uniform = float(np.max(np.abs(w_delta.data - w_sam.data)))

    one = batch.subset([1])
    w_s1, _ = sam_step(sgd(), spec, w, one, cfg)
    w_p1, _ = per_instance_sam_step(sgd(), spec, w, one, cfg)
    single = float(np.max(np.abs(w_s1.data - w_p1.data)))

    w_pd, _ = per_instance_sam_step(sgd(), spec, w, dup, cfg)
    dup_err = max(float(np.max(np.abs(w_pd.data - w_sam.data))), uniform)

    # the unperturbed base step coincides only where the gradient does not
    # move inside the ball, i.e. on zero-curvature losses
    p = oracle.QuadraticProblem.from_gradients(np.tile(oracle.make_problem(seed).B[:1], (4, 1)), 0.0, c=0.3)
    outs = []
    for name in ("base", "sam", "delta_sam", "per_instance_sam"):
        w_new, _ = run_step(TrainerMode(name, cfg), sgd(), p.model, p.w, p.batch, Rng(seed, (106,)))
        outs.append(w_new.data)
    flat_err = float(max(np.max(np.abs(o - outs[0])) for o in outs))

    ok = uniform <= 1e-10 and single <= 1e-12 and dup_err <= 1e-10 and flat_err <= 1e-10
    return CheckResult("reductions", ok,
                       f"uniform g: {uniform:.1e} (1e-10); N=1: {single:.1e} (1e-12); "
                       f"duplicated sam/delta/inst: {dup_err:.1e} (1e-10); "
                       f"zero-curvature all four: {flat_err:.1e}; uniform flag='{rep.flag or '-'}'")


def approximation_trial(seed: int, rho: float = 0.05, eta: float = 1e-4, num_samples: int = 64,
                        n: int = 8, dim: int = 20) -> tuple[float, float]:
    """(cos delta-SAM, cos SAM) of the perturbation against the per-instance sharpness gradient."""
    p = oracle.make_problem(seed, n=n, dim=dim)
    cfg = PerturbConfig(rho)
    ref = p.vector(oracle.grad_r_inst(p, rho))
    _, rs = sam_step(OptimizerState("sgd", 0.1), p.model, p.w, p.batch, cfg, reference=ref)
    _, rd = delta_sam_step(OptimizerState("sgd", 0.1), p.model, p.w, p.batch, cfg,
                           Rng(seed, (107,)), eta, num_samples, reference=ref)
    return rd.cosine, rs.cosine


@_timed
def check_approximation(seed: int = 0, problems: int = 100, num_samples: int = 64) -> CheckResult:
    """delta-SAM's perturbation is closer to the per-instance sharpness gradient than SAM's."""
    wins = wins_single = 0
    cos_d, cos_s = [], []
    for k in range(problems):
        cd, cs = approximation_trial(seed * 1000 + k, num_samples=num_samples)
        wins += cd >= cs
        cos_d.append(cd)
        cos_s.append(cs)
        c1, _ = approximation_trial(seed * 1000 + k, num_samples=1)
        wins_single += c1 >= cs
    need = int(np.ceil(0.95 * problems))
    return CheckResult("approximation", wins >= need,
                       f"delta>=sam in {wins}/{problems} (need {need}) with {num_samples}-probe weights; "
                       f"mean cos {np.mean(cos_d):.3f} vs {np.mean(cos_s):.3f}; "
                       f"single-probe weights: {wins_single}/{problems}")


@_timed
def check_pass_counters(seed: int = 0, steps: int = 200, batch_size: int = 8) -> CheckResult:
    """Per-step (fwd_recorded, fwd_unrecorded, bwd) matches each mode's contract; delta-SAM weights stay finite and nonnegative."""
    spec = MlpSpec((2, 8, 2), "tanh")
    tr = make_two_moons(steps * batch_size // 4, 0.2, seed)
    te = make_two_moons(64, 0.2, seed, "test", reference=tr)
    config = TrainConfig(epochs=4, batch_size=batch_size, seed=seed, optimizer="sgd", lr=0.1)
    summary = []
    ok = True
    for name in ("base", "sam", "delta_sam", "per_instance_sam"):
        res = train(spec, config, tr, te, TrainerMode(name))
        bad = [r.step for r in res.reports
               if r.passes != expected_passes(name, batch_size, 1, r.flag)]
        if name == "delta_sam":
            bad += [r.step for r in res.reports
                    if not (r.g_min >= 0 and np.isfinite([r.g_min, r.g_mean, r.g_max]).all())]
        ok &= not bad and len(res.reports) == steps
        summary.append(f"{name}={res.reports[0].passes}x{len(res.reports)}"
                       + (f" BAD@{bad[:3]}" if bad else ""))
    return CheckResult("pass_counters", ok, "; ".join(summary))


@_timed
def check_mlp_gradients(seed: int = 0, coords: int = 100) -> CheckResult:
    """Autodiff vs central differences (h=1e-5) on random MLPs, both activations and heads."""
    worst = 0.0
    rng = Rng(seed, (108,))
    for spec in (MlpSpec((3, 6, 4, 2), "tanh"), MlpSpec((3, 6, 2), "relu"),
                 MlpSpec((3, 5, 2), "tanh", "mse")):
        w = spec.init_params(rng)
        x = rng.normal(4 * 3).reshape(4, 3)
        y = rng.integers(0, 2, 4) if spec.output_head == "softmax_xent" else rng.normal(8).reshape(4, 2)
        batch = Batch(x, y)
        _, grad, _ = mean_loss_gradient(spec, w, batch)
        idx = rng.integers(0, w.dim, min(coords, w.dim))
        h = 1e-5
        for j in idx:
            e = np.zeros(w.dim)
            e[j] = h
            fp = per_instance_losses(spec, ParamVector(w.layout, w.data + e), batch).mean()
            fm = per_instance_losses(spec, ParamVector(w.layout, w.data - e), batch).mean()
            worst = max(worst, _rel_err(grad.data[j], (fp - fm) / (2 * h), floor=1e-6))
    return CheckResult("mlp_gradients", worst < 1e-5, f"max rel err={worst:.2e} (tol 1e-5)")


def run_battery(seed: int = 0, mc_samples: int = 10_000) -> list[CheckResult]:
    return [
        check_mlp_gradients(seed),
        check_norm_contract(seed),
        check_closed_forms(seed),
        check_estimators(seed, mc_samples),
        check_reductions(seed),
        check_approximation(seed),
        check_pass_counters(seed),
    ]

"""Rank-1 quadratic problems with closed-form sharpness quantities.

Instance i has loss ``l_i(w0 + d) = c_i + b_i.d + a_i (b_i.d)^2 / 2`` so its
Hessian is exactly ``a_i b_i b_i^T`` and its gradient at ``w0`` is ``b_i``.
On these problems:

* per-instance sharpness has the closed form ``rho ||b_i|| + a_i rho^2 ||b_i||^2 / 2``;
* per-batch sharpness is a trust-region subproblem (maximize a convex
  quadratic over the rho-ball), solved exactly in the span of the ``b_i``;
* the per-instance sharpness gradient is ``(1/N) sum_i rho a_i ||b_i|| b_i``,
  which is parallel to the gradient of the batch reweighted by
  ``g_i = a_i ||b_i||``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from .models import Batch, QuadraticModel, weighted_loss_gradient
from .params import ParamVector, cosine
from .rng import Rng


@dataclass(eq=False)
class QuadraticProblem:
    c: np.ndarray
    B: np.ndarray
    a: np.ndarray
    w0: np.ndarray

    def __post_init__(self):
        self.B = np.atleast_2d(np.asarray(self.B, dtype=np.float64))
        n, d = self.B.shape
        self.c = np.broadcast_to(np.asarray(self.c, dtype=np.float64), (n,)).copy()
        self.a = np.broadcast_to(np.asarray(self.a, dtype=np.float64), (n,)).copy()
        self.w0 = np.zeros(d) if self.w0 is None else np.asarray(self.w0, dtype=np.float64)
        if np.any(self.a < 0):
            raise ValueError("curvatures a_i must be nonnegative")
        if np.any(self.c < 0):
            raise ValueError("base losses c_i must be nonnegative")
        if self.w0.shape != (d,):
            raise ValueError("w0 must match the problem dimension")

    @classmethod
    def from_gradients(cls, B, a, c=0.0, w0=None) -> "QuadraticProblem":
        return cls(c, B, a, w0)

    @property
    def n(self) -> int:
        return self.B.shape[0]

    @property
    def dim(self) -> int:
        return self.B.shape[1]

    @property
    def model(self) -> QuadraticModel:
        return QuadraticModel(self.dim, self.w0)

    @property
    def batch(self) -> Batch:
        rows = np.column_stack([self.B, self.c, self.a])
        return Batch(rows, np.zeros(self.n))

    @property
    def w(self) -> ParamVector:
        return self.model.initial_params()

    def vector(self, v) -> ParamVector:
        return ParamVector(self.model.layout, v)

    def losses(self, w: np.ndarray) -> np.ndarray:
        z = self.B @ (np.asarray(w) - self.w0)
        return self.c + z + 0.5 * self.a * z * z

    def gradients(self, w: np.ndarray | None = None) -> np.ndarray:
        """Per-instance gradients as rows, ``b_i (1 + a_i b_i.(w - w0))``."""
        if w is None:
            return self.B.copy()
        z = self.B @ (np.asarray(w) - self.w0)
        return self.B * (1.0 + self.a * z)[:, None]

    @property
    def mean_hessian(self) -> np.ndarray:
        return (self.B.T * self.a) @ self.B / self.n


def make_problem(seed: int, n: int = 8, dim: int = 20, a_range=(0.0, 3.0),
                 c_scale: float = 1.0) -> QuadraticProblem:
    """Random problem: ``b_i`` standard normal, ``a_i`` uniform in ``(lo, hi]``, ``w0 = 0``."""
    rng = Rng(seed, (7,))
    B = rng.normal(n * dim).reshape(n, dim)
    lo, hi = a_range
    a = lo + (hi - lo) * (1.0 - rng.uniform(n))
    c = c_scale * rng.uniform(n)
    return QuadraticProblem(c, B, a, np.zeros(dim))


# --- sharpness values ----------------------------------------------------


def sharpness_inst(p: QuadraticProblem, rho: float, w=None) -> float:
    """Mean over instances of the exact per-instance maximum loss increase."""
    grads = p.gradients(w)
    gnorm = np.linalg.norm(grads, axis=1)
    bnorm = np.linalg.norm(p.B, axis=1)
    return float(np.mean(rho * gnorm + 0.5 * p.a * rho ** 2 * bnorm ** 2))


def _trust_region_max(g: np.ndarray, H: np.ndarray, rho: float) -> np.ndarray:
    """argmax of ``g.x + x.H.x / 2`` over ``||x|| <= rho`` for PSD ``H``."""
    lam, V = np.linalg.eigh(H)
    gt = V.T @ g
    lam_max = lam[-1]
    gnorm = np.linalg.norm(gt)
    scale = max(1.0, abs(lam_max))
    top = lam >= lam_max - 1e-12 * scale
    g_top = np.linalg.norm(gt[top])

    def x_of(mu):
        return gt / (mu - lam)

    def excess(mu):
        return np.linalg.norm(x_of(mu)) - rho

    if g_top > 1e-14 * max(gnorm, 1e-300):
        # excess(lo) >= 0 >= excess(hi) up to rounding
        lo = lam_max + g_top / rho
        hi = lam_max + gnorm / rho
        f_lo, f_hi = excess(lo), excess(hi)
        if f_lo <= 0:
            mu = lo
        elif f_hi >= 0:
            mu = hi
        else:
            mu = brentq(excess, lo, hi, xtol=1e-15 * scale, maxiter=500)
        xt = x_of(mu)
    else:
        # hard case: no gradient along the top eigenspace
        xt = np.zeros_like(gt)
        rest = ~top
        xt[rest] = gt[rest] / (lam_max - lam[rest])
        if np.linalg.norm(xt) > rho:
            mu = brentq(lambda m: np.linalg.norm(gt[rest] / (m - lam[rest])) - rho,
                        lam_max, lam_max + gnorm / rho, xtol=1e-15 * scale, maxiter=500)
            xt[rest] = gt[rest] / (mu - lam[rest])
        else:
            idx = int(np.flatnonzero(top)[0])
            xt[idx] = np.sqrt(max(rho ** 2 - float(xt @ xt), 0.0))
    # the maximum of a convex function sits on the sphere; snap off rounding
    norm = np.linalg.norm(xt)
    return V @ (xt * (rho / norm)) if norm > 0 else V @ xt


def _golden_max(f: Callable[[float], float], lo: float, hi: float, iters: int = 200) -> float:
    inv = (np.sqrt(5.0) - 1.0) / 2.0
    x1 = hi - inv * (hi - lo)
    x2 = lo + inv * (hi - lo)
    f1, f2 = f(x1), f(x2)
    for _ in range(iters):
        if f1 < f2:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + inv * (hi - lo)
            f2 = f(x2)
        else:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - inv * (hi - lo)
            f1 = f(x1)
    return max(f1, f2)


def sharpness_batch(p: QuadraticProblem, rho: float, w=None, certify: bool = True) -> float:
    """Exact ``max_{||e|| <= rho} mean_i (l_i(w + e) - l_i(w))``.

    The maximizer lies in the span of the ``b_i``; the problem is solved
    there via the trust-region secular equation. With ``certify`` the value
    is checked against candidate directions (mean gradient, each ``b_i``) and,
    for spans of dimension <= 2, a golden-section search over the circle.
    """
    w = p.w0 if w is None else np.asarray(w, dtype=np.float64)
    grads = p.gradients(w)
    g = grads.mean(axis=0)
    H = p.mean_hessian
    # orthonormal basis of span(b_i)
    U, s, _ = np.linalg.svd(p.B.T, full_matrices=False)
    keep = s > 1e-12 * max(s.max(initial=0.0), 1e-300)
    Q = U[:, keep]
    if Q.shape[1] == 0:
        return 0.0

    def gain(e):
        return float(g @ e + 0.5 * e @ H @ e)

    x = Q @ _trust_region_max(Q.T @ g, Q.T @ H @ Q, rho)
    value = gain(x)
    if certify:
        candidates = [g] + list(p.B) + [-b for b in p.B]
        lower = max(gain(rho * v / np.linalg.norm(v)) for v in candidates if np.linalg.norm(v) > 0)
        if Q.shape[1] <= 2:
            if Q.shape[1] == 1:
                lower = max(lower, gain(rho * Q[:, 0]), gain(-rho * Q[:, 0]))
            else:
                circle = lambda t: gain(rho * (np.cos(t) * Q[:, 0] + np.sin(t) * Q[:, 1]))
                grid = np.linspace(0.0, 2 * np.pi, 721)
                k = int(np.argmax([circle(t) for t in grid]))
                step = grid[1] - grid[0]
                lower = max(lower, _golden_max(circle, grid[k] - step, grid[k] + step))
        tol = 1e-9 * max(1.0, abs(lower))
        if value < lower - tol:
            raise AssertionError(f"trust-region value {value} below certified bound {lower}")
    return value


# --- gradients and positivity -------------------------------------------


def grad_r_inst(p: QuadraticProblem, rho: float) -> np.ndarray:
    """Per-instance sharpness gradient at ``w0``: ``(1/N) sum_i rho a_i ||b_i|| b_i``."""
    bnorm = np.linalg.norm(p.B, axis=1)
    return (rho * p.a * bnorm) @ p.B / p.n


def grad_r_shared(p: QuadraticProblem, eps: np.ndarray) -> np.ndarray:
    """Gradient of the shared-perturbation sharpness for a fixed ``eps``: ``mean(H_i) eps``."""
    return p.mean_hessian @ eps


def shared_sharpness(p: QuadraticProblem, eps: np.ndarray, w) -> float:
    """``mean_i (l_i(w + eps) - l_i(w))`` evaluated directly from the losses."""
    w = np.asarray(w, dtype=np.float64)
    return float(np.mean(p.losses(w + eps) - p.losses(w)))


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        grad[j] = (f(x + e) - f(x - e)) / (2 * h)
    return grad


@dataclass
class SharpnessReport:
    r_batch: float
    r_inst: float
    grad_r_inst: np.ndarray
    grad_r_shared: np.ndarray
    dot: float
    degenerate: bool = False


def positivity_check(p: QuadraticProblem, rho: float) -> SharpnessReport:
    """Shared perturbation along the per-instance sharpness gradient.

    With ``eps' = rho * grad_r_inst / ||grad_r_inst||`` the shared sharpness
    gradient ``mean(H_i) eps'`` has a positive inner product with
    ``grad_r_inst`` whenever the latter is nonzero.
    """
    gi = grad_r_inst(p, rho)
    norm = np.linalg.norm(gi)
    r_inst = sharpness_inst(p, rho)
    if norm == 0.0 or not np.any(np.linalg.norm(p.B, axis=1) > 0):
        zero = np.zeros(p.dim)
        r_batch = sharpness_batch(p, rho) if np.any(p.B) else 0.0
        return SharpnessReport(r_batch, r_inst, gi, zero, 0.0, degenerate=True)
    eps = rho * gi / norm
    gs = grad_r_shared(p, eps)
    return SharpnessReport(sharpness_batch(p, rho), r_inst, gi, gs, float(gs @ gi))


def exact_weight_equivalence(p: QuadraticProblem, rho: float) -> float:
    """Cosine between the autodiff gradient of ``sum_i a_i ||b_i|| l_i`` and ``grad_r_inst``."""
    g = p.a * np.linalg.norm(p.B, axis=1)
    weighted = weighted_loss_gradient(p.model, p.w, p.batch, g)
    return cosine(weighted.data, grad_r_inst(p, rho))

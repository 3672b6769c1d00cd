"""Dynamic instance reweighting from grad-free loss probes.

For a shared random weight perturbation r, each instance is evaluated at
w, w + r and w - r without recording a tape. Under a rank-1 Hessian
``H_i = a_i grad_i grad_i^T`` the second difference is ``a_i (grad_i . r)^2``
and the first difference is ``2 grad_i . r`` (both exact for quadratics), so

    g_i = |l_i(w+r) + l_i(w-r) - 2 l_i(w)| / max(|l_i(w+r) - l_i(w-r)|, eta)

is proportional in expectation to ``a_i ||grad_i||``, the weight under which
a single shared perturbation follows the per-instance sharpness gradient.

Expectation constants: with r ~ N(0, sigma^2 I),
``E[(l_i(w+r) - l_i(w-r))^2] = 4 sigma^2 ||grad_i||^2`` and
``E[second difference] = a_i sigma^2 ||grad_i||^2``. The estimators below use
these constants. Any common constant in g cancels once the weighted gradient
is renormalized onto the rho-sphere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import Batch, Model, PassCounter, per_instance_losses, weighted_loss_gradient
from .params import ParamVector
from .perturbation import (DEFAULT_ZERO_GRAD_THRESHOLD, apply, normalize_to_ball,
                           random_direction, revert)
from .rng import Rng, gaussian_vector

DEFAULT_ETA = 1e-4
ETA_GRID = (1e-4, 2e-4, 5e-4, 1e-3)


@dataclass(frozen=True)
class ProbeLosses:
    l0: np.ndarray
    l_plus: np.ndarray
    l_minus: np.ndarray
    r_norm: float

    def __post_init__(self):
        if not (self.l0.shape == self.l_plus.shape == self.l_minus.shape):
            raise ValueError("probe loss vectors must have identical length")

    @property
    def first_difference(self) -> np.ndarray:
        return self.l_plus - self.l_minus

    @property
    def second_difference(self) -> np.ndarray:
        return self.l_plus + self.l_minus - 2.0 * self.l0


@dataclass(frozen=True)
class InstanceWeights:
    g: np.ndarray
    eta: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.g)) or np.any(self.g < 0):
            raise ValueError("instance weights must be finite and nonnegative")

    @property
    def all_zero(self) -> bool:
        return not np.any(self.g > 0)

    def summary(self) -> tuple[float, float, float]:
        return float(self.g.min()), float(self.g.mean()), float(self.g.max())


@dataclass(frozen=True)
class CurvatureEstimate:
    a_hat: np.ndarray
    grad_norm_sq_hat: np.ndarray
    num_samples: int
    degenerate: np.ndarray
    # Monte-Carlo means of the raw differences and their standard errors
    first_sq_mean: np.ndarray
    first_sq_se: np.ndarray
    second_mean: np.ndarray
    second_se: np.ndarray


def probe(model: Model, w: ParamVector, batch: Batch, r: ParamVector,
          counter: PassCounter | None = None) -> ProbeLosses:
    """Three unrecorded batch forwards at ``w``, ``w + r`` and ``w - r``."""
    l0 = per_instance_losses(model, w, batch, counter)
    w_plus = apply(w, r)
    l_plus = per_instance_losses(model, w_plus, batch, counter)
    neg = -r
    w_minus = apply(w, neg)
    l_minus = per_instance_losses(model, w_minus, batch, counter)
    if not (revert(w_plus, r).equals(w) and revert(w_minus, neg).equals(w)):
        raise RuntimeError("probe failed to restore the unperturbed weights")
    return ProbeLosses(l0, l_plus, l_minus, r.norm())


def instance_weights(p: ProbeLosses, eta: float = DEFAULT_ETA) -> InstanceWeights:
    if not eta > 0:
        raise ValueError(f"eta must be positive, got {eta}")
    num = np.abs(p.second_difference)
    den = np.maximum(np.abs(p.first_difference), eta)
    return InstanceWeights(num / den, eta)


def sample_instance_weights(model: Model, w: ParamVector, batch: Batch, rng: Rng,
                            rho: float, eta: float = DEFAULT_ETA, num_samples: int = 1,
                            counter: PassCounter | None = None
                            ) -> tuple[InstanceWeights, np.ndarray]:
    """Instance weights from ``num_samples`` shared random probes of norm ``rho``.

    ``num_samples=1`` is the training path; larger values average the
    per-probe weights and exist for studying the estimator. Also returns
    the unperturbed losses l_i(w) from the first probe.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    total = np.zeros(len(batch))
    l0 = None
    for _ in range(num_samples):
        r = random_direction(rng, w.layout, rho)
        p = probe(model, w, batch, r, counter)
        if l0 is None:
            l0 = p.l0
        total += instance_weights(p, eta).g
    return InstanceWeights(total / num_samples, eta), l0


def estimate_curvature(model: Model, w: ParamVector, batch: Batch, sigma: float,
                       num_samples: int, rng: Rng,
                       zero_threshold: float = DEFAULT_ZERO_GRAD_THRESHOLD,
                       counter: PassCounter | None = None) -> CurvatureEstimate:
    """Monte-Carlo estimates of ``||grad l_i||^2`` and ``a_i`` from r ~ N(0, sigma^2 I).

    ``a_hat`` is set to 0 and flagged in ``degenerate`` where the estimated
    squared gradient norm is below ``zero_threshold``.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    n = len(batch)
    l0 = per_instance_losses(model, w, batch, counter)
    first_sq = np.empty((num_samples, n))
    second = np.empty((num_samples, n))
    for k in range(num_samples):
        r = gaussian_vector(rng, w.layout, sigma)
        l_plus = per_instance_losses(model, apply(w, r), batch, counter)
        l_minus = per_instance_losses(model, apply(w, -r), batch, counter)
        first_sq[k] = (l_plus - l_minus) ** 2
        second[k] = l_plus + l_minus - 2.0 * l0

    def se(x):
        if num_samples < 2:
            return np.full(n, np.inf)
        return x.std(axis=0, ddof=1) / np.sqrt(num_samples)

    first_sq_mean = first_sq.mean(axis=0)
    second_mean = second.mean(axis=0)
    s2 = sigma * sigma
    grad_norm_sq_hat = first_sq_mean / (4.0 * s2)
    degenerate = grad_norm_sq_hat < zero_threshold
    safe = np.where(degenerate, 1.0, grad_norm_sq_hat)
    a_hat = np.where(degenerate, 0.0, second_mean / (s2 * safe))
    return CurvatureEstimate(a_hat, grad_norm_sq_hat, num_samples, degenerate,
                             first_sq_mean, se(first_sq), second_mean, se(second))


def delta_sam_direction(model: Model, w: ParamVector, batch: Batch, g: InstanceWeights,
                        rho: float, threshold: float = DEFAULT_ZERO_GRAD_THRESHOLD,
                        counter: PassCounter | None = None) -> ParamVector:
    """Perturbation ``rho * grad_B / ||grad_B||`` with ``grad_B = sum_i g_i grad l_i(w)``."""
    grad_b = weighted_loss_gradient(model, w, batch, g.g, counter)
    return normalize_to_ball(grad_b, rho, threshold)

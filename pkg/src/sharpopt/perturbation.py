"""Weight-space perturbations: the rho-ball projection, apply/revert, random directions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import Layout, LayoutMismatch, ParamVector
from .rng import Rng, gaussian_vector

DEFAULT_ZERO_GRAD_THRESHOLD = 1e-12


class ZeroGradient(ArithmeticError):
    """The ascent direction is too small to normalize."""


@dataclass(frozen=True)
class PerturbConfig:
    rho: float = 0.05
    zero_grad_threshold: float = DEFAULT_ZERO_GRAD_THRESHOLD

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if not self.zero_grad_threshold > 0:
            raise ValueError("zero_grad_threshold must be positive")


def normalize_to_ball(direction: ParamVector, rho: float,
                      threshold: float = DEFAULT_ZERO_GRAD_THRESHOLD) -> ParamVector:
    """Scale ``direction`` onto the sphere of radius ``rho``.

    Raises:
        ZeroGradient: if ``||direction|| <= threshold``.
    """
    if not rho > 0:
        raise ValueError(f"rho must be positive, got {rho}")
    if not np.all(np.isfinite(direction.data)):
        raise ValueError("direction is not finite")
    # unit-scale first so huge or tiny directions do not over/underflow
    peak = float(np.max(np.abs(direction.data))) if direction.dim else 0.0
    if peak == 0.0:
        raise ZeroGradient("direction is exactly zero")
    scaled = direction.data / peak
    scaled_norm = np.linalg.norm(scaled)
    norm = peak * scaled_norm
    if norm <= threshold:
        raise ZeroGradient(f"direction norm {norm:.3e} is below threshold {threshold:.1e}")
    return ParamVector(direction.layout, rho * (scaled / scaled_norm))


def apply(w: ParamVector, eps: ParamVector) -> ParamVector:
    """``w + eps``; the result remembers ``w`` so :func:`revert` is exact."""
    if w.layout != eps.layout:
        raise LayoutMismatch("perturbation layout differs from the weights")
    return ParamVector(w.layout, w.data + eps.data, _origin=(w, eps))


def revert(w_perturbed: ParamVector, eps: ParamVector) -> ParamVector:
    """Undo :func:`apply`.

    Floating-point ``(w + e) - e`` is not always ``w``, so when the vector
    came from :func:`apply` with this same ``eps`` the stored original is
    returned; otherwise ``eps`` is subtracted.
    """
    if w_perturbed.layout != eps.layout:
        raise LayoutMismatch("perturbation layout differs from the weights")
    origin = w_perturbed._origin
    if origin is not None:
        base, applied = origin
        if applied is eps or np.array_equal(applied.data, eps.data):
            return base
    return ParamVector(w_perturbed.layout, w_perturbed.data - eps.data)


def random_direction(rng: Rng, layout: Layout, rho: float) -> ParamVector:
    """Isotropic Gaussian draw (sigma = 1) rescaled to L2 norm ``rho``."""
    if not rho > 0:
        raise ValueError(f"rho must be positive, got {rho}")
    r = gaussian_vector(rng, layout, 1.0)
    return ParamVector(layout, rho * r.data / np.linalg.norm(r.data))

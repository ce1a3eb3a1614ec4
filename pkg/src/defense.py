"""
Gradient perturbation defenses applied before a gradient leaks.

Both mechanisms are parameterised by the per-entry variance so Gaussian and
Laplacian sweeps line up point by point. Inputs are never modified.
"""

import math
from dataclasses import replace

from .autodiff import Tensor
from .errors import ValidationError
from .models import LeakedGradient
from .rng import SeededRNG

DEFENSE_KINDS = ("none", "gaussian", "laplacian")


def _check_variance(variance: float) -> float:
    if variance < 0 or not math.isfinite(variance):
        raise ValidationError(f"noise variance must be finite and >= 0, got {variance}")
    return float(variance)


def perturb_gaussian(g: LeakedGradient, variance: float, rng: SeededRNG) -> LeakedGradient:
    """Add i.i.d. N(0, variance) to every entry."""
    variance = _check_variance(variance)
    noise = rng.normal(g.values.shape, std=math.sqrt(variance))
    return replace(
        g,
        values=Tensor.wrap(g.values.data + noise),
        perturbation="gaussian",
        variance=variance,
        node=None,
    )


def laplace_scale(variance: float) -> float:
    """Laplace scale b with variance 2 b^2 equal to ``variance``."""
    return math.sqrt(_check_variance(variance) / 2.0)


def perturb_laplacian(g: LeakedGradient, variance: float, rng: SeededRNG) -> LeakedGradient:
    """Add i.i.d. Laplace(0, b) with b = sqrt(variance / 2) to every entry."""
    variance = _check_variance(variance)
    noise = rng.laplace(g.values.shape, laplace_scale(variance))
    return replace(
        g,
        values=Tensor.wrap(g.values.data + noise),
        perturbation="laplacian",
        variance=variance,
        node=None,
    )


def apply_defense(
    g: LeakedGradient, kind: str, variance: float, rng: SeededRNG
) -> LeakedGradient:
    """
    Perturb a gradient with the named mechanism.

    Args:
        g (LeakedGradient): Clean gradient
        kind (str): ``none``, ``gaussian`` or ``laplacian``
        variance (float): Per-entry noise variance
        rng (SeededRNG): Noise source

    Returns:
        LeakedGradient: The perturbed gradient; ``g`` itself for ``none``
    """
    if kind == "none":
        _check_variance(variance)
        return g
    if kind == "gaussian":
        return perturb_gaussian(g, variance, rng)
    if kind == "laplacian":
        return perturb_laplacian(g, variance, rng)
    raise ValidationError(f"unknown defense '{kind}'; expected one of {', '.join(DEFENSE_KINDS)}")

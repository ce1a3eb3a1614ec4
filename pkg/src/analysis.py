"""
Reconstruction metrics and empirical checks of the attack's convergence
theory.

The theory's constants (smoothness, strong convexity) are not computable for
these models, so every check is a trend or regime check with an explicit
statistical tolerance. Each check returns a TheoremReport whose pass flag is
a pure function of the measured statistics.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg, stats

from .autodiff import Tensor
from .diffusion import GaussianMixture, NoiseSchedule
from .errors import ShapeError, ValidationError
from .models import AttackedModel, Label, client_gradient, gradient_jacobian
from .rng import SeededRNG

if TYPE_CHECKING:
    from .attack import AttackTrace

logger = logging.getLogger(__name__)

ArrayOrTensor = Union[Tensor, np.ndarray, Sequence[float]]
MONOTONE_FRACTION = 0.95
JACOBIAN_ENTRY_LIMIT = 1_000_000
LM_CHUNK = 1000


def _array(value: ArrayOrTensor) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    return np.asarray(value, dtype=np.float64)


def mse(a: ArrayOrTensor, b: ArrayOrTensor) -> float:
    """Mean squared difference."""
    left, right = _array(a), _array(b)
    if left.shape != right.shape:
        raise ShapeError("mse", left.shape, right.shape)
    diff = left - right
    return float(np.mean(diff * diff))


def psnr_from_mse(value: float, max_value: float = 1.0) -> float:
    if max_value <= 0:
        raise ValidationError(f"max_value must be > 0, got {max_value}")
    if value == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value ** 2 / value)


def psnr(a: ArrayOrTensor, b: ArrayOrTensor, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give +inf."""
    return psnr_from_mse(mse(a, b), max_value)


@dataclass
class TheoremReport:
    """
    Outcome of one empirical check.

    ``statistics`` holds every measured number; ``passed`` is decided from
    them by the check that built the report.
    """

    theorem: str
    passed: bool
    statistics: Dict[str, float] = field(default_factory=dict)
    tolerance: float = 0.0
    samples: int = 0
    seeds: Tuple[int, ...] = ()
    notes: str = ""

    def to_text(self) -> str:
        """Flat ``key=value`` lines, statistics sorted by name."""
        lines = [
            f"theorem={self.theorem}",
            f"passed={str(self.passed).lower()}",
            f"tolerance={self.tolerance:.17g}",
            f"samples={self.samples}",
            f"seeds={','.join(str(s) for s in self.seeds)}",
        ]
        lines += [f"stat.{key}={value:.17g}" for key, value in sorted(self.statistics.items())]
        if self.notes:
            lines.append(f"notes={self.notes}")
        return "\n".join(lines) + "\n"


def laurent_massart_check(
    n: int, sigma: float, eps: float, samples: int, rng: SeededRNG
) -> TheoremReport:
    """
    Empirical tail frequencies of ||x||^2 for x ~ N(0, sigma^2 I_n).

    The upper-tail event ||x||^2 >= n s^2 + 2 n s^2 (sqrt(eps) + eps) must be
    no more frequent than exp(-n eps) plus three binomial standard errors.
    The event ||x||^2 <= n s^2 + 2 n s^2 sqrt(eps), which carries the same
    printed bound, is a high-probability event; its frequency is recorded
    alongside the standard lower tail ||x||^2 <= n s^2 - 2 n s^2 sqrt(eps)
    but neither is asserted.
    """
    if n < 1 or eps <= 0 or sigma <= 0:
        raise ValidationError("laurent_massart_check needs n >= 1, sigma > 0 and eps > 0")
    if samples < 10_000:
        raise ValidationError(f"laurent_massart_check needs >= 10000 samples, got {samples}")
    scale = n * sigma ** 2
    upper = scale + 2.0 * scale * (math.sqrt(eps) + eps)
    printed_lower = scale + 2.0 * scale * math.sqrt(eps)
    standard_lower = scale - 2.0 * scale * math.sqrt(eps)
    counts = {"upper": 0, "printed_lower": 0, "standard_lower": 0, "concentrated": 0}
    remaining = samples
    while remaining:
        chunk = min(LM_CHUNK, remaining)
        draws = sigma * rng.normal((chunk, n))
        sq = np.einsum("ij,ij->i", draws, draws)
        counts["upper"] += int(np.count_nonzero(sq >= upper))
        counts["printed_lower"] += int(np.count_nonzero(sq <= printed_lower))
        counts["standard_lower"] += int(np.count_nonzero(sq <= standard_lower))
        ratio = sq / scale
        counts["concentrated"] += int(np.count_nonzero((ratio >= 0.9) & (ratio <= 1.1)))
        remaining -= chunk
    bound = math.exp(-n * eps)
    slack = 3.0 * math.sqrt(bound * (1.0 - bound) / samples)
    freq = {key: value / samples for key, value in counts.items()}
    return TheoremReport(
        theorem="laurent-massart",
        passed=freq["upper"] <= bound + slack,
        statistics={
            "n": float(n),
            "eps": eps,
            "bound": bound,
            "upper_threshold": upper,
            "upper_frequency": freq["upper"],
            "printed_lower_frequency": freq["printed_lower"],
            "standard_lower_frequency": freq["standard_lower"],
            "concentration_fraction": freq["concentrated"],
        },
        tolerance=slack,
        samples=samples,
        seeds=(rng.seed,),
        notes="lower-tail bound as printed bounds a high-probability event; recorded, not asserted",
    )


def _single_component(gm: GaussianMixture) -> Tuple[np.ndarray, float]:
    if gm.components != 1:
        raise ValidationError(
            f"analytic posterior needs a single Gaussian, mixture has {gm.components} components"
        )
    return gm.means[0], float(gm.variances[0])


def gaussian_posterior(gm: GaussianMixture, alpha: float, x_t: ArrayOrTensor) -> Tuple[np.ndarray, float]:
    """
    Mean and isotropic variance of p(x0 | x_t) under a Gaussian prior N(m, vI).

    With s = a v + 1 - a: mean = m + (v sqrt(a) / s)(x_t - sqrt(a) m),
    variance = v (1 - a) / s.
    """
    mean, variance = _single_component(gm)
    s = alpha * variance + 1.0 - alpha
    point = _array(x_t)
    post_mean = mean + (variance * math.sqrt(alpha) / s) * (point - math.sqrt(alpha) * mean)
    return post_mean, variance * (1.0 - alpha) / s


def _gradient_values(model: AttackedModel, x: np.ndarray, y: Optional[Label]) -> np.ndarray:
    return client_gradient(model, Tensor.wrap(x), y).values.data


def _posterior_draws(
    gm: GaussianMixture, sched: NoiseSchedule, t: int, x_t: ArrayOrTensor, samples: int, rng: SeededRNG
) -> Tuple[np.ndarray, np.ndarray]:
    sched.check_step(t)
    if samples < 1000:
        raise ValidationError(f"Jensen gap estimate needs >= 1000 samples, got {samples}")
    post_mean, post_var = gaussian_posterior(gm, float(sched.alpha[t]), x_t)
    draws = post_mean + math.sqrt(post_var) * rng.normal((samples, post_mean.size))
    return post_mean, draws


def jensen_gap_with_error(
    model: AttackedModel,
    gm: GaussianMixture,
    sched: NoiseSchedule,
    t: int,
    x_t: ArrayOrTensor,
    samples: int,
    rng: SeededRNG,
    y: Optional[Label] = None,
) -> Tuple[float, float]:
    """
    Monte Carlo ||E[g(x0)] - g(E[x0])|| and its standard error.

    The standard error is sqrt(sum_p Var[g_p] / samples), the scale of the
    estimate when the true gap is zero.
    """
    post_mean, draws = _posterior_draws(gm, sched, t, x_t, samples, rng)
    values = np.stack([_gradient_values(model, row, y) for row in draws])
    gap = float(np.linalg.norm(values.mean(axis=0) - _gradient_values(model, post_mean, y)))
    stderr = float(math.sqrt(values.var(axis=0, ddof=1).sum() / samples))
    return gap, stderr


def jensen_gap_estimate(
    model: AttackedModel,
    gm: GaussianMixture,
    sched: NoiseSchedule,
    t: int,
    x_t: ArrayOrTensor,
    samples: int,
    rng: SeededRNG,
    y: Optional[Label] = None,
) -> float:
    """Monte Carlo Jensen gap of the client gradient under the analytic posterior."""
    return jensen_gap_with_error(model, gm, sched, t, x_t, samples, rng, y)[0]


def jensen_gap_hse_closed_form(model: AttackedModel, posterior_variance: float) -> float:
    """
    Exact Jensen gap for linear-1 with half-squared-error: posterior_variance * ||W||_F.

    The weight gradient (Wx + b - y) x^T has expectation W Cov(x) above its
    value at the mean; the bias gradient is affine and contributes nothing.
    """
    if model.spec.name != "linear-1" or model.spec.loss != "half-squared-error":
        raise ValidationError("closed-form Jensen gap needs linear-1 with half-squared-error")
    return posterior_variance * float(np.linalg.norm(model.params[0].data))


def finite_difference_jacobian(
    fn: Callable[[np.ndarray], np.ndarray], point: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Central differences of a vector function, shape (outputs, inputs)."""
    base = np.asarray(point, dtype=np.float64)
    columns = []
    for k in range(base.size):
        step = np.zeros_like(base)
        step[k] = eps
        columns.append((fn(base + step) - fn(base - step)) / (2.0 * eps))
    return np.stack(columns, axis=1)


def jensen_gap_bound(
    model: AttackedModel,
    gm: GaussianMixture,
    sched: NoiseSchedule,
    t: int,
    x_t: ArrayOrTensor,
    samples: int,
    rng: SeededRNG,
    y: Optional[Label] = None,
    eval_points: int = 8,
    likelihood_variance: Optional[float] = None,
) -> float:
    """
    Upper bound  L * E||x0 - x0_hat||  on the Jensen gap.

    L is the largest Frobenius norm of the finite-difference Jacobian of g
    over the posterior mean and ``eval_points`` posterior draws. With
    ``likelihood_variance`` the bound carries the extra factor
    n / sqrt(2 pi sigma^2) of the Gaussian likelihood form.
    """
    post_mean, draws = _posterior_draws(gm, sched, t, x_t, samples, rng)
    expected_distance = float(np.mean(np.linalg.norm(draws - post_mean, axis=1)))
    points = [post_mean] + list(draws[:eval_points])
    lipschitz = max(
        float(np.linalg.norm(finite_difference_jacobian(lambda x: _gradient_values(model, x, y), p)))
        for p in points
    )
    bound = lipschitz * expected_distance
    if likelihood_variance is not None:
        if likelihood_variance <= 0:
            raise ValidationError("likelihood_variance must be > 0")
        bound *= post_mean.size / math.sqrt(2.0 * math.pi * likelihood_variance)
    return bound


def _losses(trace: Union["AttackTrace", Sequence[float]]) -> List[float]:
    losses = getattr(trace, "losses", trace)
    return [float(v) for v in losses]  # type: ignore[union-attr]


def check_monotonicity(
    trace: Union["AttackTrace", Sequence[float]],
    tol: float = 1e-9,
    threshold: float = MONOTONE_FRACTION,
) -> TheoremReport:
    """
    Fraction of consecutive steps whose attack loss does not increase by more than ``tol``.
    """
    losses = _losses(trace)
    if not losses:
        raise ValidationError("check_monotonicity needs a nonempty trace")
    pairs = len(losses) - 1
    good = sum(1 for before, after in zip(losses, losses[1:]) if after <= before + tol)
    fraction = good / pairs if pairs else 1.0
    return TheoremReport(
        theorem="monotone-attack-loss",
        passed=fraction >= threshold,
        statistics={"fraction": fraction, "pairs": float(pairs), "threshold": threshold},
        tolerance=tol,
        samples=len(losses),
    )


def mean_step_decrease(trace: Union["AttackTrace", Sequence[float]]) -> float:
    losses = np.asarray(_losses(trace))
    if losses.size < 2:
        return 0.0
    return float(np.mean(losses[:-1] - losses[1:]))


def convergence_rate_report(
    traces: Mapping[float, Sequence[Union["AttackTrace", Sequence[float]]]],
    min_seeds: int = 3,
    tol: float = 1e-12,
) -> TheoremReport:
    """
    Mean per-step loss decrease per noise level; passes when it does not grow with the variance.
    """
    if len(traces) < 2:
        raise ValidationError(f"convergence_rate_report needs >= 2 noise levels, got {len(traces)}")
    for variance, runs in traces.items():
        if len(runs) < min_seeds:
            raise ValidationError(
                f"noise level {variance:g} has {len(runs)} runs; need >= {min_seeds}"
            )
    levels = sorted(traces)
    rates = [float(np.mean([mean_step_decrease(run) for run in traces[v]])) for v in levels]
    passed = all(later <= earlier + tol for earlier, later in zip(rates, rates[1:]))
    return TheoremReport(
        theorem="convergence-rate",
        passed=passed,
        statistics={f"decrease@{v:g}": rate for v, rate in zip(levels, rates)},
        tolerance=tol,
        samples=sum(len(runs) for runs in traces.values()),
    )


def noise_trend_report(
    peak_psnr: Mapping[float, Sequence[float]], theorem: str = "noise-degradation"
) -> TheoremReport:
    """Seed-averaged peak PSNR must strictly decrease as the noise variance grows."""
    if len(peak_psnr) < 2:
        raise ValidationError("noise_trend_report needs >= 2 noise levels")
    levels = sorted(peak_psnr)
    means = [float(np.mean(peak_psnr[v])) for v in levels]
    return TheoremReport(
        theorem=theorem,
        passed=all(later < earlier for earlier, later in zip(means, means[1:])),
        statistics={f"peak_psnr@{v:g}": m for v, m in zip(levels, means)},
        samples=sum(len(values) for values in peak_psnr.values()),
    )


def matched_noise_report(
    gaussian: Mapping[float, Sequence[float]],
    laplacian: Mapping[float, Sequence[float]],
    tolerance_db: float = 1.5,
) -> TheoremReport:
    """Gaussian and Laplacian peak PSNR at equal variance must agree within ``tolerance_db``."""
    if sorted(gaussian) != sorted(laplacian):
        raise ValidationError("Gaussian and Laplacian sweeps cover different variances")
    stats_: Dict[str, float] = {}
    worst = 0.0
    for v in sorted(gaussian):
        diff = abs(float(np.mean(gaussian[v])) - float(np.mean(laplacian[v])))
        stats_[f"abs_diff_db@{v:g}"] = diff
        worst = max(worst, diff)
    stats_["max_abs_diff_db"] = worst
    return TheoremReport("matched-noise", worst < tolerance_db, stats_, tolerance_db,
                         sum(len(v) for v in gaussian.values()))


def gram_spectrum(jacobian: np.ndarray) -> Tuple[float, float]:
    """Smallest and largest eigenvalues of J^T J."""
    jac = np.atleast_2d(np.asarray(jacobian, dtype=np.float64))
    eigenvalues = linalg.eigh(jac.T @ jac, eigvals_only=True)
    return float(eigenvalues[0]), float(eigenvalues[-1])


def jacobian_spectrum(
    model: AttackedModel, x: Tensor, y: Optional[Label] = None
) -> Tuple[float, float]:
    """
    Extreme eigenvalues of J_g^T J_g at x, with J_g built column by column.

    Raises:
        ValidationError: If the dense Jacobian would exceed 1e6 entries
    """
    entries = model.parameter_count * model.input_dim
    if entries > JACOBIAN_ENTRY_LIMIT:
        raise ValidationError(
            f"dense Jacobian would hold {entries} entries; limit is {JACOBIAN_ENTRY_LIMIT}"
        )
    return gram_spectrum(gradient_jacobian(model, x, y))


def power_iteration_extremes(
    jacobian: np.ndarray,
    rng: SeededRNG,
    max_iters: int = 20_000,
    tol: float = 1e-14,
) -> Tuple[float, float]:
    """
    Extreme eigenvalues of J^T J by power iteration.

    The largest comes from plain iteration with a Rayleigh quotient; the
    smallest from iterating the shifted matrix lambda_max I - J^T J.
    """
    jac = np.atleast_2d(np.asarray(jacobian, dtype=np.float64))
    gram = jac.T @ jac

    def dominant(matrix: np.ndarray) -> float:
        vector = rng.unit_vectors(1, matrix.shape[0])[0]
        value = float(vector @ matrix @ vector)
        for _ in range(max_iters):
            image = matrix @ vector
            norm = float(np.linalg.norm(image))
            if norm == 0.0:
                return 0.0
            vector = image / norm
            updated = float(vector @ matrix @ vector)
            if abs(updated - value) <= tol * max(1.0, abs(updated)):
                return updated
            value = updated
        return value

    lam_max = dominant(gram)
    lam_min = lam_max - dominant(lam_max * np.eye(gram.shape[0]) - gram)
    return lam_min, lam_max


def spearman_rank(a: Sequence[float], b: Sequence[float]) -> float:
    """Spearman rank correlation of two equally long sequences."""
    if len(a) != len(b) or len(a) < 2:
        raise ValidationError("spearman_rank needs two sequences of equal length >= 2")
    return float(stats.spearmanr(a, b)[0])


def rv_psnr_report(
    rv: Mapping[str, float], peak_psnr: Mapping[str, Sequence[float]]
) -> TheoremReport:
    """
    Rank agreement between RV and seed-averaged peak PSNR across a model zoo.

    Args:
        rv (Mapping[str, float]): Seed-averaged RV per model
        peak_psnr (Mapping[str, Sequence[float]]): Peak PSNR of every seed per model

    Returns:
        TheoremReport: Passes when the Spearman correlation is positive; an
            undefined correlation (constant input) fails
    """
    if sorted(rv) != sorted(peak_psnr):
        raise ValidationError("RV and PSNR tables cover different models")
    names = list(rv)
    means = [float(np.mean(peak_psnr[name])) for name in names]
    rho = spearman_rank([rv[name] for name in names], means)
    statistics = {"spearman": rho}
    for name, mean in zip(names, means):
        statistics[f"rv@{name}"] = float(rv[name])
        statistics[f"peak_psnr@{name}"] = mean
    return TheoremReport(
        theorem="rv-psnr-rank",
        passed=bool(rho > 0.0),
        statistics=statistics,
        samples=sum(len(values) for values in peak_psnr.values()),
        notes="" if math.isfinite(rho) else "correlation undefined for constant input",
    )

"""
Gradient inversion by gradient-guided spherical sampling, plus a pixel-space
baseline.

The reverse diffusion chain is steered at every step: the stochastic DDIM
noise term is replaced by a vector on the sphere of radius sqrt(n) * sigma_t
around the DDIM mean, pointing down the gradient of the attack loss
||g(x0_hat(x_t)) - g_leaked||. The blended variant mixes that direction with
the ordinary DDIM noise according to a guidance rate.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .analysis import mse, psnr_from_mse
from .autodiff import Node, Tensor
from .diffusion import POSTERIOR_MODES, DenoiserModel, NoiseSchedule, ddim_mean
from .errors import NumericalError, ShapeError, ValidationError
from .models import AttackedModel, LeakedGradient, client_gradient
from .rng import SeededRNG

logger = logging.getLogger(__name__)

DEGENERATE_NORM = 1e-12
ARMIJO_C = 1e-4
MIN_LINE_STEP = 1e-12
MAX_LINE_STEP = 1e4

GradientLike = Union[LeakedGradient, Node, Tensor]
Target = Optional[Union[Tensor, Sequence[Tensor]]]


@dataclass(frozen=True)
class AttackConfig:
    """
    Settings of one attack run.

    ``step_size`` is either a positive float r or ``"auto"``, meaning
    r = sqrt(n) * sigma_t at every step.
    """

    T: int = 100
    eta: float = 0.5
    m_r: float = 0.20
    step_size: Union[str, float] = "auto"
    loss: str = "euclidean"
    seed: int = 0
    max_snapshots: int = 10
    posterior_mode: str = "consistent"

    def __post_init__(self) -> None:
        if not 0.0 <= self.m_r <= 1.0:
            raise ValidationError(f"guidance rate m_r must lie in [0, 1], got {self.m_r}")
        if self.step_size != "auto":
            if isinstance(self.step_size, str) or float(self.step_size) <= 0:
                raise ValidationError(f"step size must be 'auto' or > 0, got {self.step_size}")
        if self.loss != "euclidean":
            raise ValidationError(f"unsupported attack loss '{self.loss}'")
        if self.max_snapshots < 0:
            raise ValidationError("max_snapshots must be >= 0")
        if self.posterior_mode not in POSTERIOR_MODES:
            raise ValidationError(f"unknown posterior mode '{self.posterior_mode}'")

    @property
    def uses_exact_sphere(self) -> bool:
        return self.m_r == 1.0 and self.step_size == "auto"


@dataclass(frozen=True)
class StepRecord:
    t: int
    attack_loss: float
    mse: float = math.nan
    psnr: float = math.nan
    flagged: bool = False


@dataclass
class AttackTrace:
    """
    Per-step record of one reconstruction run, ordered from the first step.

    Metrics are evaluated on the posterior-mean estimate at each step (for
    the pixel baseline, on the current iterate).
    """

    records: List[StepRecord]
    snapshots: List[Tuple[int, Tensor]]
    final: Tensor
    final_mse: float = math.nan
    final_psnr: float = math.nan
    method: str = "ggss-r"
    flagged_steps: List[int] = field(default_factory=list)

    @property
    def losses(self) -> List[float]:
        return [record.attack_loss for record in self.records]

    @property
    def peak_psnr(self) -> float:
        values = [r.psnr for r in self.records if not math.isnan(r.psnr)]
        if not math.isnan(self.final_psnr):
            values.append(self.final_psnr)
        return max(values) if values else math.nan

    @property
    def peak_mse(self) -> float:
        values = [r.mse for r in self.records if not math.isnan(r.mse)]
        if not math.isnan(self.final_mse):
            values.append(self.final_mse)
        return min(values) if values else math.nan


@dataclass
class GuidanceDirection:
    """Optimal sphere direction at one step, with what it was computed from."""

    direction: np.ndarray
    degenerate: bool
    attack_loss: float
    mu: np.ndarray
    x0_hat: np.ndarray
    gradient: np.ndarray


def _gradient_node(g: GradientLike) -> Node:
    if isinstance(g, LeakedGradient):
        return g.as_node()
    if isinstance(g, Tensor):
        return ad.constant(g)
    return g


def attack_loss(g1: GradientLike, g2: GradientLike) -> Node:
    """Euclidean distance between two flattened gradients, as a scalar node."""
    a, b = _gradient_node(g1), _gradient_node(g2)
    if a.shape != b.shape:
        raise ShapeError("attack_loss", a.shape, b.shape)
    return ad.l2_norm(ad.sub(a, b))


def guidance_direction(
    x_t: Tensor,
    t: int,
    sched: NoiseSchedule,
    denoiser: DenoiserModel,
    model: AttackedModel,
    g_leaked: LeakedGradient,
    mode: str = "consistent",
) -> GuidanceDirection:
    """
    d* = -sqrt(n) sigma_t * grad / ||grad||, grad = d L(g(x0_hat(x_t)), g_leaked) / d x_t.

    The gradient passes through the posterior mean and the client gradient,
    so it needs a second backward pass. When ||grad|| < 1e-12 the direction
    is zero and ``degenerate`` is set.
    """
    g_leaked.check_against(model)
    x = ad.leaf(x_t, name="x_t")
    mean = ddim_mean(x, t, sched, denoiser, mode)
    reconstructed = client_gradient(model, mean.x0_hat, create_graph=True)
    loss = attack_loss(reconstructed, g_leaked)
    (grad,) = ad.backward(loss, [x])
    gradient = grad.data  # type: ignore[union-attr]
    norm = float(np.linalg.norm(gradient))
    radius = math.sqrt(x_t.size) * float(sched.sigma[t])
    degenerate = norm < DEGENERATE_NORM
    direction = np.zeros(x_t.size) if degenerate else -radius * gradient / norm
    return GuidanceDirection(
        direction=direction,
        degenerate=degenerate,
        attack_loss=float(loss.data),
        mu=mean.mu.data.copy(),
        x0_hat=mean.x0_hat.data.copy(),
        gradient=gradient.copy(),
    )


def _ggss_update(
    guide: GuidanceDirection, t: int, sched: NoiseSchedule, rng: Optional[SeededRNG]
) -> Tuple[np.ndarray, bool]:
    if not guide.degenerate:
        return guide.mu + guide.direction, False
    if rng is not None and sched.sigma[t] > 0:
        return guide.mu + sched.sigma[t] * rng.normal(guide.mu.shape), True
    return guide.mu, True


def ggss_step(
    x_t: Tensor,
    t: int,
    sched: NoiseSchedule,
    denoiser: DenoiserModel,
    model: AttackedModel,
    g_leaked: LeakedGradient,
    mode: str = "consistent",
    rng: Optional[SeededRNG] = None,
) -> Tensor:
    """
    x_{t-1} = mu + d*, the exact spherical step.

    On a degenerate gradient the unconditional DDIM step is taken when an
    ``rng`` is supplied, otherwise the DDIM mean.
    """
    guide = guidance_direction(x_t, t, sched, denoiser, model, g_leaked, mode)
    x_prev, _ = _ggss_update(guide, t, sched, rng)
    return Tensor.wrap(x_prev)


def _radius(step_size: Union[str, float], t: int, sched: NoiseSchedule, dim: int) -> float:
    if step_size == "auto":
        return math.sqrt(dim) * float(sched.sigma[t])
    return float(step_size)


def _blended_update(
    guide: GuidanceDirection,
    t: int,
    sched: NoiseSchedule,
    m_r: float,
    r: Union[str, float],
    rng: SeededRNG,
) -> Tuple[np.ndarray, bool]:
    d_sample = float(sched.sigma[t]) * rng.normal(guide.mu.shape)
    if guide.degenerate:
        return guide.mu + d_sample, True
    d_m = d_sample + m_r * (guide.direction - d_sample)
    norm = float(np.linalg.norm(d_m))
    if norm < DEGENERATE_NORM:
        return guide.mu, True
    return guide.mu + _radius(r, t, sched, guide.mu.size) * d_m / norm, False


def blended_step(
    x_t: Tensor,
    t: int,
    sched: NoiseSchedule,
    denoiser: DenoiserModel,
    model: AttackedModel,
    g_leaked: LeakedGradient,
    m_r: float,
    r: Union[str, float],
    rng: SeededRNG,
    mode: str = "consistent",
) -> Tensor:
    """
    Blend the guidance direction with DDIM noise at rate ``m_r``.

    d_m = d_sample + m_r (d* - d_sample) with d_sample = sigma_t eps, and
    x_{t-1} = mu + r d_m / ||d_m||.
    """
    if not 0.0 <= m_r <= 1.0:
        raise ValidationError(f"guidance rate m_r must lie in [0, 1], got {m_r}")
    guide = guidance_direction(x_t, t, sched, denoiser, model, g_leaked, mode)
    x_prev, _ = _blended_update(guide, t, sched, m_r, r, rng)
    return Tensor.wrap(x_prev)


def _as_targets(target: Target) -> List[np.ndarray]:
    if target is None:
        return []
    if isinstance(target, Tensor):
        return [target.data.reshape(-1)]
    return [item.data.reshape(-1) for item in target]


def _score(estimate: np.ndarray, targets: List[np.ndarray]) -> Tuple[float, float]:
    """Best MSE and PSNR against any of the targets."""
    if not targets:
        return math.nan, math.nan
    best = min(mse(estimate, target) for target in targets)
    return best, psnr_from_mse(best)


def _snapshot_steps(T: int, max_snapshots: int) -> set:
    if max_snapshots == 0:
        return set()
    interval = max(1, T // max_snapshots)
    return {t for t in range(T, 0, -1) if (T - t) % interval == 0}


def run_attack(
    model: AttackedModel,
    g_leaked: LeakedGradient,
    denoiser: DenoiserModel,
    sched: NoiseSchedule,
    cfg: AttackConfig,
    target: Target = None,
) -> AttackTrace:
    """
    Reconstruct an input from a leaked gradient.

    Args:
        model (AttackedModel): Model that produced the gradient
        g_leaked (LeakedGradient): Possibly perturbed or batch-averaged gradient
        denoiser (DenoiserModel): Noise predictor for the data prior
        sched (NoiseSchedule): Schedule matching ``cfg.T`` and ``cfg.eta``
        cfg (AttackConfig): Attack settings
        target (Target, optional): Private input(s) for metrics; with several
            targets the closest one is scored

    Returns:
        AttackTrace: One record per step from t = T down to 1

    Raises:
        NumericalError: If any iterate becomes non-finite, naming the step
    """
    g_leaked.check_against(model)
    if sched.T != cfg.T or not math.isclose(sched.eta, cfg.eta):
        raise ValidationError(
            f"schedule (T={sched.T}, eta={sched.eta}) does not match attack config "
            f"(T={cfg.T}, eta={cfg.eta})"
        )
    targets = _as_targets(target)
    rng = SeededRNG(cfg.seed)
    x = rng.normal(model.input_dim)
    snapshot_steps = _snapshot_steps(cfg.T, cfg.max_snapshots)
    records: List[StepRecord] = []
    snapshots: List[Tuple[int, Tensor]] = []
    flagged: List[int] = []

    for t in range(cfg.T, 0, -1):
        try:
            guide = guidance_direction(
                Tensor.wrap(x), t, sched, denoiser, model, g_leaked, cfg.posterior_mode
            )
        except NumericalError as exc:
            raise NumericalError(f"attack aborted: {exc}", step=t) from exc
        if cfg.uses_exact_sphere:
            x, was_flagged = _ggss_update(guide, t, sched, rng)
        else:
            x, was_flagged = _blended_update(guide, t, sched, cfg.m_r, cfg.step_size, rng)
        if not np.all(np.isfinite(x)):
            raise NumericalError("attack iterate became non-finite", step=t)
        step_mse, step_psnr = _score(guide.x0_hat, targets)
        records.append(StepRecord(t, guide.attack_loss, step_mse, step_psnr, was_flagged))
        if was_flagged:
            flagged.append(t)
        if t in snapshot_steps:
            snapshots.append((t, Tensor.wrap(guide.x0_hat)))
        if t % 10 == 0:
            logger.debug("Step %d attack loss %.6g", t, guide.attack_loss)

    final = Tensor.wrap(x)
    final_mse, final_psnr = _score(final.data, targets)
    logger.info(
        "Attack %s finished: final loss %.6g, %d flagged steps",
        model.model_id, records[-1].attack_loss, len(flagged),
    )
    method = "ggss" if cfg.uses_exact_sphere else "ggss-r"
    return AttackTrace(records, snapshots, final, final_mse, final_psnr, method, flagged)


def _dlg_objective(
    model: AttackedModel, x: np.ndarray, g_leaked: LeakedGradient, with_gradient: bool
) -> Tuple[float, Optional[np.ndarray]]:
    """||g(x) - g_leaked||^2 and, optionally, its gradient in x."""
    if not with_gradient:
        values = client_gradient(model, Tensor.wrap(x)).values.data
        diff = values - g_leaked.values.data
        return float(diff @ diff), None
    node = ad.leaf(x, name="x")
    reconstructed = client_gradient(model, node, create_graph=True)
    loss = ad.reduce_sum(ad.square(ad.sub(reconstructed.as_node(), g_leaked.as_node())))
    (grad,) = ad.backward(loss, [node])
    return float(loss.data), grad.data  # type: ignore[union-attr]


def dlg_baseline(
    model: AttackedModel,
    g_leaked: LeakedGradient,
    iters: int,
    lr: float,
    seed: int,
    target: Target = None,
    line_search: bool = True,
    max_snapshots: int = 10,
) -> AttackTrace:
    """
    Pixel-space gradient matching from x ~ N(0, I).

    Each iteration takes one gradient of ||g(x) - g_leaked||^2. With
    ``line_search`` the first trial step is ``lr``; a step is halved until the
    Armijo condition holds and doubled after every accepted step, so it can
    grow past ``lr`` while the recorded loss never increases.

    Records carry t = iteration index and the Euclidean loss ||g(x) - g_leaked||.
    """
    if iters < 1:
        raise ValidationError(f"dlg_baseline needs iters >= 1, got {iters}")
    if lr <= 0:
        raise ValidationError(f"learning rate must be > 0, got {lr}")
    g_leaked.check_against(model)
    targets = _as_targets(target)
    rng = SeededRNG(seed)
    x = rng.normal(model.input_dim)
    snapshot_steps = {iters - t for t in _snapshot_steps(iters, max_snapshots)}
    records: List[StepRecord] = []
    snapshots: List[Tuple[int, Tensor]] = []
    step = lr

    for it in range(iters):
        try:
            value, grad = _dlg_objective(model, x, g_leaked, with_gradient=True)
        except NumericalError as exc:
            raise NumericalError(f"baseline aborted: {exc}", step=it) from exc
        assert grad is not None
        step_mse, step_psnr = _score(x, targets)
        records.append(StepRecord(it, math.sqrt(value), step_mse, step_psnr))
        if it in snapshot_steps:
            snapshots.append((it, Tensor.wrap(x)))
        slope = float(grad @ grad)
        if slope == 0.0:
            continue
        if not line_search:
            x = x - lr * grad
        else:
            while True:
                candidate = x - step * grad
                try:
                    new_value, _ = _dlg_objective(model, candidate, g_leaked, with_gradient=False)
                except NumericalError:
                    new_value = math.inf
                if new_value <= value - ARMIJO_C * step * slope:
                    x = candidate
                    break
                step *= 0.5
                if step < MIN_LINE_STEP:
                    break
            step = min(2.0 * step, MAX_LINE_STEP)
        if not np.all(np.isfinite(x)):
            raise NumericalError("baseline iterate became non-finite", step=it)

    final = Tensor.wrap(x)
    final_mse, final_psnr = _score(final.data, targets)
    return AttackTrace(records, snapshots, final, final_mse, final_psnr, "dlg")

"""
Noise schedules, denoisers and the DDIM sampler.

Two denoisers share one interface: an analytic oracle for Gaussian-mixture
data, whose noise prediction is exact, and a small trained MLP. Both predict
the noise as graph nodes so the attack can differentiate through them.
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tensor
from .errors import NumericalError, ShapeError, ValidationError
from .persistence import PathLike, read_checkpoint, write_checkpoint
from .rng import SeededRNG

logger = logging.getLogger(__name__)

POSTERIOR_MODES = ("consistent", "paper-literal")
BETA_START = 1e-4
BETA_END = 0.02
MAX_BETA = 0.999
TIME_EMBEDDING_DIM = 16
HIDDEN_WIDTH = 128


@dataclass(frozen=True)
class NoiseSchedule:
    """
    Cumulative signal coefficients and DDIM scales for T steps.

    ``alpha`` and ``sigma`` have length T + 1; ``alpha[0] = 1`` and
    ``sigma[0]`` is unused.
    """

    T: int
    eta: float
    betas: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    sigma: np.ndarray = field(repr=False)

    def check_step(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValidationError(f"timestep {t} outside [1, {self.T}]")

    def direction_coefficient(self, t: int) -> float:
        """sqrt(1 - alpha_{t-1} - sigma_t^2), the weight of the predicted noise."""
        remainder = 1.0 - self.alpha[t - 1] - self.sigma[t] ** 2
        if remainder < -1e-12:
            raise ValidationError(
                f"invalid schedule: 1 - alpha_(t-1) - sigma_t^2 = {remainder:.3e} < 0 at t={t}"
            )
        return math.sqrt(max(remainder, 0.0))


def make_schedule(T: int, eta: float) -> NoiseSchedule:
    """
    Linear beta schedule rescaled to T steps.

    Args:
        T (int): Number of steps in [10, 1000]
        eta (float): DDIM stochasticity in [0, 1]

    Returns:
        NoiseSchedule: The schedule
    """
    if not 10 <= int(T) <= 1000:
        raise ValidationError(f"T must lie in [10, 1000], got {T}")
    if not 0.0 <= eta <= 1.0:
        raise ValidationError(f"eta must lie in [0, 1], got {eta}")
    T = int(T)
    scale = 1000.0 / T
    betas = np.clip(np.linspace(BETA_START * scale, BETA_END * scale, T), 0.0, MAX_BETA)
    alpha = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    sigma = np.zeros(T + 1)
    prev, cur = alpha[:-1], alpha[1:]
    sigma[1:] = eta * np.sqrt((1.0 - prev) / (1.0 - cur)) * np.sqrt(1.0 - cur / prev)
    for array in (betas, alpha, sigma):
        array.flags.writeable = False
    return NoiseSchedule(T=T, eta=float(eta), betas=betas, alpha=alpha, sigma=sigma)


def forward_sample(
    x0: Tensor, t: int, sched: NoiseSchedule, rng: SeededRNG
) -> Tuple[Tensor, Tensor]:
    """Draw x_t = sqrt(a_t) x0 + sqrt(1 - a_t) eps; returns (x_t, eps)."""
    sched.check_step(t)
    a = sched.alpha[t]
    eps = rng.normal(x0.shape)
    return Tensor.wrap(math.sqrt(a) * x0.data + math.sqrt(1.0 - a) * eps), Tensor.wrap(eps)


class GaussianMixture:
    """
    Isotropic Gaussian mixture over R^n.

    Args:
        weights (Sequence[float]): Component weights summing to one
        means (Sequence[Sequence[float]]): One mean vector per component
        variances (Sequence[float]): One positive variance per component
    """

    def __init__(
        self,
        weights: Sequence[float],
        means: Sequence[Sequence[float]],
        variances: Sequence[float],
    ):
        self.weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        self.variances = np.asarray(variances, dtype=np.float64).reshape(-1)
        k = self.weights.size
        if self.means.shape[0] != k or self.variances.size != k:
            raise ShapeError("GaussianMixture", self.weights.shape, self.means.shape, self.variances.shape)
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValidationError("mixture weights must be non-negative and sum to 1")
        if np.any(self.variances <= 0):
            raise ValidationError("mixture variances must be positive")

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])

    @property
    def components(self) -> int:
        return int(self.weights.size)

    def marginal(self, alpha: float) -> Tuple[np.ndarray, np.ndarray]:
        """Means and variances of each component after forward diffusion."""
        return math.sqrt(alpha) * self.means, alpha * self.variances + 1.0 - alpha

    def _log_terms(self, x: np.ndarray, alpha: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        means, variances = self.marginal(alpha)
        diff = x[..., None, :] - means
        sq = np.sum(diff * diff, axis=-1)
        logits = (
            np.log(self.weights)
            - 0.5 * self.dim * np.log(2.0 * np.pi * variances)
            - sq / (2.0 * variances)
        )
        return logits, diff, variances

    def log_density(self, x: np.ndarray, alpha: float = 1.0) -> np.ndarray:
        """log p_t(x) for the mixture pushed through forward diffusion."""
        logits, _, _ = self._log_terms(np.asarray(x, dtype=np.float64), alpha)
        top = np.max(logits, axis=-1, keepdims=True)
        return (top + np.log(np.sum(np.exp(logits - top), axis=-1, keepdims=True)))[..., 0]

    def score(self, x: np.ndarray, alpha: float = 1.0) -> np.ndarray:
        """Gradient of log p_t at x."""
        logits, diff, variances = self._log_terms(np.asarray(x, dtype=np.float64), alpha)
        resp = np.exp(logits - np.max(logits, axis=-1, keepdims=True))
        resp /= np.sum(resp, axis=-1, keepdims=True)
        return -np.sum(resp[..., None] * diff / variances[:, None], axis=-2)

    def sample(self, count: int, rng: SeededRNG) -> np.ndarray:
        picks = np.searchsorted(np.cumsum(self.weights), rng.uniform(count), side="right")
        picks = np.minimum(picks, self.components - 1)
        noise = rng.normal((count, self.dim))
        return self.means[picks] + np.sqrt(self.variances[picks])[:, None] * noise


class DenoiserModel(ABC):
    """
    Noise predictor eps(x_t, t) bound to one noise schedule.
    """

    kind: str = "abstract"
    time_embedding_dim: int = 0

    def __init__(self, data_dim: int, schedule: NoiseSchedule):
        self.data_dim = int(data_dim)
        self.schedule = schedule

    @abstractmethod
    def predict(self, x_t: Node, t: int) -> Node:
        """Predicted noise for one flattened x_t, as a graph node."""

    def predict_array(self, x_t: np.ndarray, t: int) -> np.ndarray:
        """Predicted noise for a (batch, n) array, without a graph."""
        batch = np.atleast_2d(x_t)
        with ad.no_grad():
            rows = [self.predict(ad.leaf(row), t).data for row in batch]
        out = np.stack(rows)
        return out if np.ndim(x_t) == 2 else out[0]

    def check_schedule(self, sched: NoiseSchedule) -> None:
        if sched.T != self.schedule.T:
            raise ValidationError(
                f"denoiser was built for T={self.schedule.T}, schedule has T={sched.T}"
            )

    def _check_input(self, x_t: Node, t: int) -> None:
        self.schedule.check_step(t)
        if x_t.shape != (self.data_dim,):
            raise ShapeError("denoiser", x_t.shape, (self.data_dim,))


class OracleDenoiser(DenoiserModel):
    """
    Exact noise predictor for Gaussian-mixture data.

    eps*(x_t, t) = -sqrt(1 - a_t) * grad log p_t(x_t), where component k
    diffuses to N(sqrt(a_t) m_k, (a_t v_k + 1 - a_t) I).
    """

    kind = "oracle-gaussian-mixture"

    def __init__(self, mixture: GaussianMixture, schedule: NoiseSchedule):
        super().__init__(mixture.dim, schedule)
        self.mixture = mixture

    def predict(self, x_t: Node, t: int) -> Node:
        self._check_input(x_t, t)
        a = float(self.schedule.alpha[t])
        means, variances = self.mixture.marginal(a)
        noise_scale = math.sqrt(1.0 - a)
        if self.mixture.components == 1:
            diff = ad.sub(x_t, ad.constant(means[0]))
            return ad.scale(diff, noise_scale / variances[0])

        diffs = [ad.sub(x_t, ad.constant(m)) for m in means]
        sq = ad.concat([ad.reshape(ad.reduce_sum(ad.square(d)), (1,)) for d in diffs])
        offsets = np.log(self.mixture.weights) - 0.5 * self.data_dim * np.log(variances)
        logits = ad.add(ad.mul(sq, ad.constant(-0.5 / variances)), ad.constant(offsets))
        resp = ad.softmax(logits)
        eps: Optional[Node] = None
        for k, diff in enumerate(diffs):
            term = ad.mul(ad.take(resp, np.array([k])), ad.scale(diff, 1.0 / variances[k]))
            eps = term if eps is None else ad.add(eps, term)
        assert eps is not None
        return ad.scale(eps, noise_scale)

    def predict_array(self, x_t: np.ndarray, t: int) -> np.ndarray:
        self.schedule.check_step(t)
        a = float(self.schedule.alpha[t])
        return -math.sqrt(1.0 - a) * self.mixture.score(np.asarray(x_t, dtype=np.float64), a)


def time_embedding(t: int, T: int) -> np.ndarray:
    """16-dim sinusoidal embedding of t / T."""
    tau = t / T
    freqs = np.pi * 2.0 ** np.arange(TIME_EMBEDDING_DIM // 2)
    return np.concatenate([np.sin(freqs * tau), np.cos(freqs * tau)])


class TrainedDenoiser(DenoiserModel):
    """
    MLP noise predictor [n + 16 -> 128 -> 128 -> n] with silu activations.

    Args:
        data_dim (int): Flattened data dimension n
        schedule (NoiseSchedule): Schedule the model is trained for
        params (Optional[Dict[str, Tensor]]): Parameters; freshly initialised
            from ``seed`` when omitted
        seed (int): Initialisation seed
    """

    kind = "trained-mlp"
    time_embedding_dim = TIME_EMBEDDING_DIM
    PARAM_NAMES = ("fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias", "fc3.weight", "fc3.bias")

    def __init__(
        self,
        data_dim: int,
        schedule: NoiseSchedule,
        params: Optional[Dict[str, Tensor]] = None,
        seed: int = 0,
    ):
        super().__init__(data_dim, schedule)
        self.loss_trace: List[float] = []
        if params is None:
            params = self._initial_params(seed)
        missing = [name for name in self.PARAM_NAMES if name not in params]
        if missing:
            raise ValidationError(f"denoiser parameters missing: {', '.join(missing)}")
        for name, shape in self.parameter_shapes().items():
            if params[name].shape != shape:
                raise ShapeError(name, params[name].shape, shape)
        self.params = {name: params[name] for name in self.PARAM_NAMES}

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        n, e, h = self.data_dim, TIME_EMBEDDING_DIM, HIDDEN_WIDTH
        return {
            "fc1.weight": (h, n + e),
            "fc1.bias": (h,),
            "fc2.weight": (h, h),
            "fc2.bias": (h,),
            "fc3.weight": (n, h),
            "fc3.bias": (n,),
        }

    def _initial_params(self, seed: int) -> Dict[str, Tensor]:
        rng = SeededRNG(seed)
        params = {}
        for name, shape in self.parameter_shapes().items():
            if name.endswith(".weight"):
                params[name] = Tensor.wrap(rng.normal(shape, std=1.0 / math.sqrt(shape[1])))
            else:
                params[name] = Tensor.zeros(shape)
        return params

    def _network(self, inputs: Node, nodes: Sequence[Node]) -> Node:
        """Apply the MLP to a (batch, n + 16) node."""
        w1, b1, w2, b2, w3, b3 = nodes
        rows = inputs.shape[0]
        h = ad.silu(ad.add(ad.matmul(inputs, ad.transpose(w1)), ad.repeat_rows(b1, rows)))
        h = ad.silu(ad.add(ad.matmul(h, ad.transpose(w2)), ad.repeat_rows(b2, rows)))
        return ad.add(ad.matmul(h, ad.transpose(w3)), ad.repeat_rows(b3, rows))

    def _leaves(self) -> List[Node]:
        return [ad.leaf(self.params[name], name=name) for name in self.PARAM_NAMES]

    def predict(self, x_t: Node, t: int) -> Node:
        self._check_input(x_t, t)
        embedding = ad.constant(time_embedding(t, self.schedule.T))
        inputs = ad.reshape(ad.concat([x_t, embedding]), (1, self.data_dim + TIME_EMBEDDING_DIM))
        out = self._network(inputs, self._leaves())
        return ad.reshape(out, (self.data_dim,))

    def predict_array(self, x_t: np.ndarray, t: int) -> np.ndarray:
        self.schedule.check_step(t)
        batch = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        embedding = np.tile(time_embedding(t, self.schedule.T), (batch.shape[0], 1))
        with ad.no_grad():
            out = self._network(ad.constant(np.hstack([batch, embedding])), self._leaves()).data
        return out if np.ndim(x_t) == 2 else out[0]


def train_denoiser(
    dataset: Sequence[Tensor],
    sched: NoiseSchedule,
    epochs: int = 2000,
    lr: float = 1e-3,
    seed: int = 0,
) -> TrainedDenoiser:
    """
    Fit a TrainedDenoiser to minimise E||eps - eps_theta(x_t, t)||^2.

    Every epoch is one full-batch Adam step; each sample gets its own
    uniformly drawn timestep and noise.

    Args:
        dataset (Sequence[Tensor]): Training images, all the same shape
        sched (NoiseSchedule): Forward-process schedule
        epochs (int, optional): Number of full-batch steps. Defaults to 2000.
        lr (float, optional): Adam learning rate. Defaults to 1e-3.
        seed (int, optional): Initialisation and sampling seed. Defaults to 0.

    Returns:
        TrainedDenoiser: Model with ``loss_trace`` holding the per-epoch loss

    Raises:
        NumericalError: If the loss or the parameters become non-finite
    """
    if not dataset:
        raise ValidationError("train_denoiser needs a nonempty dataset")
    shapes = {item.shape for item in dataset}
    if len(shapes) != 1:
        raise ValidationError(f"dataset images have mixed shapes: {sorted(shapes)}")
    if epochs < 1 or lr <= 0:
        raise ValidationError("epochs must be >= 1 and lr > 0")
    data = np.stack([item.data.reshape(-1) for item in dataset])
    batch, dim = data.shape
    rng = SeededRNG(seed)
    model = TrainedDenoiser(dim, sched, seed=rng.spawn(0).seed)
    names = TrainedDenoiser.PARAM_NAMES
    weights = {name: model.params[name].numpy() for name in names}
    first = {name: np.zeros_like(value) for name, value in weights.items()}
    second = {name: np.zeros_like(value) for name, value in weights.items()}
    beta1, beta2, tiny = 0.9, 0.999, 1e-8
    embeddings = np.stack([time_embedding(t, sched.T) for t in range(sched.T + 1)])

    for epoch in range(1, epochs + 1):
        steps = rng.integers(1, sched.T + 1, batch)
        noise = rng.normal((batch, dim))
        a = sched.alpha[steps][:, None]
        x_t = np.sqrt(a) * data + np.sqrt(1.0 - a) * noise
        inputs = ad.constant(np.hstack([x_t, embeddings[steps]]))
        leaves = [ad.leaf(weights[name], name=name) for name in names]
        try:
            pred = model._network(inputs, leaves)
            loss = ad.scale(ad.reduce_sum(ad.square(ad.sub(pred, ad.constant(noise)))), 1.0 / batch)
            grads = ad.backward(loss, leaves)
        except NumericalError as exc:
            raise NumericalError(f"denoiser training diverged: {exc}", step=epoch) from exc
        model.loss_trace.append(float(loss.data))
        for name, grad in zip(names, grads):
            g = grad.data
            first[name] = beta1 * first[name] + (1 - beta1) * g
            second[name] = beta2 * second[name] + (1 - beta2) * g * g
            m_hat = first[name] / (1 - beta1 ** epoch)
            v_hat = second[name] / (1 - beta2 ** epoch)
            weights[name] = weights[name] - lr * m_hat / (np.sqrt(v_hat) + tiny)
            if not np.all(np.isfinite(weights[name])):
                raise NumericalError(f"denoiser parameter '{name}' became non-finite", step=epoch)
        if epoch % 100 == 0 or epoch == epochs:
            logger.info("Denoiser epoch %d/%d loss %.6f", epoch, epochs, model.loss_trace[-1])

    model.params = {name: Tensor.wrap(weights[name]) for name in names}
    return model


def oracle_denoiser(gm: GaussianMixture, sched: NoiseSchedule) -> OracleDenoiser:
    return OracleDenoiser(gm, sched)


def _posterior_coefficient(a: float, mode: str) -> float:
    if mode == "consistent":
        return math.sqrt(1.0 - a)
    if mode == "paper-literal":
        return 1.0 - a
    raise ValidationError(f"unknown posterior mode '{mode}'; expected one of {', '.join(POSTERIOR_MODES)}")


def posterior_mean_from_noise(
    x_t: Node, eps: Node, t: int, sched: NoiseSchedule, mode: str = "consistent"
) -> Node:
    a = float(sched.alpha[t])
    coefficient = _posterior_coefficient(a, mode)
    return ad.scale(ad.sub(x_t, ad.scale(eps, coefficient)), 1.0 / math.sqrt(a))


def posterior_mean(
    x_t: Node,
    t: int,
    sched: NoiseSchedule,
    denoiser: DenoiserModel,
    mode: str = "consistent",
) -> Node:
    """
    Denoiser estimate of x0 given x_t.

    ``consistent`` mode weights the noise by sqrt(1 - a_t), the exact inverse
    of forward diffusion; ``paper-literal`` weights it by (1 - a_t).
    """
    sched.check_step(t)
    denoiser.check_schedule(sched)
    return posterior_mean_from_noise(x_t, denoiser.predict(x_t, t), t, sched, mode)


def posterior_mean_array(
    x_t: np.ndarray, t: int, sched: NoiseSchedule, denoiser: DenoiserModel, mode: str = "consistent"
) -> np.ndarray:
    a = float(sched.alpha[t])
    eps = denoiser.predict_array(x_t, t)
    return (x_t - _posterior_coefficient(a, mode) * eps) / math.sqrt(a)


@dataclass
class DDIMMean:
    """Deterministic part of one reverse step and the quantities it came from."""

    mu: Node
    x0_hat: Node
    eps: Node


def ddim_mean(
    x_t: Node,
    t: int,
    sched: NoiseSchedule,
    denoiser: DenoiserModel,
    mode: str = "consistent",
) -> DDIMMean:
    """mu = sqrt(a_{t-1}) x0_hat + sqrt(1 - a_{t-1} - sigma_t^2) eps."""
    sched.check_step(t)
    denoiser.check_schedule(sched)
    eps = denoiser.predict(x_t, t)
    x0_hat = posterior_mean_from_noise(x_t, eps, t, sched, mode)
    mu = ad.add(
        ad.scale(x0_hat, math.sqrt(sched.alpha[t - 1])),
        ad.scale(eps, sched.direction_coefficient(t)),
    )
    return DDIMMean(mu=mu, x0_hat=x0_hat, eps=eps)


def ddim_step(
    x_t: Tensor,
    t: int,
    sched: NoiseSchedule,
    denoiser: DenoiserModel,
    rng: SeededRNG,
    mode: str = "consistent",
) -> Tuple[Tensor, Tensor]:
    """
    One unconditional reverse step.

    Returns:
        Tuple[Tensor, Tensor]: ``(mu, x_{t-1})``; noise is drawn only when
        sigma_t > 0
    """
    with ad.no_grad():
        mean = ddim_mean(ad.leaf(x_t), t, sched, denoiser, mode)
    mu = mean.mu.value
    sigma = float(sched.sigma[t])
    if sigma == 0.0:
        return mu, mu
    return mu, Tensor.wrap(mu.data + sigma * rng.normal(mu.shape))


def ddim_sample(
    denoiser: DenoiserModel,
    sched: NoiseSchedule,
    seed: int,
    mode: str = "consistent",
) -> Tensor:
    """Full reverse pass from x_T ~ N(0, I)."""
    rng = SeededRNG(seed)
    x = Tensor.wrap(rng.normal(denoiser.data_dim))
    for t in range(sched.T, 0, -1):
        _, x = ddim_step(x, t, sched, denoiser, rng, mode)
        if not x.is_finite():
            raise NumericalError("reverse sampling produced non-finite values", step=t)
    return x


def ddim_sample_batch(
    denoiser: DenoiserModel,
    sched: NoiseSchedule,
    count: int,
    seed: int,
    mode: str = "consistent",
    keep_path: bool = False,
) -> Tuple[np.ndarray, Optional[List[np.ndarray]]]:
    """
    Vectorised reverse pass over ``count`` independent chains.

    Returns:
        Tuple[np.ndarray, Optional[List[np.ndarray]]]: Final samples of shape
        (count, n) and, with ``keep_path``, the states x_T .. x_0
    """
    denoiser.check_schedule(sched)
    rng = SeededRNG(seed)
    x = rng.normal((count, denoiser.data_dim))
    path = [x] if keep_path else None
    for t in range(sched.T, 0, -1):
        eps = denoiser.predict_array(x, t)
        x0_hat = (x - _posterior_coefficient(sched.alpha[t], mode) * eps) / math.sqrt(sched.alpha[t])
        x = math.sqrt(sched.alpha[t - 1]) * x0_hat + sched.direction_coefficient(t) * eps
        if sched.sigma[t] > 0:
            x = x + sched.sigma[t] * rng.normal(x.shape)
        if not np.all(np.isfinite(x)):
            raise NumericalError("reverse sampling produced non-finite values", step=t)
        if path is not None:
            path.append(x)
    return x, path


def save_denoiser(model: TrainedDenoiser, path: PathLike) -> Path:
    """Checkpoint the trained weights plus the step count they were trained for."""
    tensors = dict(model.params)
    tensors["meta.T"] = Tensor([float(model.schedule.T)])
    return write_checkpoint(path, tensors)


def load_denoiser(path: PathLike, eta: float) -> TrainedDenoiser:
    """Restore a TrainedDenoiser; the schedule is rebuilt from the stored T."""
    tensors = read_checkpoint(path)
    if "meta.T" not in tensors:
        raise ValidationError(f"denoiser checkpoint {path} lacks the meta.T section")
    steps = int(tensors.pop("meta.T").item())
    if "fc3.bias" not in tensors:
        raise ValidationError(f"denoiser checkpoint {path} lacks fc3.bias")
    data_dim = tensors["fc3.bias"].size
    return TrainedDenoiser(data_dim, make_schedule(steps, eta), params=tensors)

"""
Attack pipeline tying the dataset, denoiser, attacked model, defenses and
validators together for the command-line runner.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .analysis import (
    TheoremReport,
    check_monotonicity,
    convergence_rate_report,
    gram_spectrum,
    jensen_gap_bound,
    jensen_gap_with_error,
    laurent_massart_check,
    noise_trend_report,
    power_iteration_extremes,
)
from .attack import AttackConfig, AttackTrace, dlg_baseline, run_attack
from .autodiff import Tensor
from .config import ExperimentConfig
from .data_manager import ShapeDatasetManager
from .defense import apply_defense
from .diffusion import (
    DenoiserModel,
    GaussianMixture,
    OracleDenoiser,
    TrainedDenoiser,
    load_denoiser,
    make_schedule,
    oracle_denoiser,
    train_denoiser,
)
from .errors import ValidationError
from .models import (
    AttackedModel,
    LeakedGradient,
    batch_gradient,
    build_model,
    client_gradient,
    gradient_jacobian,
)
from .rng import SeededRNG
from .vulnerability import RVEstimate, estimate_rv

logger = logging.getLogger(__name__)

# stream keys derived from a run seed
PRIVATE_STREAM = 1
NOISE_STREAM = 2
RV_STREAM = 3

CONVEX_DIM = 16
CONVEX_CLASSES = 4
CONVEX_MEAN = 0.5
CONVEX_VARIANCE = 0.04
# narrow prior of the monotone regime; eta = 1 keeps the posterior mean fixed
# under the oracle DDIM mean
MONOTONE_VARIANCE = 1e-7
MONOTONE_ETA = 1.0
LM_GRID = ((1000, 0.005), (1000, 0.01), (1000, 0.05), (4096, 0.005), (4096, 0.01), (4096, 0.05))
JENSEN_VARIANCES = (0.05, 0.2, 0.8)
# smooth nonlinear model; relu layers make g jump across activation boundaries
JENSEN_MODEL = "cnn-tiny"
TREND_MODEL = "cnn-tiny"


@dataclass(frozen=True)
class ConvexRegime:
    """Linear model with an affine gradient map and a single-Gaussian prior."""

    model: AttackedModel
    mixture: GaussianMixture
    denoiser: OracleDenoiser
    private: Tensor


def convex_regime(T: int, eta: float, seed: int, variance: float = CONVEX_VARIANCE) -> ConvexRegime:
    """
    Small setting where the attack loss is convex in the input.

    linear-1 with the linear-score loss has g(x) = (y x^T, y), affine in x;
    the prior is N(0.5, variance I) on 16 pixels and the private sample is a
    draw from it.
    """
    if variance <= 0:
        raise ValidationError(f"prior variance must be > 0, got {variance}")
    model = build_model("linear-1", seed, input_dim=CONVEX_DIM, num_classes=CONVEX_CLASSES,
                        loss="linear-score")
    mixture = GaussianMixture([1.0], [np.full(CONVEX_DIM, CONVEX_MEAN)], [variance])
    private = Tensor.wrap(mixture.sample(1, SeededRNG(seed).spawn(PRIVATE_STREAM))[0])
    return ConvexRegime(model, mixture, oracle_denoiser(mixture, make_schedule(T, eta)), private)


def monotone_trace(T: int, seed: int) -> AttackTrace:
    """
    Exact-sphere attack on the clean gradient of the monotone regime.

    With eta = 1 the oracle DDIM mean leaves the posterior mean unchanged, so
    each step moves x0_hat straight down the isotropic attack loss by the
    sphere radius scaled with the posterior-mean sensitivity. Under the
    narrow prior those moves add up to far less than the distance to the
    private sample, so the loss cannot overshoot and rise again.

    Args:
        T (int): Diffusion steps
        seed (int): Seed of the model, the private sample and the start

    Returns:
        AttackTrace: One record per step from T to 1
    """
    regime = convex_regime(T, MONOTONE_ETA, seed, MONOTONE_VARIANCE)
    leaked = client_gradient(regime.model, regime.private)
    attack_cfg = AttackConfig(T=T, eta=MONOTONE_ETA, m_r=1.0, step_size="auto", seed=seed,
                              max_snapshots=0, posterior_mode="consistent")
    return run_attack(regime.model, leaked, regime.denoiser, regime.denoiser.schedule,
                      attack_cfg, target=regime.private)


def run_cells(
    worker: Callable[[Any], Any],
    cells: Sequence[Any],
    jobs: int = 1,
    desc: str = "cells",
    initializer: Optional[Callable[..., None]] = None,
    initargs: Tuple[Any, ...] = (),
) -> List[Any]:
    """
    Evaluate ``worker`` on every cell, in parallel when ``jobs`` > 1.

    Results come back in the order of ``cells`` regardless of completion order.
    """
    if jobs <= 1 or len(cells) <= 1:
        if initializer is not None:
            initializer(*initargs)
        return [worker(cell) for cell in tqdm(cells, desc=desc, leave=False)]
    with ProcessPoolExecutor(max_workers=jobs, initializer=initializer, initargs=initargs) as pool:
        return list(tqdm(pool.map(worker, cells), total=len(cells), desc=desc, leave=False))


class AttackPipeline:
    """
    Builds the shared pieces of an experiment once and runs cells on them.
    """

    def __init__(self, config: ExperimentConfig, denoiser: Optional[DenoiserModel] = None):
        """
        Initialize the attack pipeline.

        Args:
            config (ExperimentConfig): Validated experiment settings
            denoiser (Optional[DenoiserModel]): Ready denoiser; built from the
                config on first use when omitted (mixture oracle, or trained
                checkpoint checked against T and the input size)
        """
        self.config = config
        self.dataset = ShapeDatasetManager(config.dataset_size, config.image_side, config.dataset_seed)
        self.images = self.dataset.get_all_images()
        self.schedule = make_schedule(config.T, config.eta)
        self._denoiser = denoiser
        self.model = self.build_model(config.model)

    @property
    def denoiser(self) -> DenoiserModel:
        if self._denoiser is None:
            self._denoiser = self._build_denoiser()
        return self._denoiser

    def _build_denoiser(self) -> DenoiserModel:
        if self.config.denoiser == "oracle":
            return oracle_denoiser(self.dataset.fit_mixture(), self.schedule)
        model = load_denoiser(self.config.denoiser_checkpoint, self.config.eta)
        model.check_schedule(self.schedule)
        if model.data_dim != self.config.input_dim:
            raise ValidationError(
                f"denoiser checkpoint is for {model.data_dim} pixels, config has {self.config.input_dim}"
            )
        return model

    def build_model(self, name: str) -> AttackedModel:
        """
        Attacked model of the given architecture with the configured loss and seed.

        Args:
            name (str): Architecture name

        Returns:
            AttackedModel: Deterministically initialised model
        """
        cfg = self.config
        label = cfg.label if cfg.client_loss == "cross-entropy" else None
        return build_model(
            name, cfg.model_seed, label=label, input_dim=cfg.input_dim,
            num_classes=cfg.num_classes, loss=cfg.client_loss,
        )

    def private_batch(self, seed: int, size: int = 1) -> List[Tensor]:
        """
        Private samples of one run, drawn without replacement.

        Args:
            seed (int): Run seed
            size (int, optional): Batch size. Defaults to 1.

        Returns:
            List[Tensor]: The private images
        """
        order = SeededRNG(seed).spawn(PRIVATE_STREAM).permutation(len(self.images))
        return [self.images[int(i)] for i in order[:size]]

    def leak(
        self,
        seed: int,
        kind: Optional[str] = None,
        variance: Optional[float] = None,
        batch_size: Optional[int] = None,
        model: Optional[AttackedModel] = None,
    ) -> Tuple[LeakedGradient, List[Tensor]]:
        """
        Leaked gradient of a private batch after the defense.

        Args:
            seed (int): Run seed
            kind (Optional[str]): Defense kind; config value when omitted
            variance (Optional[float]): Noise variance; config value when omitted
            batch_size (Optional[int]): Batch size; config value when omitted
            model (Optional[AttackedModel]): Attacked model; pipeline model when omitted

        Returns:
            Tuple[LeakedGradient, List[Tensor]]: Gradient and the private batch
        """
        cfg = self.config
        model = model or self.model
        batch = self.private_batch(seed, batch_size or cfg.batch_size)
        clean = batch_gradient(model, batch)
        noisy = apply_defense(
            clean,
            kind or cfg.defense,
            cfg.noise_variance if variance is None else variance,
            SeededRNG(seed).spawn(NOISE_STREAM),
        )
        return noisy, batch

    def attack(
        self,
        seed: int,
        kind: Optional[str] = None,
        variance: Optional[float] = None,
        batch_size: Optional[int] = None,
        m_r: Optional[float] = None,
        model: Optional[AttackedModel] = None,
    ) -> AttackTrace:
        """
        Run GGSS-R against the leaked gradient of one private batch.

        Returns:
            AttackTrace: Trace scored against the private batch
        """
        model = model or self.model
        leaked, batch = self.leak(seed, kind, variance, batch_size, model)
        cfg = self.config.attack_config(seed, m_r)
        return run_attack(model, leaked, self.denoiser, self.schedule, cfg, target=batch)

    def baseline(self, seed: int) -> AttackTrace:
        """
        Pixel-space baseline with the same number of gradient evaluations.

        Returns:
            AttackTrace: Baseline trace, same schema as the attack
        """
        leaked, batch = self.leak(seed)
        return dlg_baseline(
            self.model, leaked, self.config.baseline_iters, self.config.dlg_lr, seed,
            target=batch, max_snapshots=self.config.max_snapshots,
        )

    def train(self, seed: int = 0) -> TrainedDenoiser:
        """
        Train the MLP denoiser on the procedural dataset.

        Returns:
            TrainedDenoiser: Model with its loss trace
        """
        return train_denoiser(self.images, self.schedule, self.config.train_epochs,
                              self.config.train_lr, seed)

    def rv(self, name: str, seed: int) -> RVEstimate:
        """
        RV estimate of one zoo architecture on the dataset.

        Returns:
            RVEstimate: Estimate with its standard error
        """
        cfg = self.config
        return estimate_rv(self.build_model(name), self.images, None, cfg.rv_M, cfg.rv_N,
                           SeededRNG(seed).spawn(RV_STREAM))

    def verify_theorems(self) -> List[TheoremReport]:
        """
        Run every empirical validator.

        Returns:
            List[TheoremReport]: Reports in a fixed order
        """
        return verify_theorems(self.config)


def _lm_report(n: int, eps: float, samples: int, seed: int) -> TheoremReport:
    report = laurent_massart_check(n, 1.0, eps, samples, SeededRNG(seed))
    report.theorem = f"laurent-massart[n={n},eps={eps:g}]"
    return report


def _jensen_reports(cfg: ExperimentConfig, seed: int) -> List[TheoremReport]:
    sched = make_schedule(cfg.T, cfg.eta)
    t = max(1, cfg.T // 2)
    alpha = float(sched.alpha[t])
    reports = []

    regime = convex_regime(cfg.T, cfg.eta, seed)
    x_t = math.sqrt(alpha) * regime.mixture.means[0]
    gap, stderr = jensen_gap_with_error(regime.model, regime.mixture, sched, t, x_t,
                                        cfg.jensen_samples, SeededRNG(seed))
    reports.append(TheoremReport(
        "jensen-gap-affine", gap <= 4.0 * stderr, {"gap": gap, "stderr": stderr}, 4.0,
        cfg.jensen_samples, (seed,), "affine gradient map; gap must vanish within 4 standard errors",
    ))

    model = build_model(JENSEN_MODEL, seed, input_dim=CONVEX_DIM, num_classes=CONVEX_CLASSES)
    gaps = {}
    for variance in JENSEN_VARIANCES:
        prior = GaussianMixture([1.0], [np.full(CONVEX_DIM, CONVEX_MEAN)], [variance])
        point = math.sqrt(alpha) * prior.means[0]
        gaps[variance] = jensen_gap_with_error(model, prior, sched, t, point,
                                               cfg.jensen_samples, SeededRNG(seed))[0]
    ordered = [gaps[v] for v in JENSEN_VARIANCES]
    reports.append(TheoremReport(
        "jensen-gap-growth", all(b > a for a, b in zip(ordered, ordered[1:])),
        {f"gap@prior_var={v:g}": g for v, g in gaps.items()}, 0.0, cfg.jensen_samples, (seed,),
        "gap must grow with the posterior variance",
    ))

    prior = GaussianMixture([1.0], [np.full(CONVEX_DIM, CONVEX_MEAN)], [JENSEN_VARIANCES[1]])
    point = math.sqrt(alpha) * prior.means[0]
    bound = jensen_gap_bound(model, prior, sched, t, point, cfg.jensen_samples, SeededRNG(seed))
    reports.append(TheoremReport(
        "jensen-gap-bound", gaps[JENSEN_VARIANCES[1]] <= bound,
        {"gap": gaps[JENSEN_VARIANCES[1]], "bound": bound}, 0.0, cfg.jensen_samples, (seed,),
        "Lipschitz bound with a finite-difference Jacobian norm",
    ))
    return reports


def _convex_trace(cfg: ExperimentConfig, seed: int, variance: float) -> AttackTrace:
    regime = convex_regime(cfg.T, cfg.eta, seed)
    clean = client_gradient(regime.model, regime.private)
    kind = "gaussian" if variance > 0 else "none"
    leaked = apply_defense(clean, kind, variance, SeededRNG(seed).spawn(NOISE_STREAM))
    attack_cfg = AttackConfig(T=cfg.T, eta=cfg.eta, m_r=1.0, step_size="auto", seed=seed,
                              max_snapshots=0, posterior_mode=cfg.posterior_mode)
    return run_attack(regime.model, leaked, regime.denoiser, regime.denoiser.schedule,
                      attack_cfg, target=regime.private)


def _convex_cell(args: Tuple[ExperimentConfig, int, float]) -> AttackTrace:
    cfg, seed, variance = args
    return _convex_trace(cfg, seed, variance)


def _spectrum_report(cfg: ExperimentConfig, seed: int) -> TheoremReport:
    regime = convex_regime(cfg.T, cfg.eta, seed)
    jac = gradient_jacobian(regime.model, regime.private)
    dense = gram_spectrum(jac)
    iterated = power_iteration_extremes(jac, SeededRNG(seed))
    rel_max = abs(dense[1] - iterated[1]) / max(abs(dense[1]), 1e-300)
    return TheoremReport(
        "jacobian-spectrum", dense[1] >= dense[0] and rel_max <= 1e-6,
        {"lambda_min": dense[0], "lambda_max": dense[1], "power_lambda_min": iterated[0],
         "power_lambda_max": iterated[1], "rel_error_max": rel_max},
        1e-6, 1, (seed,),
    )


def _monotone_cell(args: Tuple[int, int]) -> AttackTrace:
    T, seed = args
    return monotone_trace(T, seed)


def _noise_trend(cfg: ExperimentConfig, seeds: List[int], levels: List[float]) -> TheoremReport:
    """Gaussian noise sweep on cnn-tiny; peak PSNR must fall as the variance grows."""
    pipeline = AttackPipeline(cfg.with_overrides(model=TREND_MODEL))
    cells = [SweepCell(seed, "gaussian", v) for v in levels for seed in seeds]
    traces = run_sweep(pipeline, cells, desc="noise trend")
    peak: Dict[float, List[float]] = {v: [] for v in levels}
    for cell, trace in zip(cells, traces):
        peak[cell.variance].append(trace.peak_psnr)  # type: ignore[index]
    report = noise_trend_report(peak)
    report.seeds = tuple(seeds)
    report.notes = f"{TREND_MODEL}, gaussian perturbation"
    return report


def verify_theorems(cfg: ExperimentConfig) -> List[TheoremReport]:
    """
    Every validator: concentration, Jensen gap, monotonicity, convergence
    rate, noise degradation and the Jacobian spectrum cross-check.
    """
    seeds = list(cfg.seeds)
    reports = [_lm_report(n, eps, cfg.lm_samples, seeds[0]) for n, eps in LM_GRID]
    reports += _jensen_reports(cfg, seeds[0])

    monotone = run_cells(_monotone_cell, [(cfg.T, seed) for seed in seeds], cfg.jobs, desc="monotone regime")
    for seed, trace in zip(seeds, monotone):
        report = check_monotonicity(trace)
        report.theorem = f"monotone-attack-loss[seed={seed}]"
        report.seeds = (seed,)
        reports.append(report)

    levels = sorted(set(cfg.noise_grid))
    if len(levels) >= 2 and len(seeds) >= 3:
        cells = [(cfg, s, v) for v in levels for s in seeds]
        traces = run_cells(_convex_cell, cells, cfg.jobs, desc="convex regime")
        by_level: Dict[float, List[AttackTrace]] = {v: [] for v in levels}
        for (_, _, variance), trace in zip(cells, traces):
            by_level[variance].append(trace)
        rate = convergence_rate_report(by_level)
        rate.seeds = tuple(seeds)
        reports.append(rate)
        reports.append(_noise_trend(cfg, seeds, levels))
    else:
        logger.warning("Skipping noise-level checks: need >= 2 noise levels and >= 3 seeds")

    reports.append(_spectrum_report(cfg, seeds[0]))
    return reports


# one pipeline per worker process, built by the pool initializer
_WORKER_PIPELINE: Optional[AttackPipeline] = None


def _init_worker(config: ExperimentConfig) -> None:
    global _WORKER_PIPELINE
    if _WORKER_PIPELINE is None or _WORKER_PIPELINE.config != config:
        _WORKER_PIPELINE = AttackPipeline(config)


def _use_pipeline(pipeline: AttackPipeline) -> None:
    global _WORKER_PIPELINE
    _WORKER_PIPELINE = pipeline


def _pipeline() -> AttackPipeline:
    if _WORKER_PIPELINE is None:
        raise RuntimeError("worker pipeline not initialised")
    return _WORKER_PIPELINE


@dataclass(frozen=True)
class SweepCell:
    """One attack run of a sweep: every field not None overrides the config."""

    seed: int
    kind: Optional[str] = None
    variance: Optional[float] = None
    batch_size: Optional[int] = None
    m_r: Optional[float] = None
    model: Optional[str] = None


def _attack_cell(cell: SweepCell) -> AttackTrace:
    pipeline = _pipeline()
    model = pipeline.build_model(cell.model) if cell.model else None
    return pipeline.attack(cell.seed, cell.kind, cell.variance, cell.batch_size, cell.m_r, model)


def _rv_cell(cell: Tuple[str, int]) -> RVEstimate:
    name, seed = cell
    return _pipeline().rv(name, seed)


def run_sweep(pipeline: AttackPipeline, cells: Sequence[SweepCell], desc: str = "sweep") -> List[AttackTrace]:
    """
    Attack every cell; worker processes rebuild the pipeline from its config.

    Args:
        pipeline (AttackPipeline): Pipeline used in-process when jobs == 1
        cells (Sequence[SweepCell]): Cells in output order
        desc (str, optional): Progress bar label

    Returns:
        List[AttackTrace]: One trace per cell, in cell order
    """
    jobs = pipeline.config.jobs
    if jobs <= 1 or len(cells) <= 1:
        _use_pipeline(pipeline)
        return run_cells(_attack_cell, cells, 1, desc)
    return run_cells(_attack_cell, cells, jobs, desc, _init_worker, (pipeline.config,))


def run_rv_sweep(pipeline: AttackPipeline, cells: Sequence[Tuple[str, int]]) -> List[RVEstimate]:
    jobs = pipeline.config.jobs
    if jobs <= 1 or len(cells) <= 1:
        _use_pipeline(pipeline)
        return run_cells(_rv_cell, cells, 1, "rv")
    return run_cells(_rv_cell, cells, jobs, "rv", _init_worker, (pipeline.config,))


def noise_cells(config: ExperimentConfig) -> List[SweepCell]:
    """Cells of the noise sweep sorted by kind, variance and seed."""
    return [
        SweepCell(seed, kind, variance)
        for kind in sorted(config.noise_kinds)
        for variance in sorted(config.noise_grid)
        for seed in sorted(config.seeds)
    ]


def batch_cells(config: ExperimentConfig) -> List[SweepCell]:
    return [SweepCell(seed, batch_size=b) for b in sorted(config.batch_grid) for seed in sorted(config.seeds)]


def guidance_cells(config: ExperimentConfig) -> List[SweepCell]:
    return [SweepCell(seed, m_r=rate) for rate in sorted(config.guidance_grid) for seed in sorted(config.seeds)]


def zoo_cells(config: ExperimentConfig) -> List[SweepCell]:
    """One default attack per RV model and seed, sorted by model order and seed."""
    return [SweepCell(seed, model=name) for name in config.rv_models for seed in sorted(config.seeds)]

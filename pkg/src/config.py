"""
Experiment configuration: flat ``key = value`` files with documented
defaults, plus environment overrides loaded from ``.env``.
"""

import logging
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Tuple, Union

from dotenv import load_dotenv

from .attack import AttackConfig
from .defense import DEFENSE_KINDS
from .diffusion import POSTERIOR_MODES
from .errors import ValidationError
from .models import ARCHITECTURES, LOSS_KINDS

logger = logging.getLogger(__name__)

DENOISER_KINDS = ("oracle", "trained")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise ValueError(f"expected an integer >= 1, got {value}")
    return value


def _non_negative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise ValueError(f"expected an integer >= 0, got {value}")
    return value


def _non_negative_float(text: str) -> float:
    value = float(text)
    if not value >= 0:
        raise ValueError(f"expected a number >= 0, got {text}")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise ValueError(f"expected a number > 0, got {text}")
    return value


def _unit_float(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"expected a number in [0, 1], got {text}")
    return value


def _steps(text: str) -> int:
    value = int(text)
    if not 10 <= value <= 1000:
        raise ValueError(f"expected an integer in [10, 1000], got {value}")
    return value


def _step_size(text: str) -> Union[str, float]:
    if text == "auto":
        return "auto"
    return _positive_float(text)


def _choice(options: Tuple[str, ...]) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got '{text}'")
        return text

    return parse


def _list_of(item: Callable[[str], Any]) -> Callable[[str], Tuple[Any, ...]]:
    def parse(text: str) -> Tuple[Any, ...]:
        parts = [part.strip() for part in text.split(",") if part.strip()]
        if not parts:
            raise ValueError("expected a nonempty comma-separated list")
        return tuple(item(part) for part in parts)

    return parse


class Option(NamedTuple):
    parse: Callable[[str], Any]
    default: Any
    help: str


OPTIONS: Dict[str, Option] = {
    "dataset_size": Option(_positive_int, 512, "number of procedural shape images"),
    "image_side": Option(_positive_int, 8, "image side length; inputs have side^2 pixels"),
    "dataset_seed": Option(_non_negative_int, 1234, "seed of the image generator"),
    "model": Option(_choice(ARCHITECTURES), "cnn-tiny", "attacked model architecture"),
    "num_classes": Option(_positive_int, 10, "number of model outputs"),
    "client_loss": Option(_choice(LOSS_KINDS), "cross-entropy", "client loss kind"),
    "model_seed": Option(_non_negative_int, 0, "attacked model initialisation seed"),
    "label": Option(_non_negative_int, 0, "fixed cross-entropy label of the private sample"),
    "defense": Option(_choice(DEFENSE_KINDS), "none", "gradient perturbation kind"),
    "noise_variance": Option(_non_negative_float, 0.0, "per-entry perturbation variance"),
    "batch_size": Option(_positive_int, 1, "private samples averaged into the leaked gradient"),
    "T": Option(_steps, 100, "diffusion steps"),
    "eta": Option(_unit_float, 0.5, "DDIM stochasticity"),
    "m_r": Option(_unit_float, 0.20, "guidance rate"),
    "step_size": Option(_step_size, "auto", "blended step length r, or auto for sqrt(n)*sigma_t"),
    "posterior_mode": Option(_choice(POSTERIOR_MODES), "consistent", "noise coefficient of the posterior mean"),
    "max_snapshots": Option(_non_negative_int, 10, "posterior-mean snapshots kept per attack"),
    "denoiser": Option(_choice(DENOISER_KINDS), "oracle", "oracle mixture or trained MLP denoiser"),
    "denoiser_checkpoint": Option(str, "", "trained denoiser checkpoint (denoiser = trained)"),
    "train_epochs": Option(_positive_int, 2000, "denoiser training epochs"),
    "train_lr": Option(_positive_float, 1e-3, "denoiser Adam learning rate"),
    "dlg_iters": Option(_non_negative_int, 0, "baseline iterations; 0 means T"),
    "dlg_lr": Option(_positive_float, 0.1, "baseline first trial step of the line search"),
    "rv_M": Option(_positive_int, 1000, "RV projection directions"),
    "rv_N": Option(_positive_int, 310, "RV data samples"),
    "rv_models": Option(_list_of(_choice(ARCHITECTURES)), ARCHITECTURES, "models covered by the rv command"),
    "noise_grid": Option(_list_of(_non_negative_float), (1e-4, 1e-3, 1e-2, 1e-1), "noise variances swept"),
    "noise_kinds": Option(_list_of(_choice(("gaussian", "laplacian"))), ("gaussian", "laplacian"), "noise kinds swept"),
    "batch_grid": Option(_list_of(_positive_int), (1, 2, 4), "batch sizes swept"),
    "guidance_grid": Option(_list_of(_unit_float), (0.01, 0.1, 0.2, 0.3, 0.4, 0.6, 0.8), "guidance rates swept"),
    "seeds": Option(_list_of(_non_negative_int), (0, 1, 2, 3, 4), "attack seeds"),
    "lm_samples": Option(_positive_int, 10_000, "draws per concentration check"),
    "jensen_samples": Option(_positive_int, 2000, "posterior draws per Jensen gap estimate"),
}


def _env_default(name: str, fallback: str) -> str:
    return os.getenv(name, fallback)


@dataclass(frozen=True)
class ExperimentConfig:
    """
    Every setting of a run. Field defaults come from ``OPTIONS``.
    """

    dataset_size: int = OPTIONS["dataset_size"].default
    image_side: int = OPTIONS["image_side"].default
    dataset_seed: int = OPTIONS["dataset_seed"].default
    model: str = OPTIONS["model"].default
    num_classes: int = OPTIONS["num_classes"].default
    client_loss: str = OPTIONS["client_loss"].default
    model_seed: int = OPTIONS["model_seed"].default
    label: int = OPTIONS["label"].default
    defense: str = OPTIONS["defense"].default
    noise_variance: float = OPTIONS["noise_variance"].default
    batch_size: int = OPTIONS["batch_size"].default
    T: int = OPTIONS["T"].default
    eta: float = OPTIONS["eta"].default
    m_r: float = OPTIONS["m_r"].default
    step_size: Union[str, float] = OPTIONS["step_size"].default
    posterior_mode: str = OPTIONS["posterior_mode"].default
    max_snapshots: int = OPTIONS["max_snapshots"].default
    denoiser: str = OPTIONS["denoiser"].default
    denoiser_checkpoint: str = OPTIONS["denoiser_checkpoint"].default
    train_epochs: int = OPTIONS["train_epochs"].default
    train_lr: float = OPTIONS["train_lr"].default
    dlg_iters: int = OPTIONS["dlg_iters"].default
    dlg_lr: float = OPTIONS["dlg_lr"].default
    rv_M: int = OPTIONS["rv_M"].default
    rv_N: int = OPTIONS["rv_N"].default
    rv_models: Tuple[str, ...] = OPTIONS["rv_models"].default
    noise_grid: Tuple[float, ...] = OPTIONS["noise_grid"].default
    noise_kinds: Tuple[str, ...] = OPTIONS["noise_kinds"].default
    batch_grid: Tuple[int, ...] = OPTIONS["batch_grid"].default
    guidance_grid: Tuple[float, ...] = OPTIONS["guidance_grid"].default
    seeds: Tuple[int, ...] = OPTIONS["seeds"].default
    lm_samples: int = OPTIONS["lm_samples"].default
    jensen_samples: int = OPTIONS["jensen_samples"].default
    command: str = ""
    out_dir: str = field(default_factory=lambda: _env_default("GGSS_OUT_DIR", "runs"))
    jobs: int = field(default_factory=lambda: int(_env_default("GGSS_JOBS", "1")))

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        """Cross-field checks; single values are checked while parsing."""
        if not self.seeds:
            raise ValidationError("seed list must be nonempty")
        if self.jobs < 1:
            raise ValidationError(f"jobs must be >= 1, got {self.jobs}")
        if self.client_loss == "cross-entropy" and not 0 <= self.label < self.num_classes:
            raise ValidationError(f"label {self.label} out of range for {self.num_classes} classes")
        if "cnn-tiny" in (self.model, *self.rv_models) and self.image_side < 3:
            raise ValidationError("cnn-tiny needs image_side >= 3")
        if self.denoiser == "trained" and not self.denoiser_checkpoint and self.command not in ("", "train-denoiser"):
            raise ValidationError("denoiser = trained requires denoiser_checkpoint")
        if self.batch_size > self.dataset_size or max(self.batch_grid) > self.dataset_size:
            raise ValidationError("batch sizes cannot exceed dataset_size")
        if self.rv_N > self.dataset_size:
            raise ValidationError(f"rv_N={self.rv_N} exceeds dataset_size={self.dataset_size}")
        AttackConfig(
            T=self.T, eta=self.eta, m_r=self.m_r, step_size=self.step_size,
            max_snapshots=self.max_snapshots, posterior_mode=self.posterior_mode,
        )

    @property
    def input_dim(self) -> int:
        return self.image_side * self.image_side

    @property
    def baseline_iters(self) -> int:
        return self.dlg_iters or self.T

    def attack_config(self, seed: int, m_r: Optional[float] = None) -> AttackConfig:
        return AttackConfig(
            T=self.T,
            eta=self.eta,
            m_r=self.m_r if m_r is None else m_r,
            step_size=self.step_size,
            seed=seed,
            max_snapshots=self.max_snapshots,
            posterior_mode=self.posterior_mode,
        )

    def with_overrides(self, **changes: Any) -> "ExperimentConfig":
        return replace(self, **{k: v for k, v in changes.items() if v is not None})

    def as_manifest(self) -> Dict[str, str]:
        """Every setting rendered as text for the run manifest."""
        entries = {}
        for item in fields(self):
            value = getattr(self, item.name)
            if isinstance(value, tuple):
                value = ",".join(format(v, ".17g") if isinstance(v, float) else str(v) for v in value)
            elif isinstance(value, float):
                value = format(value, ".17g")
            entries[f"config.{item.name}"] = str(value)
        return entries


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Any]:
    """
    Parse ``key = value`` lines into typed values.

    Raises:
        ValidationError: On a malformed line, a bad value (both with the line
            number), a repeated key, or unknown keys (all listed together)
    """
    values: Dict[str, Any] = {}
    unknown: List[str] = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{source}: expected 'key = value', got '{raw.strip()}'", line=number)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in OPTIONS:
            unknown.append(f"{key} (line {number})")
            continue
        if key in values:
            raise ValidationError(f"{source}: key '{key}' given twice", line=number)
        try:
            values[key] = OPTIONS[key].parse(value)
        except ValueError as exc:
            raise ValidationError(f"{source}: bad value for '{key}': {exc}", line=number) from exc
    if unknown:
        raise ValidationError(f"{source}: unknown keys: {', '.join(unknown)}")
    return values


def parse_config(path: Optional[Union[str, Path]], **overrides: Any) -> ExperimentConfig:
    """
    Load an experiment file; keys it omits take their documented defaults.

    Args:
        path (Optional[Union[str, Path]]): Config file, or None for defaults only
        **overrides: Values that win over the file (command-line flags)

    Returns:
        ExperimentConfig: The validated configuration
    """
    load_dotenv()
    values: Dict[str, Any] = {}
    if path is not None:
        source = Path(path)
        if not source.is_file():
            raise ValidationError(f"config file not found: {source}")
        values = parse_config_text(source.read_text(), str(source))
    values.update({k: v for k, v in overrides.items() if v is not None})
    logger.debug("Config values: %s", values)
    return ExperimentConfig(**values)


def describe_options() -> str:
    """Help text listing every key with its default."""
    lines = ["config keys (key = value, '#' starts a comment):"]
    for key, option in OPTIONS.items():
        default = option.default
        if isinstance(default, tuple):
            default = ",".join(str(v) for v in default)
        lines.append(f"  {key:<20} {option.help} [default: {default if default != '' else 'empty'}]")
    lines.append("environment: GGSS_OUT_DIR [runs], GGSS_JOBS [1], GGSS_LOG_LEVEL [INFO]")
    return "\n".join(lines)

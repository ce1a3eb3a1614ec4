"""
Main entry point for the GGSS-R gradient inversion lab.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from dotenv import load_dotenv

from . import __version__
from .analysis import TheoremReport, matched_noise_report, rv_psnr_report
from .attack import AttackTrace
from .config import ExperimentConfig, describe_options, parse_config
from .diffusion import save_denoiser
from .errors import GGSSLabError, TheoremCheckFailure
from .experiments import (
    AttackPipeline,
    SweepCell,
    batch_cells,
    guidance_cells,
    noise_cells,
    run_rv_sweep,
    run_sweep,
    zoo_cells,
)
from .persistence import (
    FORMAT_VERSION,
    create_run_dir,
    write_csv,
    write_key_values,
    write_tensor,
)
from .rng import SeededRNG

logger = logging.getLogger(__name__)

TRACE_HEADER = ("t", "attack_loss", "mse", "psnr")
SWEEP_METRICS = ("peak_psnr", "final_psnr", "peak_mse")


def print_banner(command: str, run_dir: Path) -> None:
    """
    Display the banner of a run.
    """
    print("\n" + "=" * 50)
    print(f" GGSS-R lab {__version__}: {command}")
    print(f" Output: {run_dir}")
    print("=" * 50 + "\n")


def configure_logging() -> None:
    """Set the root log level from GGSS_LOG_LEVEL."""
    name = os.getenv("GGSS_LOG_LEVEL", "INFO").upper()
    level = getattr(logging, name, None)
    if not isinstance(level, int):
        level = logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    """
    Command-line parser: one subcommand per experiment, shared flags on each.
    """
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", type=Path, help="experiment file of key = value lines")
    shared.add_argument("--seed", type=int, action="append", dest="seeds",
                        help="attack seed; repeat for several (overrides 'seeds')")
    shared.add_argument("--out", help="output root [env GGSS_OUT_DIR, default runs]")
    shared.add_argument("--jobs", type=int, help="parallel worker processes [env GGSS_JOBS, default 1]")

    parser = argparse.ArgumentParser(
        prog="ggss-lab",
        description="Gradient inversion with diffusion-guided spherical sampling.",
        epilog=describe_options(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)
    for name, (_, summary) in COMMANDS.items():
        commands.add_parser(name, parents=[shared], help=summary, description=summary,
                            epilog=describe_options(),
                            formatter_class=argparse.RawDescriptionHelpFormatter)
    return parser


def write_manifest(run_dir: Path, config: ExperimentConfig, extra: Optional[Dict[str, str]] = None) -> Path:
    """
    Flat manifest with every config key, the seeds, the artifact format and the RNG.
    """
    entries: Dict[str, str] = dict(config.as_manifest())
    entries.update({
        "command": config.command,
        "seeds": ",".join(str(seed) for seed in config.seeds),
        "format_version": FORMAT_VERSION,
        "rng_algorithm": SeededRNG.ALGORITHM,
        "version": __version__,
    })
    entries.update(extra or {})
    return write_key_values(run_dir / "manifest.txt", entries)


def write_trace(run_dir: Path, stem: str, trace: AttackTrace) -> None:
    """
    Save the per-step CSV, the snapshots and the final reconstruction of one run.

    Args:
        run_dir (Path): Run directory
        stem (str): File prefix, e.g. ``trace-s0``
        trace (AttackTrace): Trace to persist
    """
    rows = [(r.t, r.attack_loss, r.mse, r.psnr) for r in trace.records]
    write_csv(run_dir / f"{stem}.csv", TRACE_HEADER, rows)
    if trace.snapshots:
        folder = run_dir / f"{stem}-snapshots"
        folder.mkdir(exist_ok=True)
        for t, estimate in trace.snapshots:
            write_tensor(folder / f"x0hat-t{t:04d}.txt", estimate)
    write_tensor(run_dir / f"{stem}-final.txt", trace.final)


def _report_trace(seed: int, trace: AttackTrace) -> None:
    print(f"seed {seed}: final loss {trace.losses[-1]:.6g}  "
          f"peak PSNR {trace.peak_psnr:.2f} dB  final PSNR {trace.final_psnr:.2f} dB")
    if trace.flagged_steps:
        print(f"  degenerate steps: {len(trace.flagged_steps)}")


def cmd_train_denoiser(config: ExperimentConfig, run_dir: Path) -> int:
    pipeline = AttackPipeline(config)
    seed = config.seeds[0]
    model = pipeline.train(seed)
    save_denoiser(model, run_dir / "denoiser.ckpt")
    write_csv(run_dir / "loss.csv", ("epoch", "loss"),
              [(epoch, loss) for epoch, loss in enumerate(model.loss_trace, start=1)])
    print(f"Trained {config.train_epochs} epochs; final loss {model.loss_trace[-1]:.6g}")
    return 0


def cmd_attack(config: ExperimentConfig, run_dir: Path) -> int:
    pipeline = AttackPipeline(config)
    seeds = sorted(config.seeds)
    traces = run_sweep(pipeline, [SweepCell(seed) for seed in seeds], desc="attack")
    for seed, trace in zip(seeds, traces):
        write_trace(run_dir, f"trace-s{seed}", trace)
        _report_trace(seed, trace)
    return 0


def cmd_baseline(config: ExperimentConfig, run_dir: Path) -> int:
    pipeline = AttackPipeline(config)
    for seed in sorted(config.seeds):
        trace = pipeline.baseline(seed)
        write_trace(run_dir, f"baseline-s{seed}", trace)
        _report_trace(seed, trace)
    return 0


def _metrics(trace: AttackTrace) -> List[float]:
    return [trace.peak_psnr, trace.final_psnr, trace.peak_mse]


def cmd_sweep_noise(config: ExperimentConfig, run_dir: Path) -> int:
    pipeline = AttackPipeline(config)
    cells = noise_cells(config)
    traces = run_sweep(pipeline, cells, desc="sweep-noise")
    rows = [(c.kind, c.variance, c.seed, *_metrics(t)) for c, t in zip(cells, traces)]
    write_csv(run_dir / "sweep.csv", ("noise_kind", "variance", "seed", *SWEEP_METRICS), rows)

    peaks: Dict[str, Dict[float, List[float]]] = {}
    for cell, trace in zip(cells, traces):
        peaks.setdefault(str(cell.kind), {}).setdefault(float(cell.variance or 0.0), []).append(trace.peak_psnr)
    for kind, by_variance in sorted(peaks.items()):
        for variance, values in sorted(by_variance.items()):
            print(f"{kind:<10} variance {variance:<8g} mean peak PSNR {sum(values) / len(values):.2f} dB")
    if "gaussian" in peaks and "laplacian" in peaks:
        report = matched_noise_report(peaks["gaussian"], peaks["laplacian"])
        (run_dir / "matched-noise.txt").write_text(report.to_text())
    return 0


def cmd_sweep_batch(config: ExperimentConfig, run_dir: Path) -> int:
    pipeline = AttackPipeline(config)
    cells = batch_cells(config)
    traces = run_sweep(pipeline, cells, desc="sweep-batch")
    rows = [(c.batch_size, c.seed, *_metrics(t)) for c, t in zip(cells, traces)]
    write_csv(run_dir / "sweep.csv", ("batch_size", "seed", *SWEEP_METRICS), rows)
    print(f"Wrote {len(rows)} batch-size runs")
    return 0


def cmd_sweep_guidance(config: ExperimentConfig, run_dir: Path) -> int:
    pipeline = AttackPipeline(config)
    cells = guidance_cells(config)
    traces = run_sweep(pipeline, cells, desc="sweep-guidance")
    rows = [(c.m_r, c.seed, *_metrics(t)) for c, t in zip(cells, traces)]
    write_csv(run_dir / "sweep.csv", ("m_r", "seed", *SWEEP_METRICS), rows)
    print(f"Wrote {len(rows)} guidance-rate runs")
    return 0


def cmd_rv(config: ExperimentConfig, run_dir: Path) -> int:
    pipeline = AttackPipeline(config)
    cells = [(name, seed) for name in config.rv_models for seed in sorted(config.seeds)]
    estimates = run_rv_sweep(pipeline, cells)
    rows = [(name, e.value, e.stderr, e.M, e.N, seed) for (name, seed), e in zip(cells, estimates)]
    write_csv(run_dir / "rv.csv", ("model", "rv", "stderr", "M", "N", "seed"), rows)
    for (name, seed), estimate in zip(cells, estimates):
        print(f"{name:<10} seed {seed}: RV {estimate.value:.6g} +/- {estimate.stderr:.2g}")
        if estimate.note:
            logger.warning("%s: %s", name, estimate.note)

    attacks = zoo_cells(config)
    traces = run_sweep(pipeline, attacks, desc="rv-attacks")
    rv: Dict[str, List[float]] = {}
    peaks: Dict[str, List[float]] = {}
    for (name, _), estimate in zip(cells, estimates):
        rv.setdefault(name, []).append(estimate.value)
    for cell, trace in zip(attacks, traces):
        peaks.setdefault(str(cell.model), []).append(trace.peak_psnr)
    mean_rv = {name: sum(values) / len(values) for name, values in rv.items()}
    write_csv(run_dir / "rv-psnr.csv", ("model", "mean_rv", "mean_peak_psnr"),
              [(name, mean_rv[name], sum(peaks[name]) / len(peaks[name])) for name in mean_rv])
    if len(mean_rv) >= 2:
        report = rv_psnr_report(mean_rv, peaks)
        (run_dir / "rv-psnr.txt").write_text(report.to_text())
        print(f"Spearman(RV, peak PSNR) = {report.statistics['spearman']:.3f}")
    return 0


def cmd_verify_theorems(config: ExperimentConfig, run_dir: Path) -> int:
    pipeline = AttackPipeline(config)
    reports: List[TheoremReport] = pipeline.verify_theorems()
    folder = run_dir / "reports"
    folder.mkdir(exist_ok=True)
    for index, report in enumerate(reports):
        (folder / f"{index:02d}-{report.theorem}.txt").write_text(report.to_text())
    write_csv(run_dir / "summary.csv", ("theorem", "passed", "tolerance", "samples"),
              [(r.theorem, r.passed, r.tolerance, r.samples) for r in reports])
    failed = [r.theorem for r in reports if not r.passed]
    for report in reports:
        print(f"[{'PASS' if report.passed else 'FAIL'}] {report.theorem}")
    if failed:
        raise TheoremCheckFailure(f"{len(failed)} check(s) failed: {', '.join(failed)}")
    return 0


COMMANDS: Dict[str, Tuple[Callable[[ExperimentConfig, Path], int], str]] = {
    "train-denoiser": (cmd_train_denoiser, "train the MLP denoiser; writes checkpoint and loss CSV"),
    "attack": (cmd_attack, "run GGSS-R per seed; writes traces, snapshots and manifest"),
    "baseline": (cmd_baseline, "run the pixel-space baseline under the same budget"),
    "sweep-noise": (cmd_sweep_noise, "attack over the noise variance x noise kind grid"),
    "sweep-batch": (cmd_sweep_batch, "attack over the batch-size grid"),
    "sweep-guidance": (cmd_sweep_guidance, "attack over the guidance-rate grid"),
    "rv": (cmd_rv, "estimate RV across the model zoo and rank it against attack PSNR"),
    "verify-theorems": (cmd_verify_theorems, "run every empirical validator; exit 3 on failure"),
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse arguments, run one command and return its exit status.

    Args:
        argv (Optional[Sequence[str]]): Arguments without the program name

    Returns:
        int: 0 on success, otherwise the exit code of the raised error
    """
    load_dotenv()
    configure_logging()
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse usage errors are validation errors here
        return 0 if exc.code in (0, None) else 1
    try:
        config = parse_config(
            args.config,
            command=args.command,
            seeds=tuple(args.seeds) if args.seeds else None,
            out_dir=args.out,
            jobs=args.jobs,
        )
        run_dir = create_run_dir(config.out_dir, args.command)
        print_banner(args.command, run_dir)
        write_manifest(run_dir, config)
        handler, _ = COMMANDS[args.command]
        return handler(config, run_dir)
    except GGSSLabError as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        print("\nOperation cancelled by user.", file=sys.stderr)
        return 130


def main(argv: Optional[Sequence[str]] = None) -> None:
    """
    Main function to run the lab.
    """
    sys.exit(run(argv))


if __name__ == "__main__":
    main()

"""Command-line entry point: one subcommand per experiment artifact."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Optional, Sequence

from loguru import logger

from .config import ExperimentConfig, apply_env, config_from_dict, load_config, load_defaults
from .diagnostics import (
    CostModel,
    flops_table,
    gradient_ratio_probe,
    lanczos_spectrum,
    landscape_slice,
    write_csv,
    write_json,
)
from .errors import ConfigurationError, LabError, RecordIOError
from .masks import MaskKind, MaskPolicy
from .numcore import HvpOracle
from .optim import OptimizerKind
from .runner import build_objective, run_ablation, run_training
from .theorycheck import (
    AssumptionConstants,
    BoundReport,
    check_bound,
    run_convergence,
    verify_assumptions,
    verify_descent,
    verify_lemma1,
    verify_lemma2,
)

LOG_FORMAT = "<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | {message}"


def configure_logging(level: str) -> None:
    logger.remove()
    logger.add(sys.stderr, level=level.upper(), format=LOG_FORMAT)


def _load(args: argparse.Namespace) -> ExperimentConfig:
    if args.config is not None:
        cfg = load_config(Path(args.config))
    else:
        cfg = apply_env(config_from_dict(load_defaults()))
    return cfg.with_overrides(seed=args.seed, threads=args.threads, output_dir=args.out)


def _out_dir(cfg: ExperimentConfig) -> Optional[Path]:
    return Path(cfg.output_dir) if cfg.output_dir else None


def _echo(payload) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True, default=str))


def cmd_train(cfg: ExperimentConfig) -> int:
    record = run_training(cfg).record
    _echo({"status": record.status, "steps": len(record.rows), **record.metrics})
    return 0


def cmd_ablate(cfg: ExperimentConfig) -> int:
    if cfg.ablation is None:
        raise ConfigurationError("ablate needs an 'ablation' section", field="ablation")
    result = run_ablation(cfg)
    _echo(result.rows)
    return 0


def _trained(cfg: ExperimentConfig):
    # diagnostics run on the trained weights; the training run itself is not persisted
    result = run_training(replace(cfg, output_dir=None))
    return result, result.diagnostic_batch(cfg.seed)


def cmd_spectrum(cfg: ExperimentConfig) -> int:
    result, batch = _trained(cfg)
    spec = cfg.diagnostics
    oracle = HvpOracle(result.objective, result.weights, batch if not result.objective.is_synthetic else None)
    iters = min(spec.lanczos_iters, oracle.dimension)
    report = lanczos_spectrum(oracle, min(spec.lanczos_k, iters), iters, seed=cfg.seed)
    if (out := _out_dir(cfg)) is not None:
        write_json(report, out / "spectrum.json")
    _echo(json.loads(report.to_json()))
    return 0


def cmd_landscape(cfg: ExperimentConfig) -> int:
    result, batch = _trained(cfg)
    spec = cfg.diagnostics
    grid = landscape_slice(
        result.objective, result.weights, batch, spec.resolution, spec.span, seed=cfg.seed, threads=cfg.threads
    )
    if (out := _out_dir(cfg)) is not None:
        write_csv(grid, out / "landscape.csv")
    _echo({"resolution": spec.resolution, "center_loss": grid.center_loss, "min": float(grid.losses.min()), "max": float(grid.losses.max())})
    return 0


def cmd_ratio(cfg: ExperimentConfig) -> int:
    result, batch = _trained(cfg)
    histogram = gradient_ratio_probe(result.objective, result.weights, batch, cfg.diagnostics.rho)
    if (out := _out_dir(cfg)) is not None:
        write_csv(histogram, out / "ratio.csv")
        write_json(histogram, out / "ratio.json")
    _echo({"fraction_below_zero": histogram.fraction_below_zero, "excluded": histogram.excluded_count})
    return 0


def cmd_theory(cfg: ExperimentConfig) -> int:
    if not cfg.objective.is_synthetic:
        raise ConfigurationError("theory needs a synthetic objective family", field="family")
    obj = build_objective(cfg.objective)
    constants = AssumptionConstants.from_objective(obj)
    spec = cfg.theory
    reports: list[BoundReport] = verify_assumptions(obj, constants, spec.n_points, spec.mc_reps, cfg.seed)
    for rho in spec.rhos:
        reports.append(verify_lemma1(obj, constants, rho, spec.n_points, cfg.seed))
        reports.append(verify_lemma2(obj, constants, rho, max(1, spec.n_points // 10), spec.mc_reps, cfg.seed))
        for kind in (OptimizerKind.SAM, OptimizerKind.SSAM):
            reports.append(
                verify_descent(obj, constants, spec.eta, rho, kind, spec.mc_reps // 10 or 1, cfg.seed, spec.n_states, spec.sparsity)
            )
    for kind, which in ((OptimizerKind.SAM, "theorem1"), (OptimizerKind.SSAM, "theorem2")):
        # Fisher masks need a classifier, so the bound runs use the dynamic policy
        policy = MaskPolicy(
            kind=MaskKind.DYNAMIC, sparsity=spec.sparsity, alpha=cfg.mask.alpha, drop_criterion=cfg.mask.drop_criterion
        )
        trace = run_convergence(
            obj, constants, kind, spec.eta0, spec.rho0, spec.horizon, spec.repeats, cfg.seed,
            policy=policy, steps_per_epoch=spec.steps_per_epoch, threads=cfg.threads,
        )
        reports.append(check_bound(trace, constants, which))
    payload = [r.to_dict() for r in reports]
    if (out := _out_dir(cfg)) is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "theory.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        except OSError as exc:
            raise RecordIOError(f"Failed to write {out / 'theory.json'}: {exc}", path=str(out)) from exc
    _echo([{"check": r.check, "passed": r.passed, "worst_margin": r.worst_margin} for r in reports])
    failed = [r.check for r in reports if not r.passed]
    if failed:
        logger.warning(f"Checks with violations: {', '.join(failed)}")
        return 2
    return 0


def cmd_flops(cfg: ExperimentConfig) -> int:
    rows = flops_table(CostModel(cfg.diagnostics.forward_fraction), cfg.diagnostics.sparsities)
    if (out := _out_dir(cfg)) is not None:
        write_csv(rows, out / "flops.csv")
    for row in rows:
        label = row.method if row.method != "ssam" else f"ssam s={row.sparsity:g}"
        print(f"{label:<14} {row.relative_flops:.2f}x")
    return 0


COMMANDS: dict[str, tuple[Callable[[ExperimentConfig], int], str]] = {
    "train": (cmd_train, "train one configuration and write its run record"),
    "ablate": (cmd_ablate, "run the ablation grid and write a summary table"),
    "spectrum": (cmd_spectrum, "train, then estimate the top Hessian eigenvalues"),
    "landscape": (cmd_landscape, "train, then evaluate a filter-normalised loss grid"),
    "ratio": (cmd_ratio, "train, then histogram the SAM/SGD gradient-difference ratio"),
    "theory": (cmd_theory, "check the assumptions, lemmas and convergence bounds"),
    "flops": (cmd_flops, "print the relative training cost per sparsity"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssam-lab", description="Sparse SAM experiments at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="experiment file (JSON, or TOML with a .toml suffix)")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--threads", type=int, help="worker threads")
        p.add_argument("--verbose", action="store_true", help="debug logging")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging("DEBUG" if args.verbose else "INFO")
    try:
        cfg = _load(args)
        if not args.verbose:
            configure_logging(cfg.log_level)
        handler, _ = COMMANDS[args.command]
        return handler(cfg)
    except LabError as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        return exc.exit_code
    except OSError as exc:
        logger.error(f"I/O failure: {exc}")
        return RecordIOError.exit_code

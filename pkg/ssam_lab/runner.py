"""Training loop and ablation driver.

train() wires the optimizer kernels and the mask policy together: the mask is
initialised at epoch 0 and offered for regeneration at every epoch boundary.
"""
from __future__ import annotations

import csv
import itertools
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterator, Optional

import numpy as np
from loguru import logger

from .config import DEFAULT_CONFIG_PATH, ExperimentConfig, ObjectiveSpec, dump_config
from .datasets import Dataset, load_dataset, make_blobs, train_test_split
from .errors import LabError, RecordIOError
from .masks import DropCriterion, InitialMask, MaskContext, MaskKind, SparseMask, initial_mask, maybe_regenerate
from .numcore import (
    Batch,
    CountingObjective,
    Family,
    MlpClassifier,
    NoisyQuadratic,
    ParamVector,
    StochasticObjective,
    TrigNonconvex,
    eval_loss,
    true_loss,
)
from .optim import OptimizerKind, init_state, step
from .records import STATUS_COMPLETED, STATUS_FAILED, RunRecord, StepRow, emit_record

DIAGNOSTIC_BATCH = 256
SUMMARY_FILE = "summary.csv"


def build_dataset(spec: ObjectiveSpec, seed: int) -> Optional[Dataset]:
    if spec.is_synthetic:
        return None
    if spec.dataset_format == "blobs":
        data = make_blobs(spec.n_samples, spec.n_features, spec.n_classes, spec.separation, seed)
        source = f"blobs(n={spec.n_samples}, p={spec.n_features}, C={spec.n_classes})"
    else:
        data = load_dataset(Path(spec.dataset), spec.dataset_format, spec.labels, spec.n_classes)
        source = str(spec.dataset)
    return train_test_split(data, spec.test_fraction, seed, source)


def build_objective(spec: ObjectiveSpec, dataset: Optional[Dataset] = None) -> StochasticObjective:
    if spec.family == Family.NOISY_QUADRATIC:
        curvature = spec.curvature if spec.curvature is not None else np.linspace(1.0 / spec.dimension, 1.0, spec.dimension)
        return NoisyQuadratic(curvature, sigma=spec.sigma, radius=spec.radius)
    if spec.family == Family.TRIG_NONCONVEX:
        return TrigNonconvex(spec.dimension, beta=spec.beta, omega=spec.omega, sigma=spec.sigma, radius=spec.radius)
    n_features = dataset.train.n_features if dataset is not None else spec.n_features
    n_classes = dataset.n_classes if dataset is not None else spec.n_classes
    return MlpClassifier(n_features, spec.n_hidden, n_classes)


@dataclass
class TrainingResult:
    record: RunRecord
    objective: StochasticObjective
    weights: ParamVector
    mask: SparseMask
    dataset: Optional[Dataset] = None

    def diagnostic_batch(self, seed: int = 0) -> Batch:
        """Fixed batch for Hessian and landscape probes (noiseless for synthetic objectives)."""
        if self.dataset is None:
            return self.objective.noiseless_batch()
        train = self.dataset.train
        rng = np.random.default_rng([seed, 3])
        idx = np.sort(rng.choice(train.n_samples, size=min(DIAGNOSTIC_BATCH, train.n_samples), replace=False))
        return Batch(train.inputs[idx], train.targets[idx], self.dataset.n_classes)


def _epoch_batches(
    obj: StochasticObjective, dataset: Optional[Dataset], config: ExperimentConfig, rng: np.random.Generator
) -> Iterator[Batch]:
    if dataset is not None:
        yield from dataset.epoch_batches(rng, config.batch_size)
        return
    for _ in range(config.steps_per_epoch):
        yield obj.sample_batch(rng, config.batch_size)


def _final_metrics(obj: StochasticObjective, w: ParamVector, dataset: Optional[Dataset]) -> dict[str, Any]:
    if dataset is None:
        return {"final_loss": true_loss(obj, w), "train_accuracy": None, "test_accuracy": None}
    train, test = dataset.train, dataset.test
    full = Batch(train.inputs, train.targets, dataset.n_classes)
    return {
        "final_loss": eval_loss(obj, w, full),
        "train_accuracy": obj.accuracy(w.values, train.inputs, train.targets),
        "test_accuracy": obj.accuracy(w.values, test.inputs, test.targets),
    }


def _persist(record: RunRecord, mask: Optional[SparseMask], output_dir: Optional[str]) -> None:
    if output_dir is None:
        return
    out = Path(output_dir)
    emit_record(record, out)
    if mask is not None:
        mask.save(out / "mask.bin")
        try:
            (out / "mask.json").write_text(mask.to_json() + "\n", encoding="utf-8")
        except OSError as exc:
            raise RecordIOError(f"Failed to write {out / 'mask.json'}: {exc}", path=str(out)) from exc


def run_training(config: ExperimentConfig) -> TrainingResult:
    """Train per ``config``; deterministic given the seed except for wall-clock columns."""
    dataset = build_dataset(config.objective, config.seed)
    objective = CountingObjective(build_objective(config.objective, dataset))
    opt = config.optimizer
    ssam = opt.kind == OptimizerKind.SSAM
    run_rng = np.random.default_rng([config.seed])
    w0 = objective.initial_weights(np.random.default_rng([config.seed, 1]))

    record = RunRecord(
        config=dump_config(config),
        metadata={
            "scale": "desk",
            "defaults": DEFAULT_CONFIG_PATH.name,
            "seed": config.seed,
            "family": str(config.objective.family),
            "dataset": dataset.source if dataset is not None else None,
            "n_parameters": objective.dimension,
        },
    )
    context: Optional[MaskContext] = None
    mask_ms = 0.0
    if ssam:
        context = MaskContext(
            objective=objective,
            w=w0,
            mask=SparseMask.ones(objective.dimension),
            total_epochs=max(1, config.epochs),
            seed=config.seed,
            train_inputs=dataset.train.inputs if dataset is not None else None,
            train_targets=dataset.train.targets if dataset is not None else None,
            n_classes=dataset.n_classes if dataset is not None else 1,
            threads=config.threads,
        )
        started = time.perf_counter()
        mask = initial_mask(config.mask, context)
        mask_ms += (time.perf_counter() - started) * 1000.0
    else:
        mask = SparseMask.ones(objective.dimension)
    state = init_state(w0, mask, seed=config.seed)
    sparsity = config.mask.sparsity if ssam else 0.0
    regenerated = ssam

    logger.info(
        f"Training {opt.kind} on {config.objective.family}: d={objective.dimension}, epochs={config.epochs}, seed={config.seed}"
    )
    degenerate_steps = 0
    try:
        for epoch in range(config.epochs):
            for batch in _epoch_batches(objective, dataset, config, run_rng):
                index = state.t - 1  # rows are 0-based; the schedules index from t = 1
                started = time.perf_counter()
                state = step(state, objective, batch, opt)
                info = state.info
                if info.degenerate:
                    if not degenerate_steps:
                        logger.warning(f"Degenerate gradient at step {index}; perturbation skipped (reported once per run)")
                    degenerate_steps += 1
                record.append(
                    StepRow(
                        step=index,
                        epoch=epoch,
                        loss=info.loss,
                        grad_norm_sq=info.grad_norm_sq,
                        rho_t=info.rho,
                        eta_t=info.eta,
                        sparsity=sparsity,
                        mask_regen=regenerated,
                        wall_ms=(time.perf_counter() - started) * 1000.0,
                    )
                )
                regenerated = False
            if context is not None and epoch + 1 < config.epochs:
                context.w, context.mask, context.last_grad = state.w, state.mask, state.last_grad
                started = time.perf_counter()
                fresh = maybe_regenerate(epoch + 1, config.mask, context)
                mask_ms += (time.perf_counter() - started) * 1000.0
                if fresh is not None:
                    state = replace(state, mask=fresh)
                    regenerated = True
        metrics = _final_metrics(objective.inner, state.w, dataset)
    except LabError as exc:
        logger.error(f"Run aborted after {len(record.rows)} steps: {exc}")
        record.status = STATUS_FAILED
        record.error = str(exc)
        record.metrics = {"gradient_evaluations": objective.gradient_evaluations, "degenerate_steps": degenerate_steps}
        _persist(record, state.mask if ssam else None, config.output_dir)
        raise

    record.metrics = {
        **metrics,
        "fisher_ms": context.fisher_ms if context is not None else 0.0,
        "mask_ms": mask_ms,
        "gradient_evaluations": objective.gradient_evaluations,
        "degenerate_steps": degenerate_steps,
    }
    record.status = STATUS_COMPLETED
    _persist(record, state.mask if ssam else None, config.output_dir)
    return TrainingResult(record, objective.inner, state.w, state.mask, dataset)


def train(config: ExperimentConfig) -> RunRecord:
    return run_training(config).record


def apply_cell(config: ExperimentConfig, cell: dict[str, Any], seed: int, output_dir: Optional[str]) -> ExperimentConfig:
    """Config of one ablation cell."""
    mask_changes: dict[str, Any] = {}
    opt_changes: dict[str, Any] = {}
    for axis, value in cell.items():
        if axis == "rho0":
            opt_changes["rho0"] = value
        elif axis == "strategy":
            mask_changes.update(_strategy(value))
        else:
            mask_changes[axis] = value
    return replace(
        config,
        optimizer=replace(config.optimizer, **opt_changes) if opt_changes else config.optimizer,
        mask=replace(config.mask, **mask_changes) if mask_changes else config.mask,
        ablation=None,
        seed=seed,
        output_dir=output_dir,
    )


def _strategy(label: str) -> dict[str, Any]:
    if label.startswith("dynamic-"):
        return {"kind": MaskKind.DYNAMIC, "drop_criterion": DropCriterion(label.removeprefix("dynamic-"))}
    if label == "fixed":
        # Fisher mask computed once at epoch 0 and never refreshed
        return {"kind": MaskKind.FIXED, "initial": InitialMask.FISHER}
    return {"kind": MaskKind(label)}


@dataclass
class AblationResult:
    axes: dict[str, tuple]
    rows: list[dict[str, Any]] = field(default_factory=list)
    records: list[Optional[RunRecord]] = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        return ["cell", *self.axes, "seed", "status", "final_loss", "train_accuracy", "test_accuracy", "fisher_ms", "mask_ms", "error"]


def write_summary(result: AblationResult, path: Path) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=result.columns, lineterminator="\n")
            writer.writeheader()
            for row in result.rows:
                writer.writerow({k: ("" if row.get(k) is None else row[k]) for k in result.columns})
    except OSError as exc:
        raise RecordIOError(f"Failed to write ablation summary {path}: {exc}", path=str(path)) from exc


def run_ablation(config: ExperimentConfig) -> AblationResult:
    """Run every cell of the Cartesian grid; failed cells are recorded and skipped."""
    if config.ablation is None:
        raise LabError("Config has no ablation grid")
    axes = config.ablation.axes
    cells = [dict(zip(axes, values)) for values in itertools.product(*axes.values())]
    parallel = config.threads > 1 and len(cells) > 1
    logger.info(f"Ablation over {', '.join(axes)}: {len(cells)} cells")

    def run_cell(index: int) -> tuple[dict[str, Any], Optional[RunRecord]]:
        cell = cells[index]
        seed = config.seed + index
        row: dict[str, Any] = {"cell": index, **cell, "seed": seed}
        cell_dir = str(Path(config.output_dir) / f"cell-{index:03d}") if config.output_dir else None
        try:
            cell_config = apply_cell(config, cell, seed, cell_dir)
            if parallel:
                cell_config = replace(cell_config, threads=1)
            result = run_training(cell_config)
        except LabError as exc:
            logger.exception(f"Ablation cell {index} {cell} failed")
            row.update(status=STATUS_FAILED, error=str(exc))
            return row, None
        record = result.record
        row.update(
            status=record.status,
            final_loss=record.metrics.get("final_loss"),
            train_accuracy=record.metrics.get("train_accuracy"),
            test_accuracy=record.metrics.get("test_accuracy"),
            fisher_ms=record.metrics.get("fisher_ms"),
            mask_ms=record.metrics.get("mask_ms"),
            error=None,
        )
        return row, record

    if parallel:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            outcomes = list(pool.map(run_cell, range(len(cells))))
    else:
        outcomes = [run_cell(i) for i in range(len(cells))]

    result = AblationResult(axes=axes, rows=[o[0] for o in outcomes], records=[o[1] for o in outcomes])
    failed = sum(1 for r in result.rows if r["status"] == STATUS_FAILED)
    if failed:
        logger.warning(f"{failed} of {len(cells)} ablation cells failed")
    if config.output_dir:
        write_summary(result, Path(config.output_dir) / SUMMARY_FILE)
    return result

"""Run records: per-step CSV rows plus a JSON sidecar with config and final metrics."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from loguru import logger

from .errors import ConfigurationError, RecordIOError

ROW_COLUMNS = ("step", "epoch", "loss", "grad_norm_sq", "rho_t", "eta_t", "sparsity", "mask_regen", "wall_ms")
STEPS_FILE = "steps.csv"
SIDECAR_FILE = "record.json"
STATUS_COMPLETED = "completed"
STATUS_FAILED = "failed"


@dataclass(frozen=True)
class StepRow:
    step: int
    epoch: int
    loss: float
    grad_norm_sq: float
    rho_t: float
    eta_t: float
    sparsity: float
    mask_regen: bool
    wall_ms: float

    def to_csv(self) -> list[str]:
        return [
            str(self.step),
            str(self.epoch),
            repr(float(self.loss)),
            repr(float(self.grad_norm_sq)),
            repr(float(self.rho_t)),
            repr(float(self.eta_t)),
            repr(float(self.sparsity)),
            "1" if self.mask_regen else "0",
            repr(float(self.wall_ms)),
        ]

    @classmethod
    def from_csv(cls, row: dict[str, str]) -> StepRow:
        return cls(
            step=int(row["step"]),
            epoch=int(row["epoch"]),
            loss=float(row["loss"]),
            grad_norm_sq=float(row["grad_norm_sq"]),
            rho_t=float(row["rho_t"]),
            eta_t=float(row["eta_t"]),
            sparsity=float(row["sparsity"]),
            mask_regen=row["mask_regen"] == "1",
            wall_ms=float(row["wall_ms"]),
        )


@dataclass
class RunRecord:
    """Config snapshot, ordered step rows and final metrics of one training run."""

    config: dict[str, Any]
    rows: list[StepRow] = field(default_factory=list)
    metrics: dict[str, Any] = field(default_factory=dict)
    metadata: dict[str, Any] = field(default_factory=dict)
    status: str = STATUS_COMPLETED
    error: Optional[str] = None

    def __post_init__(self):
        steps = [r.step for r in self.rows]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ConfigurationError("Record rows must be strictly ordered by step", field="rows")

    def append(self, row: StepRow) -> None:
        if self.rows and row.step <= self.rows[-1].step:
            raise ConfigurationError(f"Step {row.step} after step {self.rows[-1].step}", field="rows")
        self.rows.append(row)

    def sidecar(self) -> dict[str, Any]:
        return {
            "config": self.config,
            "metrics": self.metrics,
            "metadata": self.metadata,
            "status": self.status,
            "error": self.error,
            "n_steps": len(self.rows),
        }


def write_rows(rows: list[StepRow], path: Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ROW_COLUMNS)
        for row in rows:
            writer.writerow(row.to_csv())


def emit_record(record: RunRecord, directory: Path) -> Path:
    """Write steps.csv and record.json into ``directory``; returns the sidecar path."""
    directory = Path(directory)
    sidecar = directory / SIDECAR_FILE
    try:
        directory.mkdir(parents=True, exist_ok=True)
        write_rows(record.rows, directory / STEPS_FILE)
        sidecar.write_text(json.dumps(record.sidecar(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise RecordIOError(f"Failed to write run record to {directory}: {exc}", path=str(directory)) from exc
    logger.bind(path=str(directory), status=record.status).info(f"Wrote {len(record.rows)} rows to {directory}")
    return sidecar


def read_record(path: Path) -> RunRecord:
    """Inverse of emit_record; ``path`` is the run directory or its record.json."""
    path = Path(path)
    directory = path if path.is_dir() else path.parent
    sidecar = directory / SIDECAR_FILE
    steps = directory / STEPS_FILE
    try:
        data = json.loads(sidecar.read_text(encoding="utf-8"))
        with steps.open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != ROW_COLUMNS:
                raise RecordIOError(f"{steps}: unexpected columns {reader.fieldnames}", path=str(steps))
            rows = [StepRow.from_csv(r) for r in reader]
        config = data["config"]
    except OSError as exc:
        raise RecordIOError(f"Failed to read run record from {directory}: {exc}", path=str(directory)) from exc
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise RecordIOError(f"Corrupt run record in {directory}: {exc}", path=str(directory)) from exc
    return RunRecord(
        config=config,
        rows=rows,
        metrics=data.get("metrics", {}),
        metadata=data.get("metadata", {}),
        status=data.get("status", STATUS_COMPLETED),
        error=data.get("error"),
    )

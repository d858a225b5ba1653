"""Experiment configuration: JSON/TOML files merged over packaged defaults."""
from __future__ import annotations

import json
import os
import tomllib
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Optional

from loguru import logger

from .errors import ConfigurationError
from .masks import InitialMask, MaskKind, MaskPolicy
from .numcore import Family, SYNTHETIC_FAMILIES
from .optim import OptimizerConfig, OptimizerKind

DEFAULT_CONFIG_PATH = Path(__file__).with_name("defaults.toml")
DATASET_FORMATS = ("blobs", "csv", "idx")
ABLATION_AXES = ("sparsity", "rho0", "n_fisher_samples", "update_interval", "strategy")
STRATEGIES = ("fisher", "random", "dynamic-flattest", "dynamic-sharpest", "dynamic-random", "fixed")


def _tuple(value) -> tuple:
    return tuple(value) if isinstance(value, (list, tuple)) else value


@dataclass(frozen=True)
class ObjectiveSpec:
    """Which objective to train and, for the classifier, where its data comes from."""
    family: Family = Family.MLP_CLASSIFIER
    dimension: int = 10
    curvature: Optional[tuple[float, ...]] = None  # quadratic eigenvalues; default linspace(1/d, 1, d)
    sigma: float = 0.1
    radius: float = 10.0
    beta: float = 0.5
    omega: float = 2.0
    dataset: Optional[str] = None
    labels: Optional[str] = None  # IDX label file
    dataset_format: str = "blobs"
    n_features: int = 20
    n_hidden: int = 16
    n_classes: int = 2
    n_samples: int = 500
    separation: float = 1.5
    test_fraction: float = 0.2

    def __post_init__(self):
        try:
            object.__setattr__(self, "family", Family(self.family))
        except ValueError:
            choices = ", ".join(f.value for f in Family)
            raise ConfigurationError(f"Unknown family '{self.family}'; expected one of: {choices}", field="family") from None
        object.__setattr__(self, "curvature", _tuple(self.curvature))
        if self.dataset_format not in DATASET_FORMATS:
            raise ConfigurationError(
                f"Unknown dataset_format '{self.dataset_format}'; expected one of: {', '.join(DATASET_FORMATS)}",
                field="dataset_format",
            )
        if self.dataset_format != "blobs" and self.dataset is None and self.family == Family.MLP_CLASSIFIER:
            raise ConfigurationError(f"dataset_format '{self.dataset_format}' needs a dataset path", field="dataset")
        if self.dataset_format == "idx" and self.dataset is not None and self.labels is None:
            raise ConfigurationError("IDX datasets need a labels path", field="labels")
        for name in ("dimension", "n_features", "n_hidden", "n_samples"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}", field=name)
        if self.n_classes < 2:
            raise ConfigurationError(f"n_classes must be >= 2, got {self.n_classes}", field="n_classes")
        if self.sigma < 0:
            raise ConfigurationError(f"sigma must be >= 0, got {self.sigma}", field="sigma")
        if not self.radius > 0:
            raise ConfigurationError(f"radius must be > 0, got {self.radius}", field="radius")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigurationError(f"test_fraction must lie in (0, 1), got {self.test_fraction}", field="test_fraction")
        if self.curvature is not None and len(self.curvature) != self.dimension:
            raise ConfigurationError(
                f"curvature has {len(self.curvature)} entries, dimension is {self.dimension}", field="curvature"
            )

    @property
    def is_synthetic(self) -> bool:
        return self.family in SYNTHETIC_FAMILIES


@dataclass(frozen=True)
class DiagnosticsSpec:
    rho: float = 0.05
    lanczos_k: int = 5
    lanczos_iters: int = 20
    resolution: int = 51
    span: float = 1.0
    forward_fraction: float = 0.3
    sparsities: tuple[float, ...] = (0.5, 0.8, 0.9, 0.95, 0.98, 0.99)

    def __post_init__(self):
        object.__setattr__(self, "sparsities", _tuple(self.sparsities))
        if not 1 <= self.lanczos_k <= self.lanczos_iters:
            raise ConfigurationError(
                f"Need 1 <= lanczos_k <= lanczos_iters, got {self.lanczos_k}, {self.lanczos_iters}", field="lanczos_k"
            )
        if self.resolution < 2:
            raise ConfigurationError(f"resolution must be >= 2, got {self.resolution}", field="resolution")
        if self.rho < 0:
            raise ConfigurationError(f"rho must be >= 0, got {self.rho}", field="rho")


@dataclass(frozen=True)
class TheorySpec:
    rhos: tuple[float, ...] = (0.01, 0.05, 0.1)
    eta: float = 0.5
    eta0: float = 0.5
    rho0: float = 0.05
    n_points: int = 1000
    mc_reps: int = 10_000
    n_states: int = 1000
    horizon: int = 10_000
    repeats: int = 20
    sparsity: float = 0.5
    steps_per_epoch: int = 100

    def __post_init__(self):
        object.__setattr__(self, "rhos", _tuple(self.rhos))
        if not self.rhos or any(r <= 0 for r in self.rhos):
            raise ConfigurationError("rhos must be a nonempty list of positive values", field="rhos")
        for name in ("n_points", "mc_reps", "n_states", "repeats", "steps_per_epoch"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}", field=name)
        if self.horizon < 2:
            raise ConfigurationError(f"horizon must be >= 2, got {self.horizon}", field="horizon")


@dataclass(frozen=True)
class AblationSpec:
    """Grid axes; the Cartesian product of the nonempty ones is executed."""

    sparsity: tuple[float, ...] = ()
    rho0: tuple[float, ...] = ()
    n_fisher_samples: tuple[int, ...] = ()
    update_interval: tuple[int, ...] = ()
    strategy: tuple[str, ...] = ()

    def __post_init__(self):
        for name in ABLATION_AXES:
            value = getattr(self, name)
            if not isinstance(value, (list, tuple)):
                raise ConfigurationError(f"Ablation axis {name} must be a list", field=name)
            object.__setattr__(self, name, tuple(value))
        unknown = [s for s in self.strategy if s not in STRATEGIES]
        if unknown:
            raise ConfigurationError(
                f"Unknown strategy {unknown[0]!r}; expected one of: {', '.join(STRATEGIES)}", field="strategy"
            )
        if not self.axes:
            raise ConfigurationError("Ablation grid has no nonempty axis", field="ablation")

    @property
    def axes(self) -> dict[str, tuple]:
        return {name: getattr(self, name) for name in ABLATION_AXES if getattr(self, name)}


@dataclass(frozen=True)
class ExperimentConfig:
    objective: ObjectiveSpec = field(default_factory=ObjectiveSpec)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    mask: MaskPolicy = field(default_factory=MaskPolicy)
    diagnostics: DiagnosticsSpec = field(default_factory=DiagnosticsSpec)
    theory: TheorySpec = field(default_factory=TheorySpec)
    ablation: Optional[AblationSpec] = None
    epochs: int = 10
    batch_size: int = 32
    steps_per_epoch: int = 20
    seed: int = 0
    threads: int = 1
    output_dir: Optional[str] = None
    log_level: str = "INFO"

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}", field="epochs")
        for name in ("batch_size", "steps_per_epoch", "threads"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}", field=name)
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigurationError(f"seed must be an integer, got {self.seed!r}", field="seed")
        if self.optimizer.kind == OptimizerKind.SSAM and self.objective.is_synthetic:
            # synthetic families carry no labelled samples to estimate a Fisher from
            if self.mask.kind == MaskKind.FISHER:
                raise ConfigurationError(
                    f"mask.kind 'fisher' needs a labelled dataset; {self.objective.family} has none "
                    "(use random, dynamic or fixed with a random start)",
                    field="mask.kind",
                )
            if self.mask.initial == InitialMask.FISHER:
                raise ConfigurationError(
                    f"mask.initial 'fisher' needs a labelled dataset; {self.objective.family} has none",
                    field="mask.initial",
                )

    def with_overrides(
        self, seed: Optional[int] = None, threads: Optional[int] = None, output_dir: Optional[str] = None
    ) -> ExperimentConfig:
        """CLI flags win over file values and environment."""
        changes: dict[str, Any] = {}
        if seed is not None:
            changes["seed"] = seed
        if threads is not None:
            changes["threads"] = threads
        if output_dir is not None:
            changes["output_dir"] = str(output_dir)
        return replace(self, **changes) if changes else self


_SECTIONS = {
    "objective": ObjectiveSpec,
    "optimizer": OptimizerConfig,
    "mask": MaskPolicy,
    "diagnostics": DiagnosticsSpec,
    "theory": TheorySpec,
    "ablation": AblationSpec,
}


def _parse(path: Path) -> dict:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"Cannot read config {path}: {exc}", field="path") from exc
    if path.suffix == ".toml":
        try:
            return tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid TOML: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be an object")
    return data


def load_defaults(path: Path = DEFAULT_CONFIG_PATH) -> dict:
    with path.open("rb") as f:
        return tomllib.load(f)


def _merge(defaults: Mapping, overrides: Mapping) -> dict:
    merged = dict(defaults)
    for key, value in overrides.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _build_section(name: str, cls, data: Any):
    if not isinstance(data, Mapping):
        raise ConfigurationError(f"Section '{name}' must be an object", field=name)
    allowed = {f.name for f in fields(cls)}
    for key in data:
        if key not in allowed:
            raise ConfigurationError(f"Unknown key '{name}.{key}'", field=key)
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigurationError(f"Invalid value in section '{name}': {exc}", field=name) from exc


def config_from_dict(data: Mapping) -> ExperimentConfig:
    """Validate a fully merged mapping; unknown keys are rejected."""
    allowed = {f.name for f in fields(ExperimentConfig)}
    for key in data:
        if key not in allowed:
            raise ConfigurationError(f"Unknown key '{key}'", field=key)
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            kwargs[key] = None if value is None else _build_section(key, _SECTIONS[key], value)
        else:
            kwargs[key] = value
    try:
        return ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"Invalid top-level value: {exc}") from exc


def _resolve_paths(cfg: ExperimentConfig, base: Path) -> ExperimentConfig:
    spec = cfg.objective
    changes = {}
    for name in ("dataset", "labels"):
        value = getattr(spec, name)
        if value is None:
            continue
        resolved = Path(value) if Path(value).is_absolute() else (base / value)
        if not resolved.exists():
            raise ConfigurationError(f"{name} path does not exist: {resolved}", field=name)
        changes[name] = str(resolved)
    return replace(cfg, objective=replace(spec, **changes)) if changes else cfg


def apply_env(cfg: ExperimentConfig, environ: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    """SSAM_LAB_THREADS / SSAM_LAB_OUTPUT_DIR / SSAM_LAB_LOG_LEVEL override file values."""
    environ = os.environ if environ is None else environ
    changes: dict[str, Any] = {}
    if threads := environ.get("SSAM_LAB_THREADS"):
        try:
            changes["threads"] = int(threads)
        except ValueError:
            raise ConfigurationError(f"SSAM_LAB_THREADS must be an integer, got {threads!r}", field="threads") from None
    if output_dir := environ.get("SSAM_LAB_OUTPUT_DIR"):
        changes["output_dir"] = output_dir
    if level := environ.get("SSAM_LAB_LOG_LEVEL"):
        changes["log_level"] = level.upper()
    if changes:
        logger.debug(f"Environment overrides: {sorted(changes)}")
    return replace(cfg, **changes) if changes else cfg


def load_config(path: Path, environ: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    """Load a JSON (or .toml) experiment file over the packaged defaults."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Config file not found: {path}", field="path")
    cfg = config_from_dict(_merge(load_defaults(), _parse(path)))
    if cfg.optimizer.kind != OptimizerKind.SGD and cfg.optimizer.rho0 == 0:
        logger.warning(f"{cfg.optimizer.kind} configured with rho0 = 0; the perturbation step is a no-op")
    cfg = _resolve_paths(cfg, path.parent)
    return apply_env(cfg, environ)


def _plain(value):
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def dump_config(cfg: ExperimentConfig) -> dict:
    """JSON-ready dict; config_from_dict(dump_config(c)) == c."""
    return _plain(asdict(cfg))


def save_config(cfg: ExperimentConfig, path: Path) -> None:
    Path(path).write_text(json.dumps(dump_config(cfg), indent=2, sort_keys=True) + "\n", encoding="utf-8")

"""Optimizer kernels: SGD, SAM's two-step update and SSAM's masked perturbation.

All kernels are pure: they take an OptimizerState and return the next one.
Both SAM gradient evaluations use the same minibatch; SSAM normalises by the
full first-step gradient norm and only then applies the mask.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import StrEnum
from typing import TYPE_CHECKING, Optional

from loguru import logger

from .errors import ConfigurationError, InvalidArgumentError, PreconditionError
from .numcore import Batch, ParamVector, StochasticObjective, grad, value_and_grad

if TYPE_CHECKING:
    from .masks import SparseMask

DEGENERATE_GRAD_NORM = 1e-12


class OptimizerKind(StrEnum):
    SGD = "sgd"
    SAM = "sam"
    SSAM = "ssam"


class ScheduleRule(StrEnum):
    CONSTANT = "constant"
    INVERSE_SQRT = "inverse-sqrt"


@dataclass(frozen=True)
class Schedule:
    base: float
    rule: ScheduleRule = ScheduleRule.CONSTANT

    def value_at(self, t: int) -> float:
        return schedule_at(self, t)


def schedule_at(s: Schedule, t: int) -> float:
    """Value of the schedule at step t (1-based)."""
    if t < 1:
        raise InvalidArgumentError(f"Schedules are defined for t >= 1, got t={t}")
    if s.rule == ScheduleRule.INVERSE_SQRT:
        return s.base / math.sqrt(t)
    return s.base


@dataclass(frozen=True)
class OptimizerConfig:
    """Hyperparameters of one optimizer run."""

    kind: OptimizerKind = OptimizerKind.SGD
    eta0: float = 0.05
    rho0: float = 0.0
    schedule: ScheduleRule = ScheduleRule.CONSTANT
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", _enum(OptimizerKind, self.kind, "kind"))
        object.__setattr__(self, "schedule", _enum(ScheduleRule, self.schedule, "schedule"))
        if not self.eta0 > 0:
            raise ConfigurationError(f"eta0 must be positive, got {self.eta0}", field="eta0")
        if self.rho0 < 0:
            raise ConfigurationError(f"rho0 must be non-negative, got {self.rho0}", field="rho0")
        if self.kind == OptimizerKind.SGD and self.rho0 != 0:
            raise ConfigurationError("rho0 must be 0 for sgd", field="rho0")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}", field="momentum")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight_decay must be non-negative, got {self.weight_decay}", field="weight_decay")

    @property
    def eta_schedule(self) -> Schedule:
        return Schedule(self.eta0, self.schedule)

    @property
    def rho_schedule(self) -> Schedule:
        return Schedule(self.rho0, self.schedule)

    def check_theory_constraint(self, G: float) -> None:
        """Assert rho0 <= G*eta0 (SAM) or rho0 <= G*eta0/2 (SSAM)."""
        if self.kind == OptimizerKind.SGD:
            return
        limit = G * self.eta0 if self.kind == OptimizerKind.SAM else G * self.eta0 / 2
        if self.rho0 > limit:
            raise PreconditionError(f"rho0 = {self.rho0} exceeds {limit:.6g} required for {self.kind} convergence bound")


def _enum(cls, value, field: str):
    try:
        return cls(value)
    except ValueError:
        choices = ", ".join(m.value for m in cls)
        raise ConfigurationError(f"Unknown {field} '{value}'; expected one of: {choices}", field=field) from None


@dataclass(frozen=True)
class StepInfo:
    """What happened during one optimizer step."""
    loss: float
    grad_norm_sq: float
    eta: float
    rho: float
    degenerate: bool = False
    e_norm_sq: float = 0.0
    gradient_evaluations: int = 1


@dataclass(frozen=True, eq=False)
class OptimizerState:
    """Iteration counter, weights, active mask and momentum buffer.

    ``t`` is the index of the NEXT step; schedules are evaluated at it.
    ``last_grad`` holds the most recent first-step gradient (read by the
    dynamic mask update).
    """

    t: int
    w: ParamVector
    mask: SparseMask
    velocity: ParamVector
    rng_seed: int = 0
    last_grad: Optional[ParamVector] = None
    info: Optional[StepInfo] = None

    def __post_init__(self):
        if self.t < 1:
            raise ConfigurationError(f"Step counter must be >= 1, got {self.t}", field="t")
        if self.mask.d != self.w.size:
            raise ConfigurationError(f"Mask length {self.mask.d} != weight length {self.w.size}", field="mask")


def init_state(w: ParamVector, mask: Optional[SparseMask] = None, seed: int = 0) -> OptimizerState:
    from .masks import SparseMask

    return OptimizerState(
        t=1,
        w=w,
        mask=mask if mask is not None else SparseMask.ones(w.size),
        velocity=ParamVector.zeros(w.partition),
        rng_seed=seed,
    )


def compute_perturbation(g: ParamVector, rho: float) -> ParamVector:
    """rho * g / ||g||; the zero vector when ||g|| is below 1e-12."""
    if rho < 0:
        raise InvalidArgumentError(f"rho must be non-negative, got {rho}")
    norm = g.norm()
    if norm < DEGENERATE_GRAD_NORM:
        logger.debug(f"Degenerate gradient (norm {norm:.3g}); skipping perturbation")
        return g * 0.0
    return g * (rho / norm)


def _descend(state: OptimizerState, g: ParamVector, eta: float, config: OptimizerConfig) -> tuple[ParamVector, ParamVector]:
    direction = g + state.w * config.weight_decay if config.weight_decay else g
    velocity = state.velocity * config.momentum + direction if config.momentum else direction
    return state.w - velocity * eta, velocity


def _require(config: OptimizerConfig, kind: OptimizerKind) -> None:
    if config.kind != kind:
        raise ConfigurationError(f"{kind}_step called with a {config.kind} config", field="kind")


def sgd_step(state: OptimizerState, obj: StochasticObjective, batch: Batch, config: OptimizerConfig) -> OptimizerState:
    _require(config, OptimizerKind.SGD)
    eta = schedule_at(config.eta_schedule, state.t)
    loss, g = value_and_grad(obj, state.w, batch)
    w, velocity = _descend(state, g, eta, config)
    info = StepInfo(loss=loss, grad_norm_sq=g.dot(g), eta=eta, rho=0.0)
    return replace(state, t=state.t + 1, w=w, velocity=velocity, last_grad=g, info=info)


def _perturbed_step(
    state: OptimizerState,
    obj: StochasticObjective,
    batch: Batch,
    config: OptimizerConfig,
    masked: bool,
) -> OptimizerState:
    eta = schedule_at(config.eta_schedule, state.t)
    rho = schedule_at(config.rho_schedule, state.t)
    loss, g1 = value_and_grad(obj, state.w, batch)
    degenerate = g1.norm() < DEGENERATE_GRAD_NORM
    eps = compute_perturbation(g1, rho)
    e_norm_sq = 0.0
    if masked:
        masked_eps = eps * state.mask.as_array()
        e_norm_sq = (eps - masked_eps).dot(eps - masked_eps)
        eps = masked_eps
    g2 = grad(obj, state.w + eps, batch)
    w, velocity = _descend(state, g2, eta, config)
    info = StepInfo(
        loss=loss,
        grad_norm_sq=g1.dot(g1),
        eta=eta,
        rho=rho,
        degenerate=degenerate,
        e_norm_sq=e_norm_sq,
        gradient_evaluations=2,
    )
    return replace(state, t=state.t + 1, w=w, velocity=velocity, last_grad=g1, info=info)


def sam_step(state: OptimizerState, obj: StochasticObjective, batch: Batch, config: OptimizerConfig) -> OptimizerState:
    _require(config, OptimizerKind.SAM)
    return _perturbed_step(state, obj, batch, config, masked=False)


def ssam_step(state: OptimizerState, obj: StochasticObjective, batch: Batch, config: OptimizerConfig) -> OptimizerState:
    _require(config, OptimizerKind.SSAM)
    return _perturbed_step(state, obj, batch, config, masked=True)


_KERNELS = {
    OptimizerKind.SGD: sgd_step,
    OptimizerKind.SAM: sam_step,
    OptimizerKind.SSAM: ssam_step,
}


def step(state: OptimizerState, obj: StochasticObjective, batch: Batch, config: OptimizerConfig) -> OptimizerState:
    return _KERNELS[config.kind](state, obj, batch, config)

"""Numerical checks of the convergence analysis for SAM and SSAM.

Every check works on a synthetic objective with exactly known constants:
L (smoothness), G (gradient bound on the ball of radius R) and sigma (oracle
noise). Deterministic checks use true gradients; checks stated in expectation
use Monte-Carlo means and pass when no margin falls below -3 standard errors.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Literal, Optional

import numpy as np
from loguru import logger

from .errors import ConfigurationError, DomainViolationError, InvalidArgumentError, PreconditionError, UnsupportedOperationError
from .masks import MaskContext, MaskKind, MaskPolicy, initial_mask, maybe_regenerate, random_mask
from .numcore import ParamVector, SyntheticObjective, StochasticObjective, true_grad, true_loss
from .optim import OptimizerConfig, OptimizerKind, ScheduleRule, init_state, step

SIGMA_LEVEL = 3.0
ROUNDOFF = 1e-9
VARIANCE_TOLERANCE = 0.10


@dataclass(frozen=True)
class AssumptionConstants:
    L: float
    G: float
    sigma: float
    radius: float

    def __post_init__(self):
        if not self.L > 0:
            raise ConfigurationError(f"L must be positive, got {self.L}", field="L")
        if not self.radius > 0:
            raise ConfigurationError(f"radius must be positive, got {self.radius}", field="radius")
        if self.G < 0 or self.sigma < 0:
            raise ConfigurationError("G and sigma must be non-negative", field="G")

    @classmethod
    def from_objective(cls, obj: StochasticObjective, radius: Optional[float] = None) -> AssumptionConstants:
        synthetic = _synthetic(obj)
        radius = synthetic.radius if radius is None else radius
        known = synthetic.constants_on_ball(radius)
        return cls(L=known.L, G=known.G, sigma=known.sigma, radius=radius)

    def as_dict(self) -> dict[str, float]:
        return {"L": self.L, "G": self.G, "sigma": self.sigma, "radius": self.radius}


@dataclass(frozen=True)
class BoundReport:
    """Outcome of one inequality check with its full instantiation."""

    check: str
    trials: int
    violations: int
    worst_margin: float
    mc_stderr: Optional[float] = None
    constants: dict[str, float] = field(default_factory=dict)
    extra: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.violations <= self.trials:
            raise ConfigurationError(f"violations {self.violations} outside [0, {self.trials}]", field="violations")

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def to_dict(self) -> dict:
        return {
            "check": self.check,
            "trials": self.trials,
            "violations": self.violations,
            "worst_margin": self.worst_margin,
            "mc_stderr": self.mc_stderr,
            "passed": self.passed,
            "constants": dict(self.constants),
            "extra": dict(self.extra),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _synthetic(obj: StochasticObjective) -> SyntheticObjective:
    if not isinstance(obj, SyntheticObjective) or obj.known_constants is None:
        raise UnsupportedOperationError(f"Theory checks need an objective with known constants, got {obj.family}")
    return obj


def _ball_points(rng: np.random.Generator, n: int, d: int, radius: float) -> np.ndarray:
    directions = rng.standard_normal((n, d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return directions * (radius * rng.uniform(size=(n, 1)) ** (1.0 / d))


def _noise_draws(obj: SyntheticObjective, rng: np.random.Generator, n: int) -> np.ndarray:
    # same distribution as the gradient noise of a one-row sample_batch
    return obj.noise_scale * rng.standard_normal((n, obj.dimension))


def _unit_rows(V: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(V, axis=1, keepdims=True)
    out = np.zeros_like(V)
    np.divide(V, norms, out=out, where=norms >= 1e-12)
    return out


def _deterministic_report(check: str, margins: np.ndarray, scale: np.ndarray, constants: AssumptionConstants, **extra) -> BoundReport:
    violations = int(np.sum(margins < -ROUNDOFF * (1.0 + scale)))
    worst = float(margins.min()) if margins.size else math.inf
    return BoundReport(check, int(margins.size), violations, worst, None, constants.as_dict(), dict(extra))


def verify_assumptions(
    obj: StochasticObjective, constants: AssumptionConstants, n_points: int = 1000, mc_reps: int = 10_000, seed: int = 0
) -> list[BoundReport]:
    """Witnesses for bounded gradient, bounded variance and L-smoothness on the ball."""
    synthetic = _synthetic(obj)
    rng = np.random.default_rng(seed)
    d = synthetic.dimension

    W = _ball_points(rng, n_points, d, constants.radius)
    grad_norms = np.linalg.norm(synthetic.grad_rows(W), axis=1)
    bounded = _deterministic_report("bounded_gradient", constants.G - grad_norms, grad_norms, constants)

    noise = _noise_draws(synthetic, rng, mc_reps)
    sq = np.sum(noise * noise, axis=1)
    mean_sq = float(sq.mean())
    target = constants.sigma ** 2
    margin = VARIANCE_TOLERANCE * target - abs(mean_sq - target)
    variance = BoundReport(
        "bounded_variance",
        1,
        int(margin < -ROUNDOFF),
        margin,
        float(sq.std(ddof=1) / math.sqrt(mc_reps)) if mc_reps > 1 else None,
        constants.as_dict(),
        {"mean_squared_deviation": mean_sq},
    )

    V = _ball_points(rng, n_points, d, constants.radius)
    diff = np.linalg.norm(synthetic.grad_rows(W) - synthetic.grad_rows(V), axis=1)
    allowed = constants.L * np.linalg.norm(W - V, axis=1)
    smooth = _deterministic_report("smoothness", allowed - diff, allowed, constants)
    return [bounded, variance, smooth]


def verify_lemma1(
    obj: StochasticObjective, constants: AssumptionConstants, rho: float, n_points: int = 1000, seed: int = 0
) -> BoundReport:
    """<grad f(w), grad f(w + rho grad f / ||grad f||)> >= ||grad f||^2 - rho L G."""
    synthetic = _synthetic(obj)
    if not rho > 0:
        raise InvalidArgumentError(f"rho must be positive, got {rho}")
    rng = np.random.default_rng(seed)
    W = _ball_points(rng, n_points, synthetic.dimension, constants.radius)
    Gw = synthetic.grad_rows(W)
    norms = np.linalg.norm(Gw, axis=1)
    keep = norms > 1e-8
    W, Gw, norms = W[keep], Gw[keep], norms[keep]
    Gp = synthetic.grad_rows(W + rho * Gw / norms[:, None])
    lhs = np.einsum("ij,ij->i", Gw, Gp)
    rhs = norms ** 2 - rho * constants.L * constants.G
    return _deterministic_report("lemma1", lhs - rhs, np.abs(rhs), constants, rho=rho)


def _mc_summary(samples: np.ndarray) -> tuple[float, float]:
    n = samples.shape[0]
    stderr = float(samples.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return float(samples.mean()), stderr


def verify_lemma2(
    obj: StochasticObjective,
    constants: AssumptionConstants,
    rho: float,
    n_points: int = 100,
    mc_reps: int = 10_000,
    seed: int = 0,
) -> BoundReport:
    """E<grad f(w), g(w + rho g / ||g||)> >= 1/2 ||grad f||^2 - L^2 rho^2 - L rho G.

    Both oracle calls share one noise draw, as the two SAM gradients share a batch.
    """
    synthetic = _synthetic(obj)
    if not rho > 0:
        raise InvalidArgumentError(f"rho must be positive, got {rho}")
    rng = np.random.default_rng(seed)
    L, G = constants.L, constants.G
    W = _ball_points(rng, n_points, synthetic.dimension, constants.radius)
    margins, stderrs = [], []
    for w in W:
        gf = synthetic.grad_rows(w[None, :])[0]
        noise = _noise_draws(synthetic, rng, mc_reps)
        g1 = gf + noise
        g2 = synthetic.grad_rows(w + rho * _unit_rows(g1)) + noise
        mean, stderr = _mc_summary(g2 @ gf)
        margins.append(mean - (0.5 * gf @ gf - L ** 2 * rho ** 2 - L * rho * G))
        stderrs.append(stderr)
    return _mc_report("lemma2", np.array(margins), np.array(stderrs), constants, rho=rho)


def _mc_report(check: str, margins: np.ndarray, stderrs: np.ndarray, constants: AssumptionConstants, **extra) -> BoundReport:
    tolerance = SIGMA_LEVEL * stderrs + ROUNDOFF
    violations = int(np.sum(margins < -tolerance))
    worst = int(np.argmin(margins)) if margins.size else 0
    return BoundReport(
        check,
        int(margins.size),
        violations,
        float(margins[worst]) if margins.size else math.inf,
        float(stderrs[worst]) if margins.size else None,
        constants.as_dict(),
        dict(extra),
    )


def descent_rhs(
    f: float, grad_sq: float, e_sq: float, eta: float, rho: float, constants: AssumptionConstants, kind: OptimizerKind, rho_sq_coefficient: int
) -> float:
    """Right-hand side of the one-step descent inequality.

    ``rho_sq_coefficient`` is 1 for the SAM lemma as stated and 2 for the SSAM one.
    """
    L, G, sigma = constants.L, constants.G, constants.sigma
    rhs = (
        f
        - eta / 2 * grad_sq
        + L * eta ** 2 * sigma ** 2
        + rho_sq_coefficient * eta * L ** 2 * rho ** 2
        + (1 - L * eta) * eta * L * G * rho
    )
    if kind == OptimizerKind.SSAM:
        rhs += (1 + L * eta) * eta * L ** 2 * e_sq
    return rhs


def verify_descent(
    obj: StochasticObjective,
    constants: AssumptionConstants,
    eta: float,
    rho: float,
    kind: OptimizerKind | str,
    mc_reps: int = 10_000,
    seed: int = 0,
    n_states: int = 1000,
    sparsity: float = 0.5,
) -> BoundReport:
    """Monte-Carlo check of E f(w_{t+1}) against the SAM / SSAM one-step bound.

    The report's worst margin uses the lemma's stated rho^2 coefficient (1 for
    SAM, 2 for SSAM); ``extra["alt_worst_margin"]`` uses the other one.
    """
    synthetic = _synthetic(obj)
    kind = OptimizerKind(kind)
    if kind == OptimizerKind.SGD:
        raise ConfigurationError("Descent checks are defined for sam and ssam", field="kind")
    if eta > 1.0 / constants.L:
        raise PreconditionError(f"eta = {eta} exceeds 1/L = {1.0 / constants.L:.6g}")
    if rho < 0:
        raise InvalidArgumentError(f"rho must be non-negative, got {rho}")
    stated = 2 if kind == OptimizerKind.SSAM else 1
    other = 1 if stated == 2 else 2
    rng = np.random.default_rng(seed)
    d = synthetic.dimension
    margins, alt_margins, stderrs = [], [], []
    max_e_sq = 0.0
    for w in _ball_points(rng, n_states, d, constants.radius):
        f = float(synthetic.f_rows(w[None, :])[0])
        gf = synthetic.grad_rows(w[None, :])[0]
        grad_sq = float(gf @ gf)
        noise = _noise_draws(synthetic, rng, mc_reps)
        eps = rho * _unit_rows(gf + noise)
        e_sq = np.zeros(mc_reps)
        if kind == OptimizerKind.SSAM:
            m = random_mask(d, sparsity, rng).as_array()
            e_sq = np.sum((eps - eps * m) ** 2, axis=1)
            eps = eps * m
            max_e_sq = max(max_e_sq, float(e_sq.max()))
        g2 = synthetic.grad_rows(w + eps) + noise
        f_next = synthetic.f_rows(w - eta * g2)
        base = descent_rhs(f, grad_sq, 0.0, eta, rho, constants, kind, stated) - f_next
        per_draw = base + (1 + constants.L * eta) * eta * constants.L ** 2 * e_sq if kind == OptimizerKind.SSAM else base
        mean, stderr = _mc_summary(per_draw)
        margins.append(mean)
        stderrs.append(stderr)
        alt_margins.append(mean + (other - stated) * eta * constants.L ** 2 * rho ** 2)
    check = "lemma5" if kind == OptimizerKind.SSAM else "lemma3"
    report = _mc_report(check, np.array(margins), np.array(stderrs), constants, eta=eta, rho=rho)
    extra = dict(report.extra)
    extra["alt_worst_margin"] = float(min(alt_margins)) if alt_margins else math.inf
    extra["alt_rho_sq_coefficient"] = float(other)
    if kind == OptimizerKind.SSAM:
        extra["sparsity"] = sparsity
        extra["max_e_norm_sq"] = max_e_sq
    return BoundReport(report.check, report.trials, report.violations, report.worst_margin, report.mc_stderr, report.constants, extra)


@dataclass(frozen=True, eq=False)
class ConvergenceTrace:
    """Per-repeat trajectories of a decaying-schedule run.

    grad_sq[r, t-1] is ||grad f(w_t)||^2 for t = 1..T; losses[r, t-1] is f(w_t)
    for t = 1..T+1, so losses[:, T] is the loss after the last step.
    """

    kind: OptimizerKind
    schedule: ScheduleRule
    eta0: float
    rho0: float
    grad_sq: np.ndarray
    losses: np.ndarray
    eta: np.ndarray
    rho: np.ndarray
    e_norm_sq: np.ndarray
    sparsity: float = 0.0

    def __post_init__(self):
        for name in ("grad_sq", "losses", "eta", "rho", "e_norm_sq"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ConfigurationError(f"Trace column {name} has non-finite entries", field=name)

    @property
    def repeats(self) -> int:
        return int(self.grad_sq.shape[0])

    @property
    def T(self) -> int:
        return int(self.grad_sq.shape[1])

    @property
    def initial_loss(self) -> float:
        return float(self.losses[:, 0].mean())

    @property
    def mean_grad_sq(self) -> np.ndarray:
        return self.grad_sq.mean(axis=0)

    def expected_loss_after(self, steps: int) -> float:
        return float(self.losses[:, steps].mean())


def _run_repeat(
    obj: SyntheticObjective,
    config: OptimizerConfig,
    w0: ParamVector,
    T: int,
    radius: float,
    seed: int,
    repeat: int,
    policy: Optional[MaskPolicy],
    steps_per_epoch: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rng = np.random.default_rng([seed, repeat])
    grad_sq = np.empty(T)
    losses = np.empty(T + 1)
    e_norm_sq = np.zeros(T)
    context = None
    mask = None
    if config.kind == OptimizerKind.SSAM:
        total_epochs = max(1, T // steps_per_epoch)
        context = MaskContext(objective=obj, w=w0, mask=None, total_epochs=total_epochs, seed=seed * 1_000_003 + repeat)
        mask = initial_mask(policy, context)
        context.mask = mask
    state = init_state(w0, mask, seed=repeat)
    for t in range(1, T + 1):
        g = true_grad(obj, state.w)
        grad_sq[t - 1] = g.dot(g)
        losses[t - 1] = true_loss(obj, state.w)
        state = step(state, obj, obj.sample_batch(rng, 1), config)
        e_norm_sq[t - 1] = state.info.e_norm_sq
        norm = state.w.norm()
        if norm > radius:
            logger.error(f"Trajectory left the ball at step {t}: ||w|| = {norm:.4g} > R = {radius}")
            raise DomainViolationError(f"||w_{t + 1}|| = {norm:.6g} exceeds the working radius {radius}; G is no longer valid")
        if context is not None and t % steps_per_epoch == 0:
            context.w, context.mask, context.last_grad = state.w, state.mask, state.last_grad
            fresh = maybe_regenerate(t // steps_per_epoch, policy, context)
            if fresh is not None:
                state = replace(state, mask=fresh)
    losses[T] = true_loss(obj, state.w)
    return grad_sq, losses, e_norm_sq


def run_convergence(
    obj: StochasticObjective,
    constants: AssumptionConstants,
    kind: OptimizerKind | str,
    eta0: float,
    rho0: float,
    T: int,
    repeats: int = 20,
    seed: int = 0,
    policy: Optional[MaskPolicy] = None,
    steps_per_epoch: int = 100,
    threads: int = 1,
) -> ConvergenceTrace:
    """Run the optimizer with eta0/sqrt(t), rho0/sqrt(t) schedules and record true gradient norms.

    All repeats start from the same seeded point at radius R/2 and draw
    independent noise.
    """
    synthetic = _synthetic(obj)
    if T < 1 or repeats < 1 or steps_per_epoch < 1:
        raise InvalidArgumentError(f"T, repeats and steps_per_epoch must be >= 1, got {T}, {repeats}, {steps_per_epoch}")
    if eta0 > 1.0 / constants.L:
        raise PreconditionError(f"eta0 = {eta0} exceeds 1/L = {1.0 / constants.L:.6g}")
    config = OptimizerConfig(kind=kind, eta0=eta0, rho0=rho0, schedule=ScheduleRule.INVERSE_SQRT)
    config.check_theory_constraint(constants.G)
    if config.kind == OptimizerKind.SSAM and policy is None:
        policy = MaskPolicy(kind=MaskKind.DYNAMIC, sparsity=0.5)

    w0 = synthetic.initial_weights(np.random.default_rng(seed))
    if w0.norm() > constants.radius:
        raise DomainViolationError(f"Initial point norm {w0.norm():.6g} exceeds radius {constants.radius}")

    def one(repeat: int):
        return _run_repeat(synthetic, config, w0, T, constants.radius, seed, repeat, policy, steps_per_epoch)

    if threads > 1 and repeats > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(repeats)))
    else:
        results = [one(r) for r in range(repeats)]

    t = np.arange(1, T + 1)
    logger.info(f"Convergence run: kind={config.kind} T={T} repeats={repeats} eta0={eta0} rho0={rho0}")
    return ConvergenceTrace(
        kind=config.kind,
        schedule=config.schedule,
        eta0=eta0,
        rho0=rho0,
        grad_sq=np.vstack([r[0] for r in results]),
        losses=np.vstack([r[1] for r in results]),
        eta=eta0 / np.sqrt(t),
        rho=rho0 / np.sqrt(t),
        e_norm_sq=np.vstack([r[2] for r in results]),
        sparsity=policy.sparsity if config.kind == OptimizerKind.SSAM else 0.0,
    )


Theorem = Literal["theorem1", "theorem2"]


def theorem_constants(trace: ConvergenceTrace, constants: AssumptionConstants, which: Theorem, steps: Optional[int] = None) -> tuple[float, float]:
    """(C, C') of the bound C / sqrt(T) + C' log T / sqrt(T) after ``steps`` steps."""
    steps = trace.T if steps is None else steps
    L, G, sigma = constants.L, constants.G, constants.sigma
    eta0, rho0 = trace.eta0, trace.rho0
    drop = trace.initial_loss - trace.expected_loss_after(steps)
    slope = 2.0 * (L * sigma ** 2 * eta0 + L * G * rho0)
    if which == "theorem1":
        return 2.0 / eta0 * drop, slope
    if which == "theorem2":
        extra = eta0 * L ** 2 * rho0 ** 2 * (1 + eta0 * L) * math.pi ** 2 / 6
        return 2.0 / eta0 * (drop + extra), slope
    raise ConfigurationError(f"Unknown bound '{which}'; expected theorem1 or theorem2", field="which")


def check_bound(trace: ConvergenceTrace, constants: AssumptionConstants, which: Theorem) -> BoundReport:
    """Check (1/T) sum_t E||grad f(w_t)||^2 <= C/sqrt(T) + C' log T / sqrt(T) at every prefix T >= 2."""
    expected_kind = {"theorem1": OptimizerKind.SAM, "theorem2": OptimizerKind.SSAM}.get(which)
    if expected_kind is None:
        raise ConfigurationError(f"Unknown bound '{which}'; expected theorem1 or theorem2", field="which")
    if trace.kind != expected_kind:
        raise ConfigurationError(f"{which} needs a {expected_kind} trace, got {trace.kind}", field="kind")
    if trace.schedule != ScheduleRule.INVERSE_SQRT:
        raise ConfigurationError(f"{which} needs inverse-sqrt schedules, got {trace.schedule}", field="schedule")
    if trace.T < 2:
        raise InvalidArgumentError(f"Bound checks need T >= 2, got {trace.T}")

    prefixes = np.arange(1, trace.T + 1)
    per_repeat = np.cumsum(trace.grad_sq, axis=1) / prefixes
    lhs = per_repeat.mean(axis=0)
    if trace.repeats > 1:
        stderr = per_repeat.std(axis=0, ddof=1) / math.sqrt(trace.repeats)
    else:
        stderr = np.zeros(trace.T)

    margins = np.empty(trace.T - 1)
    for i, T in enumerate(range(2, trace.T + 1)):
        c, c_log = theorem_constants(trace, constants, which, T)
        margins[i] = c / math.sqrt(T) + c_log * math.log(T) / math.sqrt(T) - lhs[T - 1]
    report = _mc_report(which, margins, stderr[1:], constants)
    c_final, c_log_final = theorem_constants(trace, constants, which)
    names = ("C1", "C2") if which == "theorem1" else ("C3", "C4")
    extra = {
        names[0]: c_final,
        names[1]: c_log_final,
        "eta0": trace.eta0,
        "rho0": trace.rho0,
        "repeats": float(trace.repeats),
        "T": float(trace.T),
        "initial_loss": trace.initial_loss,
        "final_loss": trace.expected_loss_after(trace.T),
    }
    if report.violations:
        logger.warning(f"{which}: {report.violations} of {report.trials} prefixes above the bound")
    return BoundReport(report.check, report.trials, report.violations, report.worst_margin, report.mc_stderr, report.constants, extra)

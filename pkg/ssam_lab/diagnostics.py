"""Loss-geometry and cost diagnostics.

Gradient-difference ratio histograms, Lanczos Hessian spectra, filter-normalised
loss landscape grids and the relative FLOPs model for SGD / SAM / SSAM.
"""
from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from loguru import logger
from scipy.linalg import eigh_tridiagonal

from .errors import ConfigurationError, InvalidArgumentError, RecordIOError
from .numcore import Batch, HvpOracle, ParamVector, StochasticObjective, eval_loss, grad
from .optim import OptimizerKind, compute_perturbation

RATIO_CLAMP = 40.0
RATIO_BINS = 80
ZERO_DENOMINATOR = 1e-12
LANCZOS_BREAKDOWN = 1e-12
DEFAULT_RESOLUTION = 51


@dataclass(frozen=True, eq=False)
class RatioHistogram:
    edges: np.ndarray
    counts: np.ndarray
    fraction_below_zero: float
    excluded_count: int

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.excluded_count


def grad_diff_ratio(g_sam: ParamVector, g_sgd: ParamVector) -> RatioHistogram:
    """Histogram of log10 |(g_sam - g_sgd) / g_sgd| per coordinate, clamped to +/-40."""
    if g_sam.size != g_sgd.size:
        raise ConfigurationError(f"Gradient lengths differ: {g_sam.size} vs {g_sgd.size}", field="dimension")
    sam, sgd = g_sam.values, g_sgd.values
    keep = np.abs(sgd) >= ZERO_DENOMINATOR
    with np.errstate(divide="ignore"):
        r = np.log10(np.abs((sam[keep] - sgd[keep]) / sgd[keep]))
    r = np.clip(r, -RATIO_CLAMP, RATIO_CLAMP)
    counts, edges = np.histogram(r, bins=RATIO_BINS, range=(-RATIO_CLAMP, RATIO_CLAMP))
    # edges are whole numbers, so bins left of 0 hold exactly the r < 0 entries
    below = int(counts[: RATIO_BINS // 2].sum())
    fraction = below / r.size if r.size else 0.0
    excluded = int((~keep).sum())
    if excluded:
        logger.debug(f"Ratio histogram excluded {excluded} coordinates with |g_sgd| < {ZERO_DENOMINATOR}")
    return RatioHistogram(edges=edges, counts=counts, fraction_below_zero=fraction, excluded_count=excluded)


def gradient_ratio_probe(obj: StochasticObjective, w: ParamVector, batch: Batch, rho: float) -> RatioHistogram:
    """SGD vs SAM gradient on the same batch, summarised as a ratio histogram."""
    g_sgd = grad(obj, w, batch)
    g_sam = grad(obj, w + compute_perturbation(g_sgd, rho), batch)
    return grad_diff_ratio(g_sam, g_sgd)


@dataclass(frozen=True)
class SpectrumReport:
    """Top Ritz values (descending) with their residual estimates."""

    eigenvalues: tuple[float, ...]
    residuals: tuple[float, ...]
    iterations: int
    breakdown: bool = False

    @property
    def ratio_1_5(self) -> Optional[float]:
        if len(self.eigenvalues) < 5 or self.eigenvalues[4] == 0:
            return None
        return self.eigenvalues[0] / self.eigenvalues[4]

    def to_json(self) -> str:
        return json.dumps(
            {
                "eigenvalues": list(self.eigenvalues),
                "residuals": list(self.residuals),
                "iterations": self.iterations,
                "breakdown": self.breakdown,
                "ratio_1_5": self.ratio_1_5,
            },
            indent=2,
        )


def lanczos_spectrum(oracle: HvpOracle, k: int, iters: int, seed: int = 0) -> SpectrumReport:
    """Top-k Hessian eigenvalues by Lanczos with full reorthogonalisation."""
    d = oracle.dimension
    if not 1 <= k <= iters <= d:
        raise InvalidArgumentError(f"Lanczos needs 1 <= k <= iters <= d, got k={k}, iters={iters}, d={d}")
    rng = np.random.default_rng(seed)
    q = rng.standard_normal(d)
    q /= np.linalg.norm(q)

    basis = np.zeros((iters, d))
    alphas: list[float] = []
    betas: list[float] = []
    last_beta = 0.0
    breakdown = False
    for j in range(iters):
        basis[j] = q
        z = oracle.matvec(q)
        alpha = float(q @ z)
        z = z - alpha * q
        if j > 0:
            z = z - betas[-1] * basis[j - 1]
        for _ in range(2):
            z = z - basis[: j + 1].T @ (basis[: j + 1] @ z)
        alphas.append(alpha)
        beta = float(np.linalg.norm(z))
        if j == iters - 1:
            last_beta = beta
            break
        if beta < LANCZOS_BREAKDOWN:
            logger.info(f"Lanczos breakdown after {j + 1} iterations (beta = {beta:.3g})")
            last_beta, breakdown = beta, True
            break
        betas.append(beta)
        q = z / beta

    if len(alphas) == 1:
        theta, vectors = np.array(alphas), np.ones((1, 1))
    else:
        theta, vectors = eigh_tridiagonal(np.array(alphas), np.array(betas))
    order = np.argsort(theta)[::-1][:k]
    residuals = np.abs(last_beta * vectors[-1, order])
    return SpectrumReport(
        eigenvalues=tuple(float(x) for x in theta[order]),
        residuals=tuple(float(x) for x in residuals),
        iterations=len(alphas),
        breakdown=breakdown,
    )


def filter_normalize(direction: ParamVector, reference: ParamVector) -> ParamVector:
    """Rescale each weight group of ``direction`` to the norm of the same group in ``reference``."""
    if not direction.same_partition(reference):
        raise ConfigurationError("Direction and reference weights have different partitions", field="partition")
    out = direction.values.copy()
    for g in direction.partition:
        part = slice(g.offset, g.offset + g.length)
        d_norm = float(np.linalg.norm(out[part]))
        if d_norm < ZERO_DENOMINATOR:
            out[part] = 0.0
            continue
        out[part] *= float(np.linalg.norm(reference.values[part])) / d_norm
    return direction.with_values(out)


@dataclass(frozen=True, eq=False)
class LandscapeGrid:
    """losses[i, j] is the loss at w + xs[i] * direction1 + ys[j] * direction2."""

    direction1: ParamVector
    direction2: ParamVector
    xs: np.ndarray
    ys: np.ndarray
    losses: np.ndarray

    @property
    def center_loss(self) -> Optional[float]:
        i = np.flatnonzero(self.xs == 0.0)
        j = np.flatnonzero(self.ys == 0.0)
        if i.size == 0 or j.size == 0:
            return None
        return float(self.losses[i[0], j[0]])


def grid_axis(resolution: int, span: float = 1.0) -> np.ndarray:
    """Evenly spaced points over [-span, span], exactly antisymmetric (0 at the centre when odd)."""
    c = np.linspace(-span, span, resolution)
    return (c - c[::-1]) / 2.0


def random_direction(w: ParamVector, rng: np.random.Generator) -> ParamVector:
    return filter_normalize(w.with_values(rng.standard_normal(w.size)), w)


def landscape_slice(
    obj: StochasticObjective,
    w: ParamVector,
    batch: Batch,
    resolution: int = DEFAULT_RESOLUTION,
    span: float = 1.0,
    seed: int = 0,
    directions: Optional[tuple[ParamVector, ParamVector]] = None,
    threads: int = 1,
) -> LandscapeGrid:
    """Loss over a 2-D slice through w spanned by two filter-normalised directions.

    Explicit ``directions`` are used as given (no normalisation).
    """
    if resolution < 2:
        raise InvalidArgumentError(f"Landscape resolution must be >= 2, got {resolution}")
    if not span > 0:
        raise InvalidArgumentError(f"Landscape span must be positive, got {span}")
    if directions is None:
        rng = np.random.default_rng(seed)
        d1 = random_direction(w, rng)
        d2 = random_direction(w, rng)
    else:
        d1, d2 = directions
        if not (d1.same_partition(w) and d2.same_partition(w)):
            raise ConfigurationError("Landscape directions must share the weight partition", field="partition")
    axis = grid_axis(resolution, span)

    def row(x: float) -> np.ndarray:
        return np.array([eval_loss(obj, w + (d1 * x + d2 * y), batch) for y in axis])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(row, axis))
    else:
        rows = [row(x) for x in axis]
    losses = np.vstack(rows)
    logger.debug(f"Landscape grid {resolution}x{resolution}: min={losses.min():.4g} max={losses.max():.4g}")
    return LandscapeGrid(direction1=d1, direction2=d2, xs=axis, ys=axis.copy(), losses=losses)


@dataclass(frozen=True)
class CostModel:
    """Forward pass is ``forward_fraction`` of a gradient evaluation; the backward pass the rest."""

    forward_fraction: float = 0.3

    def __post_init__(self):
        if not 0.0 < self.forward_fraction < 1.0:
            raise ConfigurationError(
                f"forward_fraction must lie in (0, 1), got {self.forward_fraction}", field="forward_fraction"
            )

    @property
    def backward_fraction(self) -> float:
        return 1.0 - self.forward_fraction


def flops_estimate(model: CostModel, kind: OptimizerKind | str, sparsity: float = 0.0) -> float:
    """Training cost relative to SGD, rounded to 2 decimals."""
    kind = OptimizerKind(kind)
    if not 0.0 <= sparsity <= 1.0:
        raise InvalidArgumentError(f"Sparsity must lie in [0, 1], got {sparsity}")
    if kind == OptimizerKind.SGD:
        return 1.0
    if kind == OptimizerKind.SAM:
        return 2.0
    return round(1.0 + model.forward_fraction + (1.0 - sparsity) * model.backward_fraction, 2)


@dataclass(frozen=True)
class FlopsRow:
    method: str
    sparsity: float
    relative_flops: float


def flops_table(model: CostModel, sparsities: Iterable[float]) -> list[FlopsRow]:
    rows = [
        FlopsRow("sgd", 0.0, flops_estimate(model, OptimizerKind.SGD)),
        FlopsRow("sam", 0.0, flops_estimate(model, OptimizerKind.SAM)),
    ]
    rows.extend(FlopsRow("ssam", float(s), flops_estimate(model, OptimizerKind.SSAM, s)) for s in sparsities)
    return rows


def _open_for_write(path: Path):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        return path.open("w", newline="", encoding="utf-8")
    except OSError as exc:
        raise RecordIOError(f"Cannot write {path}: {exc}", path=str(path)) from exc


def write_csv(report: RatioHistogram | LandscapeGrid | list[FlopsRow], path: Path) -> None:
    """CSV with a header row, comma separated, '.' decimals."""
    with _open_for_write(path) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if isinstance(report, RatioHistogram):
            writer.writerow(["bin_lo", "bin_hi", "count"])
            for lo, hi, count in zip(report.edges[:-1], report.edges[1:], report.counts):
                writer.writerow([repr(float(lo)), repr(float(hi)), int(count)])
        elif isinstance(report, LandscapeGrid):
            writer.writerow(["x", "y", "loss"])
            for i, x in enumerate(report.xs):
                for j, y in enumerate(report.ys):
                    writer.writerow([repr(float(x)), repr(float(y)), repr(float(report.losses[i, j]))])
        else:
            writer.writerow(["method", "sparsity", "relative_flops"])
            for r in report:
                writer.writerow([r.method, repr(r.sparsity), f"{r.relative_flops:.2f}"])


def write_json(report: SpectrumReport | RatioHistogram, path: Path) -> None:
    if isinstance(report, RatioHistogram):
        text = json.dumps(
            {
                "edges": report.edges.tolist(),
                "counts": report.counts.tolist(),
                "fraction_below_zero": report.fraction_below_zero,
                "excluded_count": report.excluded_count,
            },
            indent=2,
        )
    else:
        text = report.to_json()
    with _open_for_write(path) as fh:
        fh.write(text + "\n")

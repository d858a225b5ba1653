"""Sparse perturbation masks.

SSAM-F keeps the coordinates with the largest empirical Fisher values;
SSAM-D drops the flattest active coordinates (smallest |g|) and grows the same
number of random inactive ones, with a cosine-decayed drop count. Random and
drop-sharpest/drop-random variants exist for ablations.
"""
from __future__ import annotations

import json
import math
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from loguru import logger

from .errors import ConfigurationError, InvalidArgumentError, RecordIOError, UnsupportedOperationError
from .numcore import Batch, Family, ParamVector, StochasticObjective, grad

MASK_MAGIC = b"SSMK"
MASK_VERSION = 1
_HEADER = struct.Struct("<4sHQd")


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def active_count(d: int, sparsity: float) -> int:
    """Number of perturbed coordinates, round((1 - s) * d)."""
    return round_half_away((1.0 - sparsity) * d)


def _check_sparsity(s: float) -> None:
    if not 0.0 <= s < 1.0:
        raise InvalidArgumentError(f"Sparsity must lie in [0, 1), got {s}")


@dataclass(frozen=True, eq=False)
class SparseMask:
    """Binary perturbation mask with exactly round((1 - s) d) ones."""

    bits: np.ndarray
    sparsity: float

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 1:
            raise ConfigurationError(f"Mask must be 1-D, got shape {bits.shape}", field="mask")
        if not np.isin(bits, (0, 1)).all():
            raise ConfigurationError("Mask entries must be 0 or 1", field="mask")
        _check_sparsity(self.sparsity)
        bits = bits.astype(bool)
        expected = active_count(bits.size, self.sparsity)
        if int(bits.sum()) != expected:
            raise ConfigurationError(
                f"Mask has {int(bits.sum())} active entries, sparsity {self.sparsity} requires {expected}",
                field="mask",
            )
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "sparsity", float(self.sparsity))

    @classmethod
    def ones(cls, d: int) -> SparseMask:
        return cls(np.ones(d, dtype=bool), 0.0)

    @classmethod
    def from_indices(cls, d: int, indices: Sequence[int], sparsity: float) -> SparseMask:
        bits = np.zeros(d, dtype=bool)
        bits[np.asarray(indices, dtype=np.int64)] = True
        return cls(bits, sparsity)

    @property
    def d(self) -> int:
        return int(self.bits.size)

    @property
    def popcount(self) -> int:
        return int(self.bits.sum())

    def active_indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    def inactive_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.bits)

    def as_array(self) -> np.ndarray:
        return self.bits.astype(np.float64)

    def equals(self, other: SparseMask) -> bool:
        return self.sparsity == other.sparsity and np.array_equal(self.bits, other.bits)

    def to_bytes(self) -> bytes:
        return _HEADER.pack(MASK_MAGIC, MASK_VERSION, self.d, self.sparsity) + np.packbits(self.bits).tobytes()

    @classmethod
    def from_bytes(cls, payload: bytes) -> SparseMask:
        if len(payload) < _HEADER.size:
            raise ConfigurationError("Mask payload shorter than header", field="mask")
        magic, version, d, sparsity = _HEADER.unpack_from(payload)
        if magic != MASK_MAGIC or version != MASK_VERSION:
            raise ConfigurationError(f"Not a mask file (magic={magic!r}, version={version})", field="mask")
        packed = np.frombuffer(payload, dtype=np.uint8, offset=_HEADER.size)
        if packed.size != (d + 7) // 8:
            raise ConfigurationError(f"Mask payload has {packed.size} bytes, expected {(d + 7) // 8}", field="mask")
        return cls(np.unpackbits(packed, count=d).astype(bool), sparsity)

    def save(self, path: Path) -> None:
        try:
            Path(path).write_bytes(self.to_bytes())
        except OSError as exc:
            raise RecordIOError(f"Failed to write mask to {path}: {exc}", path=str(path)) from exc

    @classmethod
    def load(cls, path: Path) -> SparseMask:
        try:
            return cls.from_bytes(Path(path).read_bytes())
        except OSError as exc:
            raise RecordIOError(f"Failed to read mask from {path}: {exc}", path=str(path)) from exc

    def to_json(self) -> str:
        return json.dumps({"d": self.d, "sparsity": self.sparsity, "active": self.active_indices().tolist()})

    @classmethod
    def from_json(cls, text: str) -> SparseMask:
        data = json.loads(text)
        return cls.from_indices(data["d"], data["active"], data["sparsity"])


@dataclass(frozen=True, eq=False)
class FisherEstimate:
    """Diagonal empirical Fisher over n_samples examples."""
    values: np.ndarray
    n_samples: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if self.n_samples < 1:
            raise ConfigurationError("Fisher estimate needs at least one sample", field="n_fisher_samples")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ConfigurationError("Fisher values must be finite and non-negative", field="fisher")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


class MaskKind(StrEnum):
    FISHER = "fisher"
    DYNAMIC = "dynamic"
    RANDOM = "random"
    FIXED = "fixed"


class DropCriterion(StrEnum):
    FLATTEST = "flattest"
    SHARPEST = "sharpest"
    RANDOM = "random"


class InitialMask(StrEnum):
    RANDOM = "random"
    FISHER = "fisher"


def _enum(cls, value, name: str):
    try:
        return cls(value)
    except ValueError:
        choices = ", ".join(m.value for m in cls)
        raise ConfigurationError(f"Unknown {name} '{value}'; expected one of: {choices}", field=name) from None


@dataclass(frozen=True)
class MaskPolicy:
    """How and when the SSAM mask is (re)generated."""

    kind: MaskKind = MaskKind.FISHER
    sparsity: float = 0.5
    drop_criterion: DropCriterion = DropCriterion.FLATTEST
    alpha: float = 0.5
    update_interval: int = 1
    n_fisher_samples: int = 128
    initial: InitialMask = InitialMask.RANDOM

    def __post_init__(self):
        object.__setattr__(self, "kind", _enum(MaskKind, self.kind, "kind"))
        object.__setattr__(self, "drop_criterion", _enum(DropCriterion, self.drop_criterion, "drop_criterion"))
        object.__setattr__(self, "initial", _enum(InitialMask, self.initial, "initial"))
        if not 0.0 <= self.sparsity < 1.0:
            raise ConfigurationError(f"sparsity must lie in [0, 1), got {self.sparsity}", field="sparsity")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in [0, 1], got {self.alpha}", field="alpha")
        if self.update_interval < 1:
            raise ConfigurationError(f"update_interval must be >= 1, got {self.update_interval}", field="update_interval")
        if self.n_fisher_samples < 1:
            raise ConfigurationError(f"n_fisher_samples must be >= 1, got {self.n_fisher_samples}", field="n_fisher_samples")


def arg_topk(v: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest values, ties broken by lower index; returned sorted."""
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if not 0 <= k <= v.size:
        raise InvalidArgumentError(f"k must lie in [0, {v.size}], got {k}")
    order = np.argsort(-v, kind="stable")
    return np.sort(order[:k])


def empirical_fisher(
    obj: StochasticObjective,
    w: ParamVector,
    inputs: np.ndarray,
    targets: np.ndarray,
    threads: int = 1,
) -> FisherEstimate:
    """(1/N_F) sum_i (grad log p_w(y_i | x_i))^2, elementwise."""
    if obj.family != Family.MLP_CLASSIFIER:
        raise UnsupportedOperationError(f"Empirical Fisher requires a classifier objective, got {obj.family}")
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n = inputs.shape[0]
    if n < 1 or targets.size != n:
        raise ConfigurationError(f"Fisher sample has {n} inputs and {targets.size} targets", field="n_fisher_samples")

    def chunk_sum(bounds: tuple[int, int]) -> np.ndarray:
        lo, hi = bounds
        G = obj.per_sample_log_prob_grads(w.values, inputs[lo:hi], targets[lo:hi])
        return np.sum(G * G, axis=0)

    n_chunks = max(1, min(threads, n))
    edges = np.linspace(0, n, n_chunks + 1).astype(int)
    chunks = list(zip(edges[:-1], edges[1:]))
    if n_chunks == 1:
        partials = [chunk_sum(chunks[0])]
    else:
        with ThreadPoolExecutor(max_workers=n_chunks) as pool:
            partials = list(pool.map(chunk_sum, chunks))
    total = np.zeros(obj.dimension)
    for part in partials:
        total += part
    return FisherEstimate(total / n, n)


def fisher_mask(F: FisherEstimate, s: float) -> SparseMask:
    _check_sparsity(s)
    d = F.values.size
    return SparseMask.from_indices(d, arg_topk(F.values, active_count(d, s)), s)


def random_mask(d: int, s: float, seed: int | np.random.Generator) -> SparseMask:
    _check_sparsity(s)
    rng = np.random.default_rng(seed)
    return SparseMask.from_indices(d, rng.choice(d, size=active_count(d, s), replace=False), s)


def cosine_decay(t: float, T: float, alpha: float) -> float:
    """(alpha / 2) (1 + cos(t pi / T)) for 0 <= t <= T."""
    if T <= 0:
        raise InvalidArgumentError(f"Total epochs must be positive, got {T}")
    if t < 0 or t > T:
        raise InvalidArgumentError(f"Epoch {t} outside [0, {T}]")
    return alpha / 2.0 * (1.0 + math.cos(t * math.pi / T))


def drop_grow_update(
    m: SparseMask,
    g: ParamVector | np.ndarray,
    t: float,
    T: float,
    policy: MaskPolicy,
    seed: int | np.random.Generator,
) -> SparseMask:
    """Drop N_drop active coordinates, then grow as many previously inactive ones."""
    g = g.values if isinstance(g, ParamVector) else np.asarray(g, dtype=np.float64)
    if g.size != m.d:
        raise ConfigurationError(f"Gradient length {g.size} != mask length {m.d}", field="mask")
    rng = np.random.default_rng(seed)
    n_drop = round_half_away(cosine_decay(t, T, policy.alpha) * (1.0 - m.sparsity) * m.d)
    active = m.active_indices()
    inactive = m.inactive_indices()
    limit = min(active.size, inactive.size)
    if n_drop > limit:
        logger.warning(f"Drop count {n_drop} exceeds swappable entries {limit}; clamping")
        n_drop = limit
    if n_drop == 0:
        return m

    magnitude = np.abs(g[active])
    if policy.drop_criterion == DropCriterion.FLATTEST:
        dropped = active[arg_topk(-magnitude, n_drop)]
    elif policy.drop_criterion == DropCriterion.SHARPEST:
        dropped = active[arg_topk(magnitude, n_drop)]
    else:
        dropped = rng.choice(active, size=n_drop, replace=False)
    grown = rng.choice(inactive, size=n_drop, replace=False)

    bits = m.bits.copy()
    bits[dropped] = False
    bits[grown] = True
    return SparseMask(bits, m.sparsity)


@dataclass
class MaskContext:
    """Inputs a mask regeneration may need."""

    objective: StochasticObjective
    w: ParamVector
    mask: SparseMask
    total_epochs: int
    seed: int = 0
    last_grad: Optional[ParamVector] = None
    train_inputs: Optional[np.ndarray] = None
    train_targets: Optional[np.ndarray] = None
    n_classes: int = 1
    threads: int = 1
    fisher_ms: float = field(default=0.0)

    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        if self.train_inputs is None or self.train_targets is None:
            raise ConfigurationError("Mask regeneration needs training data", field="dataset")
        size = min(n, self.train_inputs.shape[0])
        idx = np.sort(rng.choice(self.train_inputs.shape[0], size=size, replace=False))
        return self.train_inputs[idx], self.train_targets[idx]


def initial_mask(policy: MaskPolicy, context: MaskContext) -> SparseMask:
    """Epoch-0 mask: random by default, or a Fisher mask when policy.initial is fisher."""
    rng = np.random.default_rng([context.seed, 0])
    if policy.initial == InitialMask.FISHER:
        return _fisher_from_context(policy, context, rng)
    return random_mask(context.w.size, policy.sparsity, rng)


def _fisher_from_context(policy: MaskPolicy, context: MaskContext, rng: np.random.Generator) -> SparseMask:
    inputs, targets = context.sample(rng, policy.n_fisher_samples)
    started = time.perf_counter()
    F = empirical_fisher(context.objective, context.w, inputs, targets, threads=context.threads)
    context.fisher_ms += (time.perf_counter() - started) * 1000.0
    return fisher_mask(F, policy.sparsity)


def maybe_regenerate(epoch: int, policy: MaskPolicy, context: MaskContext) -> Optional[SparseMask]:
    """Fresh mask when epoch % T_m == 0 (epochs are 1-based), else None."""
    if epoch < 1:
        raise InvalidArgumentError(f"Epoch must be >= 1, got {epoch}")
    if policy.kind == MaskKind.FIXED or epoch % policy.update_interval != 0:
        return None
    rng = np.random.default_rng([context.seed, epoch])
    if policy.kind == MaskKind.FISHER:
        mask = _fisher_from_context(policy, context, rng)
    elif policy.kind == MaskKind.RANDOM:
        mask = random_mask(context.w.size, policy.sparsity, rng)
    else:
        g = context.last_grad
        if g is None:
            g = _bootstrap_gradient(policy, context, rng)
        mask = drop_grow_update(context.mask, g, min(epoch, context.total_epochs), context.total_epochs, policy, rng)
    logger.debug(f"Mask regenerated at epoch {epoch}: kind={policy.kind}, active={mask.popcount}/{mask.d}")
    return mask


def _bootstrap_gradient(policy: MaskPolicy, context: MaskContext, rng: np.random.Generator) -> ParamVector:
    # no step taken yet: use a gradient on a fresh sample
    obj = context.objective
    if obj.is_synthetic:
        return grad(obj, context.w, obj.sample_batch(rng, 1))
    inputs, targets = context.sample(rng, policy.n_fisher_samples)
    return grad(obj, context.w, Batch(inputs, targets, context.n_classes))

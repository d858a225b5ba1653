"""Objectives, parameter containers and derivative oracles.

Every other module works on flat float64 weight vectors (ParamVector) and asks
an objective for losses and gradients on a Batch. Synthetic families model the
stochastic oracle g(w) = grad f(w) + xi with xi ~ N(0, (sigma^2/d) I); the
classifier is a one-hidden-layer tanh MLP with hand-derived gradients.
"""
from __future__ import annotations

import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import StrEnum
from typing import NamedTuple, Optional, Sequence

import numpy as np
from loguru import logger
from scipy.sparse.linalg import LinearOperator
from scipy.special import log_softmax, softmax

from .errors import (
    ConfigurationError,
    InvalidArgumentError,
    NumericalOverflowError,
    UnsupportedOperationError,
)

FD_EPS = float(np.cbrt(np.finfo(np.float64).eps))
MAX_MLP_PARAMS = 10_000


class Family(StrEnum):
    NOISY_QUADRATIC = "noisy-quadratic"
    TRIG_NONCONVEX = "trig-nonconvex"
    MLP_CLASSIFIER = "mlp-classifier"


SYNTHETIC_FAMILIES = (Family.NOISY_QUADRATIC, Family.TRIG_NONCONVEX)


class Group(NamedTuple):
    """One named, contiguous slice of a ParamVector."""
    name: str
    offset: int
    length: int


def single_group(d: int, name: str = "w") -> tuple[Group, ...]:
    return (Group(name, 0, d),)


def _check_partition(partition: tuple[Group, ...], d: int) -> None:
    cursor = 0
    for group in partition:
        if group.offset != cursor or group.length < 0:
            raise ConfigurationError(
                f"Partition group '{group.name}' starts at {group.offset}, expected {cursor}",
                field="partition",
            )
        cursor += group.length
    if cursor != d:
        raise ConfigurationError(f"Partition covers {cursor} entries, vector has {d}", field="partition")


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Immutable flat weight vector with a named-group partition.

    Values are copied on construction and frozen, so instances can be shared
    across threads. Construction fails with NumericalOverflowError when any
    entry is NaN or infinite.
    """

    values: np.ndarray
    partition: tuple[Group, ...]

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ConfigurationError(f"ParamVector needs a 1-D array, got shape {values.shape}", field="values")
        partition = tuple(Group(*g) for g in self.partition)
        _check_partition(partition, values.size)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "partition", partition)
        finite = np.isfinite(values)
        if not finite.all():
            index = int(np.flatnonzero(~finite)[0])
            group = self.group_of(index)
            raise NumericalOverflowError(f"Non-finite weight at index {index} in group '{group}'", group=group)

    @classmethod
    def from_array(cls, values: Sequence[float] | np.ndarray, partition: Optional[tuple[Group, ...]] = None) -> ParamVector:
        values = np.asarray(values, dtype=np.float64)
        return cls(values, partition if partition is not None else single_group(values.size))

    @classmethod
    def zeros(cls, partition: tuple[Group, ...]) -> ParamVector:
        return cls(np.zeros(sum(g.length for g in partition)), partition)

    @property
    def size(self) -> int:
        return int(self.values.size)

    def __len__(self) -> int:
        return self.size

    def group(self, name: str) -> np.ndarray:
        for g in self.partition:
            if g.name == name:
                return self.values[g.offset:g.offset + g.length]
        raise KeyError(name)

    def group_of(self, index: int) -> str:
        for g in self.partition:
            if g.offset <= index < g.offset + g.length:
                return g.name
        raise IndexError(index)

    def same_partition(self, other: ParamVector) -> bool:
        return self.partition == other.partition

    def with_values(self, values: np.ndarray) -> ParamVector:
        return ParamVector(values, self.partition)

    def _operand(self, other) -> np.ndarray | float:
        if isinstance(other, ParamVector):
            if not self.same_partition(other):
                raise ConfigurationError("ParamVector partitions differ", field="partition")
            return other.values
        if isinstance(other, np.ndarray):
            if other.shape != self.values.shape:
                raise ConfigurationError(f"Shape {other.shape} does not match length {self.size}", field="values")
            return other
        return float(other)

    def __add__(self, other) -> ParamVector:
        return self.with_values(self.values + self._operand(other))

    def __sub__(self, other) -> ParamVector:
        return self.with_values(self.values - self._operand(other))

    def __mul__(self, other) -> ParamVector:
        return self.with_values(self.values * self._operand(other))

    __rmul__ = __mul__

    def __truediv__(self, scalar: float) -> ParamVector:
        return self.with_values(self.values / float(scalar))

    def __neg__(self) -> ParamVector:
        return self.with_values(-self.values)

    def dot(self, other: ParamVector) -> float:
        return float(np.dot(self.values, self._operand(other)))

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def group_norms(self) -> dict[str, float]:
        return {g.name: float(np.linalg.norm(self.group(g.name))) for g in self.partition}


@dataclass(frozen=True, eq=False)
class Batch:
    """Minibatch of (input, label) pairs.

    Synthetic objectives store one standard-normal noise draw per row in
    ``inputs`` and use a single dummy class.
    """

    inputs: np.ndarray
    targets: np.ndarray
    n_classes: int

    def __post_init__(self):
        inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        targets = np.asarray(self.targets, dtype=np.int64).reshape(-1)
        if inputs.shape[0] < 1:
            raise ConfigurationError("Batch must contain at least one sample", field="inputs")
        if targets.size != inputs.shape[0]:
            raise ConfigurationError(
                f"Batch has {inputs.shape[0]} inputs but {targets.size} targets", field="targets"
            )
        if targets.min() < 0 or targets.max() >= self.n_classes:
            raise ConfigurationError(f"Batch labels must lie in [0, {self.n_classes})", field="targets")
        inputs.setflags(write=False)
        targets.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "targets", targets)

    @property
    def n_samples(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.inputs.shape[1])


@dataclass(frozen=True)
class KnownConstants:
    """Constants of the bounded-gradient, bounded-variance and smoothness assumptions."""
    L: float
    G: float
    sigma: float

    def __post_init__(self):
        if not self.L > 0:
            raise ConfigurationError(f"L must be positive, got {self.L}", field="L")
        if self.G < 0:
            raise ConfigurationError(f"G must be non-negative, got {self.G}", field="G")
        if self.sigma < 0:
            raise ConfigurationError(f"sigma must be non-negative, got {self.sigma}", field="sigma")


class StochasticObjective(ABC):
    """Loss/gradient oracle over minibatches.

    Subclasses work on raw float arrays; the module-level functions
    (eval_loss, grad, ...) wrap them with validation and ParamVector plumbing.
    """

    family: Family

    @property
    @abstractmethod
    def dimension(self) -> int: ...

    @property
    @abstractmethod
    def partition(self) -> tuple[Group, ...]: ...

    @property
    def known_constants(self) -> Optional[KnownConstants]:
        return None

    @property
    def is_synthetic(self) -> bool:
        return self.family in SYNTHETIC_FAMILIES

    @property
    def is_classifier(self) -> bool:
        return self.family == Family.MLP_CLASSIFIER

    @abstractmethod
    def loss(self, values: np.ndarray, batch: Batch) -> float: ...

    @abstractmethod
    def gradient(self, values: np.ndarray, batch: Batch) -> np.ndarray: ...

    def loss_and_gradient(self, values: np.ndarray, batch: Batch) -> tuple[float, np.ndarray]:
        return self.loss(values, batch), self.gradient(values, batch)

    @abstractmethod
    def initial_weights(self, rng: np.random.Generator) -> ParamVector: ...

    def check_batch(self, batch: Batch) -> None:
        """Raise ConfigurationError when the batch does not fit this objective."""


class SyntheticObjective(StochasticObjective):
    """Smooth f with an additive Gaussian gradient oracle.

    Per-sample loss is f(w) + (sigma/sqrt(d)) z.w with z ~ N(0, I), so a
    one-row batch yields E||g - grad f||^2 = sigma^2 exactly.
    """

    def __init__(self, dimension: int, sigma: float = 0.0, radius: float = 10.0):
        if dimension < 1:
            raise ConfigurationError(f"dimension must be >= 1, got {dimension}", field="dimension")
        if sigma < 0:
            raise ConfigurationError(f"sigma must be >= 0, got {sigma}", field="sigma")
        if not radius > 0:
            raise ConfigurationError(f"radius must be > 0, got {radius}", field="radius")
        self._d = int(dimension)
        self.sigma = float(sigma)
        self.radius = float(radius)
        self.noise_scale = self.sigma / np.sqrt(self._d)

    @property
    def dimension(self) -> int:
        return self._d

    @property
    def partition(self) -> tuple[Group, ...]:
        return single_group(self._d)

    @property
    def known_constants(self) -> KnownConstants:
        return self.constants_on_ball(self.radius)

    @abstractmethod
    def constants_on_ball(self, radius: float) -> KnownConstants: ...

    @abstractmethod
    def f_rows(self, W: np.ndarray) -> np.ndarray:
        """Noiseless f for each row of W."""

    @abstractmethod
    def grad_rows(self, W: np.ndarray) -> np.ndarray:
        """Noiseless gradient for each row of W."""

    def true_loss(self, values: np.ndarray) -> float:
        return float(self.f_rows(values[None, :])[0])

    def true_gradient(self, values: np.ndarray) -> np.ndarray:
        return self.grad_rows(values[None, :])[0]

    def check_batch(self, batch: Batch) -> None:
        if batch.n_features != self._d:
            raise ConfigurationError(
                f"Noise batch has width {batch.n_features}, objective dimension is {self._d}", field="dimension"
            )

    def _noise(self, batch: Batch) -> np.ndarray:
        return self.noise_scale * batch.inputs.mean(axis=0)

    def loss(self, values: np.ndarray, batch: Batch) -> float:
        return self.true_loss(values) + float(self._noise(batch) @ values)

    def gradient(self, values: np.ndarray, batch: Batch) -> np.ndarray:
        return self.true_gradient(values) + self._noise(batch)

    def sample_batch(self, rng: np.random.Generator, size: int = 1) -> Batch:
        return Batch(rng.standard_normal((size, self._d)), np.zeros(size, dtype=np.int64), 1)

    def noiseless_batch(self) -> Batch:
        return Batch(np.zeros((1, self._d)), np.zeros(1, dtype=np.int64), 1)

    def random_point(self, rng: np.random.Generator, radius: Optional[float] = None) -> np.ndarray:
        """Uniform sample from the ball of the given radius (default: working ball)."""
        radius = self.radius if radius is None else radius
        direction = rng.standard_normal(self._d)
        direction /= np.linalg.norm(direction)
        return direction * radius * rng.uniform() ** (1.0 / self._d)

    def initial_weights(self, rng: np.random.Generator) -> ParamVector:
        direction = rng.standard_normal(self._d)
        direction /= np.linalg.norm(direction)
        return ParamVector.from_array(direction * self.radius / 2)


class NoisyQuadratic(SyntheticObjective):
    """f(w) = 1/2 w^T A w with a symmetric positive semi-definite A."""

    family = Family.NOISY_QUADRATIC

    def __init__(self, curvature: Sequence[float] | np.ndarray, sigma: float = 0.0, radius: float = 10.0):
        A = np.asarray(curvature, dtype=np.float64)
        if A.ndim == 1:
            A = np.diag(A)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ConfigurationError(f"Curvature must be a vector or square matrix, got shape {A.shape}", field="curvature")
        if not np.allclose(A, A.T):
            raise ConfigurationError("Curvature matrix must be symmetric", field="curvature")
        eigenvalues = np.linalg.eigvalsh(A)
        if eigenvalues[0] < -1e-12:
            raise ConfigurationError("Curvature matrix must be positive semi-definite", field="curvature")
        super().__init__(A.shape[0], sigma, radius)
        A.setflags(write=False)
        self.hessian = A
        self.eigenvalues = eigenvalues
        self.smoothness = float(eigenvalues[-1])
        if not self.smoothness > 0:
            raise ConfigurationError("Curvature must have a positive eigenvalue", field="curvature")

    def constants_on_ball(self, radius: float) -> KnownConstants:
        return KnownConstants(L=self.smoothness, G=self.smoothness * radius, sigma=self.sigma)

    def f_rows(self, W: np.ndarray) -> np.ndarray:
        return 0.5 * np.einsum("ij,ij->i", W @ self.hessian, W)

    def grad_rows(self, W: np.ndarray) -> np.ndarray:
        return W @ self.hessian


class TrigNonconvex(SyntheticObjective):
    """f(w) = 1/2 ||w||^2 + beta * sum cos(omega w_i).

    The Hessian is I - beta omega^2 diag(cos(omega w)), so L = 1 + beta omega^2.
    """

    family = Family.TRIG_NONCONVEX

    def __init__(self, dimension: int, beta: float = 0.5, omega: float = 2.0, sigma: float = 0.0, radius: float = 10.0):
        super().__init__(dimension, sigma, radius)
        if beta < 0 or omega < 0:
            raise ConfigurationError("beta and omega must be non-negative", field="beta")
        self.beta = float(beta)
        self.omega = float(omega)

    def constants_on_ball(self, radius: float) -> KnownConstants:
        L = 1.0 + self.beta * self.omega ** 2
        G = radius + self.beta * self.omega * np.sqrt(self.dimension)
        return KnownConstants(L=L, G=float(G), sigma=self.sigma)

    def f_rows(self, W: np.ndarray) -> np.ndarray:
        return 0.5 * np.sum(W * W, axis=1) + self.beta * np.sum(np.cos(self.omega * W), axis=1)

    def grad_rows(self, W: np.ndarray) -> np.ndarray:
        return W - self.beta * self.omega * np.sin(self.omega * W)


class MlpClassifier(StochasticObjective):
    """input -> hidden(tanh) -> softmax classifier with mean cross-entropy loss."""

    family = Family.MLP_CLASSIFIER

    def __init__(self, n_features: int, n_hidden: int, n_classes: int):
        if min(n_features, n_hidden) < 1 or n_classes < 2:
            raise ConfigurationError(
                f"Invalid MLP shape ({n_features}, {n_hidden}, {n_classes})", field="n_hidden"
            )
        self.n_features = int(n_features)
        self.n_hidden = int(n_hidden)
        self.n_classes = int(n_classes)
        p, h, c = self.n_features, self.n_hidden, self.n_classes
        sizes = [("hidden.weight", p * h), ("hidden.bias", h), ("output.weight", h * c), ("output.bias", c)]
        groups, offset = [], 0
        for name, length in sizes:
            groups.append(Group(name, offset, length))
            offset += length
        if offset > MAX_MLP_PARAMS:
            raise ConfigurationError(f"MLP has {offset} parameters, limit is {MAX_MLP_PARAMS}", field="n_hidden")
        self._partition = tuple(groups)
        self._d = offset

    @property
    def dimension(self) -> int:
        return self._d

    @property
    def partition(self) -> tuple[Group, ...]:
        return self._partition

    def unpack(self, values: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        p, h, c = self.n_features, self.n_hidden, self.n_classes
        g = self._partition
        W1 = values[g[0].offset:g[0].offset + g[0].length].reshape(p, h)
        b1 = values[g[1].offset:g[1].offset + g[1].length]
        W2 = values[g[2].offset:g[2].offset + g[2].length].reshape(h, c)
        b2 = values[g[3].offset:g[3].offset + g[3].length]
        return W1, b1, W2, b2

    def check_batch(self, batch: Batch) -> None:
        if batch.n_features != self.n_features:
            raise ConfigurationError(
                f"Batch has {batch.n_features} features, model expects {self.n_features}", field="n_features"
            )
        if batch.n_classes != self.n_classes:
            raise ConfigurationError(
                f"Batch declares {batch.n_classes} classes, model has {self.n_classes}", field="n_classes"
            )

    def _forward(self, values: np.ndarray, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        W1, b1, W2, b2 = self.unpack(values)
        H = np.tanh(X @ W1 + b1)
        return H, H @ W2 + b2

    def logits(self, values: np.ndarray, X: np.ndarray) -> np.ndarray:
        return self._forward(values, X)[1]

    def loss(self, values: np.ndarray, batch: Batch) -> float:
        _, Z = self._forward(values, batch.inputs)
        logp = log_softmax(Z, axis=1)
        return float(-logp[np.arange(batch.n_samples), batch.targets].mean())

    def gradient(self, values: np.ndarray, batch: Batch) -> np.ndarray:
        return self.loss_and_gradient(values, batch)[1]

    def loss_and_gradient(self, values: np.ndarray, batch: Batch) -> tuple[float, np.ndarray]:
        X, y, n = batch.inputs, batch.targets, batch.n_samples
        _, _, W2, _ = self.unpack(values)
        H, Z = self._forward(values, X)
        logp = log_softmax(Z, axis=1)
        loss = float(-logp[np.arange(n), y].mean())
        D2 = np.exp(logp)
        D2[np.arange(n), y] -= 1.0
        D2 /= n
        DH = (D2 @ W2.T) * (1.0 - H * H)
        grad = np.concatenate([(X.T @ DH).ravel(), DH.sum(axis=0), (H.T @ D2).ravel(), D2.sum(axis=0)])
        return loss, grad

    def per_sample_log_prob_grads(self, values: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Gradient of log p_w(y_i | x_i) for every row, shape (n, d)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        n = X.shape[0]
        _, _, W2, _ = self.unpack(values)
        H, Z = self._forward(values, X)
        D2 = -softmax(Z, axis=1)
        D2[np.arange(n), y] += 1.0
        DH = (D2 @ W2.T) * (1.0 - H * H)
        return np.concatenate(
            [
                np.einsum("np,nh->nph", X, DH).reshape(n, -1),
                DH,
                np.einsum("nh,nc->nhc", H, D2).reshape(n, -1),
                D2,
            ],
            axis=1,
        )

    def predict(self, values: np.ndarray, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(values, np.atleast_2d(X)), axis=1)

    def accuracy(self, values: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean(self.predict(values, X) == np.asarray(y)))

    def initial_weights(self, rng: np.random.Generator) -> ParamVector:
        # uniform in +-1/sqrt(fan_in) for each layer
        p, h, c = self.n_features, self.n_hidden, self.n_classes
        a1, a2 = 1.0 / np.sqrt(p), 1.0 / np.sqrt(h)
        values = np.concatenate(
            [
                rng.uniform(-a1, a1, p * h),
                rng.uniform(-a1, a1, h),
                rng.uniform(-a2, a2, h * c),
                rng.uniform(-a2, a2, c),
            ]
        )
        return ParamVector(values, self._partition)


class CountingObjective:
    """Delegating wrapper that counts gradient evaluations (thread-safe)."""

    def __init__(self, inner: StochasticObjective):
        self.inner = inner
        self.gradient_evaluations = 0
        self._lock = threading.Lock()

    def _count(self) -> None:
        with self._lock:
            self.gradient_evaluations += 1

    def gradient(self, values, batch):
        self._count()
        return self.inner.gradient(values, batch)

    def loss_and_gradient(self, values, batch):
        self._count()
        return self.inner.loss_and_gradient(values, batch)

    def reset(self) -> int:
        with self._lock:
            count, self.gradient_evaluations = self.gradient_evaluations, 0
        return count

    def __getattr__(self, name):
        return getattr(self.inner, name)


def _check_inputs(obj: StochasticObjective, w: ParamVector, batch: Optional[Batch] = None) -> None:
    if w.size != obj.dimension:
        raise ConfigurationError(f"Weights have length {w.size}, objective dimension is {obj.dimension}", field="dimension")
    if batch is not None:
        obj.check_batch(batch)


def _overflow(what: str, w: ParamVector) -> NumericalOverflowError:
    norms = {g.name: float(np.max(np.abs(w.group(g.name)), initial=0.0)) for g in w.partition}
    group = max(norms, key=norms.get)
    logger.error(f"Non-finite {what}; largest weights in group '{group}' (max |w| = {norms[group]:.3g})")
    return NumericalOverflowError(f"Non-finite {what}; offending weight group '{group}'", group=group)


def _require_synthetic(obj: StochasticObjective, op: str) -> None:
    if obj.family not in SYNTHETIC_FAMILIES:
        raise UnsupportedOperationError(f"{op} is unavailable for {obj.family} objectives")


def _require_classifier(obj: StochasticObjective, op: str) -> None:
    if obj.family != Family.MLP_CLASSIFIER:
        raise UnsupportedOperationError(f"{op} requires a classifier objective, got {obj.family}")


def eval_loss(obj: StochasticObjective, w: ParamVector, batch: Batch) -> float:
    """Mean loss over the batch."""
    _check_inputs(obj, w, batch)
    value = obj.loss(w.values, batch)
    if not np.isfinite(value):
        raise _overflow("loss", w)
    return float(value)


def grad(obj: StochasticObjective, w: ParamVector, batch: Batch) -> ParamVector:
    """Minibatch gradient g(w)."""
    _check_inputs(obj, w, batch)
    g = obj.gradient(w.values, batch)
    if not np.all(np.isfinite(g)):
        raise _overflow("gradient", w)
    return w.with_values(g)


def value_and_grad(obj: StochasticObjective, w: ParamVector, batch: Batch) -> tuple[float, ParamVector]:
    _check_inputs(obj, w, batch)
    value, g = obj.loss_and_gradient(w.values, batch)
    if not np.isfinite(value) or not np.all(np.isfinite(g)):
        raise _overflow("loss or gradient", w)
    return float(value), w.with_values(g)


def true_grad(obj: StochasticObjective, w: ParamVector) -> ParamVector:
    """Noiseless gradient of a synthetic objective."""
    _require_synthetic(obj, "true_grad")
    _check_inputs(obj, w)
    return w.with_values(obj.true_gradient(w.values))


def true_loss(obj: StochasticObjective, w: ParamVector) -> float:
    _require_synthetic(obj, "true_loss")
    _check_inputs(obj, w)
    return obj.true_loss(w.values)


def log_prob_grad(obj: StochasticObjective, w: ParamVector, x: np.ndarray, y: int) -> ParamVector:
    """Gradient of log p_w(y | x) for a single example."""
    _require_classifier(obj, "log_prob_grad")
    _check_inputs(obj, w)
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    if x.shape[1] != obj.n_features:
        raise ConfigurationError(f"Input has {x.shape[1]} features, model expects {obj.n_features}", field="n_features")
    if not 0 <= int(y) < obj.n_classes:
        raise ConfigurationError(f"Label {y} outside [0, {obj.n_classes})", field="targets")
    return w.with_values(obj.per_sample_log_prob_grads(w.values, x, np.array([int(y)]))[0])


@dataclass(frozen=True, eq=False)
class HvpOracle:
    """Hessian-vector products at fixed weights by central differences of the gradient.

    Synthetic objectives use the noiseless gradient; the classifier needs a
    fixed batch so that the product is well defined.
    """

    objective: StochasticObjective
    w: ParamVector
    batch: Optional[Batch] = None
    h: Optional[float] = None

    def __post_init__(self):
        _check_inputs(self.objective, self.w, self.batch)
        if not self.objective.is_synthetic and self.batch is None:
            raise ConfigurationError("HvpOracle on a classifier needs a fixed batch", field="batch")
        if self.h is None:
            object.__setattr__(self, "h", FD_EPS * (1.0 + self.w.norm()))
        if not self.h > 0:
            raise InvalidArgumentError(f"Finite-difference step must be positive, got {self.h}")

    @property
    def dimension(self) -> int:
        return self.w.size

    def gradient_at(self, values: np.ndarray) -> np.ndarray:
        if self.objective.is_synthetic:
            return self.objective.true_gradient(values)
        return self.objective.gradient(values, self.batch)

    def matvec(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        scale = float(np.linalg.norm(v))
        if scale == 0.0:
            raise InvalidArgumentError("Hessian-vector product needs a non-zero direction")
        step = self.h * (v / scale)
        w = self.w.values
        diff = self.gradient_at(w + step) - self.gradient_at(w - step)
        return diff * (scale / (2.0 * self.h))

    def as_linear_operator(self) -> LinearOperator:
        d = self.dimension
        return LinearOperator((d, d), matvec=self.matvec, dtype=np.float64)


def hvp(oracle: HvpOracle, v: ParamVector) -> ParamVector:
    if v.size != oracle.dimension:
        raise ConfigurationError(f"Direction has length {v.size}, oracle dimension is {oracle.dimension}", field="dimension")
    product = oracle.matvec(v.values)
    if not np.all(np.isfinite(product)):
        raise _overflow("Hessian-vector product", oracle.w)
    return oracle.w.with_values(product)

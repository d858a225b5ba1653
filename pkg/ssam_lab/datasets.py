"""Classifier datasets: IDX image/label pairs, labelled CSV files and Gaussian blobs."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from loguru import logger

from .errors import ConfigurationError, DatasetFormatError, RecordIOError
from .numcore import Batch

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
LABEL_COLUMN = "label"


@dataclass(frozen=True, eq=False)
class LabeledData:
    inputs: np.ndarray
    targets: np.ndarray
    n_classes: int

    def __post_init__(self):
        if self.inputs.shape[0] != self.targets.size:
            raise ConfigurationError(
                f"{self.inputs.shape[0]} inputs but {self.targets.size} targets", field="targets"
            )

    @property
    def n_samples(self) -> int:
        return int(self.targets.size)

    @property
    def n_features(self) -> int:
        return int(self.inputs.shape[1])


@dataclass(frozen=True, eq=False)
class Dataset:
    """Train/test split of one labelled source."""

    train: LabeledData
    test: LabeledData
    source: str

    @property
    def n_classes(self) -> int:
        return self.train.n_classes

    def epoch_batches(self, rng: np.random.Generator, batch_size: int) -> Iterator[Batch]:
        """One pass over the training set in a fresh seeded shuffle order."""
        order = rng.permutation(self.train.n_samples)
        for start in range(0, order.size, batch_size):
            idx = order[start:start + batch_size]
            yield Batch(self.train.inputs[idx], self.train.targets[idx], self.n_classes)

    def steps_per_epoch(self, batch_size: int) -> int:
        return -(-self.train.n_samples // batch_size)


def _read_bytes(path: Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise RecordIOError(f"Cannot read dataset {path}: {exc}", path=str(path)) from exc


def _idx_header(payload: bytes, expected_magic: int, path: Path) -> tuple[int, ...]:
    if len(payload) < 8:
        raise DatasetFormatError(f"{path}: truncated IDX header", offset=len(payload))
    (magic,) = struct.unpack_from(">I", payload, 0)
    if magic != expected_magic:
        raise DatasetFormatError(f"{path}: bad IDX magic 0x{magic:08x} at byte 0, expected 0x{expected_magic:08x}", offset=0)
    n_dims = expected_magic & 0xFF
    header_size = 4 + 4 * n_dims
    if len(payload) < header_size:
        raise DatasetFormatError(f"{path}: truncated IDX dimensions", offset=len(payload))
    dims = struct.unpack_from(f">{n_dims}I", payload, 4)
    expected = header_size + int(np.prod(dims))
    if len(payload) != expected:
        offset = min(len(payload), expected)
        raise DatasetFormatError(f"{path}: IDX payload has {len(payload)} bytes, expected {expected}", offset=offset)
    return dims


def read_idx_images(path: Path) -> np.ndarray:
    """(n, rows * cols) array scaled to [0, 1]."""
    payload = _read_bytes(path)
    n, rows, cols = _idx_header(payload, IDX_IMAGES_MAGIC, path)
    pixels = np.frombuffer(payload, dtype=np.uint8, offset=16)
    return pixels.reshape(n, rows * cols).astype(np.float64) / 255.0


def read_idx_labels(path: Path) -> np.ndarray:
    payload = _read_bytes(path)
    _idx_header(payload, IDX_LABELS_MAGIC, path)
    return np.frombuffer(payload, dtype=np.uint8, offset=8).astype(np.int64)


def read_csv(path: Path) -> tuple[np.ndarray, np.ndarray]:
    """Header row required; the 'label' column holds integer classes, the rest are features."""
    try:
        fh = Path(path).open(newline="", encoding="utf-8")
    except OSError as exc:
        raise RecordIOError(f"Cannot read dataset {path}: {exc}", path=str(path)) from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DatasetFormatError(f"{path}: empty file", line=1)
        header = [h.strip() for h in header]
        if LABEL_COLUMN not in header:
            raise DatasetFormatError(f"{path}: no '{LABEL_COLUMN}' column in header", line=1)
        label_at = header.index(LABEL_COLUMN)
        inputs, targets = [], []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetFormatError(f"{path}: line {line} has {len(row)} fields, header has {len(header)}", line=line)
            try:
                label = int(row[label_at])
                features = [float(v) for i, v in enumerate(row) if i != label_at]
            except ValueError as exc:
                raise DatasetFormatError(f"{path}: line {line}: {exc}", line=line) from exc
            targets.append(label)
            inputs.append(features)
    if not targets:
        raise DatasetFormatError(f"{path}: no data rows", line=2)
    return np.asarray(inputs, dtype=np.float64), np.asarray(targets, dtype=np.int64)


def _check_labels(targets: np.ndarray, n_classes: Optional[int], path: Path, csv_rows: bool) -> int:
    if n_classes is None:
        n_classes = max(2, int(targets.max()) + 1)
    bad = np.flatnonzero((targets < 0) | (targets >= n_classes))
    if bad.size:
        i = int(bad[0])
        if csv_rows:
            raise DatasetFormatError(f"{path}: label {targets[i]} on line {i + 2} outside [0, {n_classes})", line=i + 2)
        raise DatasetFormatError(f"{path}: label {targets[i]} at byte {8 + i} outside [0, {n_classes})", offset=8 + i)
    return n_classes


def load_dataset(
    path: Path, fmt: str, labels_path: Optional[Path] = None, n_classes: Optional[int] = None
) -> LabeledData:
    """Read an IDX pair or a labelled CSV; labels must lie in [0, n_classes)."""
    path = Path(path)
    if fmt == "idx":
        if labels_path is None:
            raise ConfigurationError("IDX datasets need a labels path", field="labels")
        inputs = read_idx_images(path)
        targets = read_idx_labels(Path(labels_path))
        if inputs.shape[0] != targets.size:
            raise DatasetFormatError(f"{path}: {inputs.shape[0]} images but {targets.size} labels", offset=4)
        n_classes = _check_labels(targets, n_classes, Path(labels_path), csv_rows=False)
    elif fmt == "csv":
        inputs, targets = read_csv(path)
        n_classes = _check_labels(targets, n_classes, path, csv_rows=True)
    else:
        raise ConfigurationError(f"Unknown dataset format '{fmt}'", field="dataset_format")
    logger.info(f"Loaded {targets.size} samples ({inputs.shape[1]} features, {n_classes} classes) from {path}")
    return LabeledData(inputs, targets, n_classes)


def make_blobs(
    n_samples: int, n_features: int, n_classes: int, separation: float, seed: int
) -> LabeledData:
    """Isotropic unit-variance Gaussian clusters with centres drawn at scale ``separation``."""
    rng = np.random.default_rng([seed, 7])
    centres = rng.standard_normal((n_classes, n_features)) * separation
    targets = np.arange(n_samples) % n_classes
    rng.shuffle(targets)
    inputs = centres[targets] + rng.standard_normal((n_samples, n_features))
    return LabeledData(inputs, targets.astype(np.int64), n_classes)


def train_test_split(data: LabeledData, test_fraction: float, seed: int, source: str = "") -> Dataset:
    """Seeded split holding out round(test_fraction * n) samples (at least one on each side)."""
    n = data.n_samples
    if n < 2:
        raise ConfigurationError(f"Need at least 2 samples to split, got {n}", field="dataset")
    n_test = min(n - 1, max(1, int(round(test_fraction * n))))
    order = np.random.default_rng([seed, 11]).permutation(n)
    test_idx, train_idx = np.sort(order[:n_test]), np.sort(order[n_test:])
    return Dataset(
        train=LabeledData(data.inputs[train_idx], data.targets[train_idx], data.n_classes),
        test=LabeledData(data.inputs[test_idx], data.targets[test_idx], data.n_classes),
        source=source,
    )

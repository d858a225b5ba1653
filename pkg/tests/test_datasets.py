import struct

import numpy as np
import pytest

from ssam_lab.datasets import load_dataset, make_blobs, read_idx_images, train_test_split
from ssam_lab.errors import ConfigurationError, DatasetFormatError, RecordIOError


def _write_idx_pair(tmp_path, n=10, rows=28, cols=28, labels=None):
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, size=(n, rows, cols), dtype=np.uint8)
    images = tmp_path / "images.idx"
    images.write_bytes(struct.pack(">IIII", 0x00000803, n, rows, cols) + pixels.tobytes())
    labels = np.arange(n) % 10 if labels is None else np.asarray(labels)
    label_file = tmp_path / "labels.idx"
    label_file.write_bytes(struct.pack(">II", 0x00000801, n) + labels.astype(np.uint8).tobytes())
    return images, label_file, pixels


def test_toy_csv(tmp_path):
    path = tmp_path / "toy.csv"
    path.write_text("x1,x2,label\n0.5,1.0,0\n-0.5,2.0,1\n1.5,0.0,1\n2.0,-1.0,0\n")
    data = load_dataset(path, "csv")
    assert data.n_samples == 4
    assert data.n_features == 2
    assert data.n_classes == 2
    assert data.targets.tolist() == [0, 1, 1, 0]
    np.testing.assert_allclose(data.inputs[1], [-0.5, 2.0])


def test_label_column_may_come_first(tmp_path):
    path = tmp_path / "toy.csv"
    path.write_text("label,a\n1,3.0\n0,4.0\n")
    data = load_dataset(path, "csv")
    assert data.targets.tolist() == [1, 0]
    np.testing.assert_allclose(data.inputs[:, 0], [3.0, 4.0])


def test_idx_pair(tmp_path):
    images, labels, pixels = _write_idx_pair(tmp_path)
    data = load_dataset(images, "idx", labels_path=labels, n_classes=10)
    assert data.inputs.shape == (10, 784)
    assert data.inputs.min() >= 0.0 and data.inputs.max() <= 1.0
    np.testing.assert_allclose(data.inputs[3], pixels[3].reshape(-1) / 255.0)
    assert data.targets.tolist() == list(range(10))


def test_out_of_range_csv_label(tmp_path):
    path = tmp_path / "toy.csv"
    path.write_text("a,label\n1.0,0\n2.0,2\n")
    with pytest.raises(DatasetFormatError) as excinfo:
        load_dataset(path, "csv", n_classes=2)
    assert excinfo.value.line == 3


def test_out_of_range_idx_label(tmp_path):
    images, labels, _ = _write_idx_pair(tmp_path, n=4, rows=2, cols=2, labels=[0, 1, 5, 1])
    with pytest.raises(DatasetFormatError) as excinfo:
        load_dataset(images, "idx", labels_path=labels, n_classes=3)
    assert excinfo.value.offset == 10


def test_ragged_csv_line(tmp_path):
    path = tmp_path / "toy.csv"
    path.write_text("a,b,label\n1,2,0\n1,0\n")
    with pytest.raises(DatasetFormatError) as excinfo:
        load_dataset(path, "csv")
    assert excinfo.value.line == 3
    assert "line 3" in str(excinfo.value)


def test_csv_without_label_column(tmp_path):
    path = tmp_path / "toy.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(DatasetFormatError):
        load_dataset(path, "csv")


def test_bad_idx_magic(tmp_path):
    path = tmp_path / "images.idx"
    path.write_bytes(struct.pack(">IIII", 0x00000802, 1, 1, 1) + b"\x00")
    with pytest.raises(DatasetFormatError) as excinfo:
        read_idx_images(path)
    assert excinfo.value.offset == 0


def test_truncated_idx_payload(tmp_path):
    path = tmp_path / "images.idx"
    path.write_bytes(struct.pack(">IIII", 0x00000803, 2, 2, 2) + b"\x00" * 5)
    with pytest.raises(DatasetFormatError) as excinfo:
        read_idx_images(path)
    assert excinfo.value.offset == 21


def test_missing_file_is_io_error(tmp_path):
    with pytest.raises(RecordIOError):
        load_dataset(tmp_path / "nothing.csv", "csv")


def test_idx_requires_labels(tmp_path):
    images, _, _ = _write_idx_pair(tmp_path, n=2, rows=2, cols=2)
    with pytest.raises(ConfigurationError):
        load_dataset(images, "idx")


def test_blobs_are_seeded_and_balanced():
    a = make_blobs(100, 5, 2, 1.5, seed=3)
    b = make_blobs(100, 5, 2, 1.5, seed=3)
    assert np.array_equal(a.inputs, b.inputs)
    assert np.bincount(a.targets).tolist() == [50, 50]
    assert not np.array_equal(a.inputs, make_blobs(100, 5, 2, 1.5, seed=4).inputs)


def test_split_holds_out_a_fifth():
    data = make_blobs(500, 4, 2, 1.0, seed=0)
    split = train_test_split(data, 0.2, seed=1, source="blobs")
    assert split.test.n_samples == 100
    assert split.train.n_samples == 400
    assert split.steps_per_epoch(32) == 13
    batches = list(split.epoch_batches(np.random.default_rng(0), 32))
    assert sum(b.n_samples for b in batches) == 400
    assert len(batches) == 13

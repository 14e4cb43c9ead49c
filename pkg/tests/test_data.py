import numpy as np
import pytest

from dynprune.data import IMAGE_MAGIC, LABEL_MAGIC, MNIST_MEAN, MNIST_STD, load_mnist, normalize, parse_idx
from dynprune.errors import DataError

from conftest import idx_bytes, write_idx_set


def test_magic_constants():
    assert IMAGE_MAGIC == 2051 and LABEL_MAGIC == 2049


def test_parse_round_trip():
    a = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    np.testing.assert_array_equal(parse_idx(idx_bytes(a, IMAGE_MAGIC), IMAGE_MAGIC), a)


def test_parse_errors():
    a = np.zeros((2, 3, 4), dtype=np.uint8)
    raw = idx_bytes(a, IMAGE_MAGIC)
    with pytest.raises(DataError, match="magic"):
        parse_idx(raw, LABEL_MAGIC)
    with pytest.raises(DataError, match="truncated"):
        parse_idx(raw[:6], IMAGE_MAGIC)
    with pytest.raises(DataError, match="truncated"):
        parse_idx(raw[:10], IMAGE_MAGIC)
    with pytest.raises(DataError, match="payload"):
        parse_idx(raw[:-1], IMAGE_MAGIC)


def test_load_splits_and_normalization(tmp_path):
    write_idx_set(str(tmp_path))
    d = load_mnist(str(tmp_path), val_size=4)
    assert d.train_x.shape == (16, 1, 28, 28) and d.val_x.shape == (4, 1, 28, 28)
    assert d.test_x.shape == (5, 1, 28, 28) and d.train_x.dtype == np.float64
    np.testing.assert_allclose(normalize(np.zeros((1, 28, 28)))[0, 0, 0, 0], -MNIST_MEAN / MNIST_STD)


def test_gzip_files(tmp_path):
    write_idx_set(str(tmp_path), gz=True)
    assert load_mnist(str(tmp_path), val_size=4).train_y.shape == (16,)


def test_count_mismatch(tmp_path):
    write_idx_set(str(tmp_path))
    (tmp_path / "t10k-labels-idx1-ubyte").write_bytes(idx_bytes(np.zeros(4), LABEL_MAGIC))
    with pytest.raises(DataError, match="labels"):
        load_mnist(str(tmp_path), val_size=4, verify=False)


def test_truncated_file_gives_no_dataset(tmp_path):
    files = write_idx_set(str(tmp_path))
    (tmp_path / "train-images-idx3-ubyte").write_bytes(files["train-images-idx3-ubyte"][:-100])
    with pytest.raises(DataError):
        load_mnist(str(tmp_path), val_size=4)


def test_checksums_recorded_then_enforced(tmp_path):
    write_idx_set(str(tmp_path))
    load_mnist(str(tmp_path), val_size=4)
    assert (tmp_path / ".checksums").exists()
    write_idx_set(str(tmp_path), seed=1)
    with pytest.raises(DataError, match="checksum"):
        load_mnist(str(tmp_path), val_size=4)


def test_batches_deterministic(tmp_path):
    write_idx_set(str(tmp_path))
    d = load_mnist(str(tmp_path), val_size=4)
    a = [y for _, y in d.batches(5, np.random.default_rng(3))]
    b = [y for _, y in d.batches(5, np.random.default_rng(3))]
    assert all(np.array_equal(u, v) for u, v in zip(a, b))


def test_canonical_mnist(mnist):
    assert (len(mnist.train_y), len(mnist.val_y), len(mnist.test_y)) == (55000, 5000, 10000)
    assert mnist.train_y[0] == 5
    assert mnist.train_y.max() == 9 and mnist.train_y.min() == 0

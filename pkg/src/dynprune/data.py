"""MNIST IDX reader and the train/val/test handle used by the pipeline."""
from __future__ import annotations

import gzip
import hashlib
import logging
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803  # 2051
LABEL_MAGIC = 0x00000801  # 2049
MNIST_MEAN = 0.1307
MNIST_STD = 0.3081
VAL_SIZE = 5000

FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

CHECKSUM_FILE = ".checksums"


def _open(path: str) -> bytes:
    for candidate in (path, path + ".gz"):
        if os.path.exists(candidate):
            opener = gzip.open if candidate.endswith(".gz") else open
            with opener(candidate, "rb") as fh:
                return fh.read()
    raise DataError(f"missing IDX file {path}")


def parse_idx(raw: bytes, expected_magic: int, name: str = "idx") -> np.ndarray:
    """Parse an unsigned-byte IDX payload (big-endian header)."""
    if len(raw) < 8:
        raise DataError(f"{name}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataError(f"{name}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{name}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise DataError(f"{name}: payload has {len(raw) - header} bytes, header promises {count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


@dataclass
class DatasetHandle:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    mean: float = MNIST_MEAN
    std: float = MNIST_STD
    seed: int = 0

    def subset(self, n_train: int | None = None, n_val: int | None = None, n_test: int | None = None) -> "DatasetHandle":
        """Leading slices of each split (for quick runs)."""
        return DatasetHandle(
            self.train_x[:n_train], self.train_y[:n_train],
            self.val_x[:n_val], self.val_y[:n_val],
            self.test_x[:n_test], self.test_y[:n_test],
            self.mean, self.std, self.seed,
        )

    def batches(self, batch_size: int, rng: np.random.Generator):
        order = rng.permutation(len(self.train_y))
        for s in range(0, len(order), batch_size):
            idx = order[s : s + batch_size]
            yield self.train_x[idx], self.train_y[idx]


def normalize(images: np.ndarray, mean: float = MNIST_MEAN, std: float = MNIST_STD) -> np.ndarray:
    x = images.astype(np.float64) / 255.0
    return ((x - mean) / std)[:, None, :, :]


def load_mnist(directory: str, val_size: int = VAL_SIZE, verify: bool = True) -> DatasetHandle:
    """Read the four MNIST IDX files (optionally gzipped) from ``directory``.

    The last ``val_size`` training images form the validation split. File
    digests are recorded next to the data on the first successful load and
    checked on later loads.
    """
    raw = {k: _open(os.path.join(directory, f)) for k, f in FILES.items()}
    arrays = {
        k: parse_idx(v, IMAGE_MAGIC if k.endswith("images") else LABEL_MAGIC, FILES[k]) for k, v in raw.items()
    }
    for split in ("train", "test"):
        n_img, n_lab = len(arrays[f"{split}_images"]), len(arrays[f"{split}_labels"])
        if n_img != n_lab:
            raise DataError(f"{split}: {n_img} images but {n_lab} labels")
        if arrays[f"{split}_images"].ndim != 3:
            raise DataError(f"{split}: images must be 3-d, got {arrays[f'{split}_images'].shape}")
        if arrays[f"{split}_labels"].max(initial=0) > 9:
            raise DataError(f"{split}: label out of range")
    if verify:
        _check_digests(directory, raw)

    train_x = normalize(arrays["train_images"])
    train_y = arrays["train_labels"].astype(np.int64)
    if not 0 <= val_size < len(train_y):
        raise DataError(f"validation size {val_size} incompatible with {len(train_y)} training images")
    cut = len(train_y) - val_size
    return DatasetHandle(
        train_x[:cut], train_y[:cut], train_x[cut:], train_y[cut:],
        normalize(arrays["test_images"]), arrays["test_labels"].astype(np.int64),
    )


def _check_digests(directory: str, raw: dict[str, bytes]) -> None:
    digests = {k: hashlib.sha256(v).hexdigest() for k, v in raw.items()}
    path = os.path.join(directory, CHECKSUM_FILE)
    if os.path.exists(path):
        with open(path) as fh:
            stored = dict(line.strip().split(" ", 1) for line in fh if line.strip())
        for k, d in digests.items():
            if k in stored and stored[k] != d:
                raise DataError(f"{FILES[k]}: checksum changed since first load")
        return
    try:
        with open(path, "w") as fh:
            fh.writelines(f"{k} {d}\n" for k, d in sorted(digests.items()))
    except OSError:
        log.debug("could not record checksums in %s", directory)

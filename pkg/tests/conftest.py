import os

import numpy as np
import pytest

from dynprune._alloc import tune_allocator

tune_allocator()

MNIST_DIR = os.environ.get("DYNPRUNE_MNIST", "/root/data/mnist")


def numeric_grad(f, x: np.ndarray, h: float = 1e-5, coords=None) -> np.ndarray:
    """Central differences of scalar f at x (optionally only at ``coords``)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size) if coords is None else coords:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mnist():
    from dynprune.data import load_mnist

    if not os.path.exists(os.path.join(MNIST_DIR, "train-images-idx3-ubyte")) and not os.path.exists(
        os.path.join(MNIST_DIR, "train-images-idx3-ubyte.gz")
    ):
        pytest.skip(f"MNIST not found in {MNIST_DIR}")
    return load_mnist(MNIST_DIR)


def idx_bytes(arr: np.ndarray, magic: int) -> bytes:
    import struct

    return struct.pack(f">I{arr.ndim}I", magic, *arr.shape) + arr.astype(np.uint8).tobytes()


def write_idx_set(d, n_train: int = 20, n_test: int = 5, seed: int = 0, gz: bool = False) -> dict:
    """MNIST-layout files with a class-dependent bright square on noise."""
    import gzip

    from dynprune.data import IMAGE_MAGIC, LABEL_MAGIC

    r = np.random.default_rng(seed)

    def images(labels):
        x = r.integers(0, 60, (len(labels), 28, 28))
        for i, c in enumerate(labels):
            row, col = 2 + 8 * (c // 4), 2 + 6 * (c % 4)
            x[i, row : row + 6, col : col + 6] = 255
        return x

    ytr, yte = r.integers(0, 10, n_train), r.integers(0, 10, n_test)
    files = {
        "train-images-idx3-ubyte": idx_bytes(images(ytr), IMAGE_MAGIC),
        "train-labels-idx1-ubyte": idx_bytes(ytr, LABEL_MAGIC),
        "t10k-images-idx3-ubyte": idx_bytes(images(yte), IMAGE_MAGIC),
        "t10k-labels-idx1-ubyte": idx_bytes(yte, LABEL_MAGIC),
    }
    for name, raw in files.items():
        if gz:
            with gzip.open(os.path.join(d, name + ".gz"), "wb") as fh:
                fh.write(raw)
        else:
            with open(os.path.join(d, name), "wb") as fh:
                fh.write(raw)
    return files


@pytest.fixture(scope="session")
def synthetic_mnist(tmp_path_factory) -> str:
    """Directory with 5400 training and 300 test images (enough for the 5000-image validation split)."""
    d = tmp_path_factory.mktemp("synthetic_mnist")
    write_idx_set(str(d), n_train=5400, n_test=300, seed=7)
    return str(d)


# -- acceptance reporting -----------------------------------------------------

_ACCEPTANCE: dict[str, tuple[str, str, float, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion, reported at the end of the run")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.skipped):
        return
    number, title = mark.args
    status = "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL"
    detail = item.user_properties and dict(item.user_properties).get("detail", "") or ""
    _ACCEPTANCE[str(number)] = (title, status, rep.duration, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE, key=lambda k: (int(k.rstrip("abcdef")), k)):
        title, status, secs, detail = _ACCEPTANCE[n]
        line = f"criterion {n}: {status}  {title}  ({secs:.1f}s)"
        terminalreporter.write_line(line + (f"  {detail}" if detail else ""))

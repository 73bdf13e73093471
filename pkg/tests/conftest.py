import os
from pathlib import Path

import numpy as np
import pytest

from dcil.data import Dataset
from dcil.model import BatchNorm, Classifier, Conv, ReLU, AvgPool, Flatten, Linear, build

MNIST_DIR = Path(os.environ.get("DCIL_MNIST_DIR", "/root/data/mnist"))


def toy_dataset(n=64, shape=(1, 6, 6), classes=3, seed=0, split="train", dtype=np.float64) -> Dataset:
    """Gaussian blobs with a class-dependent mean image: learnable in a few steps."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    centers = np.random.default_rng(1234).standard_normal((classes,) + shape)
    images = (centers[labels] + 0.5 * rng.standard_normal((n,) + shape)).astype(dtype)
    c = shape[0]
    return Dataset(images, labels.astype(np.int64), split, np.zeros(c), np.ones(c), classes, "toy")


def tiny_cnn_spec(classes=3):
    return [Conv(3, 3, 1, 1), BatchNorm(), ReLU(), AvgPool(2), Conv(4, 3, 1, 1), BatchNorm(), ReLU(),
            Classifier(classes)]


def tiny_cnn(seed=0, classes=3, shape=(1, 6, 6)):
    return build(tiny_cnn_spec(classes), shape, seed=seed)


def two_layer_mlp(seed=0, features=5, hidden=4, classes=3):
    return build([Flatten(), Linear(hidden), ReLU(), Linear(hidden), Classifier(classes)], (features,), seed=seed)


@pytest.fixture
def toy():
    return toy_dataset()


@pytest.fixture
def mnist_dir():
    if not (MNIST_DIR / "train-images-idx3-ubyte").exists() and not (MNIST_DIR / "train-images-idx3-ubyte.gz").exists():
        pytest.skip(f"MNIST files not found in {MNIST_DIR} (set DCIL_MNIST_DIR)")
    return MNIST_DIR


def toy_config(**kw):
    from dcil.config import TrainConfig

    base = dict(arch="mlp", epochs=3, batch_size=16, precision=64, ramp_epochs=2, frequency=2,
                target_sparsity=0.8, lr=0.05, data_dir="unused", out_dir="unused")
    base.update(kw)
    return TrainConfig(**base)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.NAMES):
        if n in mod.RESULTS:
            ok, detail = mod.RESULTS[n]
            terminalreporter.write_line(f"criterion {n:2d} {mod.NAMES[n]}: {'PASS' if ok else 'FAIL'} ({detail})")
        else:
            terminalreporter.write_line(f"criterion {n:2d} {mod.NAMES[n]}: NOT RUN")

import struct
from pathlib import Path

import numpy as np
import pytest

from scop.core.logging import setup_logging
from scop.models import layers as L
from scop.models.network import NetworkSpec
from scop.schemas.experiment import ExperimentConfig


def idx_images(images: np.ndarray) -> bytes:
    count, rows, cols = images.shape
    return struct.pack(">IIII", 0x00000803, count, rows, cols) + images.astype(np.uint8).tobytes()


def idx_labels(labels: np.ndarray) -> bytes:
    return struct.pack(">II", 0x00000801, labels.shape[0]) + labels.astype(np.uint8).tobytes()


def cifar_records(images: np.ndarray, labels: np.ndarray) -> bytes:
    rows = np.concatenate([labels.astype(np.uint8)[:, None], images.reshape(len(labels), -1).astype(np.uint8)], axis=1)
    return rows.tobytes()


def write_mnist(directory: Path, rng: np.random.Generator, train: int = 48, test: int = 16, size: int = 8) -> Path:
    """IDX files whose labels are readable from the mean brightness of the top rows."""
    directory.mkdir(parents=True, exist_ok=True)
    for split, count, (image_name, label_name) in (
        ("train", train, ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")),
        ("test", test, ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")),
    ):
        labels = rng.integers(0, 10, size=count)
        images = rng.integers(0, 64, size=(count, size, size))
        images[:, :2, :] += (labels * 19)[:, None, None]
        (directory / image_name).write_bytes(idx_images(images))
        (directory / label_name).write_bytes(idx_labels(labels))
    return directory


@pytest.fixture(autouse=True, scope="session")
def quiet_logging():
    setup_logging("WARNING")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def mnist_dir(tmp_path):
    return write_mnist(tmp_path / "data", np.random.default_rng(7))


@pytest.fixture
def cifar_dir(tmp_path):
    directory = tmp_path / "cifar" / "cifar-10-batches-bin"
    directory.mkdir(parents=True)
    gen = np.random.default_rng(11)
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        labels = gen.integers(0, 10, size=3)
        images = gen.integers(0, 256, size=(3, 3, 32, 32))
        (directory / name).write_bytes(cifar_records(images, labels))
    return directory.parent


@pytest.fixture
def tiny_cnn(rng):
    """conv(2->4) BN ReLU conv(4->6) BN ReLU avgpool flatten linear(6->3); both convs prunable."""
    return NetworkSpec(
        layers=(
            L.conv(2, 4, 3, rng, padding=1, prunable=True),
            L.batchnorm(4),
            L.activation("relu"),
            L.conv(4, 6, 3, rng, padding=1, prunable=True),
            L.batchnorm(6),
            L.activation("relu"),
            L.avgpool(),
            L.flatten(),
            L.linear(6, 3, rng),
        ),
        input_shape=(2, 5, 5),
        name="tiny",
    )


@pytest.fixture
def flat_cnn(rng):
    """A prunable conv feeding a linear layer through flatten (no global pool)."""
    return NetworkSpec(
        layers=(
            L.conv(1, 3, 3, rng, prunable=True),
            L.batchnorm(3),
            L.activation("relu"),
            L.flatten(),
            L.linear(3 * 2 * 2, 2, rng),
        ),
        input_shape=(1, 4, 4),
        name="flat",
    )


@pytest.fixture
def quick_config():
    return ExperimentConfig(
        name="quick",
        seed=3,
        arch="small-cnn",
        dataset="mnist",
        pretrain={"epochs": 1, "batch": 16, "lr": 0.05},
        selection={"epochs": 1, "batch": 16, "lr": 0.01},
        prune={"rate": 0.5},
        finetune={"epochs": 1, "batch": 16, "lr": 0.01},
    )

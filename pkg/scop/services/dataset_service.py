"""Dataset ingestion: MNIST IDX, CIFAR-10 binary batches and planted data.

Images are returned as float32 NCHW arrays scaled to [0, 1] and then
normalized per channel with train-split statistics. The same
:class:`Normalization` is recorded on both splits so knockoffs can be fit
in the space the network consumes.
"""

import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, NamedTuple, Optional, Tuple

import numpy as np
from loguru import logger

from ..core.exceptions import BadMagicError, FormatError, TruncatedFileError
from ..core.seeding import stream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073
CIFAR_SHAPE = (3, 32, 32)

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
    "test": ("test_batch.bin",),
}


@dataclass(frozen=True)
class Normalization:
    """Per-channel mean/std applied as (x - mean) / std."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, images: np.ndarray) -> "Normalization":
        mean = images.mean(axis=(0, 2, 3), dtype=np.float64)
        std = images.std(axis=(0, 2, 3), dtype=np.float64)
        return cls(mean=mean, std=np.where(std > 0, std, 1.0))

    def apply(self, images: np.ndarray) -> np.ndarray:
        view = (1, -1, 1, 1)
        out = (images - self.mean.reshape(view)) / self.std.reshape(view)
        return out.astype(np.float32)


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str
    num_classes: int
    normalization: Optional[Normalization] = None

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise FormatError(f"{self.split} images must be N x C x H x W, got shape {images.shape}")
        if labels.shape != (images.shape[0],):
            raise FormatError(f"{self.split} split has {images.shape[0]} images but {labels.shape[0]} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise FormatError(f"{self.split} labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return tuple(int(s) for s in self.images.shape[1:])

    @property
    def dim(self) -> int:
        return int(np.prod(self.input_shape))

    def head(self, count: Optional[int]) -> "Dataset":
        """The first ``count`` examples (all of them when ``count`` is None)."""
        if count is None or count >= len(self):
            return self
        return replace(self, images=self.images[:count], labels=self.labels[:count])

    def channel_range(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.images.min(axis=(0, 2, 3)), self.images.max(axis=(0, 2, 3))


def iter_batches(count: int, batch: int, rng: Optional[np.random.Generator] = None) -> Iterator[np.ndarray]:
    """Index arrays covering ``range(count)``; shuffled when ``rng`` is given."""
    order = rng.permutation(count) if rng is not None else np.arange(count)
    for start in range(0, count, batch):
        yield order[start:start + batch]


# -- MNIST ------------------------------------------------------------------

def _read_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise TruncatedFileError(f"{path.name}: corrupt gzip stream ({exc})") from None
    return raw


def _resolve(directory: Path, name: str) -> Path:
    for candidate in (directory / name, directory / f"{name}.gz"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{name} not found in {directory}")


def parse_idx_images(payload: bytes, source: str = "images") -> np.ndarray:
    if len(payload) < 16:
        raise TruncatedFileError(f"{source}: IDX header needs 16 bytes, file has {len(payload)}")
    magic, count, rows, cols = struct.unpack(">IIII", payload[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise BadMagicError(f"{source}: expected IDX image magic 0x{IDX_IMAGES_MAGIC:08x}, found 0x{magic:08x}")
    expected = count * rows * cols
    if len(payload) - 16 < expected:
        raise TruncatedFileError(f"{source}: header promises {expected} pixel bytes, file has {len(payload) - 16}")
    if len(payload) - 16 > expected:
        raise FormatError(f"{source}: {len(payload) - 16 - expected} trailing bytes after the last image")
    return np.frombuffer(payload, dtype=np.uint8, count=expected, offset=16).reshape(count, rows, cols)


def parse_idx_labels(payload: bytes, source: str = "labels") -> np.ndarray:
    if len(payload) < 8:
        raise TruncatedFileError(f"{source}: IDX header needs 8 bytes, file has {len(payload)}")
    magic, count = struct.unpack(">II", payload[:8])
    if magic != IDX_LABELS_MAGIC:
        raise BadMagicError(f"{source}: expected IDX label magic 0x{IDX_LABELS_MAGIC:08x}, found 0x{magic:08x}")
    if len(payload) - 8 < count:
        raise TruncatedFileError(f"{source}: header promises {count} labels, file has {len(payload) - 8}")
    if len(payload) - 8 > count:
        raise FormatError(f"{source}: {len(payload) - 8 - count} trailing bytes after the last label")
    labels = np.frombuffer(payload, dtype=np.uint8, count=count, offset=8)
    if labels.size and labels.max() > 9:
        raise FormatError(f"{source}: label value {int(labels.max())} outside 0..9")
    return labels


def _mnist_split(directory: Path, split: str) -> Tuple[np.ndarray, np.ndarray]:
    image_name, label_name = MNIST_FILES[split]
    images = parse_idx_images(_read_bytes(_resolve(directory, image_name)), image_name)
    labels = parse_idx_labels(_read_bytes(_resolve(directory, label_name)), label_name)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{split}: {images.shape[0]} images but {labels.shape[0]} labels")
    return images[:, None, :, :].astype(np.float32) / 255.0, labels


def load_mnist(directory: Path) -> Tuple[Dataset, Dataset]:
    directory = Path(directory)
    train_x, train_y = _mnist_split(directory, "train")
    test_x, test_y = _mnist_split(directory, "test")
    norm = Normalization.fit(train_x)
    logger.info(f"Loaded MNIST from {directory}: {len(train_y)} train / {len(test_y)} test")
    return (
        Dataset(norm.apply(train_x), train_y, "train", 10, norm),
        Dataset(norm.apply(test_x), test_y, "test", 10, norm),
    )


# -- CIFAR-10 -----------------------------------------------------------------

def parse_cifar_records(payload: bytes, source: str = "batch") -> Tuple[np.ndarray, np.ndarray]:
    if len(payload) % CIFAR_RECORD_BYTES:
        raise TruncatedFileError(
            f"{source}: size {len(payload)} is not a multiple of the {CIFAR_RECORD_BYTES}-byte record"
        )
    records = np.frombuffer(payload, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0]
    if labels.size and labels.max() > 9:
        raise FormatError(f"{source}: label value {int(labels.max())} outside 0..9")
    return records[:, 1:].reshape(-1, *CIFAR_SHAPE), labels


def _cifar_split(directory: Path, split: str) -> Tuple[np.ndarray, np.ndarray]:
    images, labels = [], []
    for name in CIFAR_FILES[split]:
        x, y = parse_cifar_records(_read_bytes(_resolve(directory, name)), name)
        images.append(x)
        labels.append(y)
    return np.concatenate(images).astype(np.float32) / 255.0, np.concatenate(labels)


def load_cifar10(directory: Path) -> Tuple[Dataset, Dataset]:
    directory = Path(directory)
    nested = directory / "cifar-10-batches-bin"
    if nested.is_dir():
        directory = nested
    train_x, train_y = _cifar_split(directory, "train")
    test_x, test_y = _cifar_split(directory, "test")
    norm = Normalization.fit(train_x)
    logger.info(f"Loaded CIFAR-10 from {directory}: {len(train_y)} train / {len(test_y)} test")
    return (
        Dataset(norm.apply(train_x), train_y, "train", 10, norm),
        Dataset(norm.apply(test_x), test_y, "test", 10, norm),
    )


def load_dataset(name: str, directory: Path) -> Tuple[Dataset, Dataset]:
    if name == "mnist":
        return load_mnist(Path(directory) / "mnist" if (Path(directory) / "mnist").is_dir() else directory)
    if name == "cifar10":
        return load_cifar10(Path(directory) / "cifar10" if (Path(directory) / "cifar10").is_dir() else directory)
    raise ValueError(f"Unknown dataset {name!r}. Valid datasets are: mnist, cifar10")


# -- planted ------------------------------------------------------------------

class PlantedData(NamedTuple):
    dataset: Dataset
    signal_mask: np.ndarray
    projections: np.ndarray


def planted_labels(inputs: np.ndarray, signal_mask: np.ndarray, projections: np.ndarray) -> np.ndarray:
    """argmax_k of the signal coordinates projected on each class direction."""
    flat = inputs.reshape(inputs.shape[0], -1).astype(np.float64)
    return np.argmax(flat[:, signal_mask] @ projections.T, axis=1)


def make_planted_dataset(seed: int, n: int, signal_dim: int = 4, noise_dim: int = 12,
                         num_classes: int = 4, split: str = "train") -> PlantedData:
    """Standard-normal inputs of ``signal_dim + noise_dim`` channels (1x1 pixels)
    whose labels depend only on the channels flagged in ``signal_mask``.

    The mask and class projections depend on ``seed`` alone, so train and test
    splits share them.
    """
    if n < 1 or signal_dim < 1 or noise_dim < 1 or num_classes < 2:
        raise ValueError("planted data needs n, signal_dim, noise_dim >= 1 and at least 2 classes")
    dim = signal_dim + noise_dim
    layout = stream(seed, "planted", "layout")
    signal_mask = np.zeros(dim, dtype=bool)
    signal_mask[layout.choice(dim, size=signal_dim, replace=False)] = True
    projections = layout.standard_normal((num_classes, signal_dim))
    projections /= np.linalg.norm(projections, axis=1, keepdims=True)

    inputs = stream(seed, "planted", split).standard_normal((n, dim)).astype(np.float32)
    labels = planted_labels(inputs, signal_mask, projections)
    dataset = Dataset(inputs.reshape(n, dim, 1, 1), labels, split, num_classes)
    return PlantedData(dataset, signal_mask, projections)

"""Supervised training and evaluation (pretrain and finetune stages)."""

from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
from loguru import logger

from ..core import functional as F
from ..core.exceptions import TrainingDivergedError
from ..core.optim import SGDState, cosine_lr, sgd_step
from ..core.seeding import stream
from ..core.tensor import backward
from ..models.network import NetworkSpec, forward, run
from ..schemas.experiment import TrainConfig
from .dataset_service import Dataset, iter_batches

EVAL_BATCH = 512


@dataclass
class TrainResult:
    net: NetworkSpec
    accuracy: float
    losses: List[float] = field(default_factory=list)


def evaluate(net: NetworkSpec, dataset: Dataset, batch: int = EVAL_BATCH) -> float:
    """Top-1 accuracy in percent (eval-mode batch norm)."""
    if len(dataset) == 0:
        return 0.0
    correct = 0
    for indices in iter_batches(len(dataset), batch):
        logits = forward(net, dataset.images[indices], "eval")
        correct += int((logits.data.argmax(axis=1) == dataset.labels[indices]).sum())
    return 100.0 * correct / len(dataset)


def augment(images: np.ndarray, rng: np.random.Generator, pad: int = 4, flip: bool = True) -> np.ndarray:
    """Random crop after zero padding, then (with ``flip``) a random horizontal flip."""
    n, _, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    rows = rng.integers(0, 2 * pad + 1, size=n)
    cols = rng.integers(0, 2 * pad + 1, size=n)
    flips = (rng.random(n) < 0.5) & flip
    out = np.empty_like(images)
    for k in range(n):
        crop = padded[k, :, rows[k]:rows[k] + h, cols[k]:cols[k] + w]
        out[k] = crop[:, :, ::-1] if flips[k] else crop
    return out


def train(
    net: NetworkSpec,
    train_set: Dataset,
    test_set: Dataset,
    config: TrainConfig,
    seed: int,
    stage: str,
    trainable: Optional[Callable[[str], bool]] = None,
) -> TrainResult:
    """SGD with momentum and cosine decay.

    With ``trainable`` only the matching parameters move and batch norm runs
    in eval mode, leaving the rest of the network untouched.
    """
    data = train_set.head(config.max_examples)
    steps_per_epoch = -(-len(data) // config.batch)
    total = steps_per_epoch * config.epochs
    mode = "train" if trainable is None else "eval"
    params, buffers = net.parameters(), net.buffers()
    state = SGDState()
    losses: List[float] = []
    for epoch in range(config.epochs):
        epoch_losses = []
        for indices in iter_batches(len(data), config.batch, stream(seed, stage, "order", epoch)):
            images = data.images[indices]
            if config.augment and images.shape[2] > 1:
                # only colour images are mirrored
                images = augment(images, stream(seed, stage, "augment", state.step), flip=images.shape[1] == 3)
            result = run(net, images, mode, trainable=trainable or True)
            loss = F.cross_entropy(result.logits, data.labels[indices])
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(f"{stage} loss became {value} at epoch {epoch + 1}")
            grads = backward(loss)
            lr = cosine_lr(config.lr, state.step, total)
            params, state = sgd_step(params, grads, state, lr=lr, momentum=config.momentum,
                                     weight_decay=config.weight_decay)
            if not all(np.all(np.isfinite(params[name])) for name in grads):
                raise TrainingDivergedError(f"{stage} parameters became non-finite at epoch {epoch + 1}")
            buffers.update(result.buffers)
            net = net.with_state(params, buffers)
            epoch_losses.append(value)
        losses.append(float(np.mean(epoch_losses)) if epoch_losses else float("nan"))
        logger.info(f"{stage} epoch {epoch + 1}/{config.epochs}: loss={losses[-1]:.4f}")
    accuracy = evaluate(net, test_set)
    logger.info(f"{stage} finished: accuracy={accuracy:.2f}%")
    return TrainResult(net=net, accuracy=accuracy, losses=losses)

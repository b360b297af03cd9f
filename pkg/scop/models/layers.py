from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Mapping

import numpy as np

from ..core.config import settings
from ..core.functional import ACTIVATIONS


class LayerKind(str, Enum):
    CONV = "conv"
    BATCHNORM = "batchnorm"
    ACTIVATION = "activation"
    MAXPOOL = "maxpool"
    AVGPOOL = "avgpool"
    FLATTEN = "flatten"
    LINEAR = "linear"
    RESIDUAL_ADD = "residual_add"


# Layers that act on each channel independently.
CHANNELWISE = (LayerKind.BATCHNORM, LayerKind.ACTIVATION, LayerKind.MAXPOOL, LayerKind.AVGPOOL)


@dataclass(frozen=True, eq=False)
class LayerSpec:
    """One layer of a network: its kind, hyperparameters and arrays.

    ``params`` hold trainable arrays (conv/linear ``weight``/``bias``, BN
    ``gamma``/``beta``); ``buffers`` hold BN running statistics. A residual
    add sums the previous output with the output of layer ``skip_from``
    (``-1`` is the network input), passed through ``shortcut`` first.
    """

    kind: LayerKind
    params: Mapping[str, np.ndarray] = field(default_factory=dict)
    buffers: Mapping[str, np.ndarray] = field(default_factory=dict)
    kernel_size: int = 0
    stride: int = 1
    padding: int = 0
    activation: str = "relu"
    skip_from: int | None = None
    shortcut: tuple["LayerSpec", ...] = ()
    prunable: bool = False
    momentum: float = settings.bn_momentum
    eps: float = settings.bn_eps

    @property
    def in_channels(self) -> int:
        if self.kind is LayerKind.CONV:
            return int(self.params["weight"].shape[1])
        if self.kind is LayerKind.LINEAR:
            return int(self.params["weight"].shape[1])
        if self.kind is LayerKind.BATCHNORM:
            return int(self.params["gamma"].shape[0])
        raise AttributeError(f"{self.kind.value} layer has no channel count")

    @property
    def out_channels(self) -> int:
        if self.kind in (LayerKind.CONV, LayerKind.LINEAR):
            return int(self.params["weight"].shape[0])
        return self.in_channels

    def with_arrays(self, params: Mapping[str, np.ndarray] | None = None,
                    buffers: Mapping[str, np.ndarray] | None = None) -> "LayerSpec":
        return replace(
            self,
            params=dict(self.params) if params is None else dict(params),
            buffers=dict(self.buffers) if buffers is None else dict(buffers),
        )


def _kaiming(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def conv(in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
         stride: int = 1, padding: int = 0, prunable: bool = False) -> LayerSpec:
    weight = _kaiming(rng, (out_channels, in_channels, kernel_size, kernel_size),
                      in_channels * kernel_size * kernel_size)
    return LayerSpec(
        LayerKind.CONV,
        params={"weight": weight, "bias": np.zeros(out_channels)},
        kernel_size=kernel_size,
        stride=stride,
        padding=padding,
        prunable=prunable,
    )


def batchnorm(channels: int, momentum: float | None = None, eps: float | None = None) -> LayerSpec:
    return LayerSpec(
        LayerKind.BATCHNORM,
        params={"gamma": np.ones(channels), "beta": np.zeros(channels)},
        buffers={"running_mean": np.zeros(channels), "running_var": np.ones(channels)},
        momentum=settings.bn_momentum if momentum is None else momentum,
        eps=settings.bn_eps if eps is None else eps,
    )


def activation(kind: str = "relu") -> LayerSpec:
    if kind not in ACTIVATIONS:
        raise ValueError(f"Unknown activation {kind!r}. Valid activations are: {', '.join(ACTIVATIONS)}")
    return LayerSpec(LayerKind.ACTIVATION, activation=kind)


def maxpool(kernel_size: int = 2, stride: int | None = None) -> LayerSpec:
    return LayerSpec(LayerKind.MAXPOOL, kernel_size=kernel_size, stride=stride or kernel_size)


def avgpool() -> LayerSpec:
    """Global average pool."""
    return LayerSpec(LayerKind.AVGPOOL)


def flatten() -> LayerSpec:
    return LayerSpec(LayerKind.FLATTEN)


def linear(in_features: int, out_features: int, rng: np.random.Generator) -> LayerSpec:
    return LayerSpec(
        LayerKind.LINEAR,
        params={"weight": _kaiming(rng, (out_features, in_features), in_features) / np.sqrt(2.0),
                "bias": np.zeros(out_features)},
    )


def residual_add(skip_from: int, shortcut: tuple[LayerSpec, ...] = ()) -> LayerSpec:
    return LayerSpec(LayerKind.RESIDUAL_ADD, skip_from=skip_from, shortcut=tuple(shortcut))

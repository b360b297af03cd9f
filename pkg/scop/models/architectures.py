"""Desk-scale architectures."""

from __future__ import annotations

import numpy as np

from . import layers as L
from .network import NetworkSpec

ARCHITECTURES = ("small-cnn", "resnet-tiny")


def small_cnn(input_shape: tuple[int, int, int], num_classes: int, rng: np.random.Generator) -> NetworkSpec:
    """Three conv-BN-ReLU blocks (16/32/64 filters), global pool, linear head.

    The first two blocks are followed by 2x2 max pooling.
    """
    channels = input_shape[0]
    return NetworkSpec(
        layers=(
            L.conv(channels, 16, 3, rng, padding=1, prunable=True),
            L.batchnorm(16),
            L.activation("relu"),
            L.maxpool(2),
            L.conv(16, 32, 3, rng, padding=1, prunable=True),
            L.batchnorm(32),
            L.activation("relu"),
            L.maxpool(2),
            L.conv(32, 64, 3, rng, padding=1, prunable=True),
            L.batchnorm(64),
            L.activation("relu"),
            L.avgpool(),
            L.flatten(),
            L.linear(64, num_classes, rng),
        ),
        input_shape=input_shape,
        name="small-cnn",
    )


def resnet_tiny(input_shape: tuple[int, int, int], num_classes: int, rng: np.random.Generator) -> NetworkSpec:
    """Three stages (8/16/32 filters) of two basic blocks each.

    Only the first conv of each block is prunable; the second conv's output
    meets the shortcut in the residual add.
    """
    layers: list[L.LayerSpec] = [
        L.conv(input_shape[0], 8, 3, rng, padding=1),
        L.batchnorm(8),
        L.activation("relu"),
    ]
    in_channels = 8
    for stage, width in enumerate((8, 16, 32)):
        for block in range(2):
            stride = 2 if stage > 0 and block == 0 else 1
            block_input = len(layers) - 1
            shortcut: tuple[L.LayerSpec, ...] = ()
            if stride != 1 or in_channels != width:
                shortcut = (L.conv(in_channels, width, 1, rng, stride=stride), L.batchnorm(width))
            layers += [
                L.conv(in_channels, width, 3, rng, stride=stride, padding=1, prunable=True),
                L.batchnorm(width),
                L.activation("relu"),
                L.conv(width, width, 3, rng, padding=1),
                L.batchnorm(width),
                L.residual_add(block_input, shortcut),
                L.activation("relu"),
            ]
            in_channels = width
    layers += [L.avgpool(), L.flatten(), L.linear(in_channels, num_classes, rng)]
    return NetworkSpec(layers=tuple(layers), input_shape=input_shape, name="resnet-tiny")


def build_arch(name: str, num_classes: int = 10, input_shape: tuple[int, int, int] | None = None,
               rng: np.random.Generator | None = None) -> NetworkSpec:
    rng = rng if rng is not None else np.random.default_rng(0)
    if name == "small-cnn":
        return small_cnn(tuple(input_shape or (1, 28, 28)), num_classes, rng)
    if name == "resnet-tiny":
        return resnet_tiny(tuple(input_shape or (3, 32, 32)), num_classes, rng)
    raise ValueError(f"Unknown architecture {name!r}. Valid architectures are: {', '.join(ARCHITECTURES)}")


def planted_network(filters: np.ndarray, gamma: np.ndarray, num_classes: int,
                    rng: np.random.Generator) -> NetworkSpec:
    """One 1x1 conv with fixed ``filters`` (M x D), BN with scales ``gamma``,
    ReLU and a linear head. The input is D channels of 1x1 pixels.
    """
    filters = np.asarray(filters, dtype=np.float64)
    count, dim = filters.shape
    stem = L.conv(dim, count, 1, rng, prunable=True).with_arrays(
        params={"weight": filters.reshape(count, dim, 1, 1), "bias": np.zeros(count)}
    )
    norm = L.batchnorm(count).with_arrays(
        params={"gamma": np.asarray(gamma, dtype=np.float64), "beta": np.zeros(count)},
        buffers={"running_mean": np.zeros(count), "running_var": (filters ** 2).sum(axis=1)},
    )
    return NetworkSpec(
        layers=(stem, norm, L.activation("relu"), L.flatten(), L.linear(count, num_classes, rng)),
        input_shape=(dim, 1, 1),
        name="planted",
    )

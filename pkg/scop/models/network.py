"""Network description and execution.

A :class:`NetworkSpec` is an ordered tuple of :class:`LayerSpec` plus the
per-example input shape. Parameters are addressed by flat names
``"<layer>.<param>"`` (``"<layer>.shortcut.<j>.<param>"`` inside residual
shortcuts); training code swaps arrays in by name with
:meth:`NetworkSpec.with_state`, producing a new spec.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Collection, Mapping

import numpy as np

from ..core import functional as F
from ..core.exceptions import ShapeError
from ..core.tensor import Tensor
from .layers import CHANNELWISE, LayerKind, LayerSpec

Shape = tuple[int, ...]
Interceptor = Callable[[Tensor], Tensor]
MODES = ("train", "eval")


def _conv_extent(size: int, layer: LayerSpec) -> int:
    return (size + 2 * layer.padding - layer.kernel_size) // layer.stride + 1


def _layer_shape(layer: LayerSpec, shape: Shape, skip_shape: Shape | None = None) -> Shape:
    kind = layer.kind
    if kind is LayerKind.CONV:
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise ShapeError(f"conv expects ({layer.in_channels}, H, W) input, got {shape}")
        out = (layer.out_channels, _conv_extent(shape[1], layer), _conv_extent(shape[2], layer))
        if out[1] < 1 or out[2] < 1:
            raise ShapeError(f"conv kernel {layer.kernel_size} does not fit input {shape}")
        return out
    if kind is LayerKind.BATCHNORM:
        if len(shape) not in (1, 3) or shape[0] != layer.in_channels:
            raise ShapeError(f"batchnorm over {layer.in_channels} channels got input {shape}")
        return shape
    if kind is LayerKind.ACTIVATION:
        return shape
    if kind is LayerKind.MAXPOOL:
        if len(shape) != 3:
            raise ShapeError(f"maxpool expects (C, H, W) input, got {shape}")
        h = (shape[1] - layer.kernel_size) // layer.stride + 1
        w = (shape[2] - layer.kernel_size) // layer.stride + 1
        if h < 1 or w < 1:
            raise ShapeError(f"maxpool kernel {layer.kernel_size} does not fit input {shape}")
        return (shape[0], h, w)
    if kind is LayerKind.AVGPOOL:
        if len(shape) != 3:
            raise ShapeError(f"avgpool expects (C, H, W) input, got {shape}")
        return (shape[0], 1, 1)
    if kind is LayerKind.FLATTEN:
        return (int(np.prod(shape)),)
    if kind is LayerKind.LINEAR:
        if len(shape) != 1 or shape[0] != layer.in_channels:
            raise ShapeError(f"linear expects ({layer.in_channels},) input, got {shape}")
        return (layer.out_channels,)
    if kind is LayerKind.RESIDUAL_ADD:
        branch = skip_shape
        for sc in layer.shortcut:
            branch = _layer_shape(sc, branch)
        if branch != shape:
            raise ShapeError(f"residual add operands differ: {shape} vs shortcut {branch}")
        return shape
    raise ShapeError(f"unknown layer kind {kind!r}")


@dataclass(frozen=True, eq=False)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: Shape
    name: str = "custom"
    shapes: tuple[Shape, ...] = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "shapes", infer_shapes(self.layers, self.input_shape))
        for index in self.prunable_indices:
            self._validate_prunable(index)

    # -- structure -----------------------------------------------------
    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def output_shape(self) -> Shape:
        return self.shapes[-1] if self.shapes else self.input_shape

    @property
    def prunable_indices(self) -> tuple[int, ...]:
        return tuple(i for i, layer in enumerate(self.layers) if layer.prunable)

    def shape_before(self, index: int) -> Shape:
        return self.input_shape if index == 0 else self.shapes[index - 1]

    def following_batchnorm(self, index: int) -> int | None:
        nxt = index + 1
        if nxt < self.depth and self.layers[nxt].kind is LayerKind.BATCHNORM:
            return nxt
        return None

    def mixing_point(self, index: int) -> int:
        """Last layer of the conv -> BN -> activation run that starts at ``index``."""
        j = index
        while j + 1 < self.depth and self.layers[j + 1].kind in (LayerKind.BATCHNORM, LayerKind.ACTIVATION):
            j += 1
        return j

    def consumer(self, index: int) -> int | None:
        """First channel-mixing layer reading the output of layer ``index``."""
        for j in range(index + 1, self.depth):
            kind = self.layers[j].kind
            if kind in (LayerKind.CONV, LayerKind.LINEAR):
                return j
            if kind not in CHANNELWISE and kind is not LayerKind.FLATTEN:
                return None
        return None

    def _validate_prunable(self, index: int) -> None:
        layer = self.layers[index]
        if layer.kind is not LayerKind.CONV:
            raise ShapeError(f"layer {index} ({layer.kind.value}) cannot be marked prunable")
        consumer = self.consumer(index)
        if consumer is None:
            raise ShapeError(f"prunable layer {index} has no conv/linear consumer")
        for j, other in enumerate(self.layers):
            skip = other.skip_from
            if other.kind is LayerKind.RESIDUAL_ADD and skip is not None and index <= skip < consumer:
                raise ShapeError(f"prunable layer {index} feeds the residual branch of layer {j}")

    # -- arrays ----------------------------------------------------------
    def _named(self, attr: str) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.layers):
            for key, value in getattr(layer, attr).items():
                out[f"{i}.{key}"] = value
            for j, sc in enumerate(layer.shortcut):
                for key, value in getattr(sc, attr).items():
                    out[f"{i}.shortcut.{j}.{key}"] = value
        return out

    def parameters(self) -> dict[str, np.ndarray]:
        return self._named("params")

    def buffers(self) -> dict[str, np.ndarray]:
        return self._named("buffers")

    def with_state(self, params: Mapping[str, np.ndarray] | None = None,
                   buffers: Mapping[str, np.ndarray] | None = None) -> "NetworkSpec":
        """Return a copy with the named arrays replaced."""
        params, buffers = params or {}, buffers or {}

        def rebuild(layer: LayerSpec, prefix: str) -> LayerSpec:
            new_params = {k: np.asarray(params.get(f"{prefix}.{k}", v), dtype=np.float64) for k, v in layer.params.items()}
            new_buffers = {k: np.asarray(buffers.get(f"{prefix}.{k}", v), dtype=np.float64) for k, v in layer.buffers.items()}
            shortcut = tuple(rebuild(sc, f"{prefix}.shortcut.{j}") for j, sc in enumerate(layer.shortcut))
            return replace(layer.with_arrays(new_params, new_buffers), shortcut=shortcut)

        return replace(self, layers=tuple(rebuild(layer, str(i)) for i, layer in enumerate(self.layers)))

    def replace_layers(self, updates: Mapping[int, LayerSpec]) -> "NetworkSpec":
        return replace(self, layers=tuple(updates.get(i, layer) for i, layer in enumerate(self.layers)))


def infer_shapes(layers: tuple[LayerSpec, ...], input_shape: Shape) -> tuple[Shape, ...]:
    """Per-example output shape of every layer; raises naming the offending layer."""
    shapes: list[Shape] = []
    current = tuple(input_shape)
    for i, layer in enumerate(layers):
        skip = None
        if layer.kind is LayerKind.RESIDUAL_ADD:
            if layer.skip_from is None or not -1 <= layer.skip_from < i:
                raise ShapeError(f"layer {i} (residual_add): skip_from {layer.skip_from} is not an earlier layer")
            skip = tuple(input_shape) if layer.skip_from == -1 else shapes[layer.skip_from]
        try:
            current = _layer_shape(layer, current, skip)
        except ShapeError as exc:
            raise ShapeError(f"layer {i} ({layer.kind.value}): {exc.detail}") from None
        shapes.append(current)
    return tuple(shapes)


# -- execution ---------------------------------------------------------------

@dataclass
class ForwardPass:
    logits: Tensor
    captured: dict[int, Tensor]
    params: dict[str, Tensor]
    buffers: dict[str, np.ndarray]


def _apply(layer: LayerSpec, prefix: str, x: Tensor, training: bool, tensors: Mapping[str, Tensor],
           new_buffers: dict[str, np.ndarray], outputs: Mapping[int, Tensor]) -> Tensor:
    kind = layer.kind
    if kind is LayerKind.CONV:
        return F.conv2d(x, tensors[f"{prefix}.weight"], tensors[f"{prefix}.bias"], layer.stride, layer.padding)
    if kind is LayerKind.BATCHNORM:
        stats = F.RunningStats(layer.buffers["running_mean"], layer.buffers["running_var"])
        out, stats = F.batch_norm(x, tensors[f"{prefix}.gamma"], tensors[f"{prefix}.beta"], stats,
                                  training=training, momentum=layer.momentum, eps=layer.eps)
        if training:
            new_buffers[f"{prefix}.running_mean"] = stats.mean
            new_buffers[f"{prefix}.running_var"] = stats.var
        return out
    if kind is LayerKind.ACTIVATION:
        return F.activation(x, layer.activation)
    if kind is LayerKind.MAXPOOL:
        return F.max_pool2d(x, layer.kernel_size, layer.stride)
    if kind is LayerKind.AVGPOOL:
        return F.global_avg_pool(x)
    if kind is LayerKind.FLATTEN:
        return F.flatten(x)
    if kind is LayerKind.LINEAR:
        return F.linear(x, tensors[f"{prefix}.weight"], tensors[f"{prefix}.bias"])
    if kind is LayerKind.RESIDUAL_ADD:
        skip = outputs[layer.skip_from]
        for j, sc in enumerate(layer.shortcut):
            skip = _apply(sc, f"{prefix}.shortcut.{j}", skip, training, tensors, new_buffers, outputs)
        if skip.shape != x.shape:
            raise ShapeError(f"residual add operands differ: {x.shape} vs {skip.shape}")
        return x + skip
    raise ShapeError(f"unknown layer kind {kind!r}")


def run(
    net: NetworkSpec,
    batch,
    mode: str = "eval",
    *,
    capture: Collection[int] = (),
    intercept: Mapping[int, Interceptor] | None = None,
    trainable: Callable[[str], bool] | bool = False,
    start: int = 0,
) -> ForwardPass:
    """Execute layers ``start..L-1`` on ``batch``.

    ``batch`` is the network input when ``start == 0`` and otherwise the
    output of layer ``start - 1``. ``intercept[i]`` rewrites the output of
    layer ``i`` before anything downstream sees it; ``capture`` lists layer
    indices whose (post-intercept) outputs are returned.
    """
    if mode not in MODES:
        raise ValueError(f"Unknown mode {mode!r}. Valid modes are: {', '.join(MODES)}")
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    expected = net.shape_before(start)
    if x.ndim < 1 or tuple(x.shape[1:]) != tuple(expected):
        where = "network input" if start == 0 else f"input of layer {start}"
        raise ShapeError(f"batch {x.shape} does not match {where}, expected (N, {', '.join(map(str, expected))})")

    is_trainable = trainable if callable(trainable) else (lambda _name, flag=bool(trainable): flag)
    tensors = {name: Tensor(value, requires_grad=is_trainable(name), name=name)
               for name, value in net.parameters().items()}
    intercept = intercept or {}
    training = mode == "train"
    outputs: dict[int, Tensor] = {start - 1: x}
    new_buffers: dict[str, np.ndarray] = {}
    for i in range(start, net.depth):
        layer = net.layers[i]
        try:
            x = _apply(layer, str(i), x, training, tensors, new_buffers, outputs)
        except ShapeError as exc:
            raise ShapeError(f"layer {i} ({layer.kind.value}): {exc.detail}") from None
        if i in intercept:
            x = intercept[i](x)
        outputs[i] = x
    captured = {i: outputs[i] for i in capture if i in outputs}
    return ForwardPass(logits=x, captured=captured, params=tensors, buffers=new_buffers)


def forward(net: NetworkSpec, batch, mode: str = "eval", *, capture: dict[int, Tensor] | None = None,
            start: int = 0) -> Tensor:
    """Logits of ``net`` on ``batch``.

    Passing a dict as ``capture`` with layer indices as keys fills in the
    features A^l of those layers.
    """
    result = run(net, batch, mode, capture=tuple(capture or ()), start=start)
    if capture is not None:
        capture.update(result.captured)
    return result.logits


# -- accounting ----------------------------------------------------------

@dataclass(frozen=True)
class ModelCost:
    params: int
    macs: int


def _layer_macs(layer: LayerSpec, in_shape: Shape, out_shape: Shape) -> int:
    if layer.kind is LayerKind.CONV:
        k = layer.kernel_size
        return k * k * layer.in_channels * layer.out_channels * out_shape[1] * out_shape[2]
    if layer.kind is LayerKind.LINEAR:
        return layer.in_channels * layer.out_channels
    return 0


def count_params_flops(net: NetworkSpec) -> ModelCost:
    """Exact trainable-parameter count and per-example multiply-accumulates.

    Only conv and linear layers (including residual shortcuts) contribute
    MACs; normalization, activations, pooling and adds are not counted.
    """
    params = sum(int(value.size) for value in net.parameters().values())
    macs = 0
    for i, layer in enumerate(net.layers):
        in_shape = net.shape_before(i)
        macs += _layer_macs(layer, in_shape, net.shapes[i])
        if layer.kind is LayerKind.RESIDUAL_ADD:
            shape = net.input_shape if layer.skip_from == -1 else net.shapes[layer.skip_from]
            for sc in layer.shortcut:
                out = _layer_shape(sc, shape)
                macs += _layer_macs(sc, shape, out)
                shape = out
    return ModelCost(params=params, macs=macs)

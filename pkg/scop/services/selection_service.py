"""Adversarial selection layers and scaling-factor optimization.

Each prunable conv gets one logit per filter; ``beta = sigmoid(theta)`` scales
the real feature and ``1 - beta`` its control counterpart at the layer's
mixing point (the end of its conv -> BN -> activation run). The control batch
is first propagated through the frozen network on its own; the real batch is
then propagated with the mixture substituted at every mixing point.
"""

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
from loguru import logger

from ..core import functional as F
from ..core.exceptions import ArtifactMissingError, FrozenWeightError, InvariantError, ShapeError, TrainingDivergedError
from ..core.integrity import fingerprint_arrays
from ..core.optim import AdamState, adam_step
from ..core.seeding import stream
from ..core.tensor import Tensor, backward
from ..models.layers import LayerKind
from ..models.network import NetworkSpec, run
from ..schemas.experiment import ControlMode, SelectionConfig
from .checkpoint_service import SELECTION_PREFIX, load_checkpoint, save_checkpoint
from .dataset_service import Dataset, iter_batches
from .knockoff_service import BiasPairModel, bias_pair_factor, default_bias_pair_model, sample_bias_pair

LOGIT_BOUND = 30.0


@dataclass(frozen=True)
class SelectionState:
    logits: Mapping[int, np.ndarray]

    @classmethod
    def initial(cls, net: NetworkSpec) -> "SelectionState":
        """Zero logits, i.e. beta = 0.5 for every filter."""
        return cls({i: np.zeros(net.layers[i].out_channels) for i in net.prunable_indices})

    @property
    def layers(self) -> Tuple[int, ...]:
        return tuple(sorted(self.logits))

    def beta(self, layer: int) -> np.ndarray:
        return F.sigmoid(Tensor(self.logits[layer])).data

    def beta_tilde(self, layer: int) -> np.ndarray:
        return 1.0 - self.beta(layer)

    def constraint_gap(self) -> float:
        """max |beta + beta_tilde - 1| over all layers."""
        gaps = [np.abs(self.beta(i) + self.beta_tilde(i) - 1.0).max(initial=0.0) for i in self.layers]
        return float(max(gaps, default=0.0))

    def with_logits(self, logits: Mapping[int, np.ndarray]) -> "SelectionState":
        return SelectionState({i: np.clip(np.asarray(v, dtype=np.float64), -LOGIT_BOUND, LOGIT_BOUND)
                               for i, v in logits.items()})

    def check(self) -> None:
        gap = self.constraint_gap()
        if gap != 0.0:
            raise InvariantError(f"beta + beta_tilde deviates from 1 by {gap:.3e}")
        for i in self.layers:
            beta = self.beta(i)
            if not np.all((beta > 0.0) & (beta < 1.0)):
                raise InvariantError(f"layer {i}: beta left the open interval (0, 1)")


def save_selection_state(path: Path, state: SelectionState) -> Path:
    return save_checkpoint(path, {f"{SELECTION_PREFIX}.{i}": state.logits[i] for i in state.layers})


def load_selection_state(path: Path) -> SelectionState:
    sections = load_checkpoint(path)
    prefix = f"{SELECTION_PREFIX}."
    return SelectionState({int(name[len(prefix):]): value
                           for name, value in sections.items() if name.startswith(prefix)})


# -- control groups ---------------------------------------------------------

@dataclass(frozen=True)
class ControlSource:
    """Where control batches come from for one selection run."""

    mode: ControlMode
    images: np.ndarray
    knockoffs: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.mode is ControlMode.KNOCKOFF:
            if self.knockoffs is None:
                raise ArtifactMissingError("knockoff control needs a knockoff cache; run the knockoff stage first")
            if self.knockoffs.shape != self.images.shape:
                raise ShapeError(f"knockoffs {self.knockoffs.shape} are not aligned with images {self.images.shape}")

    @cached_property
    def channel_mean(self) -> np.ndarray:
        return self.images.mean(axis=(0, 2, 3), dtype=np.float64)

    @cached_property
    def channel_std(self) -> np.ndarray:
        return self.images.std(axis=(0, 2, 3), dtype=np.float64)


def make_control_batch(source: ControlSource, indices: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Control batch aligned with ``source.images[indices]``."""
    indices = np.asarray(indices)
    shape = (indices.shape[0],) + source.images.shape[1:]
    if source.mode is ControlMode.KNOCKOFF:
        return source.knockoffs[indices]
    if source.mode is ControlMode.NOISE:
        view = (1, -1, 1, 1)
        return rng.standard_normal(shape) * source.channel_std.reshape(view) + source.channel_mean.reshape(view)
    if source.mode is ControlMode.RANDOM_SAMPLE:
        count = source.images.shape[0]
        rows = rng.choice(count, size=indices.shape[0], replace=indices.shape[0] > count)
        return source.images[rows]
    return np.zeros(shape, dtype=source.images.dtype)


# -- bias pairs ---------------------------------------------------------------

@dataclass(frozen=True)
class BiasPairs:
    """Per-channel bias pairs added after the convs up to the last prunable layer."""

    models: Mapping[int, BiasPairModel]
    factors: Mapping[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def build(cls, net: NetworkSpec, input_s: np.ndarray) -> "BiasPairs":
        """Chain ``s`` from the input through the main path.

        A conv's channel map is its kernel summed over spatial offsets; a BN
        rescales ``s`` by ``(gamma / sqrt(var + eps))^2``.
        """
        if not net.prunable_indices:
            return cls({})
        current = np.asarray(input_s, dtype=np.float64).reshape(net.input_shape[0], -1).mean(axis=1)
        models: Dict[int, BiasPairModel] = {}
        for i, layer in enumerate(net.layers[:max(net.prunable_indices) + 1]):
            if layer.kind is LayerKind.CONV:
                channel_map = layer.params["weight"].sum(axis=(2, 3)).T
                if current.shape[0] != channel_map.shape[0]:
                    current = np.full(channel_map.shape[0], float(current.mean()))
                models[i] = default_bias_pair_model(channel_map, current)
                current = models[i].s_next
            elif layer.kind is LayerKind.BATCHNORM and current.shape[0] == layer.in_channels:
                scale = layer.params["gamma"] / np.sqrt(layer.buffers["running_var"] + layer.eps)
                current = current * scale ** 2
        return cls(models, {i: bias_pair_factor(m) for i, m in models.items()})

    def draw(self, rng: np.random.Generator, count: int) -> Dict[int, Tuple[np.ndarray, np.ndarray]]:
        return {i: sample_bias_pair(m, rng, size=count, factor=self.factors.get(i))
                for i, m in sorted(self.models.items())}


# -- forward ------------------------------------------------------------------

@dataclass
class MixRecord:
    layer: int
    point: int
    beta: np.ndarray
    real: np.ndarray
    control: Optional[np.ndarray]
    mixed: np.ndarray


def _channel_view(vector: Tensor, feature: Tensor) -> Tensor:
    shape = (1, vector.shape[0]) + (1,) * (feature.ndim - 2)
    return vector.reshape(shape)


def _add_bias(values: np.ndarray):
    def hook(x: Tensor) -> Tensor:
        return x + values.reshape(values.shape + (1,) * (x.ndim - 2))
    return hook


def _chain(first, second):
    if first is None:
        return second
    return lambda x: second(first(x))


def selection_forward(
    net: NetworkSpec,
    state: SelectionState,
    real_batch,
    control_batch,
    *,
    mode: ControlMode = ControlMode.KNOCKOFF,
    bias: Optional[Mapping[int, Tuple[np.ndarray, np.ndarray]]] = None,
    detach_control: bool = False,
) -> Tuple[Tensor, Dict[int, MixRecord], Dict[int, Tensor]]:
    """Mixed-stream logits, the per-layer mixing trace and the logit tensors.

    ``bias`` maps conv indices to drawn ``(b, b~)`` pairs of shape (N, M):
    ``b`` is added on the real stream and ``b~`` on the control stream. In
    mode ``none`` no control stream runs and each mixing point is scaled by
    beta alone.
    """
    if set(state.layers) != set(net.prunable_indices):
        raise ShapeError(f"selection state covers layers {list(state.layers)}, "
                         f"network has prunable layers {list(net.prunable_indices)}")
    real = real_batch if isinstance(real_batch, Tensor) else Tensor(real_batch)
    points = {i: net.mixing_point(i) for i in state.layers}
    thetas = {i: Tensor(state.logits[i], requires_grad=True, name=f"theta.{i}") for i in state.layers}
    betas = {i: F.sigmoid(theta) for i, theta in thetas.items()}
    use_control = mode is not ControlMode.NONE
    bias = (bias or {}) if use_control else {}

    controls: Dict[int, Tensor] = {}
    if use_control:
        control = control_batch if isinstance(control_batch, Tensor) else Tensor(control_batch)
        if control.shape != real.shape:
            raise ShapeError(f"control batch {control.shape} does not match real batch {real.shape}")
        hooks = {i: _add_bias(pair[1]) for i, pair in bias.items()}
        result = run(net, control, "eval", capture=tuple(points.values()), intercept=hooks)
        controls = {i: result.captured[p] for i, p in points.items()}
        if detach_control:
            controls = {i: t.detach() for i, t in controls.items()}

    trace: Dict[int, MixRecord] = {}

    def mixer(layer: int):
        def hook(a: Tensor) -> Tensor:
            beta = _channel_view(betas[layer], a)
            if use_control:
                a_tilde = controls[layer]
                if a_tilde.shape != a.shape:
                    raise ShapeError(f"layer {layer}: real stream {a.shape} and control stream {a_tilde.shape} diverge")
                mixed = beta * a + (1.0 - beta) * a_tilde
            else:
                a_tilde = None
                mixed = beta * a
            trace[layer] = MixRecord(layer, points[layer], betas[layer].data, a.data,
                                     None if a_tilde is None else a_tilde.data, mixed.data)
            return mixed
        return hook

    intercept = {i: _add_bias(pair[0]) for i, pair in bias.items()}
    for layer, point in points.items():
        intercept[point] = _chain(intercept.get(point), mixer(layer))
    logits = run(net, real, "eval", intercept=intercept).logits
    return logits, trace, thetas


# -- optimization -------------------------------------------------------------

@dataclass
class SelectionResult:
    state: SelectionState
    losses: List[float]
    steps: int


def weight_fingerprint(net: NetworkSpec) -> str:
    arrays = {f"param:{k}": v for k, v in net.parameters().items()}
    arrays.update({f"buffer:{k}": v for k, v in net.buffers().items()})
    return fingerprint_arrays(arrays)


def optimize_scaling(
    net: NetworkSpec,
    state: SelectionState,
    dataset: Dataset,
    control: ControlSource,
    config: SelectionConfig,
    seed: int,
    bias_pairs: Optional[BiasPairs] = None,
) -> SelectionResult:
    """Minimize label cross-entropy of the mixed stream over the logits only."""
    before = weight_fingerprint(net)
    adam = AdamState()
    losses: List[float] = []
    step = 0
    use_bias = config.bias and bias_pairs is not None and control.mode is not ControlMode.NONE
    if config.check_invariants:
        state.check()
    for epoch in range(config.epochs):
        epoch_losses = []
        for indices in iter_batches(len(dataset), config.batch, stream(seed, "selection", "order", epoch)):
            control_batch = make_control_batch(control, indices, stream(seed, "selection", "control", step))
            drawn = bias_pairs.draw(stream(seed, "selection", "bias", step), len(indices)) if use_bias else None
            logits, _, thetas = selection_forward(
                net, state, dataset.images[indices], control_batch,
                mode=control.mode, bias=drawn, detach_control=config.detach_control,
            )
            loss = F.cross_entropy(logits, dataset.labels[indices])
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(f"selection loss became {value} at epoch {epoch}, step {step}")
            grads = backward(loss)
            params = {f"theta.{i}": thetas[i].data for i in thetas}
            params, adam = adam_step(params, {k: grads[k] for k in params if k in grads}, adam, lr=config.lr)
            state = state.with_logits({i: params[f"theta.{i}"] for i in state.layers})
            if config.check_invariants:
                state.check()
            epoch_losses.append(value)
            step += 1
        losses.append(float(np.mean(epoch_losses)) if epoch_losses else float("nan"))
        logger.info(f"Selection epoch {epoch + 1}/{config.epochs}: loss={losses[-1]:.4f} "
                    f"mean beta={np.mean([state.beta(i).mean() for i in state.layers]):.4f}")
    if weight_fingerprint(net) != before:
        raise FrozenWeightError("network weights changed during scaling-factor optimization")
    return SelectionResult(state=state, losses=losses, steps=step)

"""Filter importance, pruning plans and structural surgery."""

from dataclasses import dataclass
from typing import Dict, Mapping, Optional

import numpy as np
from loguru import logger

from ..core.exceptions import PlanError
from ..core.seeding import stream
from ..models.layers import LayerKind, LayerSpec
from ..models.network import NetworkSpec, count_params_flops
from ..schemas.experiment import ControlMode, Criterion
from ..schemas.pruning import LayerKeep, PruningPlan, ReductionSummary, keep_budget
from .selection_service import SelectionState


@dataclass(frozen=True)
class ImportanceReport:
    scores: Mapping[int, np.ndarray]
    bn_scaled: bool
    criterion: str = Criterion.SCOP.value


def compute_importance(state: SelectionState, net: NetworkSpec, bn_scaled: bool = True,
                       control: ControlMode = ControlMode.KNOCKOFF) -> ImportanceReport:
    """``I = beta - beta_tilde``, times ``|gamma|`` of a following BN when ``bn_scaled``.

    Without a control group the statistic is ``beta`` itself.
    """
    if set(state.layers) != set(net.prunable_indices):
        raise PlanError(f"selection state covers layers {list(state.layers)}, "
                        f"network has prunable layers {list(net.prunable_indices)}")
    scores: Dict[int, np.ndarray] = {}
    scaled = False
    for i in state.layers:
        beta = state.beta(i)
        score = beta if control is ControlMode.NONE else beta - state.beta_tilde(i)
        bn = net.following_batchnorm(i)
        if bn_scaled and bn is not None:
            score = np.abs(net.layers[bn].params["gamma"]) * score
            scaled = True
        scores[i] = score
    return ImportanceReport(scores=scores, bn_scaled=scaled)


def l1_importance(net: NetworkSpec) -> ImportanceReport:
    """Smaller-norm-less-important: per-filter L1 norm of the kernel."""
    scores = {i: np.abs(net.layers[i].params["weight"]).sum(axis=(1, 2, 3)) for i in net.prunable_indices}
    return ImportanceReport(scores=scores, bn_scaled=False, criterion=Criterion.L1.value)


def random_importance(net: NetworkSpec, seed: int) -> ImportanceReport:
    scores = {i: stream(seed, "random-importance", i).random(net.layers[i].out_channels)
              for i in net.prunable_indices}
    return ImportanceReport(scores=scores, bn_scaled=False, criterion=Criterion.RANDOM.value)


def make_plan(report: ImportanceReport, rate: float) -> PruningPlan:
    """Keep the ``ceil((1 - rate) M)`` highest-scoring filters of every layer.

    Equal scores keep the lower index.
    """
    if not 0.0 <= rate < 1.0:
        raise PlanError(f"pruning rate must lie in [0, 1), got {rate}")
    layers = []
    for i in sorted(report.scores):
        scores = np.asarray(report.scores[i], dtype=np.float64)
        budget = keep_budget(rate, scores.shape[0])
        if budget < 1:
            raise PlanError(f"rate {rate} would remove every filter of layer {i}")
        order = np.lexsort((np.arange(scores.shape[0]), -scores))
        layers.append(LayerKeep(layer_index=i, filters=scores.shape[0], keep=sorted(order[:budget].tolist())))
    return PruningPlan(rate=rate, criterion=report.criterion, layers=layers)


def _input_columns(net: NetworkSpec, consumer: int, channels: int, keep: np.ndarray) -> np.ndarray:
    """Columns of a linear consumer fed by a flattened (channels, ...) feature."""
    width = net.shape_before(consumer)[0] // channels
    return (keep[:, None] * width + np.arange(width)).ravel()


def _check_entry(net: NetworkSpec, layer_index: int, filters: int) -> int:
    if layer_index not in net.prunable_indices:
        raise PlanError(f"plan references layer {layer_index}, which is not a prunable conv")
    count = net.layers[layer_index].out_channels
    if filters != count:
        raise PlanError(f"plan expects {filters} filters in layer {layer_index}, network has {count}")
    return net.consumer(layer_index)


def apply_plan(net: NetworkSpec, plan: PruningPlan) -> NetworkSpec:
    """Slice every planned conv, the BN layers up to its consumer and the
    consumer's input channels."""
    params = {i: dict(layer.params) for i, layer in enumerate(net.layers)}
    buffers = {i: dict(layer.buffers) for i, layer in enumerate(net.layers)}
    for entry in plan.layers:
        consumer = _check_entry(net, entry.layer_index, entry.filters)
        keep = np.asarray(entry.keep, dtype=np.int64)
        p = entry.layer_index
        params[p]["weight"] = params[p]["weight"][keep]
        params[p]["bias"] = params[p]["bias"][keep]
        for j in range(p + 1, consumer):
            if net.layers[j].kind is LayerKind.BATCHNORM:
                params[j] = {k: v[keep] for k, v in params[j].items()}
                buffers[j] = {k: v[keep] for k, v in buffers[j].items()}
        if net.layers[consumer].kind is LayerKind.CONV:
            params[consumer]["weight"] = params[consumer]["weight"][:, keep]
        else:
            columns = _input_columns(net, consumer, entry.filters, keep)
            params[consumer]["weight"] = params[consumer]["weight"][:, columns]
    layers = tuple(layer.with_arrays(params[i], buffers[i]) for i, layer in enumerate(net.layers))
    pruned = NetworkSpec(layers=layers, input_shape=net.input_shape, name=net.name)
    logger.info(f"Pruned {len(plan.layers)} layers of {net.name} at rate {plan.rate}")
    return pruned


def masked_network(net: NetworkSpec, plan: PruningPlan) -> NetworkSpec:
    """The original network with the consumers' inputs from pruned filters zeroed."""
    updates: Dict[int, LayerSpec] = {}
    for entry in plan.layers:
        consumer = _check_entry(net, entry.layer_index, entry.filters)
        layer = updates.get(consumer, net.layers[consumer])
        dropped = np.setdiff1d(np.arange(entry.filters), entry.keep)
        weight = np.array(layer.params["weight"])
        if layer.kind is LayerKind.CONV:
            weight[:, dropped] = 0.0
        else:
            weight[:, _input_columns(net, consumer, entry.filters, dropped)] = 0.0
        updates[consumer] = layer.with_arrays({**layer.params, "weight": weight})
    return net.replace_layers(updates)


def reduction_summary(orig: NetworkSpec, pruned: NetworkSpec) -> ReductionSummary:
    before, after = count_params_flops(orig), count_params_flops(pruned)

    def drop(a: int, b: int) -> float:
        return 100.0 * (1.0 - b / a) if a else 0.0

    return ReductionSummary(
        params_drop_pct=drop(before.params, after.params),
        flops_drop_pct=drop(before.macs, after.macs),
        params_before=before.params,
        params_after=after.params,
        macs_before=before.macs,
        macs_after=after.macs,
    )


def importance_for(criterion: Criterion, net: NetworkSpec, seed: int, state: Optional[SelectionState] = None,
                   bn_scaled: bool = True, control: ControlMode = ControlMode.KNOCKOFF) -> ImportanceReport:
    if criterion is Criterion.L1:
        return l1_importance(net)
    if criterion is Criterion.RANDOM:
        return random_importance(net, seed)
    if state is None:
        raise PlanError("the scop criterion needs a selection state")
    return compute_importance(state, net, bn_scaled=bn_scaled, control=control)

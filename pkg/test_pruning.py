import numpy as np
import pytest
from pydantic import ValidationError

from scop.core.exceptions import PlanError
from scop.models.architectures import build_arch
from scop.models.network import count_params_flops, forward
from scop.schemas.experiment import ControlMode, Criterion
from scop.schemas.pruning import LayerKeep, PruningPlan, keep_budget
from scop.services.pruning_service import (
    ImportanceReport,
    apply_plan,
    compute_importance,
    importance_for,
    l1_importance,
    make_plan,
    masked_network,
    random_importance,
    reduction_summary,
)
from scop.services.selection_service import SelectionState


@pytest.mark.parametrize("rate,filters,budget", [(0.5, 16, 8), (0.7, 10, 3), (0.3, 10, 7), (0.0, 5, 5), (0.9, 5, 1)])
def test_keep_budget(rate, filters, budget):
    assert keep_budget(rate, filters) == budget


def test_plan_keeps_highest_scores_and_breaks_ties_low():
    report = ImportanceReport(scores={0: np.array([0.1, 0.9, 0.5, 0.9, 0.0, 0.5])}, bn_scaled=False)
    plan = make_plan(report, 0.5)
    assert plan.keep_for(0) == [1, 2, 3]
    flat = ImportanceReport(scores={0: np.zeros(6)}, bn_scaled=False)
    assert make_plan(flat, 0.5).keep_for(0) == [0, 1, 2]


def test_plan_rejects_invalid_rate():
    report = ImportanceReport(scores={0: np.ones(4)}, bn_scaled=False)
    with pytest.raises(PlanError):
        make_plan(report, 1.0)
    with pytest.raises(PlanError):
        make_plan(report, -0.1)


def test_plan_schema_validates_keep_lists():
    with pytest.raises(ValidationError, match="budget"):
        PruningPlan(rate=0.5, layers=[LayerKeep(layer_index=0, filters=4, keep=[0])])
    with pytest.raises(ValidationError, match="sorted"):
        PruningPlan(rate=0.5, layers=[LayerKeep(layer_index=0, filters=4, keep=[3, 1])])
    with pytest.raises(ValidationError, match="out of range"):
        PruningPlan(rate=0.5, layers=[LayerKeep(layer_index=0, filters=4, keep=[1, 4])])
    plan = PruningPlan(rate=0.5, layers=[LayerKeep(layer_index=0, filters=4, keep=[1, 2])])
    assert PruningPlan.model_validate_json(plan.model_dump_json()) == plan


def test_importance_is_bn_scaled_contrast(tiny_cnn, rng):
    gamma = np.array([1.0, -2.0, 0.5, 3.0])
    net = tiny_cnn.with_state({"1.gamma": gamma})
    state = SelectionState.initial(net).with_logits({0: rng.standard_normal(4), 3: rng.standard_normal(6)})
    report = compute_importance(state, net)
    np.testing.assert_allclose(report.scores[0], np.abs(gamma) * (state.beta(0) - state.beta_tilde(0)))
    assert report.bn_scaled

    unscaled = compute_importance(state, net, bn_scaled=False)
    np.testing.assert_allclose(unscaled.scores[0], 2.0 * state.beta(0) - 1.0)
    assert not unscaled.bn_scaled

    plain = compute_importance(state, net, control=ControlMode.NONE)
    np.testing.assert_allclose(plain.scores[0], np.abs(gamma) * state.beta(0))


def test_importance_requires_matching_state(tiny_cnn):
    with pytest.raises(PlanError):
        compute_importance(SelectionState({0: np.zeros(4)}), tiny_cnn)
    with pytest.raises(PlanError):
        importance_for(Criterion.SCOP, tiny_cnn, seed=0)


def test_baseline_criteria(tiny_cnn):
    l1 = l1_importance(tiny_cnn)
    np.testing.assert_allclose(l1.scores[0], np.abs(tiny_cnn.layers[0].params["weight"]).sum(axis=(1, 2, 3)))
    first, second = random_importance(tiny_cnn, 3), random_importance(tiny_cnn, 3)
    np.testing.assert_array_equal(first.scores[3], second.scores[3])
    assert first.scores[3].shape == (6,)
    assert importance_for(Criterion.L1, tiny_cnn, seed=0).criterion == "l1"


def half_plan(net, rng):
    scores = {i: rng.random(net.layers[i].out_channels) for i in net.prunable_indices}
    return make_plan(ImportanceReport(scores=scores, bn_scaled=False), 0.5)


def with_random_bn(net, rng):
    updates = {}
    for name, value in net.parameters().items():
        if name.endswith("gamma") or name.endswith("beta"):
            updates[name] = rng.standard_normal(value.shape)
    buffers = {}
    for name, value in net.buffers().items():
        buffers[name] = rng.random(value.shape) + 0.5 if name.endswith("var") else rng.standard_normal(value.shape)
    return net.with_state(updates, buffers)


def test_surgery_matches_masking(tiny_cnn, rng):
    net = with_random_bn(tiny_cnn, rng)
    plan = half_plan(net, rng)
    pruned = apply_plan(net, plan)
    assert pruned.layers[0].out_channels == 2
    assert pruned.layers[3].in_channels == 2 and pruned.layers[3].out_channels == 3
    assert pruned.layers[4].params["gamma"].shape == (3,)
    assert pruned.layers[8].params["weight"].shape == (3, 3)
    batch = rng.standard_normal((4, 2, 5, 5))
    np.testing.assert_allclose(forward(pruned, batch).data, forward(masked_network(net, plan), batch).data, atol=1e-10)


def test_surgery_through_flatten(flat_cnn, rng):
    net = with_random_bn(flat_cnn, rng)
    plan = make_plan(ImportanceReport(scores={0: np.array([0.2, 0.9, 0.4])}, bn_scaled=False), 0.5)
    pruned = apply_plan(net, plan)
    assert pruned.layers[4].params["weight"].shape == (2, 8)
    np.testing.assert_array_equal(pruned.layers[4].params["weight"], net.layers[4].params["weight"][:, 4:12])
    batch = rng.standard_normal((3, 1, 4, 4))
    np.testing.assert_allclose(forward(pruned, batch).data, forward(masked_network(net, plan), batch).data, atol=1e-10)


def test_surgery_on_residual_network(rng):
    net = with_random_bn(build_arch("resnet-tiny", input_shape=(3, 8, 8), rng=rng), rng)
    plan = half_plan(net, rng)
    pruned = apply_plan(net, plan)
    batch = rng.standard_normal((2, 3, 8, 8))
    np.testing.assert_allclose(forward(pruned, batch).data, forward(masked_network(net, plan), batch).data, atol=1e-9)
    assert count_params_flops(pruned).params < count_params_flops(net).params


def test_surgery_rejects_mismatched_plans(tiny_cnn):
    bad_layer = PruningPlan(rate=0.5, layers=[LayerKeep(layer_index=1, filters=4, keep=[0, 1])])
    with pytest.raises(PlanError, match="not a prunable conv"):
        apply_plan(tiny_cnn, bad_layer)
    bad_count = PruningPlan(rate=0.5, layers=[LayerKeep(layer_index=0, filters=6, keep=[0, 1, 2])])
    with pytest.raises(PlanError, match="6 filters"):
        apply_plan(tiny_cnn, bad_count)


def test_reduction_summary_is_exact(tiny_cnn, rng):
    pruned = apply_plan(tiny_cnn, half_plan(tiny_cnn, rng))
    summary = reduction_summary(tiny_cnn, pruned)
    assert summary.params_before == 339
    assert summary.params_after == (2 * 2 * 9 + 2) + 4 + (3 * 2 * 9 + 3) + 6 + (3 * 3 + 3)
    assert summary.macs_before == 7218
    assert summary.macs_after == 9 * 2 * 2 * 25 + 9 * 2 * 3 * 25 + 9
    assert summary.params_drop_pct == pytest.approx(100.0 * (1 - summary.params_after / 339))
    assert summary.flops_drop_pct == pytest.approx(100.0 * (1 - summary.macs_after / 7218))


def test_zero_rate_is_identity(tiny_cnn, rng):
    plan = make_plan(ImportanceReport(scores={0: rng.random(4), 3: rng.random(6)}, bn_scaled=False), 0.0)
    summary = reduction_summary(tiny_cnn, apply_plan(tiny_cnn, plan))
    assert summary.params_drop_pct == 0.0 and summary.flops_drop_pct == 0.0


def random_plan(net, rng, rate):
    scores = {i: rng.random(net.layers[i].out_channels) for i in net.prunable_indices}
    return make_plan(ImportanceReport(scores=scores, bn_scaled=False), rate)


def seeded_arch(seed):
    rng = np.random.default_rng(seed)
    if seed % 2:
        return rng, build_arch("resnet-tiny", input_shape=(3, 8, 8), rng=rng)
    return rng, build_arch("small-cnn", input_shape=(1, 8, 8), rng=rng)


@pytest.mark.parametrize("seed", range(50))
def test_surgery_matches_masking_for_random_plans(seed):
    rng, net = seeded_arch(seed)
    net = with_random_bn(net, rng)
    plan = random_plan(net, rng, float(rng.uniform(0.0, 0.9)))
    batch = rng.standard_normal((2, *net.input_shape))
    np.testing.assert_allclose(forward(apply_plan(net, plan), batch).data,
                               forward(masked_network(net, plan), batch).data, atol=1e-9)


@pytest.mark.parametrize("seed", [0, 1])
def test_keep_all_surgery_is_the_original_network(seed):
    rng, net = seeded_arch(seed)
    net = with_random_bn(net, rng)
    pruned = apply_plan(net, random_plan(net, rng, 0.0))
    batch = rng.standard_normal((3, *net.input_shape))
    np.testing.assert_allclose(forward(pruned, batch).data, forward(net, batch).data, atol=1e-6)
    assert count_params_flops(pruned) == count_params_flops(net)


@pytest.mark.parametrize("seed", [0, 1])
def test_plan_ignores_a_positive_rescaling_of_bn_scales(seed):
    rng, net = seeded_arch(seed)
    net = with_random_bn(net, rng)
    state = SelectionState.initial(net).with_logits(
        {i: rng.standard_normal(net.layers[i].out_channels) for i in net.prunable_indices})
    scaled = net.with_state({name: 2.5 * value for name, value in net.parameters().items() if name.endswith("gamma")})
    for rate in (0.3, 0.5, 0.7):
        assert make_plan(compute_importance(state, scaled), rate) == make_plan(compute_importance(state, net), rate)


def test_kept_sets_shrink_monotonically_with_rate(rng):
    report = ImportanceReport(scores={0: rng.random(16), 3: rng.integers(0, 4, 10).astype(float)}, bn_scaled=False)
    rates = [0.0, 0.2, 0.4, 0.5, 0.7, 0.9]
    plans = [make_plan(report, rate) for rate in rates]
    for looser, tighter in zip(plans, plans[1:]):
        for layer in (0, 3):
            assert set(tighter.keep_for(layer)) <= set(looser.keep_for(layer))

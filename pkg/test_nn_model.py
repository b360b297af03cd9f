import numpy as np
import pytest

from scop.core.exceptions import ShapeError
from scop.models import layers as L
from scop.models.architectures import build_arch, planted_network
from scop.models.network import NetworkSpec, count_params_flops, forward, run


def test_structure_queries(tiny_cnn):
    assert tiny_cnn.prunable_indices == (0, 3)
    assert tiny_cnn.mixing_point(0) == 2
    assert tiny_cnn.consumer(0) == 3
    assert tiny_cnn.consumer(3) == 8
    assert tiny_cnn.following_batchnorm(3) == 4
    assert tiny_cnn.shapes[5] == (6, 5, 5)
    assert tiny_cnn.output_shape == (3,)


def test_parameter_names(tiny_cnn):
    names = set(tiny_cnn.parameters())
    assert {"0.weight", "0.bias", "1.gamma", "1.beta", "8.weight", "8.bias"} <= names
    assert set(tiny_cnn.buffers()) == {"1.running_mean", "1.running_var", "4.running_mean", "4.running_var"}


def test_param_and_mac_counts_are_exact(tiny_cnn):
    cost = count_params_flops(tiny_cnn)
    assert cost.params == (4 * 2 * 9 + 4) + 8 + (6 * 4 * 9 + 6) + 12 + (6 * 3 + 3)
    assert cost.macs == 9 * 2 * 4 * 25 + 9 * 4 * 6 * 25 + 6 * 3


def counted_by_hand(net):
    """Parameters and MACs counted element by element from a real forward pass."""
    captured = run(net, np.zeros((1, *net.input_shape)), capture=range(net.depth)).captured
    params = macs = 0
    for i, layer in enumerate(net.layers):
        for part in (layer, *layer.shortcut):
            for array in part.params.values():
                for _ in np.ndindex(array.shape):
                    params += 1
        out_shape = captured[i].shape[1:]
        mixers = [layer] if layer.kind in (L.LayerKind.CONV, L.LayerKind.LINEAR) else []
        if layer.kind is L.LayerKind.RESIDUAL_ADD:
            mixers = [sc for sc in layer.shortcut if sc.kind is L.LayerKind.CONV]
        for mixer in mixers:
            per_output = mixer.in_channels * (mixer.kernel_size ** 2 if mixer.kind is L.LayerKind.CONV else 1)
            for _ in np.ndindex(out_shape):
                macs += per_output
    return params, macs


@pytest.mark.parametrize("name,shape", [("small-cnn", (1, 28, 28)), ("resnet-tiny", (3, 32, 32))])
def test_counts_agree_with_an_element_wise_recount(name, shape, rng):
    net = build_arch(name, input_shape=shape, rng=rng)
    cost = count_params_flops(net)
    assert (cost.params, cost.macs) == counted_by_hand(net)


def test_shape_errors_name_the_layer(rng):
    with pytest.raises(ShapeError, match="layer 0 \\(conv\\)"):
        NetworkSpec(layers=(L.conv(3, 4, 3, rng),), input_shape=(1, 8, 8))
    with pytest.raises(ShapeError, match="layer 1"):
        NetworkSpec(layers=(L.flatten(), L.linear(10, 2, rng)), input_shape=(1, 3, 3))


def test_only_convs_with_a_consumer_are_prunable(rng):
    with pytest.raises(ShapeError):
        NetworkSpec(layers=(L.conv(1, 2, 3, rng, prunable=True), L.activation("relu")), input_shape=(1, 4, 4))
    with pytest.raises(ShapeError):
        NetworkSpec(layers=(L.flatten(), L.linear(16, 4, rng)), input_shape=(1, 4, 4)).replace_layers(
            {1: L.LayerSpec(L.LayerKind.LINEAR, params={"weight": np.ones((4, 16)), "bias": np.zeros(4)}, prunable=True)}
        )


def test_batch_shape_is_checked(tiny_cnn):
    with pytest.raises(ShapeError):
        forward(tiny_cnn, np.zeros((2, 3, 5, 5)))


def test_capture_and_intercept(tiny_cnn, rng):
    batch = rng.standard_normal((4, 2, 5, 5))
    captured = {}
    logits = forward(tiny_cnn, batch, capture=captured)
    assert logits.shape == (4, 3)
    assert set(captured) == set()

    features = {2: None, 5: None}
    forward(tiny_cnn, batch, capture=features)
    assert features[2].shape == (4, 4, 5, 5)
    assert np.all(features[5].data >= 0)

    zeroed = run(tiny_cnn, batch, intercept={2: lambda x: x * 0.0}).logits
    np.testing.assert_allclose(zeroed.data, 0.0)


def test_run_from_a_middle_layer(tiny_cnn, rng):
    batch = rng.standard_normal((3, 2, 5, 5))
    features = {5: None}
    full = forward(tiny_cnn, batch, capture=features)
    tail = forward(tiny_cnn, features[5].data, start=6)
    np.testing.assert_allclose(tail.data, full.data)


def test_train_mode_returns_new_buffers_and_trainable_filter(tiny_cnn, rng):
    batch = rng.standard_normal((4, 2, 5, 5))
    result = run(tiny_cnn, batch, "train", trainable=lambda name: name.startswith("8."))
    assert set(result.buffers) == set(tiny_cnn.buffers())
    assert result.params["8.weight"].requires_grad
    assert not result.params["0.weight"].requires_grad
    np.testing.assert_array_equal(tiny_cnn.layers[1].buffers["running_mean"], np.zeros(4))


def test_with_state_copies(tiny_cnn):
    weight = np.full((3, 6), 0.5)
    updated = tiny_cnn.with_state({"8.weight": weight})
    np.testing.assert_array_equal(updated.layers[8].params["weight"], weight)
    assert not np.array_equal(tiny_cnn.layers[8].params["weight"], weight)
    np.testing.assert_array_equal(updated.layers[0].params["weight"], tiny_cnn.layers[0].params["weight"])


@pytest.mark.parametrize("name,shape", [("small-cnn", (1, 12, 12)), ("resnet-tiny", (3, 8, 8))])
def test_architectures_forward(name, shape, rng):
    net = build_arch(name, num_classes=10, input_shape=shape, rng=rng)
    assert net.prunable_indices
    logits = forward(net, rng.standard_normal((2,) + shape))
    assert logits.shape == (2, 10)
    for i in net.prunable_indices:
        assert net.consumer(i) is not None


def test_resnet_prunes_only_inner_block_convs(rng):
    net = build_arch("resnet-tiny", input_shape=(3, 8, 8), rng=rng)
    assert len(net.prunable_indices) == 6
    for i in net.prunable_indices:
        assert net.layers[net.consumer(i)].kind is L.LayerKind.CONV
        assert net.layers[net.consumer(i) + 2].kind is L.LayerKind.RESIDUAL_ADD


def test_unknown_architecture():
    with pytest.raises(ValueError, match="Valid architectures"):
        build_arch("vgg-huge")


def test_planted_network_normalizes_filters(rng):
    filters = rng.standard_normal((6, 4))
    net = planted_network(filters, np.ones(6), num_classes=2, rng=rng)
    assert net.prunable_indices == (0,)
    inputs = rng.standard_normal((4000, 4, 1, 1))
    features = {1: None}
    forward(net, inputs, capture=features)
    std = features[1].data.reshape(4000, 6).std(axis=0)
    np.testing.assert_allclose(std, 1.0, atol=0.1)

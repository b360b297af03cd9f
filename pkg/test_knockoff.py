import numpy as np
import pytest

from scop.core.exceptions import KnockoffError
from scop.core.seeding import stream
from scop.services.dataset_service import Dataset
from scop.services.knockoff_service import (
    BiasPairModel,
    KnockoffModel,
    choose_s_equicorrelated,
    conditional_gaussian,
    default_bias_pair_model,
    fit_knockoff_model,
    generate_knockoff_dataset,
    load_knockoff_model,
    read_knockoff_cache,
    sample_bias_pair,
    sample_knockoff,
    save_knockoff_model,
    swap_moment_test,
)


def correlated_data(rng, n=4000, d=5):
    mixing = rng.standard_normal((d, d)) / np.sqrt(d) + np.eye(d)
    return rng.standard_normal((n, d)) @ mixing.T + rng.standard_normal(d)


def test_equicorrelated_s_on_identity():
    np.testing.assert_allclose(choose_s_equicorrelated(np.eye(3)), np.ones(3))
    np.testing.assert_allclose(choose_s_equicorrelated(4.0 * np.eye(2)), [4.0, 4.0])


def test_equicorrelated_s_keeps_joint_covariance_psd(rng):
    model = fit_knockoff_model(correlated_data(rng))
    assert np.all(model.s >= 0)
    assert model.psd_margin() >= -1e-10


def test_fit_rejects_bad_input(rng):
    with pytest.raises(KnockoffError, match="at least 2 rows"):
        fit_knockoff_model(rng.standard_normal((1, 3)))
    with pytest.raises(KnockoffError, match="NaN"):
        fit_knockoff_model(np.array([[1.0, np.nan], [0.0, 1.0]]))
    with pytest.raises(KnockoffError, match="non-negative"):
        fit_knockoff_model(rng.standard_normal((5, 2)), ridge=-1.0)


def test_singular_covariance_without_ridge_is_reported(rng):
    constant = np.hstack([rng.standard_normal((50, 1)), np.zeros((50, 1))])
    model = fit_knockoff_model(constant, ridge=0.0)
    with pytest.raises(KnockoffError, match="ridge"):
        conditional_gaussian(model)


def test_ridge_is_relative_to_mean_variance(rng):
    data = rng.standard_normal((200, 3)) * 10.0
    model = fit_knockoff_model(data, ridge=0.01)
    cov = np.cov(data, rowvar=False)
    assert model.ridge == pytest.approx(0.01 * np.mean(np.diag(cov)))


def test_knockoffs_match_second_moments_under_swaps(rng):
    data = correlated_data(rng, n=20000)
    model = fit_knockoff_model(data)
    knockoffs = sample_knockoff(model, data, stream(0, "test"))
    np.testing.assert_allclose(knockoffs.mean(axis=0), data.mean(axis=0), atol=0.08)
    joint = np.cov(np.hstack([data, knockoffs]), rowvar=False)
    d = data.shape[1]
    np.testing.assert_allclose(joint[d:, d:], joint[:d, :d], atol=0.12)
    off = joint[:d, d:] - joint[:d, :d]
    np.testing.assert_allclose(off - np.diag(np.diag(off)), 0.0, atol=0.12)
    np.testing.assert_allclose(np.diag(off), -model.s, atol=0.12)
    assert swap_moment_test(data, knockoffs, [0, 2]) < 0.15


def test_sample_knockoff_single_vector(rng):
    model = fit_knockoff_model(correlated_data(rng, n=100, d=3))
    assert sample_knockoff(model, np.zeros(3), rng).shape == (3,)
    with pytest.raises(KnockoffError):
        sample_knockoff(model, np.zeros(4), rng)


def test_swap_test_empty_subset_is_zero(rng):
    x = rng.standard_normal((10, 3))
    assert swap_moment_test(x, x + 1.0, []) == 0.0


def image_dataset(rng, n=40):
    images = rng.standard_normal((n, 2, 2, 2)).astype(np.float32)
    return Dataset(images, np.zeros(n, dtype=np.int64), "train", 2)


def test_generation_is_chunk_invariant_and_cached(rng, tmp_path):
    data = image_dataset(rng)
    model = fit_knockoff_model(data.images.reshape(len(data), -1))
    whole = generate_knockoff_dataset(model, data, seed=5, chunk=64, cache_path=tmp_path / "k.knk")
    pieces = generate_knockoff_dataset(model, data, seed=5, chunk=7)
    np.testing.assert_allclose(whole, pieces, rtol=1e-6, atol=1e-6)
    np.testing.assert_array_equal(read_knockoff_cache(tmp_path / "k.knk"), whole)
    assert whole.shape == data.images.shape and whole.dtype == np.float32
    other = generate_knockoff_dataset(model, data, seed=6)
    assert not np.array_equal(whole, other)


def test_generation_clamps_to_channel_range(rng):
    data = image_dataset(rng)
    model = fit_knockoff_model(data.images.reshape(len(data), -1))
    clipped = generate_knockoff_dataset(model, data, seed=1, clip=True)
    low, high = data.channel_range()
    assert np.all(clipped.min(axis=(0, 2, 3)) >= low)
    assert np.all(clipped.max(axis=(0, 2, 3)) <= high)


def test_generation_rejects_dimension_mismatch(rng):
    data = image_dataset(rng)
    model = fit_knockoff_model(rng.standard_normal((20, 3)))
    with pytest.raises(KnockoffError, match="dimension"):
        generate_knockoff_dataset(model, data, seed=0)


def test_knockoff_model_file(rng, tmp_path):
    model = fit_knockoff_model(correlated_data(rng, n=50, d=3), ridge=0.1)
    loaded = load_knockoff_model(save_knockoff_model(tmp_path / "model.knm", model))
    np.testing.assert_array_equal(loaded.sigma, model.sigma)
    np.testing.assert_array_equal(loaded.s, model.s)
    assert loaded.ridge == model.ridge


def test_default_bias_pair_model_is_feasible(rng):
    w = rng.standard_normal((6, 4))
    model = default_bias_pair_model(w, rng.random(6) * 2.0)
    assert model.psd_margin() >= -1e-9
    k = w.T @ (model.s_l[:, None] * w)
    assert np.linalg.eigvalsh(np.diag(model.s_next) - k).min() >= -1e-9


def test_bias_pair_model_rejects_bad_s(rng):
    with pytest.raises(KnockoffError):
        default_bias_pair_model(rng.standard_normal((3, 2)), np.ones(4))
    with pytest.raises(KnockoffError):
        default_bias_pair_model(rng.standard_normal((3, 2)), -np.ones(3))


def test_infeasible_bias_pair_covariance_is_reported(rng):
    w = np.eye(2)
    model = BiasPairModel(transform=w, s_l=np.ones(2), s_next=np.zeros(2), sigma_b=1e-3 * np.eye(2))
    with pytest.raises(KnockoffError, match="positive semi-definite"):
        sample_bias_pair(model, rng)


def test_bias_pairs_carry_knockoff_property_through_a_linear_map(rng):
    """With x~ a knockoff of x, W^T x + b and W^T x~ + b~ are knockoffs with diagonal s_next."""
    n, d_in, d_out = 40000, 10, 8
    x = rng.standard_normal((n, d_in))
    model = fit_knockoff_model(x, ridge=0.0)
    x_tilde = sample_knockoff(model, x, stream(2, "x"))
    w = rng.standard_normal((d_in, d_out)) / np.sqrt(d_in) * 0.5
    pair = default_bias_pair_model(w, model.s)
    b, b_tilde = sample_bias_pair(pair, stream(2, "b"), size=n)
    y, y_tilde = x @ w + b, x_tilde @ w + b_tilde

    joint = np.cov(np.hstack([y, y_tilde]), rowvar=False)
    top, cross = joint[:d_out, :d_out], joint[:d_out, d_out:]
    np.testing.assert_allclose(joint[d_out:, d_out:], top, atol=0.1)
    np.testing.assert_allclose(top - cross, np.diag(pair.s_next), atol=0.1)
    assert swap_moment_test(y, y_tilde, range(0, d_out, 2)) < 0.1


def gaussian_pairs(seed, n=100_000, d=10):
    rng = np.random.default_rng(seed)
    mixing = rng.standard_normal((d, d)) / (2.0 * np.sqrt(d)) + np.eye(d)
    x = rng.standard_normal((n, d)) @ mixing.T + rng.standard_normal(d)
    model = fit_knockoff_model(x, ridge=0.0)
    return rng, x, sample_knockoff(model, x, stream(seed, "pairs"))


def test_equicorrelated_s_worked_example():
    sigma = np.array([[1.0, 0.5], [0.5, 1.0]])
    s = choose_s_equicorrelated(sigma)
    np.testing.assert_allclose(s, [1.0, 1.0])
    np.testing.assert_allclose(np.linalg.eigvalsh(2.0 * sigma - np.diag(s)), [0.0, 2.0], atol=1e-12)


def test_degenerate_covariance_gets_zero_s():
    np.testing.assert_allclose(choose_s_equicorrelated(np.ones((2, 2))), 0.0, atol=1e-12)


def test_zero_s_knockoff_is_the_input(rng):
    model = KnockoffModel(mu=np.zeros(3), sigma=np.array([[2.0, 0.3, 0.0], [0.3, 1.0, 0.2], [0.0, 0.2, 1.5]]),
                          s=np.zeros(3), ridge=0.0)
    x = rng.standard_normal((5, 3))
    np.testing.assert_array_equal(sample_knockoff(model, x, rng), x)


def test_identity_knockoffs_are_uncorrelated_with_their_inputs(rng):
    x = rng.standard_normal((100_000, 4))
    model = KnockoffModel(mu=np.zeros(4), sigma=np.eye(4), s=np.ones(4), ridge=0.0)
    x_tilde = sample_knockoff(model, x, rng)
    for j in range(4):
        assert abs(np.corrcoef(x[:, j], x_tilde[:, j])[0, 1]) < 0.05


def test_swap_property_over_random_subsets_and_full_swap():
    rng, x, x_tilde = gaussian_pairs(11)
    d = x.shape[1]
    subsets = [rng.choice(d, size=rng.integers(1, d + 1), replace=False) for _ in range(20)]
    for subset in [*subsets, range(d)]:
        assert swap_moment_test(x, x_tilde, subset) <= 0.1


def test_shifted_knockoff_fails_the_swap_test():
    _, x, x_tilde = gaussian_pairs(12)
    corrupted = x_tilde.copy()
    corrupted[:, 3] = x[:, 3] + 1.0
    assert swap_moment_test(x, corrupted, [3]) >= 0.5
    assert swap_moment_test(x, corrupted, [1, 3, 7]) >= 0.5


def test_relu_features_remain_exchangeable():
    rng, x, x_tilde = gaussian_pairs(13)
    relu_x, relu_tilde = np.maximum(x, 0.0), np.maximum(x_tilde, 0.0)
    for _ in range(10):
        subset = rng.choice(x.shape[1], size=rng.integers(1, x.shape[1] + 1), replace=False)
        before = swap_moment_test(x, x_tilde, subset)
        after = swap_moment_test(relu_x, relu_tilde, subset)
        assert after <= 0.1
        assert after <= 2.0 * before + 0.02
    assert swap_moment_test(relu_x, relu_tilde, range(x.shape[1])) <= 0.1

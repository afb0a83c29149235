"""Regression network: initialization, forward modes, and backprop pieces."""

import numpy as np
import pytest

from kinedm.network import (
    MlpParams,
    backward_network,
    forward,
    forward_cached,
    init_params,
)


@pytest.fixture(scope="module")
def params():
    return init_params(seed=0)


class TestInitParams:
    def test_deterministic_per_seed(self):
        a, b = init_params(0), init_params(0)
        assert a.equals(b)
        assert not a.equals(init_params(1))

    def test_trainable_count(self, params):
        assert params.n_trainable() == 337_528

    def test_he_variance(self, params):
        v = params.w1.var()
        assert abs(v - 2 / 21) < 0.2 * (2 / 21)
        v2 = params.w2.var()
        assert abs(v2 - 2 / 512) < 0.2 * (2 / 512)

    def test_biases_zero_scales_one(self, params):
        assert not params.b1.any() and not params.b2.any() and not params.b3.any()
        assert (params.gamma1 == 1).all() and (params.gamma2 == 1).all()
        assert not params.run_mean1.any() and (params.run_var1 == 1).all()

    def test_shapes(self, params):
        assert params.w1.shape == (21, 512)
        assert params.w2.shape == (512, 512)
        assert params.w3.shape == (512, 120)
        assert params.n_inputs == 21 and params.n_outputs == 120


class TestForward:
    def test_infer_deterministic(self, params):
        rng = np.random.default_rng(0)
        x = rng.uniform(0, 1, 21)
        y1 = forward(params, x, mode="infer")
        y2 = forward(params, x, mode="infer")
        assert np.array_equal(y1, y2)
        assert y1.shape == (120,)

    def test_output_nonnegative(self, params):
        rng = np.random.default_rng(1)
        x = rng.uniform(0, 1, (32, 21))
        y = forward(params, x, mode="infer")
        assert (y >= 0).all()

    def test_zero_output_layer_gives_zeros(self, params):
        p = params.copy()
        p.w3[:] = 0
        p.b3[:] = 0
        x = np.random.default_rng(2).uniform(0, 1, (4, 21))
        assert not forward(p, x, mode="infer").any()

    def test_batchnorm_normalizes_batch(self, params):
        rng = np.random.default_rng(3)
        x = rng.uniform(0, 1, (64, 21))
        p = params.copy()
        _, cache = forward_cached(p, x, train=True, dropout=0.0)
        xhat = cache["xhat1"]
        assert np.abs(xhat.mean(axis=0)).max() < 1e-6
        assert np.abs(xhat.var(axis=0) - 1).max() < 1e-6

    def test_running_stats_updated_in_train_mode(self, params):
        p = params.copy()
        rng = np.random.default_rng(4)
        x = rng.uniform(0, 1, (64, 21)) + 3.0
        before = p.run_mean1.copy()
        forward_cached(p, x, train=True, dropout=0.0)
        assert not np.array_equal(before, p.run_mean1)

    def test_inverted_dropout_masks(self, params):
        # surviving units are scaled by 1/(1-p): mask values are 0 or 2 for
        # p = 0.5, with unit mean and the right drop fraction
        rng = np.random.default_rng(5)
        x = rng.uniform(0, 1, (64, 21))
        _, cache = forward_cached(
            params.copy(), x, train=True, dropout=0.5,
            dropout_rng=np.random.default_rng(42),
        )
        for mask in (cache["mask1"], cache["mask2"]):
            assert set(np.unique(mask)) == {0.0, 2.0}
            assert abs(mask.mean() - 1.0) < 0.02
            assert abs((mask == 0).mean() - 0.5) < 0.02

    def test_train_mode_requires_rng(self, params):
        x = np.zeros((4, 21))
        with pytest.raises(ValueError, match="dropout_rng"):
            forward(params, x, mode="train")

    def test_bad_mode_rejected(self, params):
        with pytest.raises(ValueError, match="mode"):
            forward(params, np.zeros(21), mode="test")

    def test_nonfinite_rejected(self, params):
        x = np.full(21, np.nan)
        with pytest.raises(ValueError, match="non-finite"):
            forward(params, x)


class TestBackwardNetwork:
    def test_matches_finite_differences(self, params):
        rng = np.random.default_rng(6)
        x = rng.uniform(0, 1, (8, 21))
        target = rng.uniform(0, 1, (8, 120))
        p = params.copy()

        def loss(pp):
            out, _ = forward_cached(
                pp, x, train=True, dropout=0.5,
                dropout_rng=np.random.default_rng(7), update_running=False,
            )
            return 0.5 * np.sum((out - target) ** 2)

        out, cache = forward_cached(
            p, x, train=True, dropout=0.5,
            dropout_rng=np.random.default_rng(7), update_running=False,
        )
        grads = backward_network(p, cache, out - target)
        h = 1e-6
        for name in ("w1", "b1", "gamma1", "beta1", "w2", "b2", "w3", "b3"):
            arr = getattr(p, name)
            flat = arr.ravel()
            for k in rng.choice(flat.size, 8, replace=False):
                orig = flat[k]
                flat[k] = orig + h
                lp = loss(p)
                flat[k] = orig - h
                lm = loss(p)
                flat[k] = orig
                fd = (lp - lm) / (2 * h)
                an = grads[name].ravel()[k]
                assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1.0)

    def test_zero_upstream_gives_zero_grads(self, params):
        x = np.random.default_rng(8).uniform(0, 1, (4, 21))
        p = params.copy()
        out, cache = forward_cached(p, x, train=False)
        grads = backward_network(p, cache, np.zeros_like(out))
        assert all(not g.any() for g in grads.values())


def test_params_copy_is_deep(params):
    p = params.copy()
    p.w1[0, 0] += 1.0
    assert params.w1[0, 0] != p.w1[0, 0]


def test_custom_sizes():
    p = init_params(0, n_inputs=6, n_outputs=28, hidden=32)
    assert p.w1.shape == (6, 32) and p.w3.shape == (32, 28)
    y = forward(p, np.zeros(6))
    assert y.shape == (28,)

# tests/test_tensor_core.py
import numpy as np
import pytest

from app.errors import NumericError, ShapeError
from app.services.tensor_core import (
    AdamState, BatchNorm, Conv3d, Dense, ReLU, ResidualBlock, Sequential, adam_step,
    batchnorm_backward, batchnorm_forward, conv3d_backward, conv3d_forward, dense_backward,
    dense_forward, global_avg_pool_backward, global_avg_pool_forward, maxpool3d_backward,
    maxpool3d_forward, numerical_gradient, relative_error, relu_forward,
)

INSTANCES = range(20)


# =============================================================================
# conv3d
# =============================================================================

class TestConv3d:

    def test_zero_weights_give_zero_output(self, rng):
        x = rng.normal(size=(2, 3, 5, 5, 5))
        out = conv3d_forward(x, np.zeros((4, 3, 3, 3, 3)), padding=1)
        assert out.shape == (2, 4, 5, 5, 5)
        assert not out.any()

    def test_scalar_kernel_is_a_product(self):
        out = conv3d_forward(np.full((1, 1, 1, 1, 1), 3.0), np.full((1, 1, 1, 1, 1), -2.5))
        assert out.shape == (1, 1, 1, 1, 1)
        assert out[0, 0, 0, 0, 0] == -7.5

    def test_output_extent_with_stride(self, rng):
        out = conv3d_forward(rng.normal(size=(1, 1, 7, 7, 7)), rng.normal(size=(2, 1, 3, 3, 3)),
                             stride=2, padding=1)
        assert out.shape == (1, 2, 4, 4, 4)

    @pytest.mark.parametrize("extent", [3, 4, 5, 7])
    @pytest.mark.parametrize("kernel", [1, 2, 3])
    @pytest.mark.parametrize("stride", [1, 2, 3])
    @pytest.mark.parametrize("padding", [0, 1, 2])
    def test_output_shape_formula(self, extent, kernel, stride, padding):
        x = np.ones((2, 1, extent, extent, extent))
        out = conv3d_forward(x, np.ones((3, 1, kernel, kernel, kernel)), stride=stride, padding=padding)
        n = (extent + 2 * padding - kernel) // stride + 1
        assert out.shape == (2, 3, n, n, n)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            conv3d_forward(rng.normal(size=(1, 2, 4, 4, 4)), rng.normal(size=(3, 1, 3, 3, 3)))

    @pytest.mark.parametrize("seed", INSTANCES)
    def test_gradients_match_finite_differences(self, seed):
        r = np.random.default_rng(seed)
        x = r.normal(size=(1, 2, 4, 4, 4))
        w = r.normal(size=(3, 2, 3, 3, 3))
        g = r.normal(size=(1, 3, 4, 4, 4))

        def loss():
            return float(np.sum(conv3d_forward(x, w, 1, 1) * g))

        dx, dw = conv3d_backward(g, x, w, 1, 1)
        assert relative_error(dw, numerical_gradient(loss, w)) < 1e-3
        assert relative_error(dx, numerical_gradient(loss, x)) < 1e-3

    def test_strided_gradient(self, rng):
        x = rng.normal(size=(2, 1, 5, 5, 5))
        w = rng.normal(size=(2, 1, 3, 3, 3))
        g = rng.normal(size=conv3d_forward(x, w, 2, 1).shape)

        def loss():
            return float(np.sum(conv3d_forward(x, w, 2, 1) * g))

        dx, dw = conv3d_backward(g, x, w, 2, 1)
        assert relative_error(dw, numerical_gradient(loss, w)) < 1e-3
        assert relative_error(dx, numerical_gradient(loss, x)) < 1e-3

    def test_dtype_preserved(self, rng):
        x = rng.normal(size=(1, 1, 4, 4, 4)).astype(np.float32)
        w = rng.normal(size=(1, 1, 3, 3, 3)).astype(np.float32)
        assert conv3d_forward(x, w, padding=1).dtype == np.float32


# =============================================================================
# batch norm
# =============================================================================

class TestBatchNorm:

    def test_constant_channel_in_train_mode_is_zero(self):
        x = np.full((2, 2, 3, 3, 3), 7.0)
        out, _ = batchnorm_forward(x, np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), train=True)
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_eval_mode_is_affine_on_normalized_input(self, rng):
        x = rng.normal(size=(3, 2, 2, 2, 2))
        out, _ = batchnorm_forward(x, np.full(2, 2.0), np.full(2, 3.0), np.zeros(2), np.ones(2),
                                   train=False, eps=0.0)
        np.testing.assert_allclose(out, 2.0 * x + 3.0, rtol=0, atol=1e-12)

    def test_running_statistics(self, rng):
        x = rng.normal(3.0, 2.0, size=(4, 1, 2, 2, 2))
        mean, var = np.zeros(1), np.ones(1)
        batchnorm_forward(x, np.ones(1), np.zeros(1), mean, var, train=True, momentum=0.1)
        assert mean[0] == pytest.approx(0.1 * x.mean())
        assert var[0] == pytest.approx(0.9 + 0.1 * x.var(ddof=1))

        before = (mean.copy(), var.copy())
        batchnorm_forward(x, np.ones(1), np.zeros(1), mean, var, train=False)
        np.testing.assert_array_equal(mean, before[0])
        np.testing.assert_array_equal(var, before[1])

    def test_single_value_per_channel_rejected(self):
        with pytest.raises(NumericError):
            batchnorm_forward(np.ones((1, 2)), np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), train=True)

    @pytest.mark.parametrize("seed", INSTANCES)
    def test_gradients_match_finite_differences(self, seed):
        r = np.random.default_rng(seed)
        x = r.normal(size=(2, 2, 2, 2, 2))
        gamma = r.normal(size=2)
        beta = r.normal(size=2)
        g = r.normal(size=x.shape)

        def loss():
            out, _ = batchnorm_forward(x, gamma, beta, np.zeros(2), np.ones(2), train=True)
            return float(np.sum(out * g))

        _, cache = batchnorm_forward(x, gamma, beta, np.zeros(2), np.ones(2), train=True)
        dx, dgamma, dbeta = batchnorm_backward(g, cache)
        assert relative_error(dx, numerical_gradient(loss, x)) < 1e-3
        assert relative_error(dgamma, numerical_gradient(loss, gamma)) < 1e-3
        assert relative_error(dbeta, numerical_gradient(loss, beta)) < 1e-3

    def test_eval_mode_gradient(self, rng):
        x = rng.normal(size=(2, 3, 2, 2, 2))
        gamma, beta = rng.normal(size=3), rng.normal(size=3)
        mean, var = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)
        g = rng.normal(size=x.shape)

        def loss():
            out, _ = batchnorm_forward(x, gamma, beta, mean, var, train=False)
            return float(np.sum(out * g))

        _, cache = batchnorm_forward(x, gamma, beta, mean, var, train=False)
        dx, _, _ = batchnorm_backward(g, cache)
        assert relative_error(dx, numerical_gradient(loss, x)) < 1e-3


# =============================================================================
# pointwise / pooling / dense
# =============================================================================

class TestSmallLayers:

    def test_relu(self):
        np.testing.assert_array_equal(relu_forward(np.array([-1.0, 2.0])), [0.0, 2.0])

    def test_global_avg_pool_of_constant(self):
        x = np.full((2, 3, 4, 4, 4), 1.75)
        out = global_avg_pool_forward(x)
        np.testing.assert_array_equal(out, np.full((2, 3), 1.75))
        dx = global_avg_pool_backward(np.ones((2, 3)), x.shape)
        np.testing.assert_allclose(dx, 1.0 / 64)

    def test_maxpool_routes_gradient_to_the_max(self):
        x = np.zeros((1, 1, 2, 2, 2))
        x[0, 0, 1, 0, 1] = 5.0
        out, cache = maxpool3d_forward(x, 2)
        assert out.shape == (1, 1, 1, 1, 1) and out.item() == 5.0
        dx = maxpool3d_backward(np.full(out.shape, 3.0), cache)
        assert dx[0, 0, 1, 0, 1] == 3.0 and dx.sum() == 3.0

    def test_maxpool_ties_take_the_first_voxel(self):
        _, cache = maxpool3d_forward(np.ones((1, 1, 2, 2, 2)), 2)
        dx = maxpool3d_backward(np.ones((1, 1, 1, 1, 1)), cache)
        assert dx[0, 0, 0, 0, 0] == 1.0 and dx.sum() == 1.0

    def test_maxpool_floors_extents(self, rng):
        out, cache = maxpool3d_forward(rng.normal(size=(1, 2, 5, 5, 5)), 2)
        assert out.shape == (1, 2, 2, 2, 2)
        dx = maxpool3d_backward(np.ones(out.shape), cache)
        assert dx.shape == (1, 2, 5, 5, 5)
        assert not dx[:, :, 4].any()

    def test_maxpool_on_too_small_extent(self, rng):
        with pytest.raises(ShapeError):
            maxpool3d_forward(rng.normal(size=(1, 1, 2, 2, 2)), 3)

    @pytest.mark.parametrize("seed", INSTANCES)
    def test_dense_gradients(self, seed):
        r = np.random.default_rng(seed)
        x = r.normal(size=(5, 4))
        w = r.normal(size=(4, 8))
        b = r.normal(size=8)
        g = r.normal(size=(5, 8))

        def loss():
            return float(np.sum(dense_forward(x, w, b) * g))

        dx, dw, db = dense_backward(g, x, w)
        assert relative_error(dx, numerical_gradient(loss, x)) < 1e-3
        assert relative_error(dw, numerical_gradient(loss, w)) < 1e-3
        assert relative_error(db, numerical_gradient(loss, b)) < 1e-3

    def test_dense_width_mismatch(self, rng):
        with pytest.raises(ShapeError):
            dense_forward(rng.normal(size=(2, 3)), rng.normal(size=(4, 2)), None)


# =============================================================================
# composite layers
# =============================================================================

class TestComposites:

    def test_sequential_rejects_non_finite_activations(self, rng):
        net = Sequential("net", [Dense("fc", 3, 2), ReLU("relu")])
        params = net.init_params(rng, np.float64)
        x = np.array([[1.0, np.inf, 0.0]])
        with pytest.raises(NumericError) as err:
            net.forward(x, params, {}, train=True)
        assert err.value.layer == "fc"

    def test_zero_init_residual_block_is_identity_on_nonnegative_input(self, rng):
        block = ResidualBlock("res", channels=3, inner=2, zero_init=True)
        params = block.init_params(rng, np.float64)
        buffers = block.init_buffers(np.float64)
        x = np.abs(rng.normal(size=(2, 3, 4, 4, 4)))
        out, _ = block.forward(x, params, buffers, train=True)
        np.testing.assert_allclose(out, x, atol=1e-12)

    def test_residual_block_gradients(self, rng, sampled_grad_check):
        block = ResidualBlock("res", channels=2, inner=2)
        params = block.init_params(rng, np.float64)
        buffers = block.init_buffers(np.float64)
        x = rng.normal(size=(2, 2, 3, 3, 3))
        g = rng.normal(size=x.shape)

        def loss():
            out, _ = block.forward(x, params, buffers, train=True)
            return float(np.sum(out * g))

        _, cache = block.forward(x, params, buffers, train=True)
        dx, grads = block.backward(g, cache, params)
        assert sampled_grad_check(loss, params, grads) < 1e-3
        assert sampled_grad_check(loss, {"x": x}, {"x": dx}, per_array=20) < 1e-3

    def test_conv_layer_naming(self, rng):
        conv = Conv3d("conv1", 1, 2, 3)
        bn = BatchNorm("bn1", 2)
        assert set(conv.init_params(rng, np.float32)) == {"conv1.weight"}
        assert set(bn.init_params(rng, np.float32)) == {"bn1.gamma", "bn1.beta"}
        assert set(bn.init_buffers(np.float32)) == {"bn1.running_mean", "bn1.running_var"}
        assert conv.init_params(rng, np.float32)["conv1.weight"].dtype == np.float32


# =============================================================================
# Adam
# =============================================================================

class TestAdam:

    def test_zero_gradient_without_decay_is_a_no_op(self):
        params = {"w": np.array([1.0, -2.0])}
        state = AdamState(weight_decay=0.0)
        adam_step(params, {"w": np.zeros(2)}, state)
        np.testing.assert_array_equal(params["w"], [1.0, -2.0])
        assert state.t == 1

    def test_first_step_moves_by_lr(self):
        params = {"theta": np.zeros(1)}
        adam_step(params, {"theta": np.ones(1)}, AdamState(lr=0.01, weight_decay=0.0))
        assert params["theta"][0] == pytest.approx(-0.01, rel=1e-6)

    def test_identical_calls_are_bit_identical(self, rng):
        w = rng.normal(size=(3, 4))
        g = rng.normal(size=(3, 4))
        a, b = {"w": w.copy()}, {"w": w.copy()}
        sa, sb = AdamState(), AdamState()
        for _ in range(3):
            adam_step(a, {"w": g}, sa)
            adam_step(b, {"w": g}, sb)
        np.testing.assert_array_equal(a["w"], b["w"])

    def test_copy_is_independent(self):
        params = {"w": np.zeros(2)}
        state = AdamState()
        adam_step(params, {"w": np.ones(2)}, state)
        clone = state.copy()
        adam_step(params, {"w": np.ones(2)}, state)
        assert clone.t == 1 and state.t == 2
        assert not np.array_equal(clone.m["w"], state.m["w"])

    def test_unknown_parameter(self):
        with pytest.raises(ShapeError):
            adam_step({"w": np.zeros(2)}, {"v": np.zeros(2)}, AdamState())

    def test_non_finite_gradient(self):
        with pytest.raises(NumericError):
            adam_step({"w": np.zeros(2)}, {"w": np.array([np.nan, 0.0])}, AdamState())

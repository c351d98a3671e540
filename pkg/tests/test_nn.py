import numpy as np
import pytest

from sthash.nn import (
    MlpSpec,
    ParamBuffer,
    adam_step,
    mlp_backward,
    mlp_forward,
    mlp_init,
    mlp_param_views,
    sigmoid,
    softplus,
)


def make_params(spec, values):
    buf = ParamBuffer.zeros(spec.n_params, dtype=np.float64)
    buf.values[:] = values
    return buf


class TestMlpForward:
    def test_single_linear_layer_hand_product(self):
        spec = MlpSpec(input_dim=2, hidden_dim=0, hidden_layers=0, output_dim=2)
        buf = ParamBuffer.zeros(spec.n_params, dtype=np.float64)
        (w, b), = mlp_param_views(spec, buf.values)
        w[:] = [[1.0, 2.0], [3.0, 4.0]]
        b[:] = 0.0
        out, _ = mlp_forward(spec, buf, np.array([[1.0, 1.0]]))
        # [1,1] @ [[1,2],[3,4]] = [4,6]
        np.testing.assert_allclose(out, [[4.0, 6.0]])

    def test_spec_example_row_weights(self):
        # weights [[1,2],[3,4]] acting as rows on the input gives [3, 7]
        spec = MlpSpec(input_dim=2, hidden_dim=0, hidden_layers=0, output_dim=2)
        buf = ParamBuffer.zeros(spec.n_params, dtype=np.float64)
        (w, b), = mlp_param_views(spec, buf.values)
        w[:] = np.array([[1.0, 2.0], [3.0, 4.0]]).T
        out, _ = mlp_forward(spec, buf, np.array([[1.0, 1.0]]))
        np.testing.assert_allclose(out, [[3.0, 7.0]])

    def test_zero_params_zero_output(self):
        spec = MlpSpec(input_dim=3, hidden_dim=5, hidden_layers=2, output_dim=4)
        buf = ParamBuffer.zeros(spec.n_params, dtype=np.float64)
        out, _ = mlp_forward(spec, buf, np.random.default_rng(0).random((7, 3)))
        assert np.all(out == 0.0)

    def test_forward_is_deterministic(self):
        spec = MlpSpec(input_dim=4, hidden_dim=8, hidden_layers=2, output_dim=3)
        buf = mlp_init(spec, np.random.default_rng(1), dtype=np.float64)
        x = np.random.default_rng(2).random((5, 4))
        a, _ = mlp_forward(spec, buf, x)
        b, _ = mlp_forward(spec, buf, x)
        assert np.array_equal(a, b)

    def test_dimension_mismatch_reports_both_dims(self):
        spec = MlpSpec(input_dim=4, hidden_dim=8, hidden_layers=1, output_dim=3)
        buf = mlp_init(spec, np.random.default_rng(0))
        with pytest.raises(ValueError, match="expected 4, got 3"):
            mlp_forward(spec, buf, np.zeros((2, 3)))

    def test_output_activations(self):
        for act, fn in [("sigmoid", sigmoid), ("exp", np.exp), ("softplus", softplus)]:
            spec = MlpSpec(
                input_dim=2, hidden_dim=0, hidden_layers=0, output_dim=2,
                output_activation=act,
            )
            buf = mlp_init(spec, np.random.default_rng(3), dtype=np.float64)
            x = np.random.default_rng(4).standard_normal((6, 2))
            out, _ = mlp_forward(spec, buf, x)
            (w, b), = mlp_param_views(spec, buf.values)
            np.testing.assert_allclose(out, fn(x @ w + b), rtol=1e-12)


class TestMlpBackward:
    def test_identity_layer_passes_gradient_through(self):
        spec = MlpSpec(input_dim=2, hidden_dim=0, hidden_layers=0, output_dim=2)
        buf = ParamBuffer.zeros(spec.n_params, dtype=np.float64)
        (w, _), = mlp_param_views(spec, buf.values)
        w[:] = np.eye(2)
        _, cache = mlp_forward(spec, buf, np.array([[0.3, -0.7]]))
        d_in = mlp_backward(cache, np.array([[1.0, 0.0]]))
        np.testing.assert_allclose(d_in, [[1.0, 0.0]])

    def test_relu_blocks_gradient_at_negative_preactivation(self):
        spec = MlpSpec(input_dim=1, hidden_dim=1, hidden_layers=1, output_dim=1)
        buf = ParamBuffer.zeros(spec.n_params, dtype=np.float64)
        views = mlp_param_views(spec, buf.values)
        views[0][0][:] = 1.0  # hidden weight
        views[1][0][:] = 1.0  # output weight
        _, cache = mlp_forward(spec, buf, np.array([[-2.0]]))
        d_in = mlp_backward(cache, np.array([[1.0]]))
        assert d_in[0, 0] == 0.0
        assert np.all(mlp_param_views(spec, buf.grads)[0][0] == 0.0)

    def test_gradients_accumulate_not_overwrite(self):
        spec = MlpSpec(input_dim=3, hidden_dim=4, hidden_layers=1, output_dim=2)
        buf = mlp_init(spec, np.random.default_rng(5), dtype=np.float64)
        x = np.random.default_rng(6).random((4, 3))
        _, cache = mlp_forward(spec, buf, x)
        mlp_backward(cache, np.ones((4, 2)))
        once = buf.grads.copy()
        _, cache = mlp_forward(spec, buf, x)
        mlp_backward(cache, np.ones((4, 2)))
        np.testing.assert_allclose(buf.grads, 2.0 * once, rtol=1e-12)

    def test_stale_cache_rejected(self):
        spec = MlpSpec(input_dim=2, hidden_dim=3, hidden_layers=1, output_dim=2)
        buf = mlp_init(spec, np.random.default_rng(7), dtype=np.float64)
        _, cache = mlp_forward(spec, buf, np.zeros((3, 2)))
        with pytest.raises(ValueError, match="stale"):
            mlp_backward(cache, np.zeros((5, 2)))

    @pytest.mark.parametrize("trial", range(20))
    def test_finite_difference_gradients(self, trial):
        rng = np.random.default_rng(100 + trial)
        spec = MlpSpec(
            input_dim=int(rng.integers(1, 4)),
            hidden_dim=int(rng.integers(1, 6)),
            hidden_layers=int(rng.integers(0, 3)),
            output_dim=int(rng.integers(1, 4)),
            output_activation=["none", "sigmoid", "exp", "softplus"][trial % 4],
        )
        buf = mlp_init(spec, rng, dtype=np.float64)
        # randomize biases too, keeping pre-activations off the relu kink
        buf.values[:] = 0.5 * rng.standard_normal(spec.n_params)
        x = rng.standard_normal((3, spec.input_dim))
        d_out = rng.standard_normal((3, spec.output_dim))

        def loss():
            y, _ = mlp_forward(spec, buf, x)
            return float((y * d_out).sum())

        _, cache = mlp_forward(spec, buf, x)
        mlp_backward(cache, d_out)
        h = 1e-5
        idx = rng.permutation(spec.n_params)[:10]
        for i in idx:
            keep = buf.values[i]
            buf.values[i] = keep + h
            up = loss()
            buf.values[i] = keep - h
            dn = loss()
            buf.values[i] = keep
            fd = (up - dn) / (2 * h)
            denom = max(abs(fd), abs(buf.grads[i]), 1e-6)
            assert abs(fd - buf.grads[i]) / denom < 1e-4


class TestAdam:
    def test_zero_grad_is_identity(self):
        buf = ParamBuffer.from_values(np.array([1.0, -2.0, 3.0]))
        adam_step(buf, lr=0.1)
        np.testing.assert_allclose(buf.values, [1.0, -2.0, 3.0])

    def test_lr_zero_is_identity(self):
        buf = ParamBuffer.from_values(np.array([1.0, 2.0]))
        buf.grads[:] = [0.5, -0.5]
        adam_step(buf, lr=0.0)
        np.testing.assert_allclose(buf.values, [1.0, 2.0])

    def test_first_step_magnitude(self):
        # bias-corrected m_hat = g, v_hat = g^2, so the first step is -lr
        buf = ParamBuffer.from_values(np.array([0.0]))
        buf.grads[:] = 1.0
        adam_step(buf, lr=0.01, eps=1e-15)
        assert abs(buf.values[0] + 0.01) < 1e-10
        assert buf.step_count == 1

    def test_nonfinite_gradient_skipped_and_counted(self):
        buf = ParamBuffer.from_values(np.array([1.0, 2.0]))
        buf.grads[:] = [np.nan, 1.0]
        adam_step(buf, lr=0.1)
        np.testing.assert_allclose(buf.values, [1.0, 2.0])
        assert buf.skipped_steps == 1

    def test_identical_runs_identical_trajectories(self):
        def run():
            rng = np.random.default_rng(11)
            buf = ParamBuffer.from_values(rng.standard_normal(8))
            for _ in range(5):
                buf.grads[:] = rng.standard_normal(8)
                adam_step(buf, lr=0.05)
                buf.zero_grads()
            return buf.values.copy()

        assert np.array_equal(run(), run())

    def test_zero_grads_clears(self):
        buf = ParamBuffer.from_values(np.ones(4))
        buf.grads[:] = 3.0
        buf.zero_grads()
        assert np.abs(buf.grads).max() == 0.0

    def test_buffer_lengths_match(self):
        buf = ParamBuffer.zeros(7)
        assert len(buf) == buf.grads.size == buf.adam_m.size == buf.adam_v.size == 7

"""Tape ops: forward values from worked examples, backward against finite
differences, and the tape's determinism/linearity contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssnn import tensor as tt
from ssnn.neuron import NeuronConfig, lif_charge, soft_reset
from ssnn.tensor import BatchNormState, SurrogateConfig, Tape, Tensor
from ssnn.verify import gradcheck


def t5(data, **kw):
    """Wrap a [H,W] grid as a [1,1,1,H,W] temporal tensor."""
    arr = np.asarray(data, dtype=np.float64)
    return Tensor(arr.reshape((1, 1, 1) + arr.shape), **kw)


class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 1, 4, 4)))
        w = Tensor(np.ones((1, 1, 1, 1)))
        b = Tensor(np.zeros(1))
        out = tt.conv2d(x, w, b)
        assert np.allclose(out.data, x.data)

    def test_sum_kernel(self):
        x = t5([[1.0, 2.0], [3.0, 4.0]])
        w = Tensor(np.ones((1, 1, 2, 2)))
        b = Tensor(np.zeros(1))
        out = tt.conv2d(x, w, b, stride=1, padding=0)
        assert out.data.reshape(-1).tolist() == [10.0]

    def test_zero_input_gives_bias(self):
        x = Tensor(np.zeros((2, 2, 3, 4, 4)))
        w = Tensor(np.random.default_rng(1).standard_normal((5, 3, 3, 3)))
        b = Tensor(np.arange(5, dtype=np.float64))
        out = tt.conv2d(x, w, b, padding=1)
        assert np.allclose(out.data, np.arange(5.0).reshape(1, 1, 5, 1, 1))

    def test_output_spatial_size(self):
        x = Tensor(np.zeros((1, 1, 2, 9, 9)))
        w = Tensor(np.zeros((4, 2, 3, 3)))
        out = tt.conv2d(x, w, None, stride=2, padding=1)
        assert out.shape == (1, 1, 4, 5, 5)

    def test_channel_mismatch_names_both_shapes(self):
        x = Tensor(np.zeros((1, 1, 3, 4, 4)))
        w = Tensor(np.zeros((2, 5, 3, 3)))
        with pytest.raises(ValueError, match=r"\(1, 1, 3, 4, 4\).*\(2, 5, 3, 3\)"):
            tt.conv2d(x, w, None)


class TestLinear:
    def test_scalar_affine(self):
        out = tt.linear(Tensor([[3.0]]), Tensor([[2.0]]), Tensor([0.0]))
        assert out.data.tolist() == [[6.0]]

    def test_identity(self):
        x = Tensor(np.random.default_rng(2).standard_normal((3, 2, 4)))
        out = tt.linear(x, Tensor(np.eye(4)), Tensor(np.zeros(4)))
        assert np.allclose(out.data, x.data)

    def test_zero_weight_constant_bias(self):
        x = Tensor(np.random.default_rng(3).standard_normal((2, 2, 3)))
        out = tt.linear(x, Tensor(np.zeros((5, 3))), Tensor(np.full(5, 7.0)))
        assert np.all(out.data == 7.0)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError, match="does not match"):
            tt.linear(Tensor(np.zeros((1, 4))), Tensor(np.zeros((2, 3))))


class TestAvgPool:
    def test_ones(self):
        out = tt.avgpool2d(t5(np.ones((2, 2))), 2)
        assert out.data.reshape(-1).tolist() == [1.0]

    def test_mean_window(self):
        out = tt.avgpool2d(t5([[1.0, 3.0], [5.0, 7.0]]), 2)
        assert out.data.reshape(-1).tolist() == [4.0]

    def test_global_pool_of_constant(self):
        out = tt.avgpool2d(t5(np.full((6, 6), 2.5)), 6)
        assert out.data.reshape(-1).tolist() == [2.5]

    def test_window_too_large(self):
        with pytest.raises(ValueError, match="exceeds"):
            tt.avgpool2d(t5(np.ones((2, 2))), 3)


class TestBatchNorm:
    def test_standardized_input_passthrough(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(-1.5, 1.5, (4, 8, 3, 5, 5))
        x = (x - x.mean(axis=(0, 1, 3, 4), keepdims=True))
        x = x / x.std(axis=(0, 1, 3, 4), keepdims=True)
        out = tt.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                            BatchNormState(), training=True)
        assert np.abs(out.data - x).max() <= 1e-5

    def test_constant_input_gives_beta(self):
        x = Tensor(np.full((2, 3, 2, 4, 4), 9.0))
        out = tt.batch_norm(x, Tensor(np.ones(2)), Tensor(np.full(2, 0.5)),
                            BatchNormState(), training=True)
        assert np.allclose(out.data, 0.5)

    def test_affine_rescale(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((4, 16, 3, 6, 6)) * 3.0 + 1.0)
        out = tt.batch_norm(x, Tensor(np.full(3, 2.0)), Tensor(np.ones(3)),
                            BatchNormState(), training=True)
        mean = out.data.mean(axis=(0, 1, 3, 4))
        std = out.data.std(axis=(0, 1, 3, 4))
        assert np.abs(mean - 1.0).max() < 1e-4
        assert np.abs(std - 2.0).max() < 1e-4

    def test_eval_before_train_fails(self):
        x = Tensor(np.zeros((1, 1, 2, 2, 2)))
        with pytest.raises(RuntimeError, match="uninitialized"):
            tt.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)),
                          BatchNormState(), training=False)

    def test_eval_uses_running_stats(self):
        rng = np.random.default_rng(6)
        state = BatchNormState()
        gamma, beta = Tensor(np.ones(2)), Tensor(np.zeros(2))
        xtr = Tensor(rng.standard_normal((2, 8, 2, 3, 3)) + 5.0)
        tt.batch_norm(xtr, gamma, beta, state, training=True)
        xev = Tensor(np.full((1, 1, 2, 1, 1), 5.0))
        out = tt.batch_norm(xev, gamma, beta, state, training=False)
        expect = (5.0 - state.mean) / np.sqrt(state.var + 1e-5)
        assert np.allclose(out.data.reshape(2), expect)


class TestSoftmax:
    def test_uniform(self):
        out = tt.softmax(Tensor([0.0, 0.0]))
        assert np.allclose(out.data, [0.5, 0.5])

    def test_closed_form(self):
        out = tt.softmax(Tensor([np.log(2.0), 0.0]))
        assert np.allclose(out.data, [2 / 3, 1 / 3], atol=1e-12)

    def test_shift_invariance_and_sum(self):
        rng = np.random.default_rng(7)
        v = rng.standard_normal(9)
        a = tt.softmax(Tensor(v)).data
        b = tt.softmax(Tensor(v + 123.456)).data
        assert np.allclose(a, b, atol=1e-12)
        assert abs(a.sum() - 1.0) < 1e-6

    def test_large_inputs_stay_finite(self):
        out = tt.softmax(Tensor([1e4, 0.0, -1e4]))
        assert np.all(np.isfinite(out.data))


class TestSpike:
    def test_fires_at_threshold(self):
        cfg = SurrogateConfig(a=1.0, theta=1.0)
        out = tt.spike(Tensor([1.0, 0.999, 1.5]), cfg)
        assert out.data.tolist() == [1.0, 0.0, 1.0]

    def test_surrogate_window(self):
        cfg = SurrogateConfig(a=1.0, theta=1.0)
        h = Tensor([1.2, 1.6], requires_grad=True)
        with Tape() as tape:
            s = tt.spike(h, cfg)
            loss = tt.sum_axes(s, (0,))
        g = tt.backward(tape, loss).get(h)
        assert g.tolist() == [1.0, 0.0]

    def test_window_boundary_gets_zero_gradient(self):
        cfg = SurrogateConfig(a=1.0, theta=1.0)
        h = Tensor([1.5], requires_grad=True)
        with Tape() as tape:
            loss = tt.sum_axes(tt.spike(h, cfg), (0,))
        assert tt.backward(tape, loss).get(h).tolist() == [0.0]

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_output_always_binary(self, seed):
        rng = np.random.default_rng(seed)
        h = Tensor(rng.standard_normal((3, 4)) * 5)
        s = tt.spike(h, SurrogateConfig()).data
        assert set(np.unique(s)).issubset({0.0, 1.0})


class TestBackward:
    def test_simple_product(self):
        w = Tensor([2.0], requires_grad=True)
        x = Tensor([3.0])
        with Tape() as tape:
            loss = tt.sum_axes(tt.mul(w, x), (0,))
        assert tt.backward(tape, loss).get(w).tolist() == [3.0]

    def test_spike_local_gradient_substitution(self):
        h = Tensor([1.2], requires_grad=True)
        with Tape() as tape:
            loss = tt.sum_axes(tt.spike(h, SurrogateConfig()), (0,))
        assert tt.backward(tape, loss).get(h).tolist() == [1.0]

    def test_two_step_lif_leak_chain(self):
        # no spike, outside the surrogate window: dH2/dU0 = (1 - 1/tau)^2
        cfg = NeuronConfig(tau=2.0, theta=1.0)
        u0 = Tensor([0.4], requires_grad=True)
        zero = Tensor([0.0])
        with Tape() as tape:
            h1 = lif_charge(u0, zero, cfg)
            s1 = tt.spike(h1, SurrogateConfig(a=1.0, theta=1.0))
            u1 = soft_reset(h1, s1, cfg)
            h2 = lif_charge(u1, zero, cfg)
            loss = tt.sum_axes(h2, (0,))
        assert s1.data.tolist() == [0.0]
        assert tt.backward(tape, loss).get(u0).tolist() == [0.25]

    def test_loss_not_on_tape(self):
        with Tape() as tape:
            pass
        with pytest.raises(ValueError, match="not produced on this tape"):
            tt.backward(tape, Tensor(0.0))

    def test_replay_is_bitwise_identical(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.standard_normal((2, 2, 2, 4, 4)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
        with Tape() as tape:
            out = tt.conv2d(x, w, None, padding=1)
            loss = tt.mean_axes(out, (0, 1, 2, 3, 4))
        g1 = tt.backward(tape, loss)
        g2 = tt.backward(tape, loss)
        for t in (x, w):
            assert np.array_equal(g1.get(t), g2.get(t))

    def test_linearity_power_of_two_exact(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.standard_normal((1, 2, 2, 4, 4)), requires_grad=True)
        w = Tensor(rng.standard_normal((2, 2, 3, 3)), requires_grad=True)

        def grads(alpha):
            with Tape() as tape:
                out = tt.conv2d(x, w, None)
                loss = tt.scale(tt.mean_axes(out, (0, 1, 2, 3, 4)), alpha)
            s = tt.backward(tape, loss)
            return s.get(x), s.get(w)

        gx1, gw1 = grads(1.0)
        gx2, gw2 = grads(2.0)
        assert np.array_equal(gx2, 2.0 * gx1)
        assert np.array_equal(gw2, 2.0 * gw1)

    def test_timestep_stack_roundtrip_gradient(self):
        x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
        with Tape() as tape:
            slices = [tt.timestep(x, t) for t in range(3)]
            y = tt.stack_timesteps(slices)
            loss = tt.mean_axes(y, (0, 1))
        g = tt.backward(tape, loss).get(x)
        assert np.allclose(g, np.full((3, 4), 1 / 12))


class TestCrossEntropy:
    def test_uniform_logits(self):
        logits = Tensor(np.zeros((3, 10)))
        loss = tt.cross_entropy(logits, np.array([0, 5, 9]))
        assert abs(float(loss.data) - np.log(10)) < 1e-12

    def test_two_class(self):
        loss = tt.cross_entropy(Tensor([[0.0, 0.0]]), np.array([0]))
        assert abs(float(loss.data) - np.log(2)) < 1e-12

    def test_margin_drives_loss_to_zero(self):
        prev = np.inf
        for margin in [1.0, 4.0, 16.0, 64.0]:
            loss = float(tt.cross_entropy(
                Tensor([[margin, 0.0]]), np.array([0])).data)
            assert loss < prev
            prev = loss
        assert prev < 1e-20

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="labels must lie"):
            tt.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


class TestGradcheckPerOp:
    """Spot FD checks here; the acceptance suite runs the full sweep."""

    def test_conv2d(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((2, 1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        err = gradcheck(
            lambda xt, wt, bt: tt.mean_axes(
                tt.conv2d(xt, wt, bt, stride=2, padding=1), (0, 1, 2, 3, 4)),
            [x, w, b])
        assert err <= 1e-6

    def test_batchnorm_train_mode(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((2, 3, 2, 3, 3))
        proj = Tensor(rng.standard_normal(x.shape))

        def f(xt):
            out = tt.batch_norm(xt, Tensor(np.full(2, 1.3)),
                                Tensor(np.zeros(2)), BatchNormState(),
                                training=True)
            return tt.mean_axes(tt.mul(out, proj), (0, 1, 2, 3, 4))

        assert gradcheck(f, [x]) <= 1e-6

    def test_softmax_then_ce(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((4, 3))
        labels = np.array([0, 2, 1, 1])
        assert gradcheck(lambda t: tt.cross_entropy(t, labels), [x]) <= 1e-6

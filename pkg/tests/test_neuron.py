"""LIF dynamics: worked step examples, the leak law, and spike-count
monotonicity under a uniform input shift."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssnn import tensor as tt
from ssnn.neuron import NeuronConfig, lif_charge, lif_forward_sequence, soft_reset
from ssnn.tensor import Tensor


def seq(values):
    """Scalar current sequence as a [T,1] temporal tensor."""
    return Tensor(np.asarray(values, dtype=np.float64).reshape(-1, 1))


class TestChargeAndReset:
    @pytest.mark.parametrize("u,i,expect", [
        (0.0, 1.0, 1.0),
        (1.0, 0.0, 0.5),
        (0.8, 0.7, 1.1),
    ])
    def test_charge(self, u, i, expect):
        cfg = NeuronConfig(tau=2.0)
        out = lif_charge(Tensor([u]), Tensor([i]), cfg)
        assert abs(out.data[0] - expect) < 1e-12

    @pytest.mark.parametrize("h,s,expect", [
        (1.5, 1.0, 0.5),
        (0.4, 0.0, 0.4),
        (1.0, 1.0, 0.0),
    ])
    def test_soft_reset(self, h, s, expect):
        cfg = NeuronConfig(theta=1.0)
        out = soft_reset(Tensor([h]), Tensor([s]), cfg)
        assert abs(out.data[0] - expect) < 1e-12

    def test_shape_mismatch(self):
        cfg = NeuronConfig()
        with pytest.raises(ValueError, match="does not match"):
            lif_charge(Tensor(np.zeros(2)), Tensor(np.zeros(3)), cfg)

    def test_tau_must_leak(self):
        with pytest.raises(ValueError):
            NeuronConfig(tau=1.0)


class TestSequence:
    @pytest.mark.parametrize("currents,expected", [
        ([1.0, 1.0], [1.0, 1.0]),
        ([0.6, 0.6], [0.0, 0.0]),
        ([0.6, 0.8], [0.0, 1.0]),
    ])
    def test_hand_evaluated_trains(self, currents, expected):
        s = lif_forward_sequence(seq(currents), NeuronConfig())
        assert s.data.reshape(-1).tolist() == expected

    def test_empty_sequence_rejected(self):
        with pytest.raises(ValueError, match="zero timesteps"):
            lif_forward_sequence(Tensor(np.zeros((0, 1))), NeuronConfig())

    def test_reset_identity_every_step(self):
        # U_t + theta*S_t == H_t, checked by replaying the recurrence
        rng = np.random.default_rng(0)
        cfg = NeuronConfig(tau=2.0, theta=1.0)
        i = rng.uniform(-0.5, 1.5, size=(6, 3))
        s = lif_forward_sequence(Tensor(i), cfg).data
        u = np.zeros(3)
        for t in range(6):
            h = cfg.leak * u + i[t]
            assert np.array_equal(s[t], (h >= cfg.theta).astype(float))
            u_next = h - cfg.theta * s[t]
            assert np.allclose(u_next + cfg.theta * s[t], h, atol=0)
            u = u_next

    def test_geometric_leak_without_input(self):
        cfg = NeuronConfig(tau=2.0)
        u = Tensor([0.9])
        zero = Tensor([0.0])
        for t in range(1, 6):
            h = lif_charge(u, zero, cfg)
            s = tt.spike(h, tt.SurrogateConfig(theta=cfg.theta))
            u = soft_reset(h, s, cfg)
            assert s.data[0] == 0.0
            assert abs(u.data[0] - 0.9 * cfg.leak ** t) < 1e-15

    def test_stateless_across_batch(self):
        rng = np.random.default_rng(1)
        sample = rng.uniform(0, 1.4, size=(5, 1, 2, 3, 3))
        batch = np.concatenate([sample, sample], axis=1)
        s = lif_forward_sequence(Tensor(batch), NeuronConfig()).data
        assert np.array_equal(s[:, 0], s[:, 1])

    @given(st.integers(0, 2**32 - 1), st.floats(0.01, 1.0))
    @settings(max_examples=40, deadline=None)
    def test_spike_count_monotone_in_uniform_shift(self, seed, c):
        rng = np.random.default_rng(seed)
        i = rng.uniform(-1, 1.5, size=(6, 4))
        cfg = NeuronConfig()
        lo = lif_forward_sequence(Tensor(i), cfg).data.sum(axis=0)
        hi = lif_forward_sequence(Tensor(i + c), cfg).data.sum(axis=0)
        assert np.all(hi >= lo)

    def test_detach_reset_blocks_reset_path_gradient(self):
        # t0 spikes inside the surrogate window (H0=1.2, g0=1); t1 stays
        # subthreshold but in the window (H1=0.7, g1=1)
        cfg = NeuronConfig(tau=2.0, theta=1.0)

        def grad_of_s1_wrt_i0(detach):
            x = Tensor(np.array([[1.2], [0.6]]), requires_grad=True)
            with tt.Tape() as tape:
                s = lif_forward_sequence(x, cfg, detach_reset=detach)
                loss = tt.sum_axes(tt.timestep(s, 1), (0,))
            return tt.backward(tape, loss).get(x)[0, 0]

        # literal reset: dU0/dH0 = 1 - theta*g0 = 0, so nothing reaches t1
        assert grad_of_s1_wrt_i0(False) == 0.0
        # detached reset: dU0/dH0 = 1, gradient flows through the leak
        assert grad_of_s1_wrt_i0(True) == 0.5

"""Leaky integrate-and-fire dynamics: charge, fire, soft reset.

One stage iterates these over its timesteps. State starts at zero for every
sample and never leaks across samples; after each step the post-reset
potential satisfies U = H - S*theta exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .tensor import SurrogateConfig, Tensor


@dataclass
class NeuronConfig:
    tau: float = 2.0
    theta: float = 1.0

    def __post_init__(self):
        if not self.tau > 1:
            raise ValueError(f"tau must be > 1 for a leak in (0,1), got {self.tau}")
        if not self.theta > 0:
            raise ValueError(f"threshold must be positive, got {self.theta}")

    @property
    def leak(self) -> float:
        return 1.0 - 1.0 / self.tau


def lif_charge(u_prev: Tensor, i_t: Tensor, cfg: NeuronConfig) -> Tensor:
    """H = (1 - 1/tau) * U_prev + I_t."""
    if u_prev.shape != i_t.shape:
        raise ValueError(
            f"state shape {u_prev.shape} does not match input shape {i_t.shape}"
        )
    return tt.add(tt.scale(u_prev, cfg.leak), i_t)


def soft_reset(h_t: Tensor, s_t: Tensor, cfg: NeuronConfig,
               detach_spike: bool = False) -> Tensor:
    """U = H - S * theta.

    With `detach_spike` the reset path treats the spike as a constant during
    backward; the default differentiates through it (surrogate rule).
    """
    s = tt.detach(s_t) if detach_spike else s_t
    return tt.sub(h_t, tt.scale(s, cfg.theta))


def lif_forward_sequence(i: Tensor, cfg: NeuronConfig, a: float = 1.0,
                         detach_reset: bool = False) -> Tensor:
    """Iterate charge -> fire -> soft reset over the leading time axis.

    `i` is the input current [T, ...]; returns the binary spike train with
    the same shape. U starts at zero. The whole unroll is one tape node:
    the forward keeps the charged potentials H and the backward runs the
    adjoint recurrence with the rectangular surrogate at the spike, and
    (unless `detach_reset`) the -theta spike term of the reset path:

        aS_t = g_t - theta * aU_t          aU_t = leak * aH_{t+1}
        aH_t = aU_t + surr(H_t) * aS_t     dL/dI_t = aH_t
    """
    t_steps = i.shape[0]
    if t_steps == 0:
        raise ValueError("cannot run a LIF sequence over zero timesteps")
    SurrogateConfig(a=a, theta=cfg.theta)  # validates a > 0, theta finite
    leak, theta = cfg.leak, cfg.theta

    h_all = np.empty_like(i.data)
    s_all = np.empty_like(i.data)
    u = np.zeros_like(i.data[0])
    for t in range(t_steps):
        h = leak * u + i.data[t]
        s = (h >= theta).astype(h.dtype)
        u = h - theta * s
        h_all[t] = h
        s_all[t] = s
    out = Tensor(s_all)

    def bwd(g):
        gi = np.empty_like(g)
        a_u = np.zeros_like(g[0])
        for t in reversed(range(t_steps)):
            a_s = g[t] if detach_reset else g[t] - theta * a_u
            window = (np.abs(h_all[t] - theta) < a / 2).astype(g.dtype)
            a_h = a_u + (window / a) * a_s
            gi[t] = a_h
            a_u = leak * a_h
        return (gi,)

    return tt._record(out, (i,), bwd)

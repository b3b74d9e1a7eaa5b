"""Timestep shrinkage: redistribute a stage's output over fewer timesteps.

The transform computes a per-timestep global average descriptor of the
source tensor, maps it through a learned [T2, T1] matrix + softmax into T2
scores that sum to one per sample, and spreads the time-summed activation
across the T2 target steps according to those scores. Summing the result
over time therefore reproduces the source's time-sum exactly (up to float
rounding), which is the conservation property tests pin down.

Also home to the latency bookkeeping: unit-weighted average timestep of a
stage plan and the parameter overhead of the transformers between stages.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .tensor import Tensor


@dataclass(frozen=True)
class StagePlan:
    """Per-stage timesteps and computational-unit counts (conv+neuron pairs)."""

    timesteps: tuple
    units: tuple

    def __post_init__(self):
        object.__setattr__(self, "timesteps", tuple(int(t) for t in self.timesteps))
        object.__setattr__(self, "units", tuple(int(n) for n in self.units))
        if len(self.timesteps) == 0:
            raise ValueError("stage plan must have at least one stage")
        if len(self.timesteps) != len(self.units):
            raise ValueError(
                f"{len(self.timesteps)} timesteps vs {len(self.units)} unit counts"
            )
        if any(t < 1 for t in self.timesteps):
            raise ValueError(f"timesteps must be >= 1, got {self.timesteps}")
        if any(n < 1 for n in self.units):
            raise ValueError(f"unit counts must be >= 1, got {self.units}")
        for a, b in zip(self.timesteps, self.timesteps[1:]):
            if b >= a:
                raise ValueError(
                    f"timesteps must strictly shrink, got {self.timesteps}"
                )

    @property
    def n_stages(self) -> int:
        return len(self.timesteps)


def average_timestep(plan: StagePlan) -> float:
    """Unit-weighted mean timestep; the classification head is excluded."""
    num = sum(n * t for n, t in zip(plan.units, plan.timesteps))
    return num / sum(plan.units)


def overhead_count(plan: StagePlan) -> int:
    """Learnable scalars added by the transformers: sum of T_i * T_{i+1}."""
    return sum(a * b for a, b in zip(plan.timesteps, plan.timesteps[1:]))


# ---------------------------------------------------------------------------
# the transform itself

def temporal_descriptor(o1: Tensor) -> Tensor:
    """Per-timestep, per-sample mean over (C, H, W): [T1,N,C,H,W] -> [T1,N]."""
    if o1.data.ndim != 5:
        raise ValueError(f"expected [T,N,C,H,W], got shape {o1.shape}")
    if o1.data.size == 0:
        raise ValueError("cannot describe an empty tensor")
    return tt.mean_axes(o1, (2, 3, 4))


def temporal_score(avg: Tensor, w: Tensor) -> Tensor:
    """softmax(W @ avg) along the target-time axis: [T1,N] -> [T2,N]."""
    if avg.data.ndim != 2 or w.shape[1] != avg.shape[0]:
        raise ValueError(
            f"weight {w.shape} does not match descriptor {avg.shape}"
        )
    return tt.softmax(tt.matmul(w, avg), axis=0)


def reassign(o1: Tensor, d: Tensor) -> Tensor:
    """Spread the time-sum of o1 over T2 steps weighted by the scores."""
    if o1.shape[1] != d.shape[1]:
        raise ValueError(
            f"batch mismatch: source {o1.shape} vs scores {d.shape}"
        )
    total = tt.sum_axes(o1, (0,))                       # [N,C,H,W]
    t2, n = d.shape
    d5 = tt.reshape(d, (t2, n, 1, 1, 1))
    total5 = tt.reshape(total, (1,) + total.shape)
    return tt.mul(total5, d5)                           # [T2,N,C,H,W]


class TemporalTransformer:
    """Learned redistribution of T1 timesteps onto T2.

    The weight starts at zero so the initial scores are uniform and training
    begins as an even temporal spread. T2 > T1 is accepted here (useful for
    exercising the transform alone); plan validation is what enforces
    shrinkage inside a network.
    """

    def __init__(self, t_in: int, t_out: int, dtype=np.float32, name="tt"):
        self.t_in = int(t_in)
        self.t_out = int(t_out)
        self.w = Tensor(np.zeros((self.t_out, self.t_in), dtype=dtype),
                        requires_grad=True, name=f"{name}.w")

    def __call__(self, o1: Tensor) -> Tensor:
        if o1.shape[0] != self.t_in:
            raise ValueError(
                f"transformer expects {self.t_in} timesteps, got {o1.shape}"
            )
        return reassign(o1, temporal_score(temporal_descriptor(o1), self.w))

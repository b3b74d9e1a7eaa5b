"""Rate decoding, the weighted multi-head loss, SGD, and the epoch loop.

Every classifier head (early and final) is decoded by averaging its logits
over its timesteps, scored with cross-entropy, and folded into a weighted
total. Heads whose weight is exactly zero are left out of the total, so no
gradient ever reaches their exclusive parameters and the optimizer leaves
them untouched — that is what makes the EC-off ablation arm exact.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .tensor import GradStore, Tape, Tensor

rate_decode = tt.time_mean
ce_loss = tt.cross_entropy


@dataclass(frozen=True)
class LossWeights:
    """Per-head loss coefficients.

    Constrained mode (default) requires the weights to sum to 1. The
    unconstrained mode drops that requirement (final weight pinned at 1,
    earlier heads free) for the ablation arm.
    """

    values: tuple
    unconstrained: bool = False

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if not self.values:
            raise ValueError("need at least one loss weight")
        if any(v < 0 for v in self.values):
            raise ValueError(f"loss weights must be nonnegative, got {self.values}")
        if not self.unconstrained and abs(sum(self.values) - 1.0) > 1e-6:
            raise ValueError(
                f"loss weights must sum to 1, got {sum(self.values)!r}; "
                "use unconstrained mode to lift this"
            )

    @classmethod
    def default(cls, n_heads: int) -> "LossWeights":
        """0.15 on each early head, the remainder on the final head."""
        if n_heads == 1:
            return cls((1.0,))
        head = 1.0 - 0.15 * (n_heads - 1)
        if head <= 0:
            raise ValueError(f"too many heads ({n_heads}) for the default weights")
        return cls((0.15,) * (n_heads - 1) + (head,))


def total_loss(stage_losses, weights: LossWeights) -> Tensor:
    """Weighted sum of per-head losses; zero-weight terms are skipped."""
    if len(stage_losses) != len(weights.values):
        raise ValueError(
            f"{len(stage_losses)} losses vs {len(weights.values)} weights"
        )
    total = None
    for loss, lam in zip(stage_losses, weights.values):
        if lam == 0.0:
            continue
        term = tt.scale(loss, lam)
        total = term if total is None else tt.add(total, term)
    if total is None:
        raise ValueError("all loss weights are zero")
    return total


@dataclass
class TrainConfig:
    lr0: float = 0.1
    lr_decay: float = 0.1
    lr_decay_every: int = 30
    epochs: int = 100
    batch: int = 64
    momentum: float = 0.9
    weight_decay: float = 1e-3
    seed: int = 0
    dtype: str = "f32"

    def __post_init__(self):
        if self.batch < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch}")
        for name in ("lr0", "lr_decay", "lr_decay_every", "epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Piecewise-constant schedule: lr0 scaled down every decay interval."""
    return cfg.lr0 * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


@dataclass
class SgdState:
    velocities: dict = field(default_factory=dict)


def sgd_step(named_params, grads: GradStore, state: SgdState, lr: float,
             momentum: float, weight_decay: float):
    """Classical momentum with L2-coupled decay: v <- mu*v + (g + wd*w).

    Parameters without a gradient in the store (heads excluded from the
    loss) are skipped entirely, decay included.
    """
    for name, p in named_params:
        g = grads.get(p)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name} shape {p.data.shape}"
            )
        if weight_decay:
            g = g + weight_decay * p.data
        v = state.velocities.get(name)
        v = g if v is None else momentum * v + g
        state.velocities[name] = v
        p.data = p.data - lr * v


# ---------------------------------------------------------------------------
# epoch loop

def _batch_iter(n, batch, perm=None):
    order = np.arange(n) if perm is None else perm
    for lo in range(0, n, batch):
        yield order[lo:lo + batch]


def _forward_heads(model, xb):
    ec_logits, final = model.forward_train(xb)
    return ec_logits + [final]


def _to_time_major(frames_batch):
    return np.ascontiguousarray(frames_batch.transpose(1, 0, 2, 3, 4))


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    losses: list        # per head, mean over samples
    train_acc: list     # per head
    wall_seconds: float


def train_epoch(model, frames, labels, cfg: TrainConfig, weights: LossWeights,
                epoch: int, state: SgdState) -> EpochMetrics:
    """One pass over the training set: forward, weighted loss, BPTT, SGD.

    Batch order is reshuffled per epoch from (seed, epoch), so a run is a
    pure function of config and data.
    """
    n = len(labels)
    if n == 0:
        raise ValueError("training dataset is empty")
    model.train()
    t0 = time.perf_counter()
    lr = lr_at(epoch, cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch]))
    perm = rng.permutation(n)
    n_heads = len(model.ecs) + 1
    loss_sums = np.zeros(n_heads)
    hit_sums = np.zeros(n_heads)
    params = model.named_parameters()

    for idx in _batch_iter(n, cfg.batch, perm):
        xb = Tensor(_to_time_major(frames[idx]))
        yb = labels[idx]
        with Tape() as tape:
            heads = _forward_heads(model, xb)
            decoded = [rate_decode(h) for h in heads]
            losses = [ce_loss(d, yb) for d in decoded]
            total = total_loss(losses, weights)
            store = tt.backward(tape, total)
        sgd_step(params, store, state, lr, cfg.momentum, cfg.weight_decay)
        for i, (loss, d) in enumerate(zip(losses, decoded)):
            loss_sums[i] += float(loss.data) * len(idx)
            hit_sums[i] += int((d.data.argmax(axis=1) == yb).sum())

    return EpochMetrics(
        epoch=epoch, lr=lr,
        losses=[float(v / n) for v in loss_sums],
        train_acc=[float(v / n) for v in hit_sums],
        wall_seconds=time.perf_counter() - t0,
    )


def evaluate(model, frames, labels, batch: int = 64):
    """Per-head accuracies in eval mode (running BN statistics).

    Early-classifier heads are evaluated here only as diagnostics; the
    final head is the headline metric.
    """
    n = len(labels)
    if n == 0:
        raise ValueError("evaluation dataset is empty")
    model.eval()
    hits = np.zeros(len(model.ecs) + 1)
    for idx in _batch_iter(n, batch):
        xb = Tensor(_to_time_major(frames[idx]))
        yb = labels[idx]
        heads = _forward_heads(model, xb)
        for i, h in enumerate(heads):
            pred = rate_decode(h).data.argmax(axis=1)
            hits[i] += int((pred == yb).sum())
    return [float(h / n) for h in hits]

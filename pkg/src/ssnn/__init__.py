"""Shrinking-timestep spiking neural networks on a from-scratch tape engine."""

from . import eventdata, kernels, neuron, network, shrink, tensor, training, verify
from .neuron import NeuronConfig, lif_charge, lif_forward_sequence, soft_reset
from .network import NetworkSpec, SSNNModel, build_network, derive_plan, \
    load_checkpoint, save_checkpoint
from .shrink import (StagePlan, TemporalTransformer, average_timestep,
                     overhead_count, reassign, temporal_descriptor,
                     temporal_score)
from .tensor import GradStore, SurrogateConfig, Tape, Tensor, backward
from .training import (LossWeights, SgdState, TrainConfig, ce_loss, evaluate,
                       lr_at, rate_decode, sgd_step, total_loss, train_epoch)

__version__ = "0.1.0"

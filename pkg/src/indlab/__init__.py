"""Induction-head emergence in a disentangled two-layer transformer.

Modules:
    core_math       masked softmax and its backward pass
    icl_data        Gaussian and orthonormal item-label sequences
    disentangled    the concatenated-residual model, forward and backward
    pseudo_params   the 19-coefficient structured subspace
    trainer         SGD, ablations, gradient-structure scans
    dynamics        closed-form loss and its gradient flow
    reference       a standard attention-only transformer with AdamW
    cli             the ``indlab`` command
"""

from .core_math import MaskMode, causal_mask, masked_softmax, softmax_backward
from .disentangled import WeightSet, backward, batch_grad, forward
from .dynamics import closed_grad, closed_loss, integrate_flow, scaling_scan
from .icl_data import SequenceBatch, gen_gaussian, gen_orthonormal
from .pseudo_params import INDUCTION_HEAD, NAMES, PseudoParams, materialize, project
from .trainer import TrainConfig, sgd_vs_flow, train

__version__ = "0.1.0"

__all__ = [
    "INDUCTION_HEAD",
    "MaskMode",
    "NAMES",
    "PseudoParams",
    "SequenceBatch",
    "TrainConfig",
    "WeightSet",
    "backward",
    "batch_grad",
    "causal_mask",
    "closed_grad",
    "closed_loss",
    "forward",
    "gen_gaussian",
    "gen_orthonormal",
    "integrate_flow",
    "masked_softmax",
    "materialize",
    "project",
    "scaling_scan",
    "sgd_vs_flow",
    "softmax_backward",
    "train",
]

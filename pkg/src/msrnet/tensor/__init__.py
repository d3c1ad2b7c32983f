"""Minimal float64 autodiff substrate used by the network and losses."""
from .core import DiffTensor, LearnableScalar, backward, tensor
from .gradcheck import analytic_gradients, grad_check, grad_check_errors
from .checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from . import ops

__all__ = [
    "DiffTensor",
    "LearnableScalar",
    "analytic_gradients",
    "backward",
    "decode_checkpoint",
    "encode_checkpoint",
    "grad_check",
    "grad_check_errors",
    "load_checkpoint",
    "ops",
    "save_checkpoint",
    "tensor",
]

"""peftlab: a desk-scale parameter-efficient fine-tuning laboratory.

Five adaptation strategies (full tuning, LoRA, SoRA, prefix tuning, and a
quantum amplitude adapter trained via the parameter-shift rule) on a
small frozen decoder-only transformer, with exact statevector simulation,
a from-scratch reverse-mode autodiff engine, and a CLI for training,
gradient verification, parameter auditing, and convergence benchmarking.
"""
from . import adapters, checkpoint, circuits, cli, model, qsim, tensor, trainkit

__all__ = [
    "adapters",
    "checkpoint",
    "circuits",
    "cli",
    "model",
    "qsim",
    "tensor",
    "trainkit",
]

__version__ = "0.1.0"

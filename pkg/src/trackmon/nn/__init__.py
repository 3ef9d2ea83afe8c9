"""Minimal fixed-graph neural-network kernel in 64-bit numpy.

Layers implement explicit forward/backward passes; gradients accumulate into
per-parameter buffers, so one training step is: zero grads, forward,
backward, optimizer step.  There is no general autodiff — the call graph is
wired by hand and every layer caches exactly what its backward needs, which
keeps each analytic gradient small enough to verify coordinate-by-coordinate
against central finite differences.
"""

from trackmon.nn.core import Module, Param
from trackmon.nn.gradcheck import GradCheckReport, finite_difference_check
from trackmon.nn.layers import (
    FeedForward,
    Gelu,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    l1_loss,
    sinusoidal_positions,
)
from trackmon.nn.optim import Adam
from trackmon.nn.serial import load_arrays, save_arrays

__all__ = [
    "Adam",
    "FeedForward",
    "Gelu",
    "GradCheckReport",
    "LayerNorm",
    "Linear",
    "Module",
    "MultiHeadAttention",
    "Param",
    "finite_difference_check",
    "l1_loss",
    "load_arrays",
    "save_arrays",
    "sinusoidal_positions",
]

"""Reverse-mode automatic differentiation over float64 numpy arrays"""

from .tensor import Tensor, Tape, Record, active_tape, as_tensor, reverse_gradient, numerical_gradient
from . import ops
from .ops import softmax_with_temperature, label_smoothed_nll
from .optim import Adam, AdamState, adam_step

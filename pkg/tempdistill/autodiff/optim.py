"""
Adam with decoupled weight decay
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Tuple, Union

import numpy as np

from .tensor import Tensor
from ..errors import InvalidArgument

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    """Moments of one parameter plus the hyper-parameters they are updated with"""
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_param(cls, param:Tensor, **hyper) -> "AdamState":
        return cls(m=np.zeros_like(param.data), v=np.zeros_like(param.data), **hyper)


def adam_step(param:Tensor, grad:Union[Tensor, np.ndarray], state:AdamState) -> Tuple[Tensor, AdamState]:
    """One bias-corrected Adam update, in place. Weight decay shrinks the parameter before the Adam delta"""
    g = grad.data if isinstance(grad, Tensor) else np.asarray(grad, dtype=np.float64)
    if g.shape != param.shape or state.m.shape != param.shape or state.v.shape != param.shape:
        raise InvalidArgument(f"shape mismatch: param {param.shape}, grad {g.shape}, state {state.m.shape}/{state.v.shape}")

    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)

    param.data *= (1.0 - state.lr * state.weight_decay)
    param.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return param, state


class Adam:
    """Keeps one AdamState per named parameter"""

    def __init__(self, params:Iterable[Tuple[str, Tensor]], lr:float=1e-3, betas:Tuple[float, float]=(0.9, 0.999),
            eps:float=1e-8, weight_decay:float=0.0, clip_norm:float=0.0):
        self.params:Dict[str, Tensor] = dict(params)
        self.lr = lr
        self.clip_norm = clip_norm
        self.states:Dict[str, AdamState] = {
            name: AdamState.for_param(p, lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)
            for name, p in self.params.items()}


    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in self.params.values() if p.grad is not None)))


    def step(self, lr:Optional[float]=None) -> float:
        """Update every parameter that has a gradient. Returns the pre-clipping gradient norm"""
        if lr is not None:
            self.lr = lr

        norm = self.grad_norm()
        factor = 1.0
        if self.clip_norm > 0 and norm > self.clip_norm:
            factor = self.clip_norm / (norm + 1e-12)

        for name, p in self.params.items():
            if p.grad is None:
                continue
            state = self.states[name]
            state.lr = self.lr
            adam_step(p, p.grad * factor if factor != 1.0 else p.grad, state)

        return norm


    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

"""
Dense float64 tensors and the define-by-run tape that records primitive applications
"""

import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import InvalidArgument, InvalidState


DTYPE = np.float64

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Numeric array with an optional gradient of the same layout"""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad:bool=False, name:Optional[str]=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data:np.ndarray = np.asarray(data, dtype=DTYPE)
        self.grad:Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name


    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape


    @property
    def ndim(self) -> int:
        return self.data.ndim


    @property
    def size(self) -> int:
        return self.data.size


    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)


    def numpy(self) -> np.ndarray:
        return self.data


    def zero_grad(self):
        self.grad = None


    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class Record:
    """One primitive application: which op, what went in, what came out, and how to push gradients back.
    Saved activations live in the backward closure."""
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


@dataclass
class Tape:
    """Ordered record of primitive applications. Install with `with Tape() as tape:`;
    each thread has its own stack of active tapes."""
    records: List[Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _stack().pop()
        assert popped is self, "Tapes must be closed in the reverse order they were opened"
        return False

    def __len__(self):
        return len(self.records)


_local = threading.local()


def _stack() -> List[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Optional[Tape]:
    stack = _stack()
    return stack[-1] if stack else None


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def record(op:str, inputs:Sequence[Tensor], out:np.ndarray, backward:BackwardFn) -> Tensor:
    """Wrap a primitive's output and put it on the active tape when anything upstream needs a gradient"""
    tape = active_tape()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=tracked)
    if tracked:
        tape.records.append(Record(op, tuple(inputs), result, backward))
    return result


def reverse_gradient(loss:Tensor, tape:Tape) -> List[Tensor]:
    """Walk the tape backwards from a scalar loss. Leaves that require grad get their `grad`
    accumulated; those leaves are returned in the order they were first reached."""
    if loss.data.size != 1:
        raise InvalidArgument(f"loss must be a scalar, got shape {loss.shape}")

    grads:Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    tensors:Dict[int, Tensor] = {id(loss): loss}
    produced = set()

    for rec in reversed(tape.records):
        key = id(rec.output)
        produced.add(key)
        g = grads.pop(key, None)
        if g is None:
            continue

        for inp, ig in zip(rec.inputs, rec.backward(g)):
            if ig is None or not inp.requires_grad:
                continue
            k = id(inp)
            if k in grads:
                grads[k] = grads[k] + ig
            else:
                grads[k] = ig
                tensors[k] = inp

    leaves = []
    for k, g in grads.items():
        if k in produced:
            continue
        if not np.all(np.isfinite(g)):
            raise InvalidState(f"non-finite gradient for {tensors[k]!r}")
        leaf = tensors[k]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        leaves.append(leaf)

    return leaves


def numerical_gradient(f:Callable[[], float], tensor:Tensor, h:float=1e-5) -> np.ndarray:
    """Central finite differences of scalar f() with respect to every entry of tensor"""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        out[i] = (up - down) / (2 * h)
    return grad

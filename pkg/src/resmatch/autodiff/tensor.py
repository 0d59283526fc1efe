"""Dense tensor with a reverse-mode tape.

Every differentiable op is a :class:`Function` subclass. Applying one while
gradient tracking is enabled attaches a :class:`TapeNode` to the output;
:func:`backward` replays those nodes in reverse topological order and then
drops them, so a tape is consumed exactly once.
"""

from __future__ import annotations

import contextlib
from typing import Any, Sequence

import numpy as np

from ..errors import ContractError
from .precision import FULL32, HALF16, DTYPES, cast_array, check_precision, narrow

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class TapeNode:
    __slots__ = ("fn", "inputs")

    def __init__(self, fn: "Function", inputs: tuple["Tensor", ...]):
        self.fn = fn
        self.inputs = inputs

    @property
    def kind(self) -> str:
        return self.fn.kind


class Tensor:
    """N-dimensional array tagged full32 or half16, with a full32 grad slot."""

    __slots__ = ("data", "grad", "requires_grad", "node", "__weakref__")

    def __init__(self, data: Any, precision: str | None = None, requires_grad: bool = False):
        arr = np.asarray(data)
        if precision is None:
            precision = HALF16 if arr.dtype == np.float16 else FULL32
        check_precision(precision)
        if precision == HALF16 and arr.dtype != np.float16:
            arr = narrow(arr)
        elif arr.dtype != DTYPES[precision]:
            arr = arr.astype(DTYPES[precision])
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: TapeNode | None = None

    # -- introspection -------------------------------------------------
    @property
    def precision(self) -> str:
        return HALF16 if self.data.dtype == np.float16 else FULL32

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, tensor has {self.data.size}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), self.precision)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(dims={self.dims}, precision={self.precision}{flag})"

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import functional as F
        return F.mul(self, -1.0)

    def sum(self, axis=None):
        from . import functional as F
        return F.sum(self, axis)

    def mean(self, axis=None):
        from . import functional as F
        return F.mean(self, axis)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=np.float32))


class Function:
    """Base class for differentiable ops.

    ``forward`` receives float32 views of the inputs and returns a float32
    array. ``backward`` receives the full32 output gradient and returns one
    gradient (or None) per input. Ops whose output must stay full32 whatever
    their inputs set ``full32_output``.
    """

    kind = "function"
    full32_output = False

    def __init__(self) -> None:
        self.needs_grad: tuple[bool, ...] = ()

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Any, **kwargs: Any) -> Tensor:
        fn = cls()
        tensors = tuple(as_tensor(t) for t in inputs)
        fn.needs_grad = tuple(t.requires_grad for t in tensors)
        out_arr = fn.forward(*(t.data.astype(np.float32, copy=False) for t in tensors), **kwargs)
        half = not cls.full32_output and any(t.precision == HALF16 for t in tensors)
        out = Tensor(cast_array(out_arr, HALF16) if half else np.asarray(out_arr, np.float32))
        if _grad_enabled and any(fn.needs_grad):
            out.requires_grad = True
            out.node = TapeNode(fn, tensors)
        return out


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every tracked leaf's grad slot."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got dims {loss.dims}")
    if not loss.requires_grad:
        raise ContractError("loss is not on an active tape (no input requires grad)")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=np.float32)}
    for t in reversed(_topo_order(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t.node
        if node is None:
            t.grad = g.astype(np.float32) if t.grad is None else t.grad + g
            continue
        in_grads = node.fn.backward(g)
        for parent, pg in zip(node.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float32)
            if pg.shape != parent.shape:
                raise ContractError(
                    f"{node.kind} produced grad {pg.shape} for input {parent.shape}")
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
        t.node = None

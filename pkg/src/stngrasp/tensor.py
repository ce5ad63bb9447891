"""Reverse-mode differentiable tensor.

A :class:`Tensor` wraps a numpy array and, when gradients are required,
remembers the operation that produced it.  Calling :func:`backward` on a
scalar walks that history in reverse topological order.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, NumericError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """n-dimensional float array with optional gradient tracking.

    Args:
        data: array-like values. Integer and python inputs become float64.
        requires_grad: whether gradients should be accumulated into ``grad``.
        name: optional label, used by parameters.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward_fn: Optional[Callable] = None
        self._op = ""
        self._retain = False

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward_fn, op: str) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise NumericError(f"{op} produced non-finite values")
        out = cls(data)
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
            out._op = op
        return out

    # -- array protocol ---------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def retain_grad(self) -> "Tensor":
        """Keep ``grad`` on this non-leaf tensor after backward."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators (implemented in functional) ------------------------------------
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

    def __truediv__(self, other):
        from . import functional as F
        return F.div(self, other)

    def __rtruediv__(self, other):
        from . import functional as F
        return F.div(other, self)

    def __neg__(self):
        from . import functional as F
        return F.neg(self)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def __getitem__(self, idx):
        from . import functional as F
        return F.getitem(self, idx)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        from . import functional as F
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from . import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)

    def backward(self, params: Optional[Iterable["Tensor"]] = None) -> None:
        backward(self, params)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else np.float64)
    return Tensor(arr)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> None:
    """Populate ``grad`` on every leaf reachable from ``loss``.

    Leaves passed in ``params`` that are not on the path receive zero
    gradients.  A leaf whose ``grad`` is already set raises
    :class:`ContractError`; call ``zero_grad`` between steps.
    """
    if loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward_fn is None:
        raise ContractError("loss has no recorded computation history (detached graph)")

    order = _topological_order(loss)
    leaves = [n for n in order if n._backward_fn is None and n.requires_grad]
    for leaf in leaves:
        if leaf.grad is not None:
            raise ContractError(
                f"gradient of {leaf.name or 'leaf tensor'} already populated; call zero_grad() first"
            )

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward_fn is None:
            if node.requires_grad:
                node.grad = np.array(g, dtype=node.data.dtype)
            continue
        if node._retain:
            node.grad = g
        parent_grads = node._backward_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)

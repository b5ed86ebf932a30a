"""Reverse-mode automatic differentiation over float32 numpy arrays.

Every differentiable primitive lives in :mod:`frontseg.functional`; this
module only holds the graph node type, the backward sweep and the
finite-difference checker used to validate those primitives.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

DTYPE = np.float32

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """N-dimensional float32 array that records how it was computed.

    ``grad`` is ``None`` until a backward sweep reaches the tensor; after
    that it accumulates across sweeps until :meth:`zero_grad` is called.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=DTYPE)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self.name = name

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn) -> "Tensor":
        """Create a graph node; ``backward`` maps the output gradient to one gradient per parent."""
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the real work is in functional
    def __add__(self, other):
        from . import functional as F

        return F.add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __mul__(self, other):
        from . import functional as F

        return F.mul(self, _as_tensor(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        from . import functional as F

        return F.scale(self, -1.0)

    def __sub__(self, other):
        return self + (-_as_tensor(other, self))

    def sum(self) -> "Tensor":
        from . import functional as F

        return F.sum(self)

    def mean(self) -> "Tensor":
        from . import functional as F

        return F.mean(self)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Propagate gradients to every reachable tensor that requires them.

        Without ``grad`` the tensor must hold a single value and is seeded
        with 1.  Gradients are added onto existing ``.grad`` buffers, so two
        sweeps without zeroing double every gradient.
        """
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise RuntimeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=DTYPE)
        if grad.shape != self.shape:
            raise ValueError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order = _topological_order(self)
        pending = {id(self): grad}
        for node in order:
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise RuntimeError(
                        f"gradient shape {pg.shape} does not match parent shape {parent.shape}"
                    )
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg.astype(DTYPE, copy=False)


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.broadcast_to(np.asarray(value, dtype=DTYPE), like.shape))


def _topological_order(root: Tensor) -> list:
    """Nodes ordered so that every node precedes its parents (iterative DFS)."""
    visited = set()
    post = []
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            post.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return post[::-1]


@dataclass(frozen=True)
class ParamSpec:
    """Name, shape and initializer of one trainable or buffer array."""

    name: str
    shape: Tuple[int, ...]
    init: str


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-3,
    max_coords: int = 512,
    seed: int = 0,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``f`` must map ``inputs`` to a single-valued tensor.  The error for one
    coordinate is ``|a - n| / max(1, |a|, |n|)``.  When the inputs hold
    more than ``max_coords`` values in total, a seeded random subset of
    coordinates is checked.
    """
    for t in inputs:
        t.zero_grad()
        t.requires_grad = True
    out = f(*inputs)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    coords = [(i, j) for i, t in enumerate(inputs) for j in range(t.size)]
    if len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst = 0.0
    for i, j in coords:
        flat = inputs[i].data.reshape(-1)
        orig = flat[j]
        # the float32 step actually taken differs slightly from h
        x_plus, x_minus = DTYPE(orig + h), DTYPE(orig - h)
        flat[j] = x_plus
        f_plus = float(f(*inputs).data.reshape(-1)[0])
        flat[j] = x_minus
        f_minus = float(f(*inputs).data.reshape(-1)[0])
        flat[j] = orig
        numeric = (f_plus - f_minus) / (float(x_plus) - float(x_minus))
        a = float(analytic[i].reshape(-1)[j])
        if not (np.isfinite(a) and np.isfinite(numeric)):
            warnings.warn(f"non-finite gradient at input {i}, coordinate {j}: analytic={a}, numeric={numeric}")
            return float("inf")
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        worst = max(worst, err)
    return worst

"""Minimal deterministic 4-D tensor with reverse-mode automatic differentiation.

Every tensor is laid out as (n, c, h, w) float32 or float64, row-major.
Operations record a backward closure on the result; ``backward`` walks the
recorded graph once and then consumes it, so gradients can never be
double-counted by accident.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

F32 = np.float32
F64 = np.float64

_grad_enabled = True


class no_grad:
    """Context manager that suspends graph recording (frozen models, targets)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class EngineError(ValueError):
    """Raised on contract violations (shape mismatches, bad backward calls)."""


class _Ctx:
    """One recorded operation: parents plus the closure producing their grads."""

    __slots__ = ("parents", "backward_fn")

    def __init__(self, parents: Sequence["Tensor"], backward_fn: Callable):
        self.parents = tuple(parents)
        self.backward_fn = backward_fn


def _as_4d(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1, 1, 1)
    if arr.ndim != 4:
        raise EngineError(f"tensor data must be 4-D (n,c,h,w), got ndim={arr.ndim}")
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_ctx", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = _as_4d(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (F32, F64):
            arr = arr.astype(F32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._ctx: Optional[_Ctx] = None
        self._consumed = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def numel(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.numel != 1:
            raise EngineError(f"item() needs a scalar tensor, shape is {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- graph plumbing ------------------------------------------------------

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # -- elementwise arithmetic ----------------------------------------------

    def __add__(self, other):
        return _binary(self, other, lambda a, b: a + b, _grad_add)

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(self, other, lambda a, b: a - b, _grad_sub)

    def __rsub__(self, other):
        return _binary(_wrap_const(other, self.dtype), self, lambda a, b: a - b, _grad_sub)

    def __mul__(self, other):
        return _binary(self, other, lambda a, b: a * b, _grad_mul)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary(self, other, lambda a, b: a / b, _grad_div)

    def __neg__(self):
        return _unary(self, lambda a: -a, lambda g, a, out: -g)

    def relu(self) -> "Tensor":
        return _unary(self, lambda a: np.maximum(a, 0), lambda g, a, out: g * (a > 0))

    def abs(self) -> "Tensor":
        return _unary(self, np.abs, lambda g, a, out: g * np.sign(a))

    def clamp01(self) -> "Tensor":
        # subgradient: pass-through on [0, 1] inclusive, zero outside
        return _unary(
            self,
            lambda a: np.clip(a, 0.0, 1.0),
            lambda g, a, out: g * ((a >= 0.0) & (a <= 1.0)),
        )

    def sum(self) -> "Tensor":
        def bw(g, a, out):
            return np.full_like(a, g.reshape(()))

        return _unary(self, lambda a: a.sum().reshape(1, 1, 1, 1), bw)

    def mean(self) -> "Tensor":
        def bw(g, a, out):
            return np.full_like(a, g.reshape(()) / a.size)

        return _unary(self, lambda a: a.mean().reshape(1, 1, 1, 1), bw)

    def reshape(self, shape: tuple) -> "Tensor":
        if len(shape) != 4:
            raise EngineError(f"reshape target must be 4-D, got {shape}")
        if int(np.prod(shape)) != self.numel:
            raise EngineError(f"reshape {self.shape} -> {shape} changes element count")
        src_shape = self.shape

        def bw(g, a, out):
            return g.reshape(src_shape)

        return _unary(self, lambda a: a.reshape(shape), bw)


def _wrap_const(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full((1, 1, 1, 1), x, dtype=dtype))


def _check_dtypes(a: Tensor, b: Tensor) -> None:
    if a.dtype != b.dtype:
        raise EngineError(f"dtype mismatch: {a.dtype} vs {b.dtype}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over axes that were broadcast from size 1."""
    axes = tuple(i for i in range(4) if shape[i] == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _grad_add(g, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _grad_sub(g, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _grad_mul(g, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _grad_div(g, a, b):
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


def _binary(a, b, fwd, grad_fn) -> Tensor:
    if not isinstance(a, Tensor):
        a = _wrap_const(a, b.dtype)
    if not isinstance(b, Tensor):
        b = _wrap_const(b, a.dtype)
    _check_dtypes(a, b)
    try:
        out_data = fwd(a.data, b.data)
    except ValueError as exc:
        raise EngineError(f"elementwise shape mismatch {a.shape} vs {b.shape}") from exc
    out = Tensor(out_data)
    if _grad_enabled and (a.requires_grad or b.requires_grad):
        ad, bd = a.data, b.data

        def backward_fn(g):
            ga, gb = grad_fn(g, ad, bd)
            return ga, gb

        out.requires_grad = True
        out._ctx = _Ctx((a, b), backward_fn)
    return out


def _unary(a: Tensor, fwd, grad_fn) -> Tensor:
    out = Tensor(fwd(a.data))
    if _grad_enabled and a.requires_grad:
        ad, od = a.data, out.data

        def backward_fn(g):
            return (grad_fn(g, ad, od),)

        out.requires_grad = True
        out._ctx = _Ctx((a,), backward_fn)
    return out


def make_op(parents: Iterable[Tensor], out_data: np.ndarray, backward_fn: Callable) -> Tensor:
    """Assemble an op result; used by the kernel implementations in ops/warp/losses.

    ``backward_fn(grad)`` must return one gradient array (or None) per parent,
    in the same order.
    """
    parents = tuple(parents)
    out = Tensor(out_data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._ctx = _Ctx(parents, backward_fn)
    return out


def backward(loss: Tensor, accumulate: bool = False) -> None:
    """Reverse-mode sweep from a scalar loss onto every reachable grad leaf.

    The recorded graph is consumed: a second call on the same loss raises.
    By default leaf ``.grad`` is overwritten; pass ``accumulate=True`` to add
    onto existing gradients instead.
    """
    if loss.numel != 1:
        raise EngineError(f"backward needs a scalar loss, shape is {loss.shape}")
    if loss._consumed:
        raise EngineError("backward tape already consumed for this loss")
    if loss._ctx is None:
        raise EngineError("backward on a tensor with no recorded operations")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for p in node._ctx.parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1, 1, 1), dtype=loss.dtype)}
    for node in reversed(topo):
        if node._ctx is None:
            continue
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._ctx.backward_fn(g)
        for p, pg in zip(node._ctx.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise EngineError(
                    f"internal: gradient shape {pg.shape} does not match parent {p.shape}"
                )
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg

    for node in topo:
        if node._ctx is None and node.requires_grad:
            g = grads.get(id(node))
            if g is None:
                continue
            if accumulate and node.grad is not None:
                node.grad = node.grad + g
            else:
                node.grad = g.copy()
        node._ctx = None
    loss._consumed = True

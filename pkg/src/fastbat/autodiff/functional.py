"""Gradient, Hessian-vector and mixed second-order products.

Functions here take a loss callable whose arguments are :class:`Tensor`
objects (or ``str -> Tensor`` dicts for parameter sets) and plain numpy
inputs, and return plain numpy outputs with matching structure.
"""

from __future__ import annotations

from typing import Callable, Mapping, Union

import numpy as np

from fastbat.autodiff.tensor import Tape, Tensor, grad, mul, sum_
from fastbat.errors import ContractViolation

Struct = Union[np.ndarray, Mapping[str, np.ndarray]]


def _to_tensors(arg, requires_grad: bool):
    if isinstance(arg, Mapping):
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in arg.items()}
    return Tensor(arg, requires_grad=requires_grad)


def _leaves(struct) -> list[Tensor]:
    if isinstance(struct, Mapping):
        return list(struct.values())
    return [struct]


def _rebuild(struct, grads: list[Tensor]):
    if isinstance(struct, Mapping):
        return {k: g.data for k, g in zip(struct.keys(), grads)}
    return grads[0].data


def _scalar(out: Tensor) -> Tensor:
    if not isinstance(out, Tensor) or out.data.size != 1:
        shape = getattr(out, "shape", type(out))
        raise ContractViolation(f"function must return a scalar Tensor, got {shape}")
    return out


def _inner(a: Struct, b: Struct):
    """Recorded <a, b> over matching structures; ``b`` is a numpy constant."""
    if isinstance(a, Mapping):
        total = None
        for k, t in a.items():
            term = sum_(mul(t, b[k]))
            total = term if total is None else total + term
        return total
    return sum_(mul(a, np.asarray(b)))


def _check_like(name: str, v, ref) -> None:
    if isinstance(ref, Mapping):
        if not isinstance(v, Mapping) or set(v) != set(ref):
            raise ContractViolation(f"{name} must have the same keys as its reference")
        for k in ref:
            if np.shape(v[k]) != np.shape(ref[k]):
                raise ContractViolation(f"{name}[{k!r}] shape {np.shape(v[k])} != {np.shape(ref[k])}")
    elif np.shape(v) != np.shape(ref):
        raise ContractViolation(f"{name} shape {np.shape(v)} != {np.shape(ref)}")


def value_and_grad(f: Callable, *args: Struct, wrt=None):
    """Evaluate scalar ``f(*args)`` and its gradient w.r.t. the ``wrt`` argument indices.

    Returns ``(value, grads)`` where ``grads`` is a tuple aligned with ``wrt``
    (all arguments by default), each shaped like its argument.
    """
    wrt = tuple(range(len(args))) if wrt is None else tuple(wrt)
    with Tape():
        tensors = [_to_tensors(a, requires_grad=i in wrt) for i, a in enumerate(args)]
        out = _scalar(f(*tensors))
        flat = [leaf for i in wrt for leaf in _leaves(tensors[i])]
        grads = grad(out, flat)
    result = []
    pos = 0
    for i in wrt:
        n = len(_leaves(tensors[i]))
        result.append(_rebuild(tensors[i], grads[pos : pos + n]))
        pos += n
    return float(out.data), tuple(result)


def hvp_delta(f: Callable, theta: Struct, delta: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Hessian-vector product d2f/ddelta2 @ v, by differentiating <grad_delta f, v>."""
    _check_like("v", v, delta)
    with Tape():
        th = _to_tensors(theta, requires_grad=False)
        d = Tensor(delta, requires_grad=True)
        g = grad(_scalar(f(th, d)), d, create_graph=True)
        out = grad(_inner(g, v), d)
    return out.data


def mixed_partial_apply(f: Callable, theta: Struct, delta: np.ndarray, v: np.ndarray):
    """Apply the mixed partial d2f/dtheta ddelta to a delta-shaped ``v``; theta-shaped result."""
    _check_like("v", v, delta)
    with Tape():
        th = _to_tensors(theta, requires_grad=True)
        d = Tensor(delta, requires_grad=True)
        g = grad(_scalar(f(th, d)), d, create_graph=True)
        out = grad(_inner(g, v), _leaves(th))
    return _rebuild(th, out)


def mixed_partial_apply_t(f: Callable, theta: Struct, delta: np.ndarray, w: Struct) -> np.ndarray:
    """Transpose product: d2f/ddelta dtheta applied to a theta-shaped ``w``; delta-shaped result."""
    _check_like("w", w, theta)
    with Tape():
        th = _to_tensors(theta, requires_grad=True)
        d = Tensor(delta, requires_grad=True)
        gs = grad(_scalar(f(th, d)), _leaves(th), create_graph=True)
        g = dict(zip(th.keys(), gs)) if isinstance(th, Mapping) else gs[0]
        out = grad(_inner(g, w), d)
    return out.data

"""Dense tensors with a replayable reverse-mode tape.

Every backward rule is written in terms of the same recorded primitives as
the forward pass, so a backward sweep executed while a tape is active is
itself recorded. That closure is what makes gradients of gradients exact.

Recording only happens inside a :class:`Tape` context and only for ops whose
inputs require gradients; everything else runs as plain numpy.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from fastbat.errors import ContractViolation, UnsupportedOperation

SUPPORTED_OPS = frozenset(
    {
        "add",
        "sub",
        "mul",
        "neg",
        "matmul",
        "transpose",
        "reshape",
        "sum",
        "broadcast_to",
        "relu",
        "softplus",
        "swish",
        "sigmoid",
        "softmax",
        "softmax_cross_entropy",
        "sqrt",
        "reciprocal",
    }
)


class _State(threading.local):
    def __init__(self) -> None:
        self.tape: Optional[Tape] = None


_state = _State()


class Node:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: tuple, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.backward = backward

    def __repr__(self) -> str:
        return f"Node({self.op}, n_inputs={len(self.inputs)})"


class Tape:
    """Recording scope. Nodes are appended in execution order and never removed.

    Tapes nest: the innermost active tape receives new nodes. A backward sweep
    with ``create_graph=True`` records onto whichever tape is active at that
    moment, so a fresh (or the same) tape can be differentiated again.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._outer: Optional[Tape] = None

    def __enter__(self) -> "Tape":
        self._outer = _state.tape
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._outer
        self._outer = None

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, *arrays) -> list["Tensor"]:
        return [Tensor(a, requires_grad=True) for a in arrays]

    def gradient(self, target, sources, output_gradient=None, create_graph=False):
        return grad(target, sources, output_gradient=output_gradient, create_graph=create_graph)


class _Paused:
    """Suspend recording, e.g. for a first-order-only backward sweep."""

    def __enter__(self):
        self._saved = _state.tape
        _state.tape = None

    def __exit__(self, *exc):
        _state.tape = self._saved


def no_record() -> _Paused:
    return _Paused()


def recording() -> bool:
    return _state.tape is not None


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "__weakref__")
    # Raw numpy ufuncs would silently bypass the tape.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.node: Optional[Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.node.op}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    def __array__(self, dtype=None, copy=None):
        raise UnsupportedOperation(
            "implicit numpy conversion of a Tensor is not recorded; use .numpy()"
        )

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __rtruediv__(self, other):
        return mul(other, reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _lift(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def _make(op: str, data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    if op not in SUPPORTED_OPS:
        raise UnsupportedOperation(f"primitive {op!r} is not in the differentiable op set")
    out = Tensor(data)
    tape = _state.tape
    if tape is not None and any(t.requires_grad for t in inputs):
        node = Node(op, inputs, backward)
        tape.nodes.append(node)
        out.node = node
        out.requires_grad = True
    return out


def _binary(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and g.shape[i + lead] != 1
    )
    out = sum_(g, axis=axes, keepdims=True) if axes else g
    return reshape(out, tuple(shape))


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _binary(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)

    return _make("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)

    def backward(g):
        ga = _unbroadcast(mul(g, b), a.shape) if a.requires_grad else None
        gb = _unbroadcast(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", a.data * b.data, (a, b), backward)


def neg(a) -> Tensor:
    a = _lift(a)
    return _make("neg", -a.data, (a,), lambda g: (neg(g),))


def reciprocal(a) -> Tensor:
    a = _lift(a)
    out_holder: list[Tensor] = []

    def backward(g):
        r = out_holder[0]
        return (neg(mul(g, mul(r, r))),)

    out = _make("reciprocal", 1.0 / a.data, (a,), backward)
    out_holder.append(out)
    return out


def sqrt(a) -> Tensor:
    a = _lift(a)
    out_holder: list[Tensor] = []

    def backward(g):
        return (mul(mul(g, 0.5), reciprocal(out_holder[0])),)

    out = _make("sqrt", np.sqrt(a.data), (a,), backward)
    out_holder.append(out)
    return out


# ---------------------------------------------------------------- activations


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(a) -> Tensor:
    a = _lift(a)
    out_holder: list[Tensor] = []

    def backward(g):
        s = out_holder[0]
        return (mul(g, mul(s, sub(1.0, s))),)

    out = _make("sigmoid", _sigmoid_np(a.data), (a,), backward)
    out_holder.append(out)
    return out


def relu(a) -> Tensor:
    a = _lift(a)

    def backward(g):
        # derivative at 0 is 0; the mask is a constant so the second derivative is 0
        return (mul(g, Tensor((a.data > 0).astype(a.dtype))),)

    return _make("relu", np.maximum(a.data, 0.0), (a,), backward)


def softplus(a) -> Tensor:
    a = _lift(a)
    return _make("softplus", np.logaddexp(0.0, a.data), (a,), lambda g: (mul(g, sigmoid(a)),))


def swish(a) -> Tensor:
    a = _lift(a)

    def backward(g):
        s = sigmoid(a)
        return (mul(g, add(s, mul(a, mul(s, sub(1.0, s))))),)

    return _make("swish", a.data * _sigmoid_np(a.data), (a,), backward)


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "softplus": softplus,
    "swish": swish,
}


# ---------------------------------------------------------------- shape / linear algebra


def matmul(a, b) -> Tensor:
    a, b = _binary(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractViolation(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def backward(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return _make("matmul", a.data @ b.data, (a, b), backward)


def transpose(a) -> Tensor:
    a = _lift(a)
    return _make("transpose", a.data.T, (a,), lambda g: (transpose(g),))


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    in_shape = a.shape
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (reshape(g, in_shape),))


def broadcast_to(a, shape) -> Tensor:
    a = _lift(a)
    in_shape = a.shape
    data = np.broadcast_to(a.data, shape).copy()
    return _make("broadcast_to", data, (a,), lambda g: (_unbroadcast(g, in_shape),))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    in_shape = a.shape
    if axis is None:
        axes = tuple(range(a.ndim))
    elif isinstance(axis, int):
        axes = (axis % a.ndim,)
    else:
        axes = tuple(ax % a.ndim for ax in axis)
    kept = tuple(1 if i in axes else n for i, n in enumerate(in_shape))

    def backward(g):
        return (broadcast_to(reshape(g, kept), in_shape),)

    return _make("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    if axis is None:
        count = a.data.size
    elif isinstance(axis, int):
        count = a.shape[axis]
    else:
        count = int(np.prod([a.shape[ax] for ax in axis]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------- softmax and cross-entropy


def _softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a) -> Tensor:
    """Row-wise softmax over the last axis."""
    a = _lift(a)
    out_holder: list[Tensor] = []

    def backward(g):
        s = out_holder[0]
        inner = sum_(mul(g, s), axis=-1, keepdims=True)
        return (mul(s, sub(g, inner)),)

    out = _make("softmax", _softmax_np(a.data), (a,), backward)
    out_holder.append(out)
    return out


def softmax_cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Fused log-softmax + negative log-likelihood for integer labels.

    ``reduction`` is ``"mean"``, ``"sum"`` or ``"none"`` (per-example vector).
    """
    logits = _lift(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ContractViolation(f"logits must be [B, C], got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ContractViolation(f"labels must have shape ({n},), got {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise ContractViolation(f"label out of range [0, {c})")
    if reduction not in ("mean", "sum", "none"):
        raise ContractViolation(f"unknown reduction {reduction!r}")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - m).sum(axis=1)) + m[:, 0]
    per_example = lse - z[np.arange(n), labels]
    if reduction == "mean":
        data = per_example.mean()
    elif reduction == "sum":
        data = per_example.sum()
    else:
        data = per_example
    onehot = np.zeros_like(z)
    onehot[np.arange(n), labels] = 1.0

    def backward(g):
        if reduction == "none":
            scale = reshape(g, (n, 1))
        elif reduction == "mean":
            scale = mul(g, 1.0 / n)
        else:
            scale = g
        return (mul(sub(softmax(logits), Tensor(onehot)), scale),)

    return _make("softmax_cross_entropy", np.asarray(data), (logits,), backward)


# ---------------------------------------------------------------- backward sweep


def _topological(target: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(target, False)]
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
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def grad(
    target: Tensor,
    sources: Sequence[Tensor] | Tensor,
    output_gradient=None,
    create_graph: bool = False,
) -> list[Tensor] | Tensor:
    """Reverse-mode gradient of ``target`` with respect to ``sources``.

    A non-scalar target needs an explicit ``output_gradient`` of the same shape.
    With ``create_graph=True`` the sweep is recorded on the active tape and the
    returned gradients can be differentiated again.
    """
    single = isinstance(sources, Tensor)
    srcs: list[Tensor] = [sources] if single else list(sources)
    if output_gradient is None:
        if target.data.size != 1:
            raise ContractViolation(
                f"gradient of a non-scalar output {target.shape} needs output_gradient"
            )
        seed = Tensor(np.ones_like(target.data))
    else:
        seed = _lift(output_gradient, target)
        if seed.shape != target.shape:
            raise ContractViolation(
                f"output_gradient shape {seed.shape} != target shape {target.shape}"
            )
    if create_graph and _state.tape is None:
        raise ContractViolation("create_graph=True requires an active Tape")

    def sweep() -> list[Tensor]:
        grads: dict[int, Tensor] = {id(target): seed}
        for t in reversed(_topological(target)):
            g = grads.get(id(t))
            if g is None or t.node is None:
                continue
            for inp, gi in zip(t.node.inputs, t.node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else add(prev, gi)
        return [grads.get(id(s), Tensor(np.zeros_like(s.data))) for s in srcs]

    if create_graph:
        out = sweep()
    else:
        with no_record():
            out = sweep()
        out = [Tensor(o.data) for o in out]
    return out[0] if single else out


def as_tensors(arrays: Iterable, requires_grad: bool) -> list[Tensor]:
    return [Tensor(a, requires_grad=requires_grad) for a in arrays]

"""Dense-tensor computation graph with reverse-mode differentiation.

Everything runs on float64 numpy arrays recorded on a replayable tape: ops
execute eagerly and append a node per result, so creation order is already a
topological order. ``Graph.forward`` re-evaluates the tape against new leaf
bindings (used by the finite-difference oracles and by the training loop,
which rebinds parameters every step); ``Graph.backward`` walks the tape once
in exact reverse order.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


class ShapeMismatchError(ValueError):
    """Operands cannot be combined under the op's shape rules."""


class StaleGraphError(RuntimeError):
    """backward() called twice without an intervening forward()."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN/Inf while the graph is in strict mode."""


_GELU_C0 = math.sqrt(2.0 / math.pi)
_GELU_C1 = 0.044715


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Op:
    __slots__ = ("name", "fwd", "bwd")

    def __init__(self, name: str, fwd: Callable, bwd: Callable):
        self.name = name
        self.fwd = fwd
        self.bwd = bwd


OPS: dict[str, Op] = {}


def _register(name: str, fwd: Callable, bwd: Callable) -> None:
    OPS[name] = Op(name, fwd, bwd)


class Node:
    __slots__ = ("op", "inputs", "params", "out", "needs_grad", "requires_grad", "name")

    def __init__(self, op, inputs, params, out, needs_grad, requires_grad=False, name=None):
        self.op = op
        self.inputs = inputs
        self.params = params
        self.out = out
        self.needs_grad = needs_grad
        self.requires_grad = requires_grad
        self.name = name


class Tensor:
    """Handle to one node of a :class:`Graph`."""

    __slots__ = ("graph", "_idx")

    def __init__(self, graph: "Graph", idx: int):
        self.graph = graph
        self._idx = idx

    @property
    def data(self) -> np.ndarray:
        return self.graph._nodes[self._idx].out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def requires_grad(self) -> bool:
        return self.graph._nodes[self._idx].requires_grad

    @property
    def name(self):
        return self.graph._nodes[self._idx].name

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            if other.graph is not self.graph:
                raise ValueError("tensors belong to different graphs")
            return other
        return self.graph.constant(other)

    def __add__(self, other):
        return self.graph._apply("add", [self, self._lift(other)])

    __radd__ = __add__

    def __sub__(self, other):
        return self.graph._apply("sub", [self, self._lift(other)])

    def __rsub__(self, other):
        return self.graph._apply("sub", [self._lift(other), self])

    def __mul__(self, other):
        return self.graph._apply("mul", [self, self._lift(other)])

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self.graph._apply("div", [self, self._lift(other)])

    def __rtruediv__(self, other):
        return self.graph._apply("div", [self._lift(other), self])

    def __matmul__(self, other):
        return self.graph._apply("matmul", [self, self._lift(other)])

    def __neg__(self):
        return self.graph._apply("scale", [self], c=-1.0)

    def reshape(self, shape) -> "Tensor":
        return self.graph._apply("reshape", [self], shape=tuple(shape))

    def permute(self, axes) -> "Tensor":
        return self.graph._apply("permute", [self], axes=tuple(axes))

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return self.graph._apply("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return self.graph._apply("mean", [self], axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.graph._nodes[self._idx].op!r})"


class Graph:
    """Replayable op tape.

    Nodes are appended in creation order, which forward/backward rely on as
    the topological order. ``strict=True`` raises :class:`NonFiniteError` as
    soon as any op emits NaN/Inf.
    """

    def __init__(self, strict: bool = False):
        self.strict = strict
        self._nodes: list[Node] = []
        self._handles: list[Tensor] = []
        self._output: int | None = None
        self._ready = True  # eager construction leaves cached outputs valid

    # -- construction ------------------------------------------------------

    def leaf(self, data, requires_grad: bool = False, name: str | None = None) -> Tensor:
        arr = _as_f64(data)
        node = Node("leaf", (), {}, arr, needs_grad=requires_grad,
                    requires_grad=requires_grad, name=name)
        self._nodes.append(node)
        t = Tensor(self, len(self._nodes) - 1)
        self._handles.append(t)
        return t

    def constant(self, data) -> Tensor:
        return self.leaf(data, requires_grad=False)

    def _apply(self, op: str, inputs: Sequence[Tensor], **params) -> Tensor:
        arrays = [t.data for t in inputs]
        with np.errstate(divide="ignore", invalid="ignore"):
            out = OPS[op].fwd(arrays, params)
        if self.strict and not np.all(np.isfinite(out)):
            raise NonFiniteError(f"{op} produced non-finite values")
        needs = any(self._nodes[t._idx].needs_grad for t in inputs)
        node = Node(op, tuple(t._idx for t in inputs), params, out, needs_grad=needs)
        self._nodes.append(node)
        t = Tensor(self, len(self._nodes) - 1)
        self._handles.append(t)
        return t

    def mark_output(self, t: Tensor) -> None:
        self._output = t._idx

    @property
    def output(self) -> Tensor:
        idx = self._output if self._output is not None else len(self._nodes) - 1
        return self._handles[idx]

    def leaves(self) -> list[Tensor]:
        return [h for h, n in zip(self._handles, self._nodes) if n.op == "leaf"]

    # -- execution ---------------------------------------------------------

    def forward(self, bindings: dict[Tensor, np.ndarray] | None = None) -> Tensor:
        """Re-evaluate the whole tape against (re)bound leaves.

        Unmentioned leaves keep their current values; a binding must match
        the leaf's recorded shape, so the tape's shape checks stay valid.
        """
        if bindings:
            for t, value in bindings.items():
                node = self._nodes[t._idx]
                if node.op != "leaf":
                    raise ValueError("can only bind leaf tensors")
                arr = _as_f64(value)
                if arr.shape != node.out.shape:
                    raise ShapeMismatchError(
                        f"binding for leaf {node.name!r}: got {arr.shape}, expected {node.out.shape}")
                node.out = arr
        with np.errstate(divide="ignore", invalid="ignore"):
            for node in self._nodes:
                if node.op == "leaf":
                    continue
                ins = [self._nodes[i].out for i in node.inputs]
                node.out = OPS[node.op].fwd(ins, node.params)
                if self.strict and not np.all(np.isfinite(node.out)):
                    raise NonFiniteError(f"{node.op} produced non-finite values")
        self._ready = True
        return self.output

    def backward(self, seed=1.0) -> dict[Tensor, np.ndarray]:
        """Reverse sweep from the marked output; returns grads per requires_grad leaf."""
        if not self._ready:
            raise StaleGraphError("backward() called on a stale graph; run forward() first")
        out_node = self._nodes[self.output._idx]
        seed_arr = _as_f64(seed)
        if seed_arr.shape != out_node.out.shape:
            if seed_arr.ndim == 0 and out_node.out.ndim == 0:
                pass
            else:
                raise ShapeMismatchError(
                    f"seed shape {seed_arr.shape} != output shape {out_node.out.shape}")
        grads: list[np.ndarray | None] = [None] * len(self._nodes)
        grads[self.output._idx] = seed_arr
        for idx in range(len(self._nodes) - 1, -1, -1):
            node = self._nodes[idx]
            g = grads[idx]
            if g is None or node.op == "leaf" or not node.needs_grad:
                continue
            ins = [self._nodes[i].out for i in node.inputs]
            needs = tuple(self._nodes[i].needs_grad for i in node.inputs)
            in_grads = OPS[node.op].bwd(g, ins, node.out, node.params, needs)
            for child_idx, child_grad in zip(node.inputs, in_grads):
                if child_grad is None or not self._nodes[child_idx].needs_grad:
                    continue
                if grads[child_idx] is None:
                    grads[child_idx] = child_grad
                else:
                    grads[child_idx] = grads[child_idx] + child_grad
        self._ready = False
        return {self._handles[i]: g
                for i, g in enumerate(grads)
                if g is not None and self._nodes[i].op == "leaf" and self._nodes[i].requires_grad}


# -- elementwise arithmetic -------------------------------------------------

def _fwd_add(ins, p):
    _broadcast_shape("add", ins[0], ins[1])
    return ins[0] + ins[1]


def _bwd_add(g, ins, out, p, needs):
    return [_unbroadcast(g, ins[0].shape), _unbroadcast(g, ins[1].shape)]


def _fwd_sub(ins, p):
    _broadcast_shape("sub", ins[0], ins[1])
    return ins[0] - ins[1]


def _bwd_sub(g, ins, out, p, needs):
    return [_unbroadcast(g, ins[0].shape), _unbroadcast(-g, ins[1].shape)]


def _fwd_mul(ins, p):
    _broadcast_shape("mul", ins[0], ins[1])
    return ins[0] * ins[1]


def _bwd_mul(g, ins, out, p, needs):
    return [_unbroadcast(g * ins[1], ins[0].shape), _unbroadcast(g * ins[0], ins[1].shape)]


def _fwd_div(ins, p):
    _broadcast_shape("div", ins[0], ins[1])
    return ins[0] / ins[1]


def _bwd_div(g, ins, out, p, needs):
    a, b = ins
    return [_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)]


_register("add", _fwd_add, _bwd_add)
_register("sub", _fwd_sub, _bwd_sub)
_register("mul", _fwd_mul, _bwd_mul)
_register("div", _fwd_div, _bwd_div)


def _fwd_maximum(ins, p):
    _broadcast_shape("maximum", ins[0], ins[1])
    return np.maximum(ins[0], ins[1])


def _bwd_maximum(g, ins, out, p, needs):
    a, b = ins
    take_a = a >= b
    return [_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)]


_register("maximum", _fwd_maximum, _bwd_maximum)


def _fwd_clamp(ins, p):
    return np.clip(ins[0], p["lo"], p["hi"])


def _bwd_clamp(g, ins, out, p, needs):
    x = ins[0]
    lo, hi = p["lo"], p["hi"]
    inside = np.ones_like(x, dtype=bool)
    if lo is not None:
        inside &= x > lo
    if hi is not None:
        inside &= x < hi
    return [g * inside]


_register("clamp", _fwd_clamp, _bwd_clamp)
_register("abs", lambda ins, p: np.abs(ins[0]),
          lambda g, ins, out, p, needs: [g * np.sign(ins[0])])
_register("scale", lambda ins, p: ins[0] * p["c"],
          lambda g, ins, out, p, needs: [g * p["c"]])
_register("sin", lambda ins, p: np.sin(ins[0]),
          lambda g, ins, out, p, needs: [g * np.cos(ins[0])])
_register("cos", lambda ins, p: np.cos(ins[0]),
          lambda g, ins, out, p, needs: [-g * np.sin(ins[0])])


def _fwd_gelu(ins, p):
    x = ins[0]
    return 0.5 * x * (1.0 + np.tanh(_GELU_C0 * (x + _GELU_C1 * x ** 3)))


def _bwd_gelu(g, ins, out, p, needs):
    x = ins[0]
    th = np.tanh(_GELU_C0 * (x + _GELU_C1 * x ** 3))
    du = _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * x * x)
    return [g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)]


_register("gelu", _fwd_gelu, _bwd_gelu)


# -- linear algebra / structure ---------------------------------------------

def _fwd_matmul(ins, p):
    a, b = ins
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(f"matmul: operands must be >=2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatchError(f"matmul: leading dims do not broadcast, {a.shape} @ {b.shape}") from None
    return np.matmul(a, b)


def _bwd_matmul(g, ins, out, p, needs):
    a, b = ins
    ga = _unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape) if needs[0] else None
    gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape) if needs[1] else None
    return [ga, gb]


_register("matmul", _fwd_matmul, _bwd_matmul)


def _fwd_permute(ins, p):
    return np.transpose(ins[0], p["axes"])


def _bwd_permute(g, ins, out, p, needs):
    inv = np.argsort(p["axes"])
    return [np.transpose(g, inv)]


_register("permute", _fwd_permute, _bwd_permute)
_register("reshape", lambda ins, p: ins[0].reshape(p["shape"]),
          lambda g, ins, out, p, needs: [g.reshape(ins[0].shape)])


def _fwd_broadcast_to(ins, p):
    try:
        return np.broadcast_to(ins[0], p["shape"]).copy()
    except ValueError:
        raise ShapeMismatchError(
            f"broadcast: {ins[0].shape} does not broadcast to {p['shape']}") from None


_register("broadcast", _fwd_broadcast_to,
          lambda g, ins, out, p, needs: [_unbroadcast(g, ins[0].shape)])


def _fwd_concat(ins, p):
    axis = p["axis"]
    ref = list(ins[0].shape)
    for x in ins[1:]:
        s = list(x.shape)
        s[axis] = ref[axis]
        if s != ref:
            raise ShapeMismatchError(f"concat: shapes {[i.shape for i in ins]} differ off axis {axis}")
    return np.concatenate(ins, axis=axis)


def _bwd_concat(g, ins, out, p, needs):
    sizes = [x.shape[p["axis"]] for x in ins]
    splits = np.cumsum(sizes)[:-1]
    return list(np.split(g, splits, axis=p["axis"]))


_register("concat", _fwd_concat, _bwd_concat)


def _fwd_slice(ins, p):
    sl = [slice(None)] * ins[0].ndim
    sl[p["axis"]] = slice(p["start"], p["stop"])
    return ins[0][tuple(sl)].copy()


def _bwd_slice(g, ins, out, p, needs):
    gx = np.zeros_like(ins[0])
    sl = [slice(None)] * ins[0].ndim
    sl[p["axis"]] = slice(p["start"], p["stop"])
    gx[tuple(sl)] = g
    return [gx]


_register("slice", _fwd_slice, _bwd_slice)


# -- reductions --------------------------------------------------------------

def _fwd_sum(ins, p):
    return ins[0].sum(axis=p["axis"], keepdims=p["keepdims"])


def _expand_reduced(g, x_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, x_shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(x_shape) for a in axes)
        shape = [1 if i in axes else n for i, n in enumerate(x_shape)]
        g = g.reshape(shape)
    return np.broadcast_to(g, x_shape)


def _bwd_sum(g, ins, out, p, needs):
    return [_expand_reduced(g, ins[0].shape, p["axis"], p["keepdims"]).copy()]


def _bwd_mean(g, ins, out, p, needs):
    n = ins[0].size if p["axis"] is None else np.prod(
        [ins[0].shape[a % ins[0].ndim] for a in np.atleast_1d(p["axis"])])
    return [_expand_reduced(g, ins[0].shape, p["axis"], p["keepdims"]) / n]


_register("sum", _fwd_sum, _bwd_sum)
_register("mean", lambda ins, p: ins[0].mean(axis=p["axis"], keepdims=p["keepdims"]), _bwd_mean)


def _fwd_masked_mean(ins, p):
    x, m = ins
    if x.shape != m.shape:
        raise ShapeMismatchError(f"masked_mean: value shape {x.shape} != mask shape {m.shape}")
    return np.asarray((x * m).sum() / max(m.sum(), p["eps"]))


def _bwd_masked_mean(g, ins, out, p, needs):
    x, m = ins
    return [g * m / max(m.sum(), p["eps"]), None]


_register("masked_mean", _fwd_masked_mean, _bwd_masked_mean)


# -- normalizing ops ----------------------------------------------------------

def _fwd_softmax(ins, p):
    x = ins[0]
    z = x - x.max(axis=p["axis"], keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=p["axis"], keepdims=True)


def _bwd_softmax(g, ins, out, p, needs):
    dot = (g * out).sum(axis=p["axis"], keepdims=True)
    return [out * (g - dot)]


_register("softmax", _fwd_softmax, _bwd_softmax)


def _fwd_layernorm(ins, p):
    x, gain, bias = ins
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatchError(
            f"layernorm: gain {gain.shape} / bias {bias.shape} must be ({d},)")
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)  # population variance
    xhat = (x - mu) / np.sqrt(var + p["eps"])
    return xhat * gain + bias


def _bwd_layernorm(g, ins, out, p, needs):
    x, gain, bias = ins
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + p["eps"])
    xhat = (x - mu) * inv
    dxhat = g * gain
    dx = (dxhat - dxhat.mean(axis=-1, keepdims=True)
          - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) * inv
    lead = tuple(range(x.ndim - 1))
    dgain = (g * xhat).sum(axis=lead) if needs[1] else None
    dbias = g.sum(axis=lead) if needs[2] else None
    return [dx, dgain, dbias]


_register("layernorm", _fwd_layernorm, _bwd_layernorm)


# -- free-function spellings --------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    return a @ b


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return x.graph._apply("softmax", [x], axis=axis)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    return x.graph._apply("layernorm", [x, gain, bias], eps=eps)


def gelu(x: Tensor) -> Tensor:
    return x.graph._apply("gelu", [x])


def sin(x: Tensor) -> Tensor:
    return x.graph._apply("sin", [x])


def cos(x: Tensor) -> Tensor:
    return x.graph._apply("cos", [x])


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    return tensors[0].graph._apply("concat", list(tensors), axis=axis)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    return x.graph._apply("slice", [x], axis=axis, start=start, stop=stop)


def broadcast_to(x: Tensor, shape) -> Tensor:
    return x.graph._apply("broadcast", [x], shape=tuple(shape))


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return x.sum(axis=axis, keepdims=keepdims)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return x.mean(axis=axis, keepdims=keepdims)


def masked_mean(x: Tensor, mask: Tensor, eps: float = 1e-8) -> Tensor:
    return x.graph._apply("masked_mean", [x, mask], eps=eps)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    return a.graph._apply("maximum", [a, a._lift(b)])


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    return x.graph._apply("clamp", [x], lo=lo, hi=hi)


def absolute(x: Tensor) -> Tensor:
    return x.graph._apply("abs", [x])


def scale(x: Tensor, c: float) -> Tensor:
    return x.graph._apply("scale", [x], c=float(c))


def swap_last(x: Tensor) -> Tensor:
    """Transpose the trailing two axes (matrix transpose with batch dims)."""
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return x.permute(axes)

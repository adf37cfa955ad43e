"""Define-then-run reverse-mode differentiation over dense float64 arrays.

A :class:`Tape` holds a graph of primitive operations built once through
:class:`Node` handles.  Leaves are named and bound to concrete arrays on each
:meth:`Tape.forward` call, so the same graph serves every mini-batch of a
training run.  :meth:`Tape.backward` returns gradients for any subset of
leaves, parameters and inputs alike, and can switch ReLU nodes to the guided
rule used for saliency maps.

Example::

    tape = Tape()
    x = tape.leaf("x")
    w = tape.leaf("w")
    loss = tape.sum(tape.square(x @ w))
    tape.forward({"x": np.ones((3, 2)), "w": np.ones((2, 1))})
    grads = tape.backward(loss, ["w"])
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

__all__ = [
    "AutogradError",
    "ShapeError",
    "UnboundLeafError",
    "Node",
    "Tape",
    "as_tensor",
    "finite_difference",
]


class AutogradError(RuntimeError):
    pass


class ShapeError(AutogradError, ValueError):
    pass


class UnboundLeafError(AutogradError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unbound leaf"


def as_tensor(values, shape=None) -> np.ndarray:
    """Copy `values` into a finite float64 array, optionally reshaped."""
    arr = np.array(values, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != arr.size:
            raise ShapeError(f"cannot fit {arr.size} values into shape {shape}")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor values must be finite")
    return arr


@dataclass(eq=False)
class Node:
    tape: "Tape"
    index: int
    kind: str
    operands: tuple[int, ...] = ()
    attrs: dict = field(default_factory=dict)

    @property
    def name(self) -> str | None:
        return self.attrs.get("name")

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node(#{self.index} {self.kind}{label})"

    def _wrap(self, other) -> "Node":
        if isinstance(other, Node):
            return other
        return self.tape.const(other)

    def __add__(self, other):
        if np.isscalar(other):
            return self.tape.shift(self, float(other))
        return self.tape.add(self, self._wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        if np.isscalar(other):
            return self.tape.shift(self, -float(other))
        return self.tape.add(self, self.tape.neg(self._wrap(other)))

    def __rsub__(self, other):
        return self.tape.neg(self) + other

    def __mul__(self, other):
        if np.isscalar(other):
            return self.tape.scale(self, float(other))
        return self.tape.mul(self, self._wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return self.tape.scale(self, 1.0 / float(other))
        return self.tape.div(self, self._wrap(other))

    def __neg__(self):
        return self.tape.neg(self)

    def __matmul__(self, other):
        return self.tape.matmul(self, self._wrap(other))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _log_softmax(v: np.ndarray) -> np.ndarray:
    shifted = v - v.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


_BROADCAST_KINDS = {"add", "mul", "div"}

# forward rules for every non-leaf kind; shape checks live in Tape._eval
_FORWARD: dict[str, Callable[..., np.ndarray]] = {
    "identity": lambda n, a: a,
    "matmul": lambda n, a, b: a @ b,
    "add": lambda n, a, b: a + b,
    "mul": lambda n, a, b: a * b,
    "div": lambda n, a, b: a / b,
    "relu": lambda n, a: np.maximum(a, 0.0),
    "leaky_relu": lambda n, a: np.where(a > 0, a, n.attrs["slope"] * a),
    "sigmoid": lambda n, a: _sigmoid(a),
    "exp": lambda n, a: np.exp(a),
    "log": lambda n, a: np.log(a),
    "log_softmax": lambda n, a: _log_softmax(a),
    "sum": lambda n, a: np.sum(a, axis=n.attrs["axis"], keepdims=n.attrs["keepdims"]),
    "mean": lambda n, a: np.mean(a, axis=n.attrs["axis"], keepdims=n.attrs["keepdims"]),
    "scale": lambda n, a: a * n.attrs["c"],
    "shift": lambda n, a: a + n.attrs["c"],
    "neg": lambda n, a: -a,
    "square": lambda n, a: a * a,
    "transpose": lambda n, a: a.T,
    "clip": lambda n, a: np.clip(a, n.attrs["lo"], n.attrs["hi"]),
}


class Tape:
    """Ordered list of primitive nodes plus the values of the last forward pass.

    Nodes are appended in construction order, which is always a topological
    order.  Leaves are unique by name: asking for the same name twice returns
    the same node, which is how two network copies share one parameter set.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._leaves: dict[str, Node] = {}
        self._values: list[np.ndarray] | None = None

    # -- construction -------------------------------------------------------

    def _push(self, kind: str, operands: Iterable[Node] = (), **attrs) -> Node:
        ops = []
        for op in operands:
            if op.tape is not self:
                raise AutogradError(f"operand {op!r} belongs to another tape")
            ops.append(op.index)
        node = Node(self, len(self.nodes), kind, tuple(ops), attrs)
        self.nodes.append(node)
        self._values = None
        return node

    def leaf(self, name: str) -> Node:
        if name in self._leaves:
            return self._leaves[name]
        node = self._push("leaf", name=name)
        self._leaves[name] = node
        return node

    @property
    def leaf_names(self) -> list[str]:
        return list(self._leaves)

    def const(self, value) -> Node:
        return self._push("const", value=np.asarray(value, dtype=np.float64))

    def identity(self, a: Node) -> Node:
        return self._push("identity", [a])

    def matmul(self, a: Node, b: Node) -> Node:
        return self._push("matmul", [a, b])

    def add(self, a: Node, b: Node) -> Node:
        return self._push("add", [a, b])

    def mul(self, a: Node, b: Node) -> Node:
        return self._push("mul", [a, b])

    def div(self, a: Node, b: Node) -> Node:
        return self._push("div", [a, b])

    def relu(self, a: Node) -> Node:
        return self._push("relu", [a])

    def leaky_relu(self, a: Node, slope: float = 0.2) -> Node:
        return self._push("leaky_relu", [a], slope=float(slope))

    def sigmoid(self, a: Node) -> Node:
        return self._push("sigmoid", [a])

    def exp(self, a: Node) -> Node:
        return self._push("exp", [a])

    def log(self, a: Node) -> Node:
        return self._push("log", [a])

    def log_softmax(self, a: Node) -> Node:
        return self._push("log_softmax", [a])

    def sum(self, a: Node, axis: int | None = None, keepdims: bool = False) -> Node:
        return self._push("sum", [a], axis=axis, keepdims=keepdims)

    def mean(self, a: Node, axis: int | None = None, keepdims: bool = False) -> Node:
        return self._push("mean", [a], axis=axis, keepdims=keepdims)

    def scale(self, a: Node, c: float) -> Node:
        return self._push("scale", [a], c=float(c))

    def shift(self, a: Node, c: float) -> Node:
        return self._push("shift", [a], c=float(c))

    def neg(self, a: Node) -> Node:
        return self._push("neg", [a])

    def square(self, a: Node) -> Node:
        return self._push("square", [a])

    def transpose(self, a: Node) -> Node:
        return self._push("transpose", [a])

    def clip(self, a: Node, lo: float, hi: float) -> Node:
        return self._push("clip", [a], lo=float(lo), hi=float(hi))

    # -- evaluation ---------------------------------------------------------

    def forward(self, bindings: Mapping[str, np.ndarray]) -> dict[int, np.ndarray]:
        """Evaluate every node; returns ``{node index: value}``."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            try:
                values.append(self._eval(node, values, bindings))
            except (ValueError, IndexError) as exc:
                if isinstance(exc, ShapeError):
                    raise
                shapes = [values[i].shape for i in node.operands]
                raise ShapeError(
                    f"node #{node.index} ({node.kind}) rejects operand shapes {shapes}: {exc}"
                ) from None
        self._values = values
        return dict(enumerate(values))

    def _eval(self, node: Node, vals: list[np.ndarray], bindings) -> np.ndarray:
        kind = node.kind
        if kind == "leaf":
            name = node.attrs["name"]
            if name not in bindings:
                raise UnboundLeafError(f"leaf {name!r} (node #{node.index}) is not bound")
            return np.asarray(bindings[name], dtype=np.float64)
        if kind == "const":
            return node.attrs["value"]
        rule = _FORWARD.get(kind)
        if rule is None:
            raise AutogradError(f"unknown node kind {kind!r}")
        args = [vals[i] for i in node.operands]
        if kind == "matmul":
            a, b = args
            if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
                raise ShapeError(
                    f"node #{node.index} (matmul) cannot multiply {a.shape} by {b.shape}"
                )
        elif kind in _BROADCAST_KINDS:
            try:
                return rule(node, *args)
            except ValueError:
                raise ShapeError(
                    f"node #{node.index} ({kind}) cannot broadcast {args[0].shape} with {args[1].shape}"
                ) from None
        elif kind == "log_softmax" and (args[0].ndim == 0 or args[0].shape[-1] == 0):
            raise ShapeError(f"node #{node.index} (log_softmax) needs a non-empty last axis")
        elif kind == "transpose" and args[0].ndim != 2:
            raise ShapeError(f"node #{node.index} (transpose) needs a matrix, got {args[0].shape}")
        return rule(node, *args)

    def value(self, node: Node) -> np.ndarray:
        if self._values is None:
            raise AutogradError("forward has not been run")
        return self._values[node.index]

    # -- differentiation ----------------------------------------------------

    def backward(
        self, root: Node, leaves: Iterable[str] | None = None, guided: bool = False
    ) -> dict[str, np.ndarray]:
        """Gradient of scalar `root` with respect to the named leaves.

        With ``guided=True`` every ReLU node passes gradient only where both
        its input and the incoming gradient are positive.  Leaves not
        reachable from `root` receive zeros.  Cached forward values are never
        modified, so standard and guided passes may follow one forward.
        """
        vals = self._values
        if vals is None:
            raise AutogradError("backward called before forward")
        if vals[root.index].size != 1:
            raise AutogradError(
                f"root node #{root.index} has shape {vals[root.index].shape}; expected a scalar"
            )
        wanted = list(self._leaves) if leaves is None else list(dict.fromkeys(leaves))
        for name in wanted:
            if name not in self._leaves:
                raise UnboundLeafError(f"no leaf named {name!r} on this tape")
        targets = {self._leaves[n].index for n in wanted}

        needs = [False] * len(self.nodes)
        for node in self.nodes[: root.index + 1]:
            needs[node.index] = node.index in targets or any(needs[i] for i in node.operands)

        grads: dict[int, np.ndarray] = {root.index: np.ones_like(vals[root.index])}
        for node in reversed(self.nodes[: root.index + 1]):
            g = grads.pop(node.index, None) if node.index not in targets else grads.get(node.index)
            if g is None or not needs[node.index] or not node.operands:
                continue
            for idx, og in zip(node.operands, self._grad_rule(node, g, guided)):
                if og is None or not needs[idx]:
                    continue
                if idx in grads:
                    grads[idx] = grads[idx] + og
                else:
                    grads[idx] = og
        return {
            name: grads.get(self._leaves[name].index, np.zeros_like(vals[self._leaves[name].index]))
            for name in wanted
        }

    def _grad_rule(self, node: Node, g: np.ndarray, guided: bool) -> list[np.ndarray | None]:
        vals = self._values
        kind = node.kind
        args = [vals[i] for i in node.operands]
        out = vals[node.index]
        if kind == "identity":
            return [g]
        if kind == "matmul":
            a, b = args
            return [g @ b.T, a.T @ g]
        if kind == "add":
            return [_unbroadcast(g, args[0].shape), _unbroadcast(g, args[1].shape)]
        if kind == "mul":
            a, b = args
            return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]
        if kind == "div":
            a, b = args
            return [_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)]
        a = args[0]
        if kind == "relu":
            if guided:
                return [np.where((a > 0) & (g > 0), g, 0.0)]
            return [g * (a > 0)]
        if kind == "leaky_relu":
            return [np.where(a > 0, g, node.attrs["slope"] * g)]
        if kind == "sigmoid":
            return [g * out * (1.0 - out)]
        if kind == "exp":
            return [g * out]
        if kind == "log":
            return [g / a]
        if kind == "log_softmax":
            return [g - np.exp(out) * g.sum(axis=-1, keepdims=True)]
        if kind in ("sum", "mean"):
            axis = node.attrs["axis"]
            if not node.attrs["keepdims"] and axis is not None:
                g = np.expand_dims(g, axis)
            full = np.broadcast_to(g, a.shape)
            if kind == "mean":
                count = a.size if axis is None else a.shape[axis]
                full = full / count
            return [np.array(full)]
        if kind == "scale":
            return [g * node.attrs["c"]]
        if kind == "shift":
            return [g]
        if kind == "neg":
            return [-g]
        if kind == "square":
            return [2.0 * a * g]
        if kind == "transpose":
            return [g.T]
        if kind == "clip":
            inside = (a >= node.attrs["lo"]) & (a <= node.attrs["hi"])
            return [np.where(inside, g, 0.0)]
        raise AutogradError(f"no gradient rule for {kind!r}")


def finite_difference(
    f: Callable[[np.ndarray], float], point, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of scalar `f` at `point`, same shape as `point`."""
    if not h > 0:
        raise ValueError("step h must be positive")
    p = np.array(point, dtype=np.float64)
    flat = p.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(f(p))
        flat[i] = orig - h
        lo = float(f(p))
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ValueError(f"f is not finite near coordinate {i}")
        grad[i] = (hi - lo) / (2.0 * h)
    return grad.reshape(p.shape)

"""Reverse-mode automatic differentiation over an append-only computation graph.

Every node stores its op, operand ids, static attributes and a cached value.
Backward rules are written once against an ops interface and run in two
modes: ``NumericOps`` (plain numpy arrays) for a final backward sweep, and
``GraphOps`` which emits the backward pass as new graph nodes. Differentiating
a graph that already contains a recorded gradient therefore yields exact
second-order derivatives.

Node values are float64 numpy arrays (0-d for scalars).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class StructuralError(ValueError):
    """Graph shape, layout, or primitive misuse."""


class NumericError(FloatingPointError):
    """A NaN or Inf showed up in a node value or a function evaluation."""


# ---------------------------------------------------------------------------
# parameter layout
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def stop(self) -> int:
        return self.offset + self.size


@dataclass(frozen=True)
class Layout:
    """Named, disjoint, contiguous segments covering a flat vector."""

    segments: tuple[Segment, ...]

    @classmethod
    def from_shapes(cls, shapes: Sequence[tuple[str, tuple[int, ...]]]) -> "Layout":
        segs = []
        offset = 0
        for name, shape in shapes:
            seg = Segment(name, offset, tuple(int(s) for s in shape))
            segs.append(seg)
            offset = seg.stop
        return cls(tuple(segs))

    @property
    def size(self) -> int:
        return self.segments[-1].stop if self.segments else 0

    def __getitem__(self, name: str) -> Segment:
        for seg in self.segments:
            if seg.name == name:
                return seg
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(seg.name == name for seg in self.segments)

    def names(self) -> list[str]:
        return [seg.name for seg in self.segments]

    def to_dict(self) -> list[dict]:
        return [{"name": s.name, "offset": s.offset, "shape": list(s.shape)} for s in self.segments]

    @classmethod
    def from_dict(cls, items: list[dict]) -> "Layout":
        layout = cls(tuple(Segment(d["name"], int(d["offset"]), tuple(d["shape"])) for d in items))
        layout.check()
        return layout

    def check(self) -> None:
        offset = 0
        for seg in self.segments:
            if seg.offset != offset:
                raise StructuralError(f"segment {seg.name!r} starts at {seg.offset}, expected {offset}")
            offset = seg.stop


@dataclass
class ParameterVector:
    """Flat float64 vector plus the layout naming its segments.

    Gradients use the same type: a gradient carries the layout of the
    vector it differentiates.
    """

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size != self.layout.size:
            raise StructuralError(
                f"vector of shape {self.values.shape} does not match layout of size {self.layout.size}"
            )

    def __len__(self) -> int:
        return self.values.size

    def segment(self, name: str) -> np.ndarray:
        seg = self.layout[name]
        return self.values[seg.offset : seg.stop].reshape(seg.shape)

    def with_values(self, values: np.ndarray) -> "ParameterVector":
        return ParameterVector(np.array(values, dtype=np.float64), self.layout)

    def copy(self) -> "ParameterVector":
        return self.with_values(self.values)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))


GradientVector = ParameterVector


# ---------------------------------------------------------------------------
# primitive implementations on numpy arrays
# ---------------------------------------------------------------------------


def _f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class NumericOps:
    """Primitive ops on plain arrays. Same names and signatures as GraphOps."""

    @staticmethod
    def const(value):
        return _f64(value)

    @staticmethod
    def add(a, b):
        return a + b

    @staticmethod
    def sub(a, b):
        return a - b

    @staticmethod
    def mul(a, b):
        return a * b

    @staticmethod
    def div(a, b):
        return a / b

    @staticmethod
    def neg(a):
        return -a

    @staticmethod
    def exp(a):
        return np.exp(a)

    @staticmethod
    def log(a):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(a)

    @staticmethod
    def maximum(a, b):
        return np.maximum(a, b)

    @staticmethod
    def gt(a, b):
        return (a > b).astype(np.float64)

    @staticmethod
    def scale(s, a):
        return s * a

    @staticmethod
    def matmul(a, b):
        return a @ b

    @staticmethod
    def transpose(a):
        return np.ascontiguousarray(a.T)

    @staticmethod
    def sum(a, axis=None):
        return _f64(np.sum(a, axis=axis))

    @staticmethod
    def expand(a, shape, axis=None):
        if axis is not None:
            a = np.expand_dims(a, axis)
        elif np.ndim(a) != 0:
            raise StructuralError("expand without an axis needs a 0-d operand")
        return np.array(np.broadcast_to(a, shape))

    @staticmethod
    def take(a, offset, shape):
        size = int(np.prod(shape, dtype=np.int64))
        return a[offset : offset + size].reshape(shape).copy()

    @staticmethod
    def place(a, size, offset):
        out = np.zeros(size)
        out[offset : offset + a.size] = a.ravel()
        return out

    @staticmethod
    def rowmax(a):
        return np.max(a, axis=1)

    @staticmethod
    def stop_gradient(a):
        return a


def _shape_of(x) -> tuple[int, ...]:
    return tuple(x.shape)


# Backward rules: (F, attrs, args, out, g) -> tuple of operand adjoints.
# ``args``/``out``/``g`` are arrays under NumericOps and Vars under GraphOps.


def _vjp_sum(F, attrs, args, out, g):
    (a,) = args
    return (F.expand(g, shape=_shape_of(a), axis=attrs.get("axis")),)


def _vjp_expand(F, attrs, args, out, g):
    axis = attrs.get("axis")
    if axis is None:
        # only 0-d operands broadcast without an axis
        return (F.sum(g),)
    return (F.sum(g, axis=axis),)


def _vjp_maximum(F, attrs, args, out, g):
    a, b = args
    ga = F.mul(g, F.gt(a, b))
    return (ga, F.sub(g, ga))


_VJP: dict[str, Callable] = {
    "add": lambda F, at, args, out, g: (g, g),
    "sub": lambda F, at, args, out, g: (g, F.neg(g)),
    "mul": lambda F, at, args, out, g: (F.mul(g, args[1]), F.mul(g, args[0])),
    "div": lambda F, at, args, out, g: (
        F.div(g, args[1]),
        F.neg(F.div(F.mul(g, out), args[1])),
    ),
    "neg": lambda F, at, args, out, g: (F.neg(g),),
    "exp": lambda F, at, args, out, g: (F.mul(g, out),),
    "log": lambda F, at, args, out, g: (F.div(g, args[0]),),
    "maximum": _vjp_maximum,
    "scale": lambda F, at, args, out, g: (F.sum(F.mul(g, args[1])), F.scale(args[0], g)),
    "matmul": lambda F, at, args, out, g: (
        F.matmul(g, F.transpose(args[1])),
        F.matmul(F.transpose(args[0]), g),
    ),
    "transpose": lambda F, at, args, out, g: (F.transpose(g),),
    "sum": _vjp_sum,
    "expand": _vjp_expand,
    "take": lambda F, at, args, out, g: (F.place(g, size=_shape_of(args[0])[0], offset=at["offset"]),),
    "place": lambda F, at, args, out, g: (F.take(g, offset=at["offset"], shape=_shape_of(args[0])),),
}

# forward-only ops: their outputs carry no derivative
_NONDIFF = {"gt", "rowmax", "stop_gradient"}
_SOURCES = {"leaf", "const"}
SUPPORTED_OPS = frozenset(_VJP) | _NONDIFF | _SOURCES


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------


class CompGraph:
    """Append-only list of nodes; operands always precede their consumers."""

    def __init__(self):
        self.ops: list[str] = []
        self.args: list[tuple[int, ...]] = []
        self.attrs: list[dict] = []
        self.values: list[np.ndarray] = []
        self.needs_grad: list[bool] = []
        self.leaf_ids: list[int] = []
        self.output: int | None = None
        self.F = GraphOps(self)

    def __len__(self) -> int:
        return len(self.ops)

    def _append(self, op: str, args: tuple[int, ...], attrs: dict, value: np.ndarray, needs_grad: bool) -> "Var":
        nid = len(self.ops)
        if not np.all(np.isfinite(value)):
            raise NumericError(f"node {nid} ({op}) produced a non-finite value")
        self.ops.append(op)
        self.args.append(args)
        self.attrs.append(attrs)
        self.values.append(value)
        self.needs_grad.append(needs_grad)
        return Var(self, nid)

    def leaf(self, value) -> "Var":
        value = np.array(value, dtype=np.float64)
        var = self._append("leaf", (), {}, value, True)
        self.leaf_ids.append(var.id)
        return var

    def const(self, value) -> "Var":
        return self._append("const", (), {"value": _f64(value)}, _f64(value), False)

    def apply(self, op: str, operands: Sequence["Var"], **attrs) -> "Var":
        if op not in SUPPORTED_OPS or op in _SOURCES:
            raise StructuralError(f"unsupported primitive {op!r}")
        ids = []
        for v in operands:
            if not isinstance(v, Var) or v.graph is not self:
                raise StructuralError(f"operand of {op!r} is not a node of this graph")
            ids.append(v.id)
        vals = [self.values[i] for i in ids]
        value = getattr(NumericOps, op)(*vals, **attrs)
        needs = op not in _NONDIFF and any(self.needs_grad[i] for i in ids)
        return self._append(op, tuple(ids), attrs, value, needs)

    def var(self, nid: int) -> "Var":
        return Var(self, nid)

    # -- re-evaluation -----------------------------------------------------

    def set_leaves(self, leaves) -> None:
        """Re-run every node with new leaf values, in node order."""
        leaves = _leaf_arrays(leaves)
        if len(leaves) != len(self.leaf_ids):
            raise StructuralError(f"graph has {len(self.leaf_ids)} leaves, got {len(leaves)} values")
        new_vals = dict(zip(self.leaf_ids, leaves))
        for lid, val in new_vals.items():
            if val.shape != self.values[lid].shape:
                raise StructuralError(
                    f"leaf {lid} has shape {self.values[lid].shape}, got {val.shape}"
                )
        values = self.values
        for nid, op in enumerate(self.ops):
            if op == "leaf":
                values[nid] = new_vals[nid].copy()
            elif op == "const":
                continue
            else:
                vals = [values[i] for i in self.args[nid]]
                value = getattr(NumericOps, op)(*vals, **self.attrs[nid])
                if not np.all(np.isfinite(value)):
                    raise NumericError(f"node {nid} ({op}) produced a non-finite value")
                values[nid] = value


def _leaf_arrays(leaves) -> list[np.ndarray]:
    if isinstance(leaves, ParameterVector):
        return [leaves.values]
    if isinstance(leaves, np.ndarray) or np.isscalar(leaves):
        return [np.asarray(leaves, dtype=np.float64)]
    return [np.asarray(v.values if isinstance(v, ParameterVector) else v, dtype=np.float64) for v in leaves]


class GraphOps:
    """Same interface as NumericOps, but every call appends a node."""

    def __init__(self, graph: CompGraph):
        self.graph = graph

    def const(self, value):
        return self.graph.const(value)

    def __getattr__(self, op):
        if op not in SUPPORTED_OPS or op in _SOURCES:
            raise StructuralError(f"unsupported primitive {op!r}")
        graph = self.graph

        def build(*operands, **attrs):
            return graph.apply(op, operands, **attrs)

        return build


class Var:
    """Handle on a graph node."""

    __slots__ = ("graph", "id")

    def __init__(self, graph: CompGraph, nid: int):
        self.graph = graph
        self.id = nid

    @property
    def value(self) -> np.ndarray:
        return self.graph.values[self.id]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(#{self.id} {self.graph.ops[self.id]} shape={self.shape})"

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            return other
        return self.graph.const(np.broadcast_to(_f64(other), self.shape))

    def __add__(self, other):
        return self.graph.apply("add", (self, self._lift(other)))

    __radd__ = __add__

    def __sub__(self, other):
        return self.graph.apply("sub", (self, self._lift(other)))

    def __rsub__(self, other):
        return self.graph.apply("sub", (self._lift(other), self))

    def __mul__(self, other):
        return self.graph.apply("mul", (self, self._lift(other)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self.graph.apply("div", (self, self._lift(other)))

    def __neg__(self):
        return self.graph.apply("neg", (self,))

    def __matmul__(self, other):
        return self.graph.apply("matmul", (self, other))


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------


def _backward(graph: CompGraph, out_id: int, stop: int, F, node) -> dict[int, object]:
    """Accumulate adjoints for nodes with id >= stop, sweeping from out_id down."""
    if graph.values[out_id].shape != ():
        raise StructuralError(f"output node {out_id} is not scalar (shape {graph.values[out_id].shape})")
    adj: dict[int, object] = {out_id: F.const(1.0)}
    ops, args_of, attrs_of, needs = graph.ops, graph.args, graph.attrs, graph.needs_grad
    for nid in range(out_id, stop - 1, -1):
        g = adj.get(nid)
        if g is None:
            continue
        op = ops[nid]
        if op in _SOURCES or op in _NONDIFF:
            continue
        arg_ids = args_of[nid]
        grads = _VJP[op](F, attrs_of[nid], [node(i) for i in arg_ids], node(nid), g)
        for aid, ga in zip(arg_ids, grads):
            if aid < stop or not needs[aid]:
                continue
            prev = adj.get(aid)
            adj[aid] = ga if prev is None else F.add(prev, ga)
    return adj


def grad(output: Var, wrt: Sequence[Var]) -> list[Var]:
    """Emit d(output)/d(wrt) as new nodes of the same graph.

    The returned nodes are ordinary graph nodes, so a later backward pass
    through them differentiates the gradient computation itself.
    """
    graph = output.graph
    stop = min(w.id for w in wrt)
    adj = _backward(graph, output.id, stop, graph.F, graph.var)
    result = []
    for w in wrt:
        g = adj.get(w.id)
        result.append(g if g is not None else graph.const(np.zeros(w.shape)))
    return result


def numeric_grad(graph: CompGraph, output_id: int, wrt_ids: Sequence[int]) -> list[np.ndarray]:
    """Numeric backward sweep using the cached values; appends nothing."""
    stop = min(wrt_ids)
    values = graph.values
    adj = _backward(graph, output_id, stop, NumericOps, lambda i: values[i])
    return [np.array(adj[i], dtype=np.float64) if i in adj else np.zeros(values[i].shape) for i in wrt_ids]


def stop_gradient(x: Var) -> Var:
    return x.graph.apply("stop_gradient", (x,))


# ---------------------------------------------------------------------------
# module surface
# ---------------------------------------------------------------------------


def record_through(fn: Callable[[Var], Var], leaves) -> CompGraph:
    """Build a graph by calling ``fn`` on a single flat leaf.

    ``fn`` may itself call :func:`grad`; those gradient computations become
    ordinary nodes of the recorded graph.
    """
    graph = CompGraph()
    (arr,) = _leaf_arrays(leaves)
    x = graph.leaf(arr)
    out = fn(x)
    if not isinstance(out, Var) or out.graph is not graph:
        raise StructuralError("fn must return a node of the graph it was given")
    graph.output = out.id
    return graph


def evaluate(graph: CompGraph, leaves) -> float | np.ndarray:
    if graph.output is None:
        raise StructuralError("graph has no output node")
    graph.set_leaves(leaves)
    value = graph.values[graph.output]
    return float(value) if value.shape == () else value.copy()


def gradient(graph: CompGraph, leaves) -> GradientVector | np.ndarray:
    """d(output)/d(leaf) at ``leaves``; output must be scalar."""
    if graph.output is None:
        raise StructuralError("graph has no output node")
    graph.set_leaves(leaves)
    (g,) = numeric_grad(graph, graph.output, graph.leaf_ids[:1])
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient")
    if isinstance(leaves, ParameterVector):
        return leaves.with_values(g)
    return g


def finite_diff_gradient(fn: Callable[[np.ndarray], float], at, step: float = 1e-5):
    """Central differences (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate."""
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    x = np.array(at.values if isinstance(at, ParameterVector) else at, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn(x)
        flat[i] = orig - step
        fm = fn(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        out[i] = (fp - fm) / (2.0 * step)
    out = out.reshape(x.shape)
    if isinstance(at, ParameterVector):
        return at.with_values(out)
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / max(||a||, ||b||), 0 when both vanish."""
    a = np.asarray(getattr(a, "values", a), dtype=np.float64)
    b = np.asarray(getattr(b, "values", b), dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)

"""Reverse-mode automatic differentiation on dense float64 arrays.

A Tape records every op applied while it is active; backward() replays the
record in reverse and accumulates gradients into the leaves.  Ops called with
no active tape run eagerly and return constant tensors, which keeps value-mode
helpers (pose algebra on plain numbers, file parsing) on the same code paths.

The op set is exactly what the odometry network needs: broadcasting
elementwise arithmetic, relu/exp/sqrt/abs, matmul (rank 2 or batched rank 3),
axis softmax, sum/max reductions, concat/slice/reshape, and row gathers with
scatter-add gradients.  Everything is double precision end to end.
"""
from __future__ import annotations

import re
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "Parameter", "ParamStore", "TensorError",
    "const", "add", "sub", "mul", "div", "negate", "relu", "exp", "sqrt",
    "absolute", "matmul", "softmax_axis", "reduce_sum", "reduce_max",
    "concat", "slice_axis", "reshape", "gather_rows", "backward",
    "save_params", "load_params",
]


class TensorError(ValueError):
    """Raised on shape mismatches, bad indices, or tape misuse."""


class Tensor:
    """A dense float64 array, optionally bound to a node on a tape."""

    __slots__ = ("data", "tape", "nid", "param_name")

    def __init__(self, data) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.tape: Tape | None = None
        self.nid: int | None = None
        self.param_name: str | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, taped={self.tape is not None})"

    # operator sugar; the named functions below are the real API
    def __add__(self, other): return add(self, _wrap(other))
    def __radd__(self, other): return add(_wrap(other), self)
    def __sub__(self, other): return sub(self, _wrap(other))
    def __rsub__(self, other): return sub(_wrap(other), self)
    def __mul__(self, other): return mul(self, _wrap(other))
    def __rmul__(self, other): return mul(_wrap(other), self)
    def __truediv__(self, other): return div(self, _wrap(other))
    def __rtruediv__(self, other): return div(_wrap(other), self)
    def __neg__(self): return negate(self)
    def __matmul__(self, other): return matmul(self, _wrap(other))


def const(data) -> Tensor:
    return Tensor(data)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("kind", "parents", "backward_fn", "shape")

    def __init__(self, kind: str, parents: tuple[int, ...],
                 backward_fn: Callable | None, shape: tuple[int, ...]) -> None:
        self.kind = kind
        self.parents = parents
        self.backward_fn = backward_fn
        self.shape = shape


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered op record.  Single writer; enter to record, backward() later.

    Leaving the context stops recording but keeps the node structure, so
    backward() and grad() work after exit.  Tensors tagged by a finished tape
    may be re-tagged by the next tape (parameters are reused this way).
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._grads: list[np.ndarray | None] | None = None
        self._param_leaves: dict[str, int] = {}
        self.live = False

    def __enter__(self) -> "Tape":
        if self.nodes:
            raise TensorError("tape already used; tapes are single-shot")
        self.live = True
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        self.live = False
        _ACTIVE.pop()

    def _ensure_node(self, t: Tensor) -> int:
        if t.tape is self:
            return t.nid  # type: ignore[return-value]
        if t.tape is not None and t.tape.live:
            raise TensorError("tensor belongs to another live tape")
        nid = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None, t.data.shape))
        t.tape = self
        t.nid = nid
        if t.param_name is not None:
            self._param_leaves[t.param_name] = nid
        return nid

    def _record(self, kind: str, inputs: Sequence[Tensor], out: Tensor,
                backward_fn: Callable) -> None:
        pids = tuple(self._ensure_node(t) for t in inputs)
        out.tape = self
        out.nid = len(self.nodes)
        self.nodes.append(_Node(kind, pids, backward_fn, out.data.shape))

    def backward(self, root: Tensor,
                 store: "ParamStore | None" = None) -> dict[str, np.ndarray]:
        """Accumulate d(root)/d(leaf) for every leaf; return parameter grads.

        root must be scalar.  The returned map covers every trainable
        parameter in `store` (zeros for parameters the graph never touched);
        without a store it covers just the parameters the tape saw.
        """
        if root.tape is not self or root.nid is None:
            raise TensorError("backward root is not on this tape")
        if root.data.size != 1:
            raise TensorError(
                f"backward root must be scalar, got shape {root.data.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[root.nid] = np.ones(self.nodes[root.nid].shape, dtype=np.float64)
        for nid in range(root.nid, -1, -1):
            node = self.nodes[nid]
            g = grads[nid]
            if g is None or node.backward_fn is None:
                continue
            parent_grads = node.backward_fn(g)
            for pid, pg in zip(node.parents, parent_grads):
                if pg is None:
                    continue
                if grads[pid] is None:
                    grads[pid] = pg
                else:
                    grads[pid] = grads[pid] + pg
        self._grads = grads
        out: dict[str, np.ndarray] = {}
        for name, nid in self._param_leaves.items():
            g = grads[nid]
            out[name] = g if g is not None else np.zeros(self.nodes[nid].shape)
        if store is not None:
            for p in store:
                if p.trainable and p.name not in out:
                    out[p.name] = np.zeros_like(p.value)
        return out

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the last backward() root with respect to t."""
        if self._grads is None:
            raise TensorError("backward has not run on this tape")
        if t.tape is not self or t.nid is None:
            raise TensorError("tensor is not on this tape")
        g = self._grads[t.nid]
        return g if g is not None else np.zeros(t.data.shape)


def backward(tape: Tape, root: Tensor,
             store: "ParamStore | None" = None) -> dict[str, np.ndarray]:
    return tape.backward(root, store)


def _current_tape(inputs: Sequence[Tensor]) -> Tape | None:
    tape = _ACTIVE[-1] if _ACTIVE else None
    for t in inputs:
        if t.tape is not None and t.tape.live and t.tape is not tape:
            raise TensorError("op mixes tensors from two different live tapes")
    return tape


def _make(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray,
          backward_fn: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = _current_tape(inputs)
    if tape is not None:
        tape._record(kind, inputs, out, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise TensorError(
            f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from None


# --- elementwise ---

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    out = a.data + b.data
    return _make("add", (a, b), out, lambda g: (
        _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    out = a.data - b.data
    return _make("sub", (a, b), out, lambda g: (
        _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    out = a.data * b.data
    return _make("mul", (a, b), out, lambda g: (
        _unbroadcast(g * b.data, a.data.shape),
        _unbroadcast(g * a.data, b.data.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return _make("div", (a, b), out, lambda g: (
        _unbroadcast(g / b.data, a.data.shape),
        _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))


def negate(a: Tensor) -> Tensor:
    return _make("negate", (a,), -a.data, lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return _make("relu", (a,), a.data * mask, lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make("exp", (a,), out, lambda g: (g * out,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    # subgradient 0 at exactly 0, so norms of zero vectors stay finite
    def back(g):
        denom = np.where(out > 0.0, out, 1.0)
        return (np.where(out > 0.0, 0.5 * g / denom, 0.0),)
    return _make("sqrt", (a,), out, back)


def absolute(a: Tensor) -> Tensor:
    return _make("abs", (a,), np.abs(a.data), lambda g: (g * np.sign(a.data),))


# --- matmul ---

def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim not in (2, 3) or bd.ndim not in (2, 3):
        raise TensorError(
            f"matmul: ranks must be 2 or 3, got {ad.ndim} and {bd.ndim}")
    if ad.shape[-1] != bd.shape[-2]:
        raise TensorError(
            f"matmul: inner dimensions differ, {ad.shape} vs {bd.shape}")
    if ad.ndim == 3 and bd.ndim == 3 and ad.shape[0] != bd.shape[0]:
        raise TensorError(
            f"matmul: batch dimensions differ, {ad.shape} vs {bd.shape}")
    out = np.matmul(ad, bd)

    def back(g):
        ga = np.matmul(g, bd.swapaxes(-1, -2))
        gb = np.matmul(ad.swapaxes(-1, -2), g)
        return (_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape))

    return _make("matmul", (a, b), out, back)


# --- softmax / reductions ---

def softmax_axis(a: Tensor, axis: int) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _make("softmax", (a,), out, back)


def reduce_sum(a: Tensor, axis: int | None = None,
               keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, a.data.shape).copy(),)

    return _make("sum", (a,), out, back)


def reduce_max(a: Tensor, axis: int | None = None,
               keepdims: bool = False) -> Tensor:
    """Max reduction; gradient flows to the first (lowest-index) argmax."""
    if axis is None:
        out = a.data.max()
        flat_idx = int(a.data.argmax())

        def back_all(g):
            ga = np.zeros_like(a.data)
            ga.flat[flat_idx] = float(g)
            return (ga,)

        return _make("max", (a,), out, back_all)

    out = a.data.max(axis=axis, keepdims=keepdims)
    arg = np.expand_dims(a.data.argmax(axis=axis), axis)  # first index on ties

    def back(g):
        ge = g if keepdims else np.expand_dims(g, axis)
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, arg, ge, axis)
        return (ga,)

    return _make("max", (a,), out, back)


# --- shape ops ---

def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise TensorError("concat: need at least one tensor")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        gs = []
        for i in range(len(parts)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            gs.append(g[tuple(sl)])
        return tuple(gs)

    return _make("concat", parts, out, back)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, stop)
    out = a.data[tuple(sl)]

    def back(g):
        ga = np.zeros_like(a.data)
        ga[tuple(sl)] = g
        return (ga,)

    return _make("slice", (a,), out, back)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)
    return _make("reshape", (a,), out,
                 lambda g: (g.reshape(a.data.shape),))


def gather_rows(a: Tensor, indices) -> Tensor:
    """out[i] = a[indices[i]]; gradient scatter-adds duplicate rows."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise TensorError(f"gather_rows: indices must be 1-D, got {idx.shape}")
    n = a.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise TensorError(
            f"gather_rows: index out of range for first dimension {n}")
    out = a.data[idx]

    def back(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make("gather", (a,), out, back)


# --- parameters and serialization ---

_NAME_RE = re.compile(r"^[A-Za-z0-9_./-]+$")


class Parameter:
    """Named trainable array.  tensor() hands out one shared Tensor object so
    every forward pass records the same leaf identity."""

    def __init__(self, name: str, value, trainable: bool = True) -> None:
        if not _NAME_RE.match(name):
            raise TensorError(f"bad parameter name {name!r}")
        self.name = name
        self.trainable = trainable
        self._t = Tensor(np.array(value, dtype=np.float64))
        self._t.param_name = name

    @property
    def value(self) -> np.ndarray:
        return self._t.data

    @value.setter
    def value(self, v) -> None:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != self._t.data.shape:
            raise TensorError(
                f"parameter {self.name}: shape {v.shape} != {self._t.data.shape}")
        self._t.data = v

    def tensor(self) -> Tensor:
        return self._t

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.value.shape})"


class ParamStore:
    """Insertion-ordered registry of parameters, keyed by unique name."""

    def __init__(self) -> None:
        self._params: dict[str, Parameter] = {}

    def create(self, name: str, value, trainable: bool = True) -> Parameter:
        if name in self._params:
            raise TensorError(f"duplicate parameter name {name!r}")
        p = Parameter(name, value, trainable)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def count_values(self) -> int:
        return sum(p.value.size for p in self._params.values())


_CKPT_MAGIC = b"tensorstate 1"


def save_params(store: ParamStore) -> bytes:
    """Serialize: text header, then per parameter a text line plus raw
    little-endian float64 bytes.  Byte-exact round trip with load_params."""
    out = bytearray()
    out += _CKPT_MAGIC + b"\n"
    out += f"count {len(store)}\n".encode()
    for p in store:
        dims = " ".join(str(d) for d in p.value.shape)
        head = f"param {p.name} {int(p.trainable)} {p.value.ndim}"
        out += (head + (" " + dims if dims else "") + "\n").encode()
        out += np.ascontiguousarray(p.value, dtype="<f8").tobytes()
        out += b"\n"
    return bytes(out)


def _read_line(buf: bytes, pos: int) -> tuple[str, int]:
    end = buf.index(b"\n", pos)
    return buf[pos:end].decode(), end + 1


def load_params(blob: bytes) -> ParamStore:
    pos = 0
    line, pos = _read_line(blob, pos)
    if line.encode() != _CKPT_MAGIC:
        raise TensorError(f"bad checkpoint header {line!r}")
    line, pos = _read_line(blob, pos)
    if not line.startswith("count "):
        raise TensorError("checkpoint missing parameter count")
    n = int(line.split()[1])
    store = ParamStore()
    for _ in range(n):
        line, pos = _read_line(blob, pos)
        fields = line.split()
        if fields[0] != "param":
            raise TensorError(f"expected param line, got {line!r}")
        name, trainable, ndim = fields[1], bool(int(fields[2])), int(fields[3])
        shape = tuple(int(d) for d in fields[4:4 + ndim])
        if len(shape) != ndim:
            raise TensorError(f"parameter {name}: truncated shape")
        nbytes = 8 * int(np.prod(shape)) if shape else 8
        raw = blob[pos:pos + nbytes]
        if len(raw) != nbytes:
            raise TensorError(f"parameter {name}: truncated data")
        pos += nbytes
        if blob[pos:pos + 1] != b"\n":
            raise TensorError(f"parameter {name}: missing terminator")
        pos += 1
        value = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        store.create(name, value, trainable)
    return store

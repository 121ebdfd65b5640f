"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

A :class:`Tape` records every op whose inputs are tracked while it is active.
Nodes are appended in evaluation order, so walking the list backwards is a
valid reverse topological order and no graph sort is needed.

Example::

    store = ParamStore()
    store.add("w", np.ones(3))
    with Tape() as tape:
        p = store.watch(tape)
        loss = mse(p["w"], Tensor(np.zeros(3)))
        grads = store.gradients(p, backward(loss))
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteGradientError",
    "Tensor",
    "Tape",
    "ParamStore",
    "forward_op",
    "add",
    "sub",
    "mul",
    "scale",
    "shift",
    "matmul",
    "relu",
    "absolute",
    "sum_",
    "max_last_dim",
    "argmax_last_dim",
    "mse",
    "concat",
    "reshape",
    "expand_last",
    "slice_rows",
    "stop_gradient",
    "backward",
    "adam_step",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient for parameter {name!r}")


_ACTIVE: "Tape | None" = None


class Tensor:
    """Dense float64 array, optionally attached to the active tape."""

    __slots__ = ("data", "node", "tape")
    __array_priority__ = 100

    def __init__(self, data, node: int | None = None, tape: "Tape | None" = None):
        if type(data) is np.ndarray and data.dtype == np.float64:
            self.data = data
        else:
            if isinstance(data, Tensor):
                data = data.data
            arr = np.asarray(data)
            if arr.dtype.kind != "i":
                arr = arr.astype(np.float64, copy=False)
            self.data = arr
        self.node = node
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor({self.data!r}{tag})"

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, float(other))
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, float(other))
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, -float(other))
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        if isinstance(other, (int, float)):
            return shift(scale(self, -1.0), float(other))
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _raise_item(shape):
    raise ShapeError("item", shape, detail="tensor is not scalar")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class _Node:
    kind: str
    inputs: tuple[int | None, ...]
    vjp: VJP | None


@dataclass
class Tape:
    """Append-only op record; ``gradients`` is filled by :func:`backward`."""

    nodes: list[_Node] = field(default_factory=list)
    gradients: dict[int, np.ndarray] = field(default_factory=dict)
    # Smallest distance of any relu/abs input to 0 (or of any max to its
    # runner-up) seen while recording. Finite-difference checks resample
    # instances whose margin is below the step size.
    kink_margin: float = math.inf
    _prev: "Tape | None" = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        global _ACTIVE
        self._prev = _ACTIVE
        _ACTIVE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE
        _ACTIVE = self._prev
        self._prev = None

    def watch(self, value) -> Tensor:
        """Register ``value`` as a leaf and return its tracked tensor."""
        t = Tensor(value)
        self.nodes.append(_Node("leaf", (), None))
        t.node = len(self.nodes) - 1
        t.tape = self
        return t

    def grad(self, t: Tensor) -> np.ndarray:
        if t.node is None or t.tape is not self:
            return np.zeros_like(t.data)
        g = self.gradients.get(t.node)
        return np.zeros_like(t.data) if g is None else g

    def _note_kink(self, margin: float) -> None:
        if margin < self.kink_margin:
            self.kink_margin = margin


def _record(kind: str, out: np.ndarray, inputs: Sequence[Tensor], vjp: VJP) -> Tensor:
    tape = _ACTIVE
    if tape is None:
        return Tensor(out)
    ids = tuple(t.node if (t.node is not None and t.tape is tape) else None for t in inputs)
    if all(i is None for i in ids):
        return Tensor(out)
    tape.nodes.append(_Node(kind, ids, vjp))
    return Tensor(out, len(tape.nodes) - 1, tape)


# -- broadcasting -----------------------------------------------------------


def _broadcast_kind(op: str, a: tuple, b: tuple) -> int:
    """0: equal shapes, 1: ``a`` broadcast over b's leading dim, 2: the reverse."""
    if a == b:
        return 0
    if len(b) == len(a) + 1 and b[1:] == a:
        return 1
    if len(a) == len(b) + 1 and a[1:] == b:
        return 2
    raise ShapeError(op, a, b, detail="only a single leading batch dimension may broadcast")


def _unbroadcast(g: np.ndarray, kind: int, side: int) -> np.ndarray:
    return g.sum(axis=0) if kind == side else g


# -- primitives -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    k = _broadcast_kind("add", a.shape, b.shape)
    return _record("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, k, 1), _unbroadcast(g, k, 2)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    k = _broadcast_kind("sub", a.shape, b.shape)
    return _record("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, k, 1), -_unbroadcast(g, k, 2)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    k = _broadcast_kind("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _record(
        "mul", ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, k, 1), _unbroadcast(g * ad, k, 2))
    )


def scale(x: Tensor, c: float) -> Tensor:
    return _record("scale", x.data * c, (x,), lambda g: (g * c,))


def shift(x: Tensor, c: float) -> Tensor:
    """Add a Python scalar constant."""
    return _record("shift", x.data + c, (x,), lambda g: (g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(..., m?, k) @ (k, n)`` or batched ``(B, m, k) @ (B, k, n)``."""
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim not in (2, 3) or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="inner dimensions differ")
    if bd.ndim == 3 and (ad.ndim != 3 or ad.shape[0] != bd.shape[0]):
        raise ShapeError("matmul", a.shape, b.shape, detail="batched matmul needs equal batch")
    out = ad @ bd

    if bd.ndim == 2:
        def vjp(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, bd.shape[-1])
            return ga, gb
    else:
        def vjp(g):
            return g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g

    return _record("matmul", out, (a, b), vjp)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    if _ACTIVE is not None and xd.size:
        _ACTIVE._note_kink(float(np.min(np.abs(xd))))
    mask = xd > 0
    return _record("relu", np.where(mask, xd, 0.0), (x,), lambda g: (g * mask,))


def elu(x: Tensor) -> Tensor:
    """``x`` for ``x > 0``, ``exp(x) - 1`` otherwise; smooth and strictly increasing."""
    xd = x.data
    neg = np.exp(np.minimum(xd, 0.0))
    slope = np.where(xd > 0, 1.0, neg)
    return _record("elu", np.where(xd > 0, xd, neg - 1.0), (x,), lambda g: (g * slope,))


def absolute(x: Tensor) -> Tensor:
    """Elementwise ``|x|``; the derivative at exactly 0 is taken as 0."""
    xd = x.data
    if _ACTIVE is not None and xd.size:
        _ACTIVE._note_kink(float(np.min(np.abs(xd))))
    sign = np.sign(xd)
    return _record("abs", np.abs(xd), (x,), lambda g: (g * sign,))


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    """Sum over everything (``axis=None``) or over the last dimension (``axis=-1``)."""
    xd = x.data
    if axis is None:
        shape = xd.shape
        return _record("sum", np.asarray(xd.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
    if axis not in (-1, xd.ndim - 1) or xd.ndim == 0:
        raise ShapeError("sum", x.shape, detail=f"unsupported axis {axis}")
    n = xd.shape[-1]
    return _record("sum", xd.sum(axis=-1), (x,), lambda g: (np.repeat(g[..., None], n, axis=-1),))


def max_last_dim(x: Tensor) -> Tensor:
    """Max over the last dimension; gradient goes to the lowest-index maximiser."""
    xd = x.data
    if xd.ndim == 0 or xd.shape[-1] == 0:
        raise ShapeError("max_last_dim", x.shape, detail="empty last dimension")
    idx = np.argmax(xd, axis=-1)
    out = np.take_along_axis(xd, idx[..., None], axis=-1)[..., 0]
    if _ACTIVE is not None and xd.shape[-1] > 1:
        top2 = np.sort(xd, axis=-1)[..., -2:]
        _ACTIVE._note_kink(float(np.min(top2[..., 1] - top2[..., 0])))

    def vjp(g):
        gx = np.zeros_like(xd)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        return (gx,)

    return _record("max_last_dim", out, (x,), vjp)


def argmax_last_dim(x: Tensor) -> Tensor:
    """Lowest-index argmax over the last dimension; integer-valued, never tracked."""
    if x.data.ndim == 0 or x.data.shape[-1] == 0:
        raise ShapeError("argmax_last_dim", x.shape, detail="empty last dimension")
    return Tensor(np.argmax(x.data, axis=-1).astype(np.int64))


def mse(p: Tensor, target: Tensor) -> Tensor:
    """``0.5 * mean((p - target)**2)``."""
    if p.shape != target.shape:
        raise ShapeError("mse", p.shape, target.shape)
    diff = p.data - target.data
    n = max(diff.size, 1)
    return _record("mse", np.asarray(0.5 * np.sum(diff * diff) / n), (p, target), lambda g: (g * diff / n, -g * diff / n))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not xs:
        raise ShapeError("concat", detail="no inputs")
    lead = xs[0].shape[:-1]
    for t in xs[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError("concat", xs[0].shape, t.shape)
    if axis not in (-1, len(lead)):
        raise ShapeError("concat", xs[0].shape, detail=f"unsupported axis {axis}")
    sizes = [t.shape[-1] for t in xs]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in xs], axis=-1)
    return _record("concat", out, xs, lambda g: tuple(np.split(g, bounds, axis=-1)))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError("reshape", old, tuple(shape)) from exc
    return _record("reshape", out, (x,), lambda g: (g.reshape(old),))


def expand_last(x: Tensor, n: int) -> Tensor:
    """Repeat ``x`` along a new trailing axis of length ``n``: ``(...,) -> (..., n)``."""
    out = np.repeat(x.data[..., None], n, axis=-1)
    return _record("expand_last", out, (x,), lambda g: (g.sum(axis=-1),))


def slice_rows(x: Tensor, lo: int, hi: int) -> Tensor:
    """Rows ``lo:hi`` of the leading dimension."""
    xd = x.data
    if xd.ndim == 0 or not 0 <= lo <= hi <= xd.shape[0]:
        raise ShapeError("slice_rows", x.shape, detail=f"bad row range {lo}:{hi}")

    def vjp(g):
        full = np.zeros_like(xd)
        full[lo:hi] = g
        return (full,)

    return _record("slice_rows", xd[lo:hi], (x,), vjp)


def stop_gradient(x: Tensor) -> Tensor:
    """Identity on values; the result is detached from the tape."""
    return Tensor(x.data)


_OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "elu": elu,
    "abs": absolute,
    "sum": sum_,
    "max_last_dim": max_last_dim,
    "argmax_last_dim": argmax_last_dim,
    "mse": mse,
    "concat": lambda *xs, **kw: concat(xs, **kw),
    "scale": scale,
    "shift": shift,
    "reshape": reshape,
    "expand_last": expand_last,
    "slice_rows": slice_rows,
}


def forward_op(kind: str, inputs: Sequence[Tensor], **kwargs) -> Tensor:
    """Dispatch a primitive by name, e.g. ``forward_op("add", [a, b])``."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op {kind!r}") from None
    return fn(*[_as_tensor(t) for t in inputs], **kwargs)


def backward(root: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(root)/d(node) for every node reachable from ``root``."""
    if root.data.size != 1:
        raise ShapeError("backward", root.shape, detail="root must be scalar")
    tape = root.tape
    if tape is None or root.node is None:
        return {}
    grads: dict[int, np.ndarray] = {root.node: np.ones_like(root.data)}
    nodes = tape.nodes
    for i in range(root.node, -1, -1):
        g = grads.get(i)
        if g is None:
            continue
        node = nodes[i]
        if node.vjp is None:
            continue
        for src, gi in zip(node.inputs, node.vjp(g)):
            if src is None or gi is None:
                continue
            prev = grads.get(src)
            grads[src] = gi if prev is None else prev + gi
        if nodes[i].kind != "leaf":
            del grads[i]
    tape.gradients = grads
    return grads


# -- parameters and optimiser -------------------------------------------------


class ParamStore:
    """Named float64 parameters plus Adam moment buffers.

    Parameters live as views into one contiguous vector (built lazily on first
    use) so a full Adam update is a handful of vectorised operations.
    """

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        self._flat: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    def add(self, name: str, value) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=np.float64)
        self.params[name] = arr
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)
        self._flat = None

    def _ensure_flat(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if self._flat is None:
            flats = []
            for table in (self.params, self.m, self.v):
                flat = np.concatenate([a.reshape(-1) for a in table.values()]) if table else np.zeros(0)
                off = 0
                for name, a in list(table.items()):
                    table[name] = flat[off : off + a.size].reshape(a.shape)
                    off += a.size
                flats.append(flat)
            self._flat = (flats[0], flats[1], flats[2])
        return self._flat

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def set(self, name: str, value) -> None:
        self.params[name][...] = value

    def watch(self, tape: Tape, prefix: str = "") -> dict[str, Tensor]:
        return {n: tape.watch(a) for n, a in self.params.items() if n.startswith(prefix)}

    def constants(self) -> dict[str, Tensor]:
        return {n: Tensor(a) for n, a in self.params.items()}

    def gradients(self, watched: dict[str, Tensor], grads: dict[int, np.ndarray]) -> dict[str, np.ndarray]:
        out = {}
        for name, t in watched.items():
            g = grads.get(t.node)
            out[name] = np.zeros_like(t.data) if g is None else g
        return out

    def copy(self) -> "ParamStore":
        new = ParamStore()
        for n in self.params:
            new.add(n, self.params[n])
            new.m[n][...] = self.m[n]
            new.v[n][...] = self.v[n]
        new.step = self.step
        return new

    def load_values(self, other: "ParamStore") -> None:
        """Copy parameter values (not optimiser state) from ``other`` in place."""
        for name, arr in other.params.items():
            self.params[name][...] = arr

    def norms(self) -> dict[str, float]:
        return {n: float(np.linalg.norm(a)) for n, a in self.params.items()}

    def to_json(self) -> dict[str, list]:
        return {n: a.tolist() for n, a in self.params.items()}

    @classmethod
    def from_json(cls, data: dict[str, list]) -> "ParamStore":
        store = cls()
        for n, a in data.items():
            store.add(n, a)
        return store


def adam_step(
    store: ParamStore,
    gradients: dict[str, np.ndarray],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> ParamStore:
    """One bias-corrected Adam update, in place. Parameters without a gradient are skipped."""
    for name, g in gradients.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    b1, b2 = betas
    store.step += 1
    c1 = 1.0 - b1**store.step
    c2 = 1.0 - b2**store.step
    if len(gradients) == len(store.params) and all(n in gradients for n in store.params):
        p, m, v = store._ensure_flat()
        g = np.concatenate([np.reshape(gradients[n], -1) for n in store.params])
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        return store
    for name, g in gradients.items():
        m = store.m[name]
        v = store.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        store.params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return float(math.sqrt(sum(float(np.sum(g * g)) for g in grads)))

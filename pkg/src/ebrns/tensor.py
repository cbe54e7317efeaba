"""Dense float64 arithmetic with a reverse-mode tape.

Values are numpy arrays whose last two axes are the matrix axes; any leading
axes are batch axes and broadcast like ``numpy.matmul``.  A :class:`Tensor`
is either a constant (``node is None``) or a node on a :class:`Tape`.  Ops on
constants never touch a tape, so the same recursion code serves inference and
training.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "Tape",
    "TapeNode",
    "DimensionError",
    "SingularityError",
    "ContractError",
    "JITTER_LADDER",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "hadamard",
    "div",
    "scale",
    "transpose",
    "concat",
    "take",
    "total",
    "tanh",
    "sigmoid",
    "exp",
    "sqrt",
    "atan2",
    "diag_embed",
    "diag_part",
    "symmetrize",
    "wrap_angle",
    "spd_solve",
    "solve_spd",
    "mat_primitive",
    "tape_backward",
    "elementwise",
    "finite_diff_grad",
]

JITTER_LADDER = (1e-12, 1e-9, 1e-6)


class DimensionError(ValueError):
    """Operand shapes are not conformable for the requested op."""


class ContractError(ValueError):
    """A documented precondition of an op was violated."""


class SingularityError(np.linalg.LinAlgError):
    """Cholesky failed even after the largest jitter on the ladder."""

    def __init__(self, message: str, jitter: float):
        super().__init__(message)
        self.jitter = jitter


@dataclass(eq=False)
class TapeNode:
    kind: str
    parents: tuple[int, ...]
    value: np.ndarray
    vjp: Callable | None = None
    # which operands of the op are tracked, aligned with the vjp outputs
    needs: tuple[bool, ...] = ()


@dataclass(eq=False)
class Tape:
    """Append-only record of tracked ops.

    Parameters enter through :meth:`watch`; every op with at least one tracked
    operand appends a node whose parents already sit earlier on the list.
    """

    nodes: list[TapeNode] = field(default_factory=list)
    params: list[int] = field(default_factory=list)

    def watch(self, value, name: str = "param") -> "Tensor":
        arr = np.array(value, dtype=np.float64)
        self.nodes.append(TapeNode(name, (), arr))
        idx = len(self.nodes) - 1
        self.params.append(idx)
        return Tensor(arr, idx, self)

    def _append(self, kind, value, parents, vjp, needs) -> int:
        self.nodes.append(TapeNode(kind, parents, value, vjp, needs))
        return len(self.nodes) - 1

    def backward(self, loss: "Tensor") -> list[np.ndarray]:
        """Reverse sweep from ``loss``; returns one adjoint per watched parameter.

        Parameters the loss does not depend on get an all-zero adjoint.
        """
        if loss.tape is not self or loss.node is None:
            raise ContractError("loss is not recorded on this tape")
        if loss.value.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
        adj: list[np.ndarray | None] = [None] * (loss.node + 1)
        adj[loss.node] = np.ones_like(loss.value)
        nodes = self.nodes
        keep = frozenset(self.params)
        for i in range(loss.node, -1, -1):
            g = adj[i]
            node = nodes[i]
            if g is None or node.vjp is None:
                continue
            grads = node.vjp(g, node.needs)
            for p, need, gp in zip(node.parents, node.needs, grads):
                if not need:
                    continue
                adj[p] = gp if adj[p] is None else adj[p] + gp
            if i not in keep:
                adj[i] = None
        out = []
        for p in self.params:
            a = adj[p] if p < len(adj) else None
            out.append(np.zeros_like(nodes[p].value) if a is None else a)
        return out


def tape_backward(tape: Tape, loss: "Tensor") -> list[np.ndarray]:
    return tape.backward(loss)


class Tensor:
    __slots__ = ("value", "node", "tape")
    __array_priority__ = 100.0

    def __init__(self, value, node: int | None = None, tape: Tape | None = None):
        self.value = value if isinstance(value, np.ndarray) else np.asarray(value, dtype=np.float64)
        self.node = node
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def tracked(self) -> bool:
        return self.node is not None

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __repr__(self):
        tag = "const" if self.node is None else f"node={self.node}"
        return f"Tensor({tag}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return hadamard(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _record(kind: str, value: np.ndarray, operands: Sequence[Tensor], vjp) -> Tensor:
    tape = None
    for t in operands:
        if t.node is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise ContractError(f"{kind}: operands recorded on different tapes")
    if tape is None:
        return Tensor(value)
    needs = tuple(t.node is not None for t in operands)
    parents = tuple(-1 if t.node is None else t.node for t in operands)
    idx = tape._append(kind, value, parents, vjp, needs)
    return Tensor(value, idx, tape)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def _check_broadcast(kind: str, a: np.ndarray, b: np.ndarray):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------- linear ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise DimensionError(f"matmul: shapes {av.shape} and {bv.shape} do not conform")
    try:
        out = np.matmul(av, bv)
    except ValueError:
        raise DimensionError(f"matmul: batch shapes {av.shape} and {bv.shape} do not conform") from None

    def vjp(g, needs):
        ga = _unbroadcast(np.matmul(g, _swap(bv)), av.shape) if needs[0] else None
        gb = _unbroadcast(np.matmul(_swap(av), g), bv.shape) if needs[1] else None
        return ga, gb

    return _record("matmul", out, (a, b), vjp)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.value, b.value)
    sa, sb = a.value.shape, b.value.shape

    def vjp(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(g, sb) if needs[1] else None)

    return _record("add", a.value + b.value, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.value, b.value)
    sa, sb = a.value.shape, b.value.shape

    def vjp(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(-g, sb) if needs[1] else None)

    return _record("sub", a.value - b.value, (a, b), vjp)


def hadamard(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("hadamard", a.value, b.value)
    av, bv = a.value, b.value

    def vjp(g, needs):
        return (_unbroadcast(g * bv, av.shape) if needs[0] else None,
                _unbroadcast(g * av, bv.shape) if needs[1] else None)

    return _record("hadamard", av * bv, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a.value, b.value)
    av, bv = a.value, b.value
    out = av / bv

    def vjp(g, needs):
        return (_unbroadcast(g / bv, av.shape) if needs[0] else None,
                _unbroadcast(-g * out / bv, bv.shape) if needs[1] else None)

    return _record("div", out, (a, b), vjp)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _record("scale", a.value * c, (a,), lambda g, needs: (g * c,))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.value.ndim < 2:
        raise DimensionError(f"transpose: need at least 2 axes, got {a.value.shape}")
    return _record("transpose", _swap(a.value), (a,), lambda g, needs: (_swap(g),))


def concat(parts: Sequence, axis: int = -2) -> Tensor:
    """Concatenate along ``axis``; other axes broadcast (constants may omit batch axes)."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat: no operands")
    ndim = max(p.value.ndim for p in parts)
    ax = axis % ndim
    shapes = []
    for p in parts:
        s = (1,) * (ndim - p.value.ndim) + p.value.shape
        shapes.append(s)
    try:
        common = np.broadcast_shapes(*[s[:ax] + (1,) + s[ax + 1:] for s in shapes])
    except ValueError:
        raise DimensionError(f"concat: shapes {[p.value.shape for p in parts]} do not conform") from None
    vals = []
    for p, s in zip(parts, shapes):
        target = common[:ax] + (s[ax],) + common[ax + 1:]
        vals.append(np.broadcast_to(p.value.reshape(s), target))
    out = np.concatenate(vals, axis=ax)
    bounds = np.cumsum([0] + [s[ax] for s in shapes])
    orig = [p.value.shape for p in parts]

    def vjp(g, needs):
        res = []
        for i, need in enumerate(needs):
            if not need:
                res.append(None)
                continue
            piece = np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
            res.append(_unbroadcast(piece, (1,) * (ndim - len(orig[i])) + orig[i]).reshape(orig[i]))
        return tuple(res)

    return _record("concat", out, parts, vjp)


def take(a, index) -> Tensor:
    """Basic (slice) indexing, recorded as the ``slice`` primitive."""
    a = as_tensor(a)
    out = a.value[index]
    shape = a.value.shape

    def vjp(g, needs):
        z = np.zeros(shape)
        z[index] = g
        return (z,)

    return _record("slice", np.array(out), (a,), vjp)


def total(a) -> Tensor:
    """Sum of all entries as a 1x1 matrix."""
    a = as_tensor(a)
    shape = a.value.shape
    out = np.array([[a.value.sum()]])
    return _record("sum", out, (a,), lambda g, needs: (np.broadcast_to(g.reshape(()), shape).copy(),))


def diag_embed(v) -> Tensor:
    """Column vector(s) (..., n, 1) to diagonal matrices (..., n, n)."""
    v = as_tensor(v)
    if v.value.ndim < 2 or v.value.shape[-1] != 1:
        raise DimensionError(f"diag_embed: expected column vector, got {v.value.shape}")
    eye = np.eye(v.value.shape[-2])
    return _record("diag", v.value * eye, (v,), lambda g, needs: ((g * eye).sum(axis=-1, keepdims=True),))


def diag_part(a) -> Tensor:
    a = as_tensor(a)
    n = a.value.shape[-1]
    eye = np.eye(n)
    out = np.diagonal(a.value, axis1=-2, axis2=-1)[..., None].copy()
    return _record("diag_part", out, (a,), lambda g, needs: (g * eye,))


def symmetrize(a) -> Tensor:
    a = as_tensor(a)
    return _record("symmetrize", 0.5 * (a.value + _swap(a.value)), (a,),
                   lambda g, needs: (0.5 * (g + _swap(g)),))


def wrap_angle(a, rows: Sequence[int]) -> Tensor:
    """Wrap the given rows into (-pi, pi]; derivative is the identity."""
    a = as_tensor(a)
    if not rows:
        return a
    out = a.value.copy()
    sel = out[..., list(rows), :]
    w = np.mod(sel + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    out[..., list(rows), :] = w
    return _record("wrap_angle", out, (a,), lambda g, needs: (g,))


# ---------------------------------------------------------------- elementwise


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.value)
    return _record("tanh", y, (a,), lambda g, needs: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = expit(a.value)
    return _record("sigmoid", y, (a,), lambda g, needs: (g * y * (1.0 - y),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.value)
    return _record("exp", y, (a,), lambda g, needs: (g * y,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    y = np.sqrt(a.value)
    return _record("sqrt", y, (a,), lambda g, needs: (g / (2.0 * y),))


def atan2(y, x) -> Tensor:
    y, x = as_tensor(y), as_tensor(x)
    yv, xv = y.value, x.value
    _check_broadcast("atan2", yv, xv)
    r2 = xv * xv + yv * yv

    def vjp(g, needs):
        return (_unbroadcast(g * xv / r2, yv.shape) if needs[0] else None,
                _unbroadcast(-g * yv / r2, xv.shape) if needs[1] else None)

    return _record("atan2", np.arctan2(yv, xv), (y, x), vjp)


# ---------------------------------------------------------------- SPD solve


def _cholesky_ladder(A: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        pass
    n = A.shape[-1]
    flat = A.reshape(-1, n, n)
    out = np.empty_like(flat)
    eye = np.eye(n)
    for i, Ai in enumerate(flat):
        try:
            out[i] = np.linalg.cholesky(Ai)
            continue
        except np.linalg.LinAlgError:
            pass
        scale_ = max(abs(np.trace(Ai)) / n, np.finfo(float).tiny)
        for lam in JITTER_LADDER:
            try:
                out[i] = np.linalg.cholesky(Ai + lam * scale_ * eye)
                break
            except np.linalg.LinAlgError:
                continue
        else:
            raise SingularityError(
                f"matrix is not positive definite after jitter {JITTER_LADDER[-1]:g} x trace/n", JITTER_LADDER[-1]
            )
    return out.reshape(A.shape)


def _check_spd_operands(A: np.ndarray, B: np.ndarray):
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise DimensionError(f"spd_solve: A must be square, got {A.shape}")
    if B.ndim < 2 or B.shape[-2] != A.shape[-1]:
        raise DimensionError(f"spd_solve: shapes {A.shape} and {B.shape} do not conform")
    if not np.all(np.isfinite(A)):
        raise ContractError("spd_solve: A has non-finite entries")
    asym = np.max(np.abs(A - _swap(A)))
    if asym > 1e-9 * max(1.0, np.max(np.abs(A))):
        raise ContractError(f"spd_solve: A is not symmetric (max asymmetry {asym:.3g})")


def _cho_solve(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    return np.linalg.solve(_swap(L), np.linalg.solve(L, B))


def solve_spd(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Plain-array ``A^{-1} B`` via Cholesky with the jitter ladder."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    _check_spd_operands(A, B)
    L = _cholesky_ladder(A)
    if B.ndim < A.ndim:
        B = np.broadcast_to(B, A.shape[:-2] + B.shape[-2:])
    return _cho_solve(L, B)


def spd_solve(A, B) -> Tensor:
    A, B = as_tensor(A), as_tensor(B)
    Av, Bv = A.value, B.value
    _check_spd_operands(Av, Bv)
    L = _cholesky_ladder(Av)
    batch = np.broadcast_shapes(Av.shape[:-2], Bv.shape[:-2])
    Lb = np.broadcast_to(L, batch + L.shape[-2:])
    Bb = np.broadcast_to(Bv, batch + Bv.shape[-2:])
    X = _cho_solve(Lb, Bb)

    def vjp(g, needs):
        gB = _cho_solve(Lb, g)
        gA = _unbroadcast(-np.matmul(gB, _swap(X)), Av.shape) if needs[0] else None
        return gA, (_unbroadcast(gB, Bv.shape) if needs[1] else None)

    return _record("spd_solve", X, (A, B), vjp)


# ---------------------------------------------------------------- dispatch

_MAT_KINDS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "hadamard": hadamard,
    "transpose": transpose,
    "scale": scale,
}

_ELEMENTWISE = {"tanh": tanh, "sigmoid": sigmoid, "exp": exp, "sqrt": sqrt}


def mat_primitive(kind: str, *operands, **kwargs) -> Tensor:
    if kind == "concat":
        return concat(operands, **kwargs)
    if kind == "slice":
        (a,) = operands
        return take(a, kwargs["index"])
    try:
        fn = _MAT_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*operands)


def elementwise(kind: str, x) -> Tensor:
    try:
        return _ELEMENTWISE[kind](x)
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None


def finite_diff_grad(f: Callable[[np.ndarray], float], theta, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``theta``."""
    if h <= 0:
        raise ValueError("step h must be positive")
    theta = np.array(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    flat = theta.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(theta))
        flat[i] = orig - h
        fm = float(f(theta))
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return grad

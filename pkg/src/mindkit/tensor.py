"""Dense tensors with define-by-run reverse-mode differentiation.

A :class:`Tensor` is an immutable float array. Tensors created through a
:class:`Tape` (``tape.leaf``) are tracked; any op that receives a tracked
input records a node on the same tape, so the tape's node list is always a
valid topological order of the computation.

Values are float32 unless the caller hands in float64 arrays; dtype then
follows numpy promotion, which is how :func:`grad_check` runs its
finite-difference comparisons in 64-bit.

Broadcasting is restricted: two operands of an elementwise op must have the
same shape, or one of them must be a scalar or a trailing suffix of the
other's shape (a bias row added to every token, for instance).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from mindkit.errors import MissingGradient, NonFinite, NotScalarLoss, ShapeMismatch

_STRICT = False


def set_strict(flag: bool) -> None:
    """Toggle NaN/Inf rejection at every op boundary."""
    global _STRICT
    _STRICT = bool(flag)


def is_strict() -> bool:
    return _STRICT


@contextlib.contextmanager
def strict(flag: bool = True) -> Iterator[None]:
    prev = _STRICT
    set_strict(flag)
    try:
        yield
    finally:
        set_strict(prev)


class Tensor:
    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(frozen=True)
class Node:
    kind: str
    inputs: tuple[int | None, ...]
    vjp: Callable | None
    shape: tuple[int, ...]


class Gradients:
    """Result of a backward pass: node id -> gradient array.

    Indexing with a tensor the loss does not depend on (or an untracked
    constant) yields a zero array of that tensor's shape rather than raising.
    """

    def __init__(self, tape: "Tape", table: dict[int, np.ndarray]):
        self.tape = tape
        self.table = table

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if t.tape is self.tape and t.node in self.table:
            return self.table[t.node]
        return np.zeros(t.shape, dtype=t.data.dtype)

    def __contains__(self, t: Tensor) -> bool:
        return t.tape is self.tape and t.node in self.table

    def __len__(self) -> int:
        return len(self.table)

    def by_node(self, node_id: int) -> np.ndarray | None:
        return self.table.get(node_id)


class Tape:
    """Ordered record of ops; one tape per forward pass, single-threaded."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, data) -> Tensor:
        t = _as_tensor(data)
        node = len(self.nodes)
        self.nodes.append(Node("leaf", (), None, t.shape))
        return Tensor(t.data, self, node)

    def record(self, kind: str, inputs: Sequence[Tensor], out: np.ndarray, vjp: Callable) -> Tensor:
        ids = tuple(t.node if t.tape is self else None for t in inputs)
        node = len(self.nodes)
        self.nodes.append(Node(kind, ids, vjp, out.shape))
        return Tensor(out, self, node)

    def backward(self, loss: Tensor, wrt: Sequence[Tensor] | None = None) -> Gradients:
        """Reverse sweep from a scalar ``loss``.

        With ``wrt`` given, intermediate gradients are released as soon as
        they are consumed and only the requested tensors are kept.
        """
        if loss.data.size != 1:
            raise NotScalarLoss(f"loss must be scalar-shaped, got {loss.shape}")
        if loss.tape is not self or loss.node is None:
            raise ValueError("loss is not recorded on this tape")
        keep = None if wrt is None else {t.node for t in wrt if t.tape is self}
        grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
        nodes = self.nodes
        for nid in range(loss.node, -1, -1):
            node = nodes[nid]
            if node.vjp is None:
                continue
            g = grads.get(nid)
            if g is None:
                continue
            if keep is not None and nid not in keep:
                del grads[nid]
            needs = tuple(i is not None for i in node.inputs)
            for i, gi in zip(node.inputs, node.vjp(g, needs)):
                if i is None or gi is None:
                    continue
                prev = grads.get(i)
                grads[i] = gi if prev is None else prev + gi
        if keep is not None:
            grads = {k: v for k, v in grads.items() if k in keep}
        return Gradients(self, grads)


def backward(tape: Tape, loss: Tensor, wrt: Sequence[Tensor] | None = None) -> Gradients:
    return tape.backward(loss, wrt)


def merge_gradients(parts: Sequence[Mapping[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Sum per-worker gradient maps in list order (fixed order keeps runs reproducible)."""
    out: dict[str, np.ndarray] = {}
    for part in parts:
        for k in sorted(part):
            out[k] = part[k].copy() if k not in out else out[k] + part[k]
    return out


# --------------------------------------------------------------------------
# op plumbing

def _emit(kind: str, inputs: Sequence[Tensor], out: np.ndarray, vjp: Callable) -> Tensor:
    if _STRICT and not np.all(np.isfinite(out)):
        raise NonFinite(f"{kind} produced non-finite values")
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise ValueError("op inputs recorded on different tapes")
    if tape is None:
        return Tensor(out)
    return tape.record(kind, inputs, out, vjp)


def _check_inputs(kind: str, *ts: Tensor) -> None:
    if _STRICT:
        for t in ts:
            if not np.all(np.isfinite(t.data)):
                raise NonFinite(f"{kind} received non-finite input")


def _broadcast_ok(a: tuple, b: tuple) -> bool:
    if a == b:
        return True
    small, big = (a, b) if len(a) <= len(b) else (b, a)
    if int(np.prod(small)) == 1:
        return True
    return len(small) <= len(big) and big[len(big) - len(small):] == small


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    n = int(np.prod(shape)) if shape else 1
    if n == 1:
        return g.sum().reshape(shape)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


def _check_bcast(kind: str, a: Tensor, b: Tensor) -> None:
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeMismatch(f"{kind}: cannot combine {a.shape} and {b.shape}")


# --------------------------------------------------------------------------
# ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., n, k) @ (k, m); leading axes of ``a`` act as a batch sharing ``b``."""
    _check_inputs("matmul", a, b)
    if a.ndim < 2 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    out = A @ B

    def vjp(g, needs):
        ga = g @ B.T if needs[0] else None
        gb = None
        if needs[1]:
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _emit("matmul", (a, b), out, vjp)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused ``x @ w + b`` for (..., k) @ (k, m) with a bias row (m,)."""
    _check_inputs("affine", x, w, b)
    if x.ndim < 2 or w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatch(f"affine: {x.shape} @ {w.shape} + {b.shape}")
    X, W = x.data, w.data
    out = X @ W
    out += b.data

    def vjp(g, needs):
        gx = g @ W.T if needs[0] else None
        g2 = g.reshape(-1, g.shape[-1])
        gw = X.reshape(-1, X.shape[-1]).T @ g2 if needs[1] else None
        gb = g2.sum(axis=0) if needs[2] else None
        return gx, gw, gb

    return _emit("affine", (x, w, b), out, vjp)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched (B, n, k) @ (B, k, m)."""
    _check_inputs("bmm", a, b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeMismatch(f"bmm: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    out = np.matmul(A, B)

    def vjp(g, needs):
        ga = np.matmul(g, B.transpose(0, 2, 1)) if needs[0] else None
        gb = np.matmul(A.transpose(0, 2, 1), g) if needs[1] else None
        return ga, gb

    return _emit("bmm", (a, b), out, vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_inputs("add", a, b)
    _check_bcast("add", a, b)
    out = a.data + b.data
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(g, sb) if needs[1] else None)

    return _emit("add", (a, b), out, vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_inputs("sub", a, b)
    _check_bcast("sub", a, b)
    out = a.data - b.data
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(-g, sb) if needs[1] else None)

    return _emit("sub", (a, b), out, vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_inputs("mul", a, b)
    _check_bcast("mul", a, b)
    A, B = a.data, b.data
    out = A * B

    def vjp(g, needs):
        return (_unbroadcast(g * B, A.shape) if needs[0] else None,
                _unbroadcast(g * A, B.shape) if needs[1] else None)

    return _emit("mul", (a, b), out, vjp)


def scale(x: Tensor, s: float) -> Tensor:
    _check_inputs("scale", x)
    s = float(s)
    out = x.data * s
    return _emit("scale", (x,), out, lambda g, needs: (g * s,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(d) for d in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"reshape {x.shape} -> {shape}") from exc
    src = x.shape
    return _emit("reshape", (x,), out, lambda g, needs: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        if x.ndim < 2:
            raise ShapeMismatch("transpose needs rank >= 2")
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeMismatch(f"bad permutation {axes} for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _emit("transpose", (x,), out, lambda g, needs: (g.transpose(inv),))


def row_slice(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    """Contiguous slice ``start:stop`` along ``axis`` (rows by default)."""
    axis = axis % x.ndim
    n = x.shape[axis]
    if not (0 <= start <= stop <= n):
        raise ShapeMismatch(f"slice {start}:{stop} out of bounds for extent {n}")
    idx = (slice(None),) * axis + (slice(start, stop),)
    out = x.data[idx].copy()
    src = x.shape

    def vjp(g, needs):
        full = np.zeros(src, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _emit("row_slice", (x,), out, vjp)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise ShapeMismatch("concat of nothing")
    _check_inputs("concat", *xs)
    ndim = xs[0].ndim
    axis = axis % ndim
    for t in xs:
        if t.ndim != ndim or t.shape[:axis] + t.shape[axis + 1:] != xs[0].shape[:axis] + xs[0].shape[axis + 1:]:
            raise ShapeMismatch(f"concat: incompatible shapes {[t.shape for t in xs]}")
    out = np.concatenate([t.data for t in xs], axis=axis)
    cuts = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def vjp(g, needs):
        return tuple(np.split(g, cuts, axis=axis))

    return _emit("concat", tuple(xs), out, vjp)


def softmax(x: Tensor) -> Tensor:
    _check_inputs("softmax", x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g, needs):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (x,), s, vjp)


def log_softmax(x: Tensor) -> Tensor:
    _check_inputs("log_softmax", x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def vjp(g, needs):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax", (x,), out, vjp)


def silu(x: Tensor) -> Tensor:
    _check_inputs("silu", x)
    X = x.data
    sig = 1.0 / (1.0 + np.exp(-X))
    out = X * sig

    def vjp(g, needs):
        return (g * (sig * (1.0 + X * (1.0 - sig))),)

    return _emit("silu", (x,), out, vjp)


def tanh(x: Tensor) -> Tensor:
    _check_inputs("tanh", x)
    y = np.tanh(x.data)
    return _emit("tanh", (x,), y, lambda g, needs: (g * (1.0 - y * y),))


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (no affine terms; compose with mul/add)."""
    _check_inputs("layer_norm", x)
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def vjp(g, needs):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _emit("layer_norm", (x,), xhat, vjp)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared differences over every element; scalar output."""
    _check_inputs("mse", a, b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mse: {a.shape} vs {b.shape}")
    d = a.data - b.data
    n = d.size
    out = np.asarray((d * d).sum() / n, dtype=d.dtype)

    def vjp(g, needs):
        ga = (2.0 / n) * g * d
        return (ga if needs[0] else None, -ga if needs[1] else None)

    return _emit("mse", (a, b), out, vjp)


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    _check_inputs("sum", x)
    src = x.shape
    if axis is None:
        out = np.asarray(x.data.sum(), dtype=x.data.dtype)

        def vjp(g, needs):
            return (np.broadcast_to(g, src).copy(),)
    else:
        axis = axis % x.ndim
        out = x.data.sum(axis=axis)

        def vjp(g, needs):
            return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _emit("sum", (x,), out, vjp)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


def l2norm(x: Tensor) -> Tensor:
    """Euclidean norm over the last axis."""
    _check_inputs("l2norm", x)
    X = x.data
    n = np.sqrt((X * X).sum(axis=-1))

    def vjp(g, needs):
        safe = np.where(n > 0, n, 1.0)
        return (np.where((n > 0)[..., None], g[..., None] * X / safe[..., None], 0.0).astype(X.dtype),)

    return _emit("l2norm", (x,), n, vjp)


def normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale rows (last axis) to unit L2 norm."""
    _check_inputs("normalize", x)
    X = x.data
    n = np.maximum(np.sqrt((X * X).sum(axis=-1, keepdims=True)), eps)
    y = X / n

    def vjp(g, needs):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / n,)

    return _emit("normalize", (x,), y, vjp)


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Cosine over the last axis; result drops that axis."""
    _check_inputs("cosine_similarity", a, b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"cosine_similarity: {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    na = np.maximum(np.sqrt((A * A).sum(axis=-1, keepdims=True)), eps)
    nb = np.maximum(np.sqrt((B * B).sum(axis=-1, keepdims=True)), eps)
    ah, bh = A / na, B / nb
    cos = (ah * bh).sum(axis=-1)

    def vjp(g, needs):
        gc = g[..., None]
        c = cos[..., None]
        ga = gc * (bh - c * ah) / na if needs[0] else None
        gb = gc * (ah - c * bh) / nb if needs[1] else None
        return ga, gb

    return _emit("cosine_similarity", (a, b), cos, vjp)


OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "affine": affine,
    "bmm": bmm,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "reshape": reshape,
    "transpose": transpose,
    "row_slice": row_slice,
    "concat": lambda *xs, axis=0: concat(xs, axis=axis),
    "softmax": softmax,
    "log_softmax": log_softmax,
    "silu": silu,
    "tanh": tanh,
    "layer_norm": layer_norm,
    "mse": mse,
    "sum": sum,
    "l2norm": l2norm,
    "normalize": normalize,
    "cosine_similarity": cosine_similarity,
}


def forward_op(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **attrs)


# --------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads, state: AdamState) -> list[Tensor]:
    """One bias-corrected Adam update; returns fresh (untracked) parameter tensors.

    ``grads`` is either a :class:`Gradients` (looked up by tensor) or a
    sequence of arrays aligned with ``params``.
    """
    if isinstance(grads, Gradients):
        gs = [grads[p] for p in params]
    else:
        gs = list(grads)
        if len(gs) != len(params) or any(g is None for g in gs):
            raise MissingGradient("a gradient is required for every parameter")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = []
    for i, (p, g) in enumerate(zip(params, gs)):
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ShapeMismatch(f"gradient {g.shape} vs parameter {p.shape}")
        m = state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        v = state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        upd = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        out.append(Tensor((p.data - upd).astype(p.data.dtype, copy=False)))
    return out


# --------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray


def numeric_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences in float64."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(np.asarray(f(Tensor(x)).data, dtype=np.float64).sum())
        flat[i] = orig - eps
        fm = float(np.asarray(f(Tensor(x)).data, dtype=np.float64).sum())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g


def grad_check(f: Callable[[Tensor], Tensor], x, tol: float = 1e-4, eps: float = 1e-5) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` at ``x`` with central differences.

    The error is max-norm relative: ``max|a - n| / max(max|a|, max|n|)``,
    zero when both gradients vanish.
    """
    x64 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    tape = Tape()
    leaf = tape.leaf(x64)
    y = f(leaf)
    if y.tape is tape:
        analytic = np.asarray(tape.backward(y)[leaf], dtype=np.float64)
    else:
        analytic = np.zeros_like(x64)
    numeric = numeric_gradient(f, x64, eps)
    scale_ = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)))
    err = 0.0 if scale_ == 0.0 else float(np.abs(analytic - numeric).max() / scale_)
    return GradCheckReport(err, tol, err <= tol, analytic, numeric)

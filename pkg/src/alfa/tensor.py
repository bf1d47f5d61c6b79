"""Dense float64 tensors with a dynamic reverse-mode tape, Adam, and the
binary ``.alfa`` tensor file format.

Every op that sees a tracked input returns a tracked output carrying a
closure that maps the output gradient to input gradients. Node ids come from
a global counter, so sorting reachable nodes by id is a valid topological
order of the tape.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

LOG_FLOOR = 1e-12
_node_ids = itertools.count()


class TensorError(Exception):
    pass


class ShapeError(TensorError, ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        listed = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {listed}")


class NonFiniteError(TensorError, FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "op", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids) if requires_grad else None
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> dict:
        return backward(self)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def constant(arr: np.ndarray) -> Tensor:
    """Untracked tensor wrapping ``arr`` without a copy."""
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.grad = None
    out.requires_grad = False
    out.node_id = None
    out.op = "leaf"
    out._parents = ()
    out._backward = None
    out.name = None
    return out


def leaf(arr: np.ndarray, name: str | None = None) -> Tensor:
    """Tracked leaf wrapping ``arr`` without a copy."""
    out = constant(arr)
    out.requires_grad = True
    out.node_id = next(_node_ids)
    out.name = name
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    # a non-finite entry makes the sum non-finite
    if not np.isfinite(data.sum()):
        raise NonFiniteError(f"{op}: non-finite output")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    tracked = any(p.requires_grad for p in parents)
    out.requires_grad = tracked
    if tracked:
        out.node_id = next(_node_ids)
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.node_id = None
        out._parents = ()
        out._backward = None
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return add_scalar(a, float(b))
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _result("add_scalar", a.data + c, (a,), lambda g: (g,))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return add_scalar(a, -float(b))
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _result("scale", a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def hinge(a: Tensor) -> Tensor:
    """max(a, 0); subgradient 0 at the kink."""
    mask = a.data > 0
    return _result("hinge", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def log(a: Tensor) -> Tensor:
    """Natural log with the argument clamped at ``LOG_FLOOR``."""
    live = a.data > LOG_FLOOR
    safe = np.where(live, a.data, LOG_FLOOR)
    return _result("log", np.log(safe), (a,), lambda g: (np.where(live, g / safe, 0.0),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported by _result
        out = np.exp(a.data)
    return _result("exp", out, (a,), lambda g: (g * out,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result("softmax", out, (a,), back)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def back(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _result("log_softmax", out, (a,), back)


# ------------------------------------------------------------------ reductions


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    if axis is None:
        return _result("sum", np.array([a.data.sum()]), (a,), lambda g: (np.full(shape, g[0]),))
    out = a.data.sum(axis=axis)
    return _result("sum", out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def norm(a: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; gradient taken as 0 where the norm is 0."""
    out = np.sqrt((a.data**2).sum(axis=axis))
    safe = np.where(out > 0, out, 1.0)

    def back(g):
        unit = a.data / np.expand_dims(safe, axis)
        return (unit * np.expand_dims(g, axis),)

    return _result("norm", out, (a,), back)


def frobenius_norm(a: Tensor) -> Tensor:
    value = float(np.sqrt((a.data**2).sum()))

    def back(g):
        if value == 0.0:
            return (np.zeros_like(a.data),)
        return (a.data * (g[0] / value),)

    return _result("frobenius_norm", np.array([value]), (a,), back)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _result("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` with the bias broadcast over rows."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError("linear", x.shape, w.shape)
    if b.shape != (w.shape[1],):
        raise ShapeError("linear", w.shape, b.shape)
    xd, wd = x.data, w.data
    return _result("linear", xd @ wd + b.data, (x, w, b), lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _result("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, shape) from None
    return _result("reshape", out, (a,), lambda g: (g.reshape(old),))


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat: nothing to concatenate")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.data.ndim != len(ref) or any(
            p.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)
        ):
            raise ShapeError("concat", ref, p.shape)
    cuts = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _result(
        "concat",
        np.concatenate([p.data for p in parts], axis=axis),
        parts,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def center(a: Tensor, axis: int = 0) -> Tensor:
    """Subtract the mean along ``axis`` (broadcast back over it)."""
    out = a.data - a.data.mean(axis=axis, keepdims=True)
    return _result("center", out, (a,), lambda g: (g - g.mean(axis=axis, keepdims=True),))


def take_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _result("take_rows", a.data[idx], (a,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardisation followed by an elementwise affine map."""
    if x.data.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != gain.shape:
        raise ShapeError("layer_norm", x.shape, gain.shape)
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def back(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _result("layer_norm", xhat * gd + bias.data, (x, gain, bias), back)


OPS = (
    "add", "add_scalar", "sub", "mul", "scale", "neg", "relu", "hinge", "log", "exp",
    "softmax", "log_softmax", "sum", "mean", "norm", "frobenius_norm", "matmul", "linear",
    "transpose", "reshape", "concat", "center", "take_rows", "layer_norm",
)


# ------------------------------------------------------------------- backward


def _reachable(root: Tensor) -> list[Tensor]:
    seen = {root.node_id: root}
    stack = [root]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if p.requires_grad and p.node_id not in seen:
                seen[p.node_id] = p
                stack.append(p)
    return [seen[k] for k in sorted(seen)]


def backward(root: Tensor) -> dict:
    """Accumulate d(root)/d(leaf) into every tracked leaf's ``grad``.

    Returns a map leaf -> gradient of this call. The consumed tape is
    released afterwards.
    """
    if root.data.size != 1:
        raise ShapeError("backward (root must be scalar)", root.shape)
    if not root.requires_grad:
        raise TensorError("backward: root is not tracked")
    order = _reachable(root)
    pending = {root.node_id: np.ones_like(root.data)}
    grads = {}
    for node in reversed(order):
        g = pending.pop(node.node_id, None)
        if g is None:
            continue
        if node._backward is None:
            grads[node] = g
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            prev = pending.get(parent.node_id)
            pending[parent.node_id] = pg if prev is None else prev + pg
        node._parents = ()
        node._backward = None
    return grads


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-4) -> float:
    """Max relative error between ``backward`` and a fourth-order central
    difference, with denominator ``max(|a|, |b|, 1e-8)``."""
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    if out.data.size != 1:
        raise ShapeError("grad_check (f must return a scalar)", out.shape)
    if out.requires_grad:
        backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        vals = []
        for step in (2, 1, -1, -2):
            flat[i] = orig + step * eps
            vals.append(f(Tensor(base)).item())
        flat[i] = orig
        # differences first, so a locally constant f gives exactly 0
        numeric.reshape(-1)[i] = (8 * (vals[1] - vals[2]) - (vals[0] - vals[3])) / (12 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0


# ----------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    scratch: dict = field(default_factory=dict, repr=False)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """One bias-corrected Adam update of ``params`` (name -> Tensor) in place."""
    missing = [k for k in params if k not in grads]
    if missing:
        raise KeyError(f"adam_step: no gradient for {missing}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step[{name}]", p.data.shape, g.shape)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
            state.scratch[name] = np.empty_like(p.data)
        m, v, buf = state.m[name], state.v[name], state.scratch[name]
        np.multiply(g, 1.0 - state.beta1, out=buf)
        m *= state.beta1
        m += buf
        np.multiply(g, g, out=buf)
        buf *= 1.0 - state.beta2
        v *= state.beta2
        v += buf
        np.divide(v, c2, out=buf)
        np.sqrt(buf, out=buf)
        buf += state.eps
        np.divide(m, buf, out=buf)
        buf *= state.lr / c1
        p.data -= buf


# ------------------------------------------------------------ binary format

MAGIC = b"ALFA"
FORMAT_VERSION = 1


def save_tensor(path, array) -> None:
    arr = np.asarray(array.data if isinstance(array, Tensor) else array, dtype="<f4")
    header = MAGIC + struct.pack("<HH", FORMAT_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(arr).tobytes())


def load_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise ValueError(f"{path}: not an ALFA tensor file")
    version, rank = struct.unpack_from("<HH", raw, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    offset = 8 + 4 * rank
    if len(raw) < offset:
        raise ValueError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{rank}I", raw, 8)
    count = int(np.prod(shape)) if rank else 1
    if len(raw) != offset + 4 * count:
        raise ValueError(f"{path}: payload has {len(raw) - offset} bytes, expected {4 * count}")
    return np.frombuffer(raw, dtype="<f4", offset=offset).reshape(shape).astype(np.float64)


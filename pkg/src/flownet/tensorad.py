"""Dense float64 tensors with reverse-mode differentiation and an Adam optimizer.

Every op builds a node on an implicit tape: the result keeps references to its
inputs and a closure that maps the output gradient to input gradients.
``backward`` walks the tape in reverse topological order, visiting each node
once and summing gradients from all consumers.

Broadcasting follows numpy: shapes are aligned on trailing dimensions and a
size-1 (or missing) dimension stretches. Data is row-major (C order).
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

CHECKPOINT_FORMAT = "flownet-params"
CHECKPOINT_VERSION = 1


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    # make ``ndarray op Tensor`` use the Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf"):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis=None) -> Tensor:
        return tsum(self, axis)

    def mean(self, axis=None) -> Tensor:
        return mean(self, axis)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by {op}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    needs = any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.grad = None
    out._parents = tuple(parents) if needs else ()
    out._backward = backward if needs else None
    out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _make(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, a.shape), _unbroadcast(-g * ad / (bd * bd), b.shape)

    return _make(out, (a, b), backward, "div")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), backward, "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0

    def backward(g):
        return (g * pos,)

    return _make(np.where(pos, a.data, 0.0), (a,), backward, "relu")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _make(out, (a,), backward, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)

    def backward(g):
        return (g / x,)

    return _make(out, (a,), backward, "log")


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    s = np.exp(x - m).sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)

    def backward(g):
        soft = np.exp(x - m) / s
        return (np.expand_dims(g, axis) * soft,)

    return _make(out, (a,), backward, "logsumexp")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc
    ad, bd = a.data, b.data

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward, "matmul")


def einsum(subscripts: str, *operands) -> Tensor:
    """Differentiable ``numpy.einsum`` for explicit-output subscripts.

    Each input index must also appear in the output or in another operand, and
    no operand may repeat an index. That covers contractions and batched
    products, which is all the model needs.
    """
    ops = [as_tensor(o) for o in operands]
    if "->" not in subscripts:
        raise ContractError("einsum needs explicit '->' output subscripts")
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(ops):
        raise ContractError("einsum: operand count does not match subscripts")
    for i, (sub_i, op) in enumerate(zip(in_subs, ops)):
        if len(sub_i) != op.ndim:
            raise DimensionError(f"einsum: operand {i} has shape {op.shape}, subscripts '{sub_i}'")
        if len(set(sub_i)) != len(sub_i):
            raise ContractError("einsum: repeated index within an operand")
        others = out_sub + "".join(s for j, s in enumerate(in_subs) if j != i)
        if any(c not in others for c in sub_i):
            raise ContractError("einsum: index summed within a single operand is unsupported")
    try:
        out = np.einsum(subscripts, *[o.data for o in ops])
    except ValueError as exc:
        raise DimensionError(f"einsum '{subscripts}': {exc}") from exc
    datas = [o.data for o in ops]

    def backward(g):
        grads = []
        for i, op in enumerate(ops):
            if not op.requires_grad:
                grads.append(None)
                continue
            rest_subs = [s for j, s in enumerate(in_subs) if j != i]
            rest = [d for j, d in enumerate(datas) if j != i]
            spec = ",".join([out_sub] + rest_subs) + "->" + in_subs[i]
            grads.append(np.einsum(spec, g, *rest))
        return grads

    return _make(np.asarray(out, dtype=np.float64), ops, backward, "einsum")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    """Swap the last two axes, or permute by ``axes``."""
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise DimensionError("transpose needs at least 2 dimensions")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(a.data, axes).copy(), (a,), backward, "transpose")


# ---------------------------------------------------------------- shape and reduction

def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {src} -> {tuple(shape)}") from exc

    def backward(g):
        return (g.reshape(src),)

    return _make(out.copy(), (a,), backward, "reshape")


def take(a, index) -> Tensor:
    """Basic or advanced indexing, as ``a[index]``."""
    a = as_tensor(a)
    out = a.data[index]
    src = a.shape

    def backward(g):
        full = np.zeros(src)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, dtype=np.float64), (a,), backward, "take")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"stack: {exc}") from exc

    def backward(g):
        return [np.take(g, i, axis=axis) for i in range(len(ts))]

    return _make(out, ts, backward, "stack")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return np.split(g, bounds, axis=axis)

    return _make(out, ts, backward, "concat")


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    out = np.asarray(a.data.sum(axis=axis), dtype=np.float64)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(a, axis), 1.0 / count)


# ---------------------------------------------------------------- model-specific fused ops

def softmax_rows(a) -> Tensor:
    """Softmax over the last axis with max-subtraction."""
    a = as_tensor(a)
    if a.ndim < 1:
        raise DimensionError("softmax_rows needs at least one axis")
    x = a.data
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), backward, "softmax_rows")


def masked_l2(pred, target, mask) -> Tensor:
    """Mean over segments of ``||(target - pred) * mask||_2``.

    The norm runs over the last (channel) axis; every other axis counts as a
    segment for the mean. Rows whose masked residual is exactly zero get a zero
    subgradient.
    """
    pred, target, mask = as_tensor(pred), as_tensor(target), as_tensor(mask)
    if pred.shape != target.shape:
        raise DimensionError(f"masked_l2: pred {pred.shape} vs target {target.shape}")
    try:
        m = np.broadcast_to(mask.data, pred.shape)
    except ValueError as exc:
        raise DimensionError(f"masked_l2: mask {mask.shape} vs {pred.shape}") from exc
    if not np.isin(mask.data, (0.0, 1.0)).all():
        raise DimensionError("masked_l2: mask must be binary")
    r = (pred.data - target.data) * m
    norms = np.sqrt((r * r).sum(axis=-1))
    count = max(norms.size, 1)
    out = np.asarray(norms.sum() / count)

    def backward(g):
        safe = np.where(norms > 0, norms, 1.0)
        unit = np.where((norms > 0)[..., None], r / safe[..., None], 0.0) * m
        gp = g * unit / count
        return gp, -gp, None

    return _make(out, (pred, target, mask), backward, "masked_l2")


def cosine_matrix(u, v) -> Tensor:
    """Pairwise cosine similarity of rows: ``out[..., i, k] = cos(u_i, v_k)``.

    A zero-norm row has similarity 0 with everything.
    """
    u, v = as_tensor(u), as_tensor(v)
    if u.shape[-1] != v.shape[-1]:
        raise DimensionError(f"cosine_matrix: {u.shape} vs {v.shape}")
    ud, vd = u.data, v.data
    nu = np.sqrt((ud * ud).sum(axis=-1))
    nv = np.sqrt((vd * vd).sum(axis=-1))
    okc_u = nu > 0
    okc_v = nv > 0
    su = np.where(okc_u, nu, 1.0)
    sv = np.where(okc_v, nv, 1.0)
    uh = ud / su[..., None] * okc_u[..., None]
    vh = vd / sv[..., None] * okc_v[..., None]
    out = np.matmul(uh, np.swapaxes(vh, -1, -2))

    def backward(g):
        # d cos(u_i, v_k) / d u_i = (vh_k - cos * uh_i) / |u_i|
        gu_hat = np.matmul(g, vh)
        gu = (gu_hat - (g * out).sum(axis=-1)[..., None] * uh) / su[..., None] * okc_u[..., None]
        gt = np.swapaxes(g, -1, -2)
        gv_hat = np.matmul(gt, uh)
        gv = (gv_hat - (gt * np.swapaxes(out, -1, -2)).sum(axis=-1)[..., None] * vh) / sv[..., None]
        gv = gv * okc_v[..., None]
        return _unbroadcast(gu, u.shape), _unbroadcast(gv, v.shape)

    return _make(out, (u, v), backward, "cosine_matrix")


# ---------------------------------------------------------------- backward pass

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every grad-tracking tensor that ``loss`` depends on.

    Gradients add onto any existing ``.grad``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------- optimizer

class Adam:
    """Adaptive-moment optimizer with bias correction.

    ``step`` consumes the current gradients and clears them afterwards.
    """

    def __init__(self, params: Iterable[Tensor], learning_rate: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if learning_rate <= 0:
            raise ContractError("learning_rate must be positive")
        self.params = list(params)
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.steps = 0

    def step(self) -> None:
        missing = [i for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            raise ContractError(f"optimizer step without gradients for parameters {missing}")
        self.steps += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.steps
        c2 = 1.0 - b2 ** self.steps
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = p.data - self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None


def optimizer_step(params: Sequence[Tensor], opt: Adam) -> None:
    if [id(p) for p in params] != [id(p) for p in opt.params]:
        raise ContractError("params do not match the optimizer's parameter list")
    opt.step()


# ---------------------------------------------------------------- checkpoints

def params_to_json(params: dict[str, Tensor]) -> str:
    """Serialize named parameters: ``{format, version, params: {name: {shape, values}}}``."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "params": {
            name: {"shape": list(t.shape), "values": [float(x) for x in t.data.reshape(-1)]}
            for name, t in sorted(params.items())
        },
    }
    return json.dumps(doc, indent=1)


def params_from_json(text: str, requires_grad: bool = True) -> dict[str, Tensor]:
    doc = json.loads(text)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ContractError("not a flownet parameter checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {doc.get('version')}")
    out = {}
    for name, rec in doc["params"].items():
        arr = np.asarray(rec["values"], dtype=np.float64).reshape(rec["shape"])
        out[name] = Tensor(arr, requires_grad=requires_grad)
    return out


def save_params(params: dict[str, Tensor], path: str | Path) -> None:
    Path(path).write_text(params_to_json(params))


def load_params(path: str | Path, requires_grad: bool = True) -> dict[str, Tensor]:
    return params_from_json(Path(path).read_text(), requires_grad=requires_grad)

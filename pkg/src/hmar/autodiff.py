"""Dense tensors with a reverse-mode tape, plus the Adam optimizer.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient. Outside a ``with Tape():`` block the
same functions run forward-only, which is what evaluation uses.

A tape can be differentiated once. Calling :func:`backward` a second time on
the same tape raises :class:`ContractError`; re-run the forward pass instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor", "Parameter", "Tape", "AdamState", "Adam",
    "add", "sub", "mul", "neg", "matmul", "linear", "elementwise",
    "relu", "sigmoid", "activation", "log", "softmax", "softmax_rows",
    "scaled_dot_attention", "embedding_lookup", "concat", "reshape",
    "transpose", "reduce_sum", "getitem", "dropout", "backward", "adam_step",
    "as_tensor",
]

_TAPES: list["Tape"] = []


class Tensor:
    """A numpy array that may carry a gradient."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A named leaf tensor owned by a model."""

    def __init__(self, name, value, trainable=True, dtype=None):
        super().__init__(value, requires_grad=trainable, dtype=dtype)
        self.name = name
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class _Record:
    kind: str
    out: Tensor
    inputs: tuple
    vjp: object  # callable: output grad -> tuple of input grads (None where not needed)


class Tape:
    """Ordered record of operations, used as a context manager.

    Records are appended in execution order, which is already a topological
    order of the computation graph.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(kind, data, inputs, vjp):
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        if _TAPES:
            _TAPES[-1].records.append(_Record(kind, out, inputs, vjp))
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- arithmetic

def add(a, b):
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", a.data + b.data, (a, b), vjp)


def sub(a, b):
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")

    def vjp(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result("sub", a.data - b.data, (a, b), vjp)


def mul(a, b):
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result("mul", a.data * b.data, (a, b), vjp)


def neg(a):
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def elementwise(a, b, kind):
    """Pointwise ``add`` or ``mul``.

    ``b`` must match ``a`` exactly or be broadcastable against it (a column
    mask of shape ``(..., n, 1)`` against an ``(..., n, d)`` embedding).
    """
    a, b = _pair(a, b)
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result("matmul", a.data @ b.data, (a, b), vjp)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` over the last axis of ``x``."""
    x = as_tensor(x, like=weight)
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if x.ndim == 1:
        raise DimensionError(f"linear: input must be at least 2-d, got {x.shape}")
    out = matmul(x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = add(out, bias)
    return out


# ---------------------------------------------------------------- pointwise

def relu(x):
    pos = x.data > 0
    return _result("relu", np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def sigmoid(x):
    # two-branch form keeps exp() from overflowing for large |x|
    z = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
    return _result("sigmoid", y, (x,), lambda g: (g * y * (1 - y),))


def activation(x, kind):
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def log(x, floor=1e-12):
    """Natural log with the argument clamped below at ``floor``."""
    live = x.data > floor
    safe = np.where(live, x.data, floor)
    return _result("log", np.log(safe), (x,), lambda g: (np.where(live, g / safe, 0).astype(x.dtype),))


# ---------------------------------------------------------------- reductions / shape

def reduce_sum(x, axis=None, keepdims=False):
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result("sum", np.asarray(out, dtype=x.dtype), (x,), vjp)


def reshape(x, shape):
    return _result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes):
    inverse = np.argsort(axes)
    return _result("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]}: {exc}") from None
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=ax))

    return _result("concat", data, tuple(tensors), vjp)


def getitem(x, idx):
    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _result("getitem", x.data[idx], (x,), vjp)


def embedding_lookup(table, ids):
    """Gather rows of ``table``; ``ids`` may have any integer shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = ids[(ids < 0) | (ids >= table.shape[0])].reshape(-1)[0]
        raise IndexError(f"embedding id {int(bad)} out of range for table with {table.shape[0]} rows")

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result("embedding", table.data[ids], (table,), vjp)


def dropout(x, rate, rng):
    if rate <= 0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mul(x, keep)


# ---------------------------------------------------------------- softmax / attention

def softmax(x, axis=-1, mask=None):
    """Softmax along ``axis``; ``mask`` (bool, broadcastable) marks allowed entries.

    Slices with no allowed entry come out as zeros instead of NaN.
    """
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0)
    e = np.exp(z - zmax)
    if mask is not None:
        e = np.where(mask, e, 0)
    total = e.sum(axis=axis, keepdims=True)
    y = np.divide(e, total, out=np.zeros_like(e), where=total > 0).astype(x.dtype)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result("softmax", y, (x,), vjp)


def softmax_rows(x):
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x, axis=-1)


def scaled_dot_attention(q, k, v, attn_mask=None):
    """``softmax(q k^T / sqrt(dh)) v`` with forbidden positions excluded.

    ``attn_mask`` is boolean ``[..., Lq, Lk]`` with True = allowed. Query rows
    that may attend to nothing return zeros.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention: incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    dh = q.shape[-1]
    logits = mul(matmul(q, transpose(k, _swap_last(k.ndim))), 1.0 / math.sqrt(dh))
    weights = softmax(logits, axis=-1, mask=attn_mask)
    return matmul(weights, v)


def _swap_last(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


# ---------------------------------------------------------------- backward

def backward(loss, tape):
    """Propagate d(loss) back through ``tape`` into every trainable leaf.

    Each :class:`Parameter` reached gets ``.grad`` overwritten with its
    gradient; trainable parameters not reached get zeros. Returns a dict
    mapping ``id(tensor)`` to gradient for all leaves that received one.
    """
    if tape.consumed:
        raise ContractError("tape already consumed by backward(); run the forward pass again")
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.records or tape.records[-1].out is not loss and all(r.out is not loss for r in tape.records):
        raise ContractError("loss was not produced on this tape")
    tape.consumed = True

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if isinstance(inp, Parameter):
                leaves[key] = inp

    touched = set()
    for rec in tape.records:
        for inp in rec.inputs:
            if isinstance(inp, Parameter) and inp.trainable and id(inp) not in touched:
                touched.add(id(inp))
                g = grads.get(id(inp))
                inp.grad = np.zeros_like(inp.data) if g is None else np.asarray(g, dtype=inp.dtype)
    tape.records.clear()
    return {k: grads[k] for k in leaves if k in grads}


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")


def adam_step(params, grads, state):
    """One bias-corrected Adam update, in place. ``params`` and ``grads`` are parallel lists."""
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if np.shape(g) != p.shape:
            raise DimensionError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g in zip(params, grads):
        key = getattr(p, "name", id(p))
        m = state.m.get(key)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * (g * g)
        state.m[key], state.v[key] = m, v
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.data -= update.astype(p.dtype)
    return params, state


class Adam:
    """Adam over a fixed list of parameters, reading their ``.grad``."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = [p for p in params if p.trainable]
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], epsilon=eps)

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

"""
Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record onto the innermost active `Tape` when at least one operand
requires a gradient. Outside a tape everything is a plain forward pass, which
is what inference and the finite-difference checker use.
"""

import math
import threading
from dataclasses import dataclass, fields

import numpy as np

from .errors import DemaformerError, ShapeError

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)

# =========================================================
# 1. TENSOR + TAPE
# =========================================================

_local = threading.local()


def _tape_stack():
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")
    __array_ufunc__ = None   # ndarray op Tensor defers to the Tensor reflected operator

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._tape = None

    @property
    def shape(self):
        return list(self.data.shape)

    @property
    def values(self):
        """Row-major flat copy of the data."""
        return self.data.ravel().tolist()

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all of these go through the recorded ops below
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
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """
    Ordered record of executed operations.

        with Tape() as tape:
            loss = f(params)
        tape.backward(loss)
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out, inputs, backward):
        out.requires_grad = True
        out._tape = self
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss):
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise DemaformerError("loss was not produced on this tape")

        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            input_grads = node.backward(g)
            for inp, gi in zip(node.inputs, input_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if inp._tape is None:
                    leaves[key] = inp

        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


class no_tape:
    """Context that suspends recording (forward-only evaluation)."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


def backward(loss):
    """Populates .grad of every leaf tensor that `loss` depends on."""
    if loss._tape is None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        raise DemaformerError("loss was not recorded on a tape (nothing requires grad?)")
    loss._tape.backward(loss)


def _make(data, inputs, backward_fn):
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(g, shape):
    shape = tuple(shape)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# =========================================================
# 2. ELEMENTWISE / STRUCTURAL OPS
# =========================================================


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)))


def scale(a, c):
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a):
    return _make(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape):
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def tsum(a, axis=None):
    shape = a.data.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(a.data.sum(axis=axis), (a,), back)


def mean(a, axis=None):
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(tsum(a, axis), 1.0 / n)


def concat_rows(parts):
    sizes = [p.data.shape[0] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=0), tuple(parts), back)


def slice_rows(a, start, stop):
    shape = a.data.shape

    def back(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _make(a.data[start:stop], (a,), back)


def take(a, indices):
    """Gathers entries (or rows) along the first axis."""
    idx = np.asarray(indices, dtype=np.int64)
    shape = a.data.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), back)


def max_rows(a):
    """Column-wise max over the rows of a matrix (max-pooling across tokens)."""
    arg = np.argmax(a.data, axis=0)
    cols = np.arange(a.data.shape[1])

    def back(g):
        full = np.zeros(a.data.shape)
        full[arg, cols] = g
        return (full,)

    return _make(a.data[arg, cols], (a,), back)


def tabs(a):
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


# =========================================================
# 3. ACTIVATIONS
# =========================================================


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    y = _sigmoid_np(a.data)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def silu(a):
    s = _sigmoid_np(a.data)
    x = a.data
    return _make(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),))


def tanh(a):
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a):
    mask = (a.data > 0).astype(np.float64)
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def gelu(a):
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)

    def back(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _make(0.5 * x * (1.0 + t), (a,), back)


ACTIVATION_FNS = {"silu": silu, "tanh": tanh, "relu": relu, "gelu": gelu}


def softmax_rows(a):
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (a,), back)


def log_softmax_rows(a):
    """Stable log-softmax along the last axis."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - log_z
    probs = np.exp(y)

    def back(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _make(y, (a,), back)


def layer_norm(a, gain, shift, eps=LN_EPS):
    x = a.data
    if gain.data.shape != (x.shape[-1],) or shift.data.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm gain/shift must have shape ({x.shape[-1]},)")
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv

    def back(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        reduce_axes = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=reduce_axes), g.sum(axis=reduce_axes)

    return _make(xhat * gain.data + shift.data, (a, gain, shift), back)


def cosine_rows(a, b):
    """
    Pairwise cosine similarity between rows of a (n x d) and b (m x d).
    A zero-norm row gives cosine 0 and no gradient.
    """
    A, B = a.data, b.data
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    safe_a = np.where(na > 0, na, 1.0)
    safe_b = np.where(nb > 0, nb, 1.0)
    An = A / safe_a[:, None]
    Bn = B / safe_b[:, None]
    valid = np.outer(na > 0, nb > 0).astype(np.float64)
    cos = (An @ Bn.T) * valid

    def back(g):
        g = g * valid
        # d cos / d a_i = (b_j/|b_j| - cos_ij * a_i/|a_i|) / |a_i|
        ga = (g @ Bn - (g * cos).sum(axis=1)[:, None] * An) / safe_a[:, None]
        gb = (g.T @ An - (g * cos).sum(axis=0)[:, None] * Bn) / safe_b[:, None]
        return ga, gb

    return _make(cos, (a, b), back)


# =========================================================
# 4. LINEAR LAYER + PARAMETER CONTAINERS
# =========================================================


class Params:
    """
    Mixin for dataclasses that hold learnable Tensors.
    Walks Tensor, Params and list-of-Params fields to name every parameter.
    """

    def named_parameters(self, prefix=""):
        for f in fields(self):
            value = getattr(self, f.name)
            name = f"{prefix}{f.name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Params):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Params):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


@dataclass
class LinearParams(Params):
    weight: Tensor   # out_dim x in_dim
    bias: Tensor     # out_dim

    @classmethod
    def init(cls, in_dim, out_dim, rng):
        """Weights uniform in +-sqrt(1/in_dim), bias zero."""
        bound = math.sqrt(1.0 / in_dim)
        weight = rng.uniform(-bound, bound, size=(out_dim, in_dim))
        return cls(Tensor(weight, requires_grad=True), Tensor(np.zeros(out_dim), requires_grad=True))

    @property
    def in_dim(self):
        return self.weight.data.shape[1]

    @property
    def out_dim(self):
        return self.weight.data.shape[0]


def linear_forward(x, p):
    """out[i] = W x[i] + b, for a matrix of rows or a single vector."""
    x = as_tensor(x)
    if x.data.shape[-1] != p.in_dim or p.bias.data.shape != (p.out_dim,):
        raise ShapeError(
            f"linear expects input dim {p.in_dim} (weight {p.weight.shape}, bias {p.bias.shape}), "
            f"got input {x.shape}"
        )
    W = p.weight.data

    def back(g):
        if x.data.ndim == 1:
            return g @ W, np.outer(g, x.data), g
        return g @ W, g.T @ x.data, g.sum(axis=0)

    return _make(x.data @ W.T + p.bias.data, (x, p.weight, p.bias), back)


# =========================================================
# 5. FINITE-DIFFERENCE GRADIENT CHECK
# =========================================================


def finite_diff_check(f, params, h=1e-5, max_coords=None, rng=None):
    """
    Compares tape gradients of the scalar f() against central differences.

    f       : zero-argument callable returning a scalar Tensor built from `params`
    params  : list of Tensors (requires_grad=True)
    max_coords / rng : optionally check only a random subset of coordinates
                       per parameter (large models).

    Returns max over checked coordinates of
        |analytic - numeric| / max(1, |numeric|)
    or inf when f is not finite somewhere.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be > 0")
    for p in params:
        p.grad = None

    with Tape() as tape:
        loss = f()
    if not np.all(np.isfinite(loss.data)):
        return math.inf
    tape.backward(loss)

    worst = 0.0
    with no_tape():
        for p in params:
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                picker = rng if rng is not None else np.random.default_rng(0)
                coords = picker.choice(flat.size, size=max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                down = f().item()
                flat[i] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    return math.inf
                numeric = (up - down) / (2.0 * h)
                err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
    return worst

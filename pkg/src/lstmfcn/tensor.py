"""Small reverse-mode differentiable array engine on top of numpy.

Every primitive the model blocks need lives here: matmul, same-padded
temporal convolution, batch normalization, pointwise activations, softmax,
dropout, global average pooling, the dimension shuffle and concatenation.
Each op builds the graph eagerly and stores a closure that accumulates
gradients into its parents when ``Tensor.backward`` runs.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, ParameterError

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.99


class Tensor:
    """A numpy array plus an optional gradient buffer and a backward rule."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _op=""):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = None
        self.op = _op

    # -- array-like surface -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat view of the data in row-major order."""
        return self.data.reshape(-1)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- graph plumbing -----------------------------------------------------
    def _accumulate(self, g: np.ndarray):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Propagate gradients from this tensor to every leaf that needs them."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(
                    f"backward() without an explicit gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_not_scalar(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def _topological_order(root: Tensor) -> list:
    # iterative DFS; recurrent branches unrolled over long series overflow recursion
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents, op, backward) -> Tensor:
    out = Tensor(data, _parents=tuple(parents), _op=op)
    if out.requires_grad:
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise arithmetic ------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), "add", backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), "mul", backward)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), "neg", lambda g: a._accumulate(-g))


def tsum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _result(out, (a,), "sum", backward)


def tmean(a: Tensor, axis=None) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), "reshape",
                   lambda g: a._accumulate(g.reshape(a.shape)))


def transpose(a: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), "transpose",
                   lambda g: a._accumulate(g.transpose(inverse)))


def take(a: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        a._accumulate(full)

    return _result(a.data[index], (a,), "take", backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), "exp", lambda g: a._accumulate(g * out))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), "log", lambda g: a._accumulate(g / a.data))


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), "square", lambda g: a._accumulate(2.0 * g * a.data))


# -- linear algebra --------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product of two rank-2 tensors (a leading batch axis on ``a`` is fine)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            a2 = a.data.reshape(-1, a.shape[-1])
            b._accumulate(a2.T @ g.reshape(-1, b.shape[1]))

    return _result(a.data @ b.data, (a, b), "matmul", backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Join tensors along ``axis``; rank-1 inputs give ``a`` followed by ``b``."""
    tensors = [as_tensor(t) for t in tensors]
    ranks = {t.ndim for t in tensors}
    if len(ranks) != 1:
        raise DimensionError(f"concat rank mismatch: {[t.shape for t in tensors]}")
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        other = [s for i, s in enumerate(t.shape) if i != ax]
        first = [s for i, s in enumerate(tensors[0].shape) if i != ax]
        if other != first:
            raise DimensionError(f"concat extent mismatch: {[t.shape for t in tensors]}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=ax)):
            t._accumulate(piece)

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, "concat", backward)


# -- convolution -----------------------------------------------------------------

def same_padding(duration: int) -> tuple[int, int]:
    left = (duration - 1) // 2
    return left, duration - 1 - left


def conv1d_same(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Cross-correlate ``x`` (``[B,] C_in x T``) with ``w`` (``C_out x d x C_in``).

    Zero padding of ``floor((d-1)/2)`` on the left and ``ceil((d-1)/2)`` on the
    right keeps the output length equal to T.
    """
    x, w = as_tensor(x), as_tensor(w)
    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 3 or w.ndim != 3:
        raise DimensionError(f"conv1d_same expects [B,]C_in x T and C_out x d x C_in, got {x.shape}, {w.shape}")
    batch, c_in, steps = xd.shape
    c_out, d, w_in = w.shape
    if w_in != c_in:
        raise DimensionError(f"conv1d_same channel mismatch: input has {c_in}, kernel expects {w_in}")
    if steps < 1 or d < 1:
        raise DimensionError(f"conv1d_same needs T >= 1 and d >= 1, got T={steps}, d={d}")
    left, right = same_padding(d)
    xpad = np.pad(xd, ((0, 0), (0, 0), (left, right)))
    # windows[b, c, t, k] = xpad[b, c, t + k]
    windows = np.lib.stride_tricks.sliding_window_view(xpad, d, axis=2)
    cols = windows.transpose(0, 2, 3, 1).reshape(batch * steps, d * c_in)
    kernel = w.data.reshape(c_out, d * c_in)
    out = (cols @ kernel.T).reshape(batch, steps, c_out).transpose(0, 2, 1)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (c_out,):
            raise DimensionError(f"conv1d_same bias shape {b.shape} != ({c_out},)")
        out = out + b.data[None, :, None]
    out = np.ascontiguousarray(out)
    if unbatched:
        out = out[0]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g3 = g[None] if unbatched else g
        g2 = g3.transpose(0, 2, 1).reshape(batch * steps, c_out)
        if w.requires_grad:
            w._accumulate((g2.T @ cols).reshape(c_out, d, c_in))
        if b is not None and b.requires_grad:
            b._accumulate(g3.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = (g2 @ kernel).reshape(batch, steps, d, c_in)
            dpad = np.zeros_like(xpad)
            for k in range(d):
                dpad[:, :, k:k + steps] += dcols[:, :, k, :].transpose(0, 2, 1)
            dx = dpad[:, :, left:left + steps]
            x._accumulate(dx[0] if unbatched else dx)

    return _result(out, parents, "conv1d", backward)


# -- normalization ---------------------------------------------------------------

@dataclass
class RunningStats:
    """Per-channel moving statistics carried by one batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM
    updates: int = 0

    @classmethod
    def init(cls, channels: int, dtype=np.float64) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: RunningStats,
               mode: str = "train", eps: float = BN_EPSILON) -> Tensor:
    """Normalize ``B x C x T`` per channel over batch and time."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 3:
        raise DimensionError(f"batch_norm expects B x C x T, got {x.shape}")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise DimensionError(f"batch_norm gamma/beta must have shape ({channels},)")
    count = x.shape[0] * x.shape[2]
    if mode == "train":
        if count < 2:
            raise DimensionError("batch_norm in train mode needs B*T >= 2 per channel")
        mean = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        m = state.momentum
        state.mean = m * state.mean + (1.0 - m) * mean
        state.var = m * state.var + (1.0 - m) * var
        state.updates += 1
    elif mode == "infer":
        mean, var = state.mean, state.var
    else:
        raise ParameterError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None]) * inv_std[None, :, None]
    out = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 2)))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2)))
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None]
            if mode == "train":
                dx = (inv_std[None, :, None] / count) * (
                    count * dxhat
                    - dxhat.sum(axis=(0, 2), keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
                )
            else:
                dx = dxhat * inv_std[None, :, None]
            x._accumulate(dx)

    return _result(out, (x, gamma, beta), "batch_norm", backward)


# -- activations -----------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), "relu",
                   lambda g: x._accumulate(g * mask))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = _stable_sigmoid(x.data)
    return _result(s, (x,), "sigmoid", lambda g: x._accumulate(g * s * (1.0 - s)))


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _result(t, (x,), "tanh", lambda g: x._accumulate(g * (1.0 - t * t)))


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ParameterError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax with max subtraction; operates along ``axis``."""
    x = as_tensor(x)
    if x.data.shape[axis] < 1:
        raise DimensionError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accumulate(p * (g - (g * p).sum(axis=axis, keepdims=True)))

    return _result(p, (x,), "softmax", backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        x._accumulate(g - p * g.sum(axis=axis, keepdims=True))

    return _result(out, (x,), "log_softmax", backward)


# -- regularization / pooling / reshaping ----------------------------------------

class Rng:
    """Counter-based deterministic generator (Philox) keyed by a 64-bit seed."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def child(self, *labels) -> "Rng":
        """Independent stream derived by hashing this seed with ``labels``."""
        return Rng(derive_seed(self.seed, *labels))

    def uniform(self, low, high, size):
        return self._gen.uniform(low, high, size)

    def normal(self, loc, scale, size):
        return self._gen.normal(loc, scale, size)

    def random(self, size):
        return self._gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)


def derive_seed(seed: int, *labels) -> int:
    text = "/".join([str(int(seed))] + [str(label) for label in labels])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def dropout(x: Tensor, p: float, mode: str, rng: Rng | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-p)`` in train mode."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must satisfy 0 <= p < 1, got {p}")
    x = as_tensor(x)
    if mode == "infer" or p == 0.0:
        return x
    if mode != "train":
        raise ParameterError(f"unknown mode {mode!r}")
    if rng is None:
        raise ParameterError("dropout in train mode needs an Rng")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _result(x.data * mask, (x,), "dropout", lambda g: x._accumulate(g * mask))


def global_average_pool(x: Tensor) -> Tensor:
    """Mean over the last (time) axis: ``[B,] C x T -> [B,] C``."""
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[-1] == 0:
        raise DimensionError(f"global_average_pool needs a non-empty time axis, got {x.shape}")
    return tmean(x, axis=x.ndim - 1)


def dimension_shuffle(x: Tensor) -> Tensor:
    """Swap the variable and time axes of a univariate series (``[B,] 1 x T -> [B,] T x 1``).

    Also accepts the shuffled layout and swaps it back, so the op is an involution.
    """
    x = as_tensor(x)
    if x.ndim not in (2, 3):
        raise DimensionError(f"dimension_shuffle expects [B,] V x T, got {x.shape}")
    if x.shape[-2] != 1 and x.shape[-1] != 1:
        raise DimensionError(f"dimension_shuffle supports univariate series only, got {x.shape}")
    axes = (1, 0) if x.ndim == 2 else (0, 2, 1)
    return transpose(x, axes)


# -- verification ----------------------------------------------------------------

def grad_check(f: Callable[[Sequence[Tensor]], Tensor], inputs: Sequence[Tensor],
               eps: float = 1e-5, max_elements: int | None = None,
               rng: Rng | None = None, extended: bool = True) -> float:
    """Compare reverse-mode gradients of ``f`` against central differences.

    Returns the largest relative error over checked elements, using
    ``max(|g|, |g_fd|, 1e-8)`` as denominator. The reference derivative uses
    the fourth-order central stencil and, with ``extended``, is evaluated in
    ``np.longdouble`` so its rounding noise stays far below 1e-8 * |g|.
    ``max_elements`` restricts the check to a random subset per input.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ParameterError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(inputs)
    if out.data.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    originals = [t.data for t in inputs]
    wide = np.longdouble if extended else originals[0].dtype.type
    for t in inputs:
        t.data = t.data.astype(wide)

    def value_at(flat, i, base, delta):
        flat[i] = base + delta
        return f(inputs).data.reshape(-1)[0].astype(wide)

    worst = 0.0
    try:
        for t, g in zip(inputs, analytic):
            flat, gflat = t.data.reshape(-1), g.reshape(-1)
            idx = np.arange(flat.size)
            if max_elements is not None and flat.size > max_elements:
                idx = (rng or Rng(0)).choice(flat.size, max_elements)
            h = wide(eps)
            for i in idx:
                base = flat[i]
                fd = (8 * (value_at(flat, i, base, h) - value_at(flat, i, base, -h))
                      - (value_at(flat, i, base, 2 * h) - value_at(flat, i, base, -2 * h))) / (12 * h)
                flat[i] = base
                fd = float(fd)
                denom = max(abs(gflat[i]), abs(fd), 1e-8)
                worst = max(worst, abs(gflat[i] - fd) / denom)
    finally:
        for t, orig in zip(inputs, originals):
            t.data = orig
    return worst


@dataclass
class ParamSet:
    """Ordered name -> Tensor mapping with helpers for the optimizer and checkpoints."""

    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = value

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def snapshot(self) -> dict:
        return {k: v.data.copy() for k, v in self.tensors.items()}

    def load(self, arrays: dict):
        for k, v in arrays.items():
            self.tensors[k].data = np.array(v, dtype=self.tensors[k].dtype, copy=True)

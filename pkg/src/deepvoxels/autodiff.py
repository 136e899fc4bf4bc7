"""Minimal tape-based reverse-mode automatic differentiation over numpy arrays.

Only the operations the DeepVoxels pipeline composes are provided: a handful
of elementwise maps, strided 2D/3D convolutions and their transposes, axis
softmax, concatenation, reductions and sparse linear resampling.
"""

import contextlib
import itertools
import logging
from typing import Callable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """An n-dimensional array that records the operations producing it.

    ``grad`` is only populated on leaves (tensors without a producing
    operation) that have ``requires_grad`` set.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        """Value copy cut off from the graph."""
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators --------------------------------------------------------
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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a python scalar")
        return mul(self, 1.0 / float(other))

    def sum(self, axis=None):
        return reduce(self, "sum", axis)

    def mean(self, axis=None):
        return reduce(self, "mean", axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- reverse sweep ----------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list:
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- broadcasting -----------------------------------------------------------
def _broadcast_shape(sa: tuple, sb: tuple) -> tuple:
    if sa == sb:
        return sa
    if int(np.prod(sa)) == 1 and len(sa) <= len(sb):
        return sb
    if int(np.prod(sb)) == 1 and len(sb) <= len(sa):
        return sa
    if len(sa) == len(sb) and all(x == y or x == 1 or y == 1 for x, y in zip(sa, sb)):
        return tuple(max(x, y) for x, y in zip(sa, sb))
    raise ValueError(f"shapes {sa} and {sb} are not broadcast-compatible")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) != g.ndim:
        return np.asarray(g.sum()).reshape(shape)
    axes = tuple(i for i, (n, m) in enumerate(zip(shape, g.shape)) if n == 1 and m != 1)
    return g.sum(axis=axes, keepdims=True)


# -- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                              _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def neg(x: Tensor) -> Tensor:
    return _result(-x.data, (x,), lambda g: (-g,))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,))


def absolute(x: Tensor) -> Tensor:
    return _result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), evaluated without overflow."""
    d = x.data
    y = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))
    return _result(y, (x,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * d)),))


ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "exp": exp,
    "abs": absolute,
    "softplus": softplus,
}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise operation by name."""
    try:
        fn = ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    return fn(a) if b is None else fn(a, b)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise every channel of [C, *spatial] to zero mean and unit variance."""
    axes = tuple(range(1, x.ndim))
    mu = x.data.mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(x.data.var(axis=axes, keepdims=True) + eps)
    y = (x.data - mu) * inv

    def backward(g):
        return (inv * (g - g.mean(axis=axes, keepdims=True) - y * (g * y).mean(axis=axes, keepdims=True)),)

    return _result(y, (x,), backward)


# -- shape / reductions -----------------------------------------------------
def reshape(x: Tensor, shape) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def reduce(x: Tensor, kind: str = "sum", axis=None) -> Tensor:
    if kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {kind!r}")
    if axis is not None and axis < 0:
        axis += x.ndim
    y = x.data.sum(axis=axis) if kind == "sum" else x.data.mean(axis=axis)
    n = x.size if axis is None else x.shape[axis]
    scale = 1.0 if kind == "sum" else 1.0 / n

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * scale, x.shape).copy(),)

    return _result(np.asarray(y), (x,), backward)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    ref = parts[0].shape
    nd = len(ref)
    axis = axis + nd if axis < 0 else axis
    for p in parts[1:]:
        if p.ndim != nd or any(p.shape[i] != ref[i] for i in range(nd) if i != axis):
            raise ValueError(f"cannot concatenate shapes {ref} and {p.shape} along axis {axis}")
    data = np.concatenate([p.data for p in parts], axis=axis)
    splits = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _result(data, parts, lambda g: tuple(np.split(g, splits, axis=axis)))


concat_axis = concat


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward)


softmax_axis = softmax


# -- convolutions -----------------------------------------------------------
def _spatial_pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, [(0, 0)] + [(padding, padding)] * (x.ndim - 1))


def _unpad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return x[(slice(None),) + (slice(padding, -padding),) * (x.ndim - 1)]


class _Lattice:
    """im2col / col2im bookkeeping for one padded input shape, kernel and stride.

    Stride 1 uses flat shifts: every kernel offset is a contiguous slice of the
    flattened padded input, and outputs are computed on the padded lattice and
    cropped. Larger strides gather strided slices explicitly.
    """

    def __init__(self, in_shape: tuple, k: tuple, stride: int):
        self.c, self.sp = in_shape[0], tuple(in_shape[1:])
        self.stride = stride
        self.so = tuple((p - kk) // stride + 1 for p, kk in zip(self.sp, k))
        self.offsets = list(itertools.product(*(range(kk) for kk in k)))
        if stride == 1:
            st = np.cumprod((1,) + self.sp[::-1])[:-1][::-1]
            self.shifts = [int(np.dot(off, st)) for off in self.offsets]
            self.n = int(np.dot(np.asarray(self.so) - 1, st)) + 1
        else:
            self.slices = [(slice(None),) + tuple(slice(o, o + stride * (m - 1) + 1, stride)
                                                  for o, m in zip(off, self.so)) for off in self.offsets]
            self.n = int(np.prod(self.so))

    def im2col(self, xp: np.ndarray) -> np.ndarray:
        kk = len(self.offsets)
        cols = np.empty((self.c, kk, self.n), dtype=xp.dtype)
        if self.stride == 1:
            xf = xp.reshape(self.c, -1)
            for a, sh in enumerate(self.shifts):
                cols[:, a] = xf[:, sh:sh + self.n]
        else:
            for a, sl in enumerate(self.slices):
                cols[:, a] = xp[sl].reshape(self.c, -1)
        return cols.reshape(self.c * kk, self.n)

    def col2im(self, gcols: np.ndarray) -> np.ndarray:
        gcols = gcols.reshape(self.c, len(self.offsets), self.n)
        gx = np.zeros((self.c,) + self.sp, dtype=gcols.dtype)
        if self.stride == 1:
            gf = gx.reshape(self.c, -1)
            for a, sh in enumerate(self.shifts):
                gf[:, sh:sh + self.n] += gcols[:, a]
        else:
            for a, sl in enumerate(self.slices):
                gx[sl] += gcols[:, a].reshape((self.c,) + self.so)
        return gx

    def to_output(self, y: np.ndarray) -> np.ndarray:
        """[C, n] matrix result -> [C, *out_spatial]."""
        c = y.shape[0]
        if self.stride != 1:
            return y.reshape((c,) + self.so)
        full = np.zeros((c, int(np.prod(self.sp))), dtype=y.dtype)
        full[:, :self.n] = y
        crop = (slice(None),) + tuple(slice(0, m) for m in self.so)
        return np.ascontiguousarray(full.reshape((c,) + self.sp)[crop])

    def from_output(self, g: np.ndarray) -> np.ndarray:
        """[C, *out_spatial] -> [C, n], the inverse embedding of to_output."""
        c = g.shape[0]
        if self.stride != 1:
            return g.reshape(c, -1)
        full = np.zeros((c,) + self.sp, dtype=g.dtype)
        full[(slice(None),) + tuple(slice(0, m) for m in self.so)] = g
        return full.reshape(c, -1)[:, :self.n]


def _check_conv(x: Tensor, weight: Tensor, n: int, stride: int, padding: int, in_axis: int):
    if x.ndim != n + 1 or weight.ndim != n + 2:
        raise ValueError(f"expected input rank {n + 1} and weight rank {n + 2}, "
                         f"got {x.shape} and {weight.shape}")
    if x.shape[0] != weight.shape[in_axis]:
        raise ValueError(f"channel mismatch: input {x.shape} vs weight {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")


def _conv(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int, padding: int, n: int) -> Tensor:
    _check_conv(x, weight, n, stride, padding, in_axis=1)
    k = weight.shape[2:]
    if any(kk > s + 2 * padding for kk, s in zip(k, x.shape[1:])):
        raise ValueError(f"kernel {k} larger than padded input {x.shape[1:]} (padding {padding})")
    xp = _spatial_pad(x.data, padding)
    lat = _Lattice(xp.shape, k, stride)
    cols = lat.im2col(xp)
    w2 = weight.data.reshape(weight.shape[0], -1)
    out = lat.to_output(w2 @ cols)
    if bias is not None:
        out += bias.data.reshape((-1,) + (1,) * n)

    def backward(g):
        gx = gw = gb = None
        gf = lat.from_output(g)
        if x.requires_grad:
            gx = _unpad(lat.col2im(w2.T @ gf), padding)
        if weight.requires_grad:
            gw = (gf @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=tuple(range(1, n + 1))).reshape(bias.shape)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


def _conv_transpose(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int, padding: int,
                    n: int) -> Tensor:
    _check_conv(x, weight, n, stride, padding, in_axis=0)
    k = weight.shape[2:]
    full = tuple((s - 1) * stride + kk for s, kk in zip(x.shape[1:], k))
    if any(f - 2 * padding < 1 for f in full):
        raise ValueError(f"padding {padding} too large for transposed output {full}")
    lat = _Lattice((weight.shape[1],) + full, k, stride)
    w2 = weight.data.reshape(weight.shape[0], -1)  # [C_in, C_out * K]
    xf = lat.from_output(x.data)
    out = _unpad(lat.col2im(w2.T @ xf), padding)
    if bias is not None:
        out = out + bias.data.reshape((-1,) + (1,) * n)

    def backward(g):
        gx = gw = gb = None
        cols = lat.im2col(_spatial_pad(g, padding))
        if x.requires_grad:
            gx = lat.to_output(w2 @ cols)
        if weight.requires_grad:
            gw = (xf @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=tuple(range(1, n + 1))).reshape(bias.shape)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(np.ascontiguousarray(out), parents, backward)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x[C_in,H,W] with weight[C_out,C_in,k,k], zero padding."""
    return _conv(x, weight, bias, stride, padding, 2)


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    return _conv(x, weight, bias, stride, padding, 3)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Adjoint of conv2d; weight is laid out [C_in, C_out, k, k]."""
    return _conv_transpose(x, weight, bias, stride, padding, 2)


def conv_transpose3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    return _conv_transpose(x, weight, bias, stride, padding, 3)


# -- sparse linear resampling -----------------------------------------------
def resample(x: Tensor, matrix, out_spatial: tuple, matrix_t=None) -> Tensor:
    """Apply a fixed sparse sampling matrix to every channel.

    ``x`` is [C, *in_spatial]; ``matrix`` is (N_out x N_in) with N_in the
    flattened input extent. Returns [C, *out_spatial].
    """
    c = x.shape[0]
    flat = x.data.reshape(c, -1)
    if matrix.shape[1] != flat.shape[1]:
        raise ValueError(f"sampling matrix {matrix.shape} does not match input {x.shape}")
    out = np.asarray((matrix @ flat.T).T).reshape((c,) + tuple(out_spatial))
    mt = matrix_t if matrix_t is not None else matrix.T.tocsr()

    def backward(g):
        return (np.asarray((mt @ g.reshape(c, -1).T).T).reshape(x.shape),)

    return _result(out, (x,), backward)


# -- gradient checking -------------------------------------------------------
def finite_diff_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-6,
                      max_entries: Optional[int] = None, rng: Optional[np.random.Generator] = None,
                      atol: float = 1e-8, retry_eps: Optional[float] = None) -> float:
    """Max relative error between backprop and central differences.

    ``f`` maps the given tensors to a scalar tensor. Every input is treated as
    a leaf that requires grad; its data is perturbed in place and restored.
    With ``max_entries`` only that many randomly chosen entries per input are
    probed. The relative error of an entry is |a - n| / max(|a|, |n|, atol).
    With ``retry_eps`` an entry is re-probed at that step and the smaller error
    kept, so a ReLU kink lying within ``eps`` of the probe point is not counted;
    a wrong gradient disagrees at both steps.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    loss = f(*inputs)
    loss.backward()
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        ana = analytic.reshape(-1)
        probe = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            probe = np.sort(rng.choice(flat.size, max_entries, replace=False))
        for i in probe:
            err = np.inf
            for step in (eps,) if retry_eps is None else (eps, retry_eps):
                num = _central_difference(f, inputs, flat, i, step)
                err = min(err, abs(ana[i] - num) / max(abs(ana[i]), abs(num), atol))
            worst = max(worst, err)
    return worst


def _central_difference(f, inputs, flat: np.ndarray, i: int, eps: float) -> float:
    orig = flat[i]
    with no_grad():
        flat[i] = orig + eps
        fp = f(*inputs).item()
        flat[i] = orig - eps
        fm = f(*inputs).item()
    flat[i] = orig
    return (fp - fm) / (2.0 * eps)

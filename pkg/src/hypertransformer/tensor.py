"""Dense tensors with define-by-run reverse-mode differentiation.

Every op in this module builds its output eagerly with numpy and, when any
input requires a gradient, records a backward closure on the output.  The
recorded graph is walked once by :func:`backward` and then released.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An ndarray plus the bookkeeping needed to differentiate through it."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.retain_grad = False
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = ""

    # -- basic properties -------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op or 'leaf'})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ---------------------------------------------------------
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
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by Python/numpy scalars")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # Python scalars take the dtype of the tensor operand so float32 stays float32.
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor) and isinstance(a, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return as_tensor(a), as_tensor(b)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- graph traversal --------------------------------------------------------
def topological_order(root: Tensor) -> list[Tensor]:
    """Return the recorded graph under ``root``, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    The recorded graph is released afterwards.  Gradient arrays may be shared
    between tensors, so treat ``.grad`` as read-only.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf or node.retain_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node.is_leaf:
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
        node._parents = ()
        node._backward = None


# -- elementwise --------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _result(np.where(mask, x.data, 0.0).astype(x.dtype, copy=False), (x,), bw, "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.data > 0
    factor = np.where(mask, 1.0, slope).astype(x.dtype, copy=False)

    def bw(g):
        return (g * factor,)

    return _result(x.data * factor, (x,), bw, "leaky_relu")


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)

    def bw(g):
        return (g * sign,)

    return _result(np.abs(x.data), (x,), bw, "abs")


# -- reductions ---------------------------------------------------------------
def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / count)


def l1_norm(x: Tensor) -> Tensor:
    return sum_(abs_(x))


def l2_norm(x: Tensor) -> Tensor:
    """Euclidean norm of all entries; the subgradient at zero is taken as 0."""
    norm = np.sqrt(np.sum(x.data * x.data))

    def bw(g):
        if norm == 0:
            return (np.zeros_like(x.data),)
        return (g * x.data / norm,)

    return _result(np.asarray(norm, dtype=x.dtype), (x,), bw, "l2_norm")


# -- shape manipulation -------------------------------------------------------
def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from exc

    def bw(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), bw, "reshape")


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"axes {axes} are not a permutation for rank {x.ndim}")
    inverse = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inverse),)

    return _result(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), bw, "permute")


def transpose(x: Tensor, axis1: int = -2, axis2: int = -1) -> Tensor:
    axes = list(range(x.ndim))
    axes[axis1], axes[axis2] = axes[axis2], axes[axis1]
    return permute(x, axes)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"cannot concatenate shapes {shapes} on axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, bw, "concat")


# -- linear algebra -------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading (batch) axes must match."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` over the last axis of ``x``."""
    x = as_tensor(x)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    lead = x.shape[:-1]
    flat = x.data.reshape(-1, x.shape[-1])
    out = flat @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ flat if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(out.reshape(lead + (weight.shape[0],)), parents, bw, "linear")


def softmax(x: Tensor, dim: int) -> Tensor:
    if not -x.ndim <= dim < x.ndim:
        raise DimensionError(f"softmax dim {dim} out of range for rank {x.ndim}")
    if x.shape[dim] == 0:
        raise DimensionError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=dim, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=dim, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=dim, keepdims=True)),)

    return _result(s, (x,), bw, "softmax")


# -- convolution ------------------------------------------------------------------
def _conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    span = n + 2 * padding - k
    if span < 0 or span % stride:
        raise DimensionError(
            f"conv2d: size {n} with kernel {k}, stride {stride}, padding {padding} "
            "does not give an integral output size"
        )
    return span // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    c = xp.shape[0]
    cols = np.empty((c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(c * k * k, ho * wo)


def _col2im(cols: np.ndarray, shape_padded, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    c = shape_padded[0]
    cols = cols.reshape(c, k, k, ho, wo)
    out = np.zeros(shape_padded, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, i, j]
    return out


def _unpad(a: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return a
    return a[:, padding:-padding, padding:-padding]


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    method: str = "im2col",
) -> Tensor:
    """2-D cross-correlation of a ``[C_in, H, W]`` map with ``[C_out, C_in, k, k]`` filters.

    ``method="direct"`` accumulates products one (c_in, row, col) tap at a
    time in the same order as a textbook nested loop, which makes it
    bit-reproducible against such a loop.  ``"im2col"`` routes the
    reduction through BLAS and is much faster.
    """
    if x.ndim != 3 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects [C,H,W] input and 4-D weight, got {x.shape}, {weight.shape}")
    c_out, c_in, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"conv2d needs an odd square kernel, got {k}x{k2}")
    if x.shape[0] != c_in:
        raise DimensionError(f"conv2d: input has {x.shape[0]} channels, weight expects {c_in}")
    if padding < 0 or stride < 1:
        raise DimensionError("conv2d: padding must be >= 0 and stride >= 1")
    _, h, w = x.shape
    ho = _conv_out_size(h, k, stride, padding)
    wo = _conv_out_size(w, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data

    if method == "direct":
        out = np.empty((c_out, ho, wo), dtype=x.dtype)
        out[...] = 0.0 if bias is None else bias.data[:, None, None]
        for ci in range(c_in):
            for i in range(k):
                for j in range(k):
                    patch = xp[ci, i : i + stride * ho : stride, j : j + stride * wo : stride]
                    out += weight.data[:, ci, i, j][:, None, None] * patch
        cols = None
    elif method == "im2col":
        cols = _im2col(xp, k, stride, ho, wo)
        out = (weight.data.reshape(c_out, -1) @ cols).reshape(c_out, ho, wo)
        if bias is not None:
            out += bias.data[:, None, None]
    else:
        raise ContractError(f"unknown conv2d method {method!r}")

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(c_out, ho * wo)
        gx = gw = None
        if x.requires_grad:
            dcols = weight.data.reshape(c_out, -1).T @ g2
            gx = _unpad(_col2im(dcols, xp.shape, k, stride, ho, wo), padding)
        if weight.requires_grad:
            c = cols if cols is not None else _im2col(xp, k, stride, ho, wo)
            gw = (g2 @ c.T).reshape(weight.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=1)

    return _result(out, parents, bw, "conv2d")


def conv_transpose2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 2,
    padding: int = 0,
) -> Tensor:
    """Transposed convolution; ``weight`` is ``[C_in, C_out, k, k]``.

    Output size is ``(H - 1) * stride - 2 * padding + k``.
    """
    if x.ndim != 3 or weight.ndim != 4 or x.shape[0] != weight.shape[0]:
        raise DimensionError(f"conv_transpose2d: input {x.shape} incompatible with weight {weight.shape}")
    c_in, c_out, k, _ = weight.shape
    _, h, w = x.shape
    hp = (h - 1) * stride + k
    wp = (w - 1) * stride + k
    if hp - 2 * padding <= 0 or wp - 2 * padding <= 0:
        raise DimensionError("conv_transpose2d: padding leaves an empty output")
    xf = x.data.reshape(c_in, h * w)
    wf = weight.data.reshape(c_in, c_out * k * k)
    cols = wf.T @ xf
    out = _unpad(_col2im(cols, (c_out, hp, wp), k, stride, h, w), padding)
    if bias is not None:
        out = out + bias.data[:, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gp = np.pad(g, ((0, 0), (padding, padding), (padding, padding))) if padding else g
        gcols = _im2col(gp, k, stride, h, w)
        gx = (wf @ gcols).reshape(x.shape) if x.requires_grad else None
        gw = (xf @ gcols.T).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(1, 2))

    return _result(np.ascontiguousarray(out), parents, bw, "conv_transpose2d")


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of a ``[C, H, W]`` map.

    In training mode the spatial statistics normalize the input and the
    running buffers are updated in place (unbiased variance, as is usual).
    """
    if x.ndim != 3 or gamma.shape != (x.shape[0],) or beta.shape != (x.shape[0],):
        raise DimensionError(f"batch_norm2d: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    n = x.shape[1] * x.shape[2]
    if n < 1:
        raise DimensionError("batch_norm2d needs at least one spatial element")
    if training:
        mu = x.data.mean(axis=(1, 2))
        var = x.data.var(axis=(1, 2))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        unbiased = var * n / (n - 1) if n > 1 else var
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[:, None, None]) * inv_std[:, None, None]
    out = xhat * gamma.data[:, None, None] + beta.data[:, None, None]

    def bw(g):
        ggamma = (g * xhat).sum(axis=(1, 2))
        gbeta = g.sum(axis=(1, 2))
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data[:, None, None]
            if training:
                gx = (inv_std[:, None, None] / n) * (
                    n * dxhat
                    - dxhat.sum(axis=(1, 2), keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=(1, 2), keepdims=True)
                )
            else:
                gx = dxhat * inv_std[:, None, None]
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), bw, "batch_norm2d")


def pad2d(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero-pad the two trailing axes of a ``[C, H, W]`` map."""
    if min(top, bottom, left, right) < 0:
        raise DimensionError("pad2d widths must be non-negative")
    out = np.pad(x.data, ((0, 0), (top, bottom), (left, right)))
    h, w = x.shape[1], x.shape[2]

    def bw(g):
        return (g[:, top : top + h, left : left + w],)

    return _result(out, (x,), bw, "pad2d")

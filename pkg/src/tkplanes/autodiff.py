"""Dense tensors with reverse-mode automatic differentiation.

Every learnable computation in the package routes through the ops in this
module. A ``Tensor`` wraps a numpy array (row-major, float32 by default;
float64 for the gradient-check suite) and records the graph needed for
``backward``. Each op stores a backward function that maps the output
gradient to one gradient array per parent; the engine owns accumulation, so
a tensor consumed by k ops receives the sum of the k branch gradients.

Coordinate and interpolation conventions that downstream golden tests rely
on are pinned here:

* ``bilinear_upsample_2x`` samples with align_corners=false semantics
  (output sample centers at (i + 0.5)/2 - 0.5, edge-clamped).
* ``grid_sample_bilinear`` maps a normalized coordinate u in [0, 1] to the
  continuous grid index u * (R - 1), clamping out-of-range queries, so u=0
  and u=1 land exactly on the first and last lattice nodes.
* ``conv2d`` is cross-correlation (no kernel flip) with "same" padding.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError

FLOAT_DTYPES = (np.float32, np.float64)

# Exponent clamp for the exponential activation: exp(80) stays finite in
# float32, so a runaway density cannot poison the graph with inf.
_EXP_MAX = 80.0


class Tensor:
    """A dense n-d array with optional gradient tracking.

    Attributes:
        data: the underlying numpy array (never reassigned by ops).
        requires_grad: whether backward should populate ``grad``.
        grad: accumulated gradient, same shape as ``data``, or None.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise ContractError(f"tensor {name or '<unnamed>'} contains non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    # ------------------------------------------------------------------
    # introspection
    @property
    def shape(self):
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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = self.name or self.op
        return f"Tensor({tag}, shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------------
    # graph plumbing
    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate ``grad`` for every requires_grad tensor reachable from this scalar."""
        if self.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.shape}")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += pg


def _topo_order(root: Tensor) -> list:
    """Iterative post-order over the graph (graphs can outgrow the recursion limit)."""
    order: list = []
    visited: set = set()
    stack: list = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str, backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.name = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ----------------------------------------------------------------------
# elementwise arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), "add", backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    data = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(data, (a, b), "sub", backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    data = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(data, (a, b), "mul", backward)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul}


def elementwise(op_kind: str, a: Tensor, b: Tensor) -> Tensor:
    """Dispatch add/sub/mul by name; shapes must match or broadcast."""
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op_kind!r}") from None
    return fn(a, b)


# ----------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(data, (a, b), "matmul", backward)


# ----------------------------------------------------------------------
# activations

def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0)

    def backward(g):
        return (g * (x.data > 0),)

    return _result(data, (x,), "relu", backward)


def sigmoid(x: Tensor) -> Tensor:
    # Stable two-branch form; outputs stay strictly inside (0, 1).
    data = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                    np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))
    data = data.astype(x.dtype, copy=False)

    def backward(g):
        return (g * data * (1.0 - data),)

    return _result(data, (x,), "sigmoid", backward)


def exp(x: Tensor) -> Tensor:
    data = np.exp(np.minimum(x.data, _EXP_MAX))

    def backward(g):
        return (g * data,)

    return _result(data, (x,), "exp", backward)


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "exponential": exp}


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ContractError(f"unknown activation {kind!r}") from None
    return fn(x)


# ----------------------------------------------------------------------
# convolution / resampling

def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, padding: int) -> Tensor:
    """Same-size cross-correlation of a CxHxW input with CoutxCinxkxk kernels."""
    if x.ndim != 3 or kernels.ndim != 4:
        raise DimensionError(f"conv2d expects CxHxW input and OxIxkxk kernels, got {x.shape}, {kernels.shape}")
    c_out, c_in, k, k2 = kernels.shape
    if k != k2 or k % 2 == 0:
        raise ContractError(f"conv2d kernels must be square with odd size, got {k}x{k2}")
    if padding != (k - 1) // 2:
        raise ContractError(f"conv2d requires same-padding (k-1)/2={(k - 1) // 2}, got {padding}")
    if x.shape[0] != c_in:
        raise DimensionError(f"conv2d channel mismatch: input has {x.shape[0]}, kernels expect {c_in}")
    if bias.shape != (c_out,):
        raise DimensionError(f"conv2d bias must have shape ({c_out},), got {bias.shape}")
    _, h, w = x.shape

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    # (Cin, H, W, k, k) -> (Cin*k*k, H*W)
    cols = windows.transpose(0, 3, 4, 1, 2).reshape(c_in * k * k, h * w)
    kmat = kernels.data.reshape(c_out, c_in * k * k)
    data = (kmat @ cols + bias.data[:, None]).reshape(c_out, h, w)

    def backward(g):
        gmat = g.reshape(c_out, h * w)
        grad_bias = gmat.sum(axis=1)
        grad_kernels = (gmat @ cols.T).reshape(c_out, c_in, k, k)
        gcols = (kmat.T @ gmat).reshape(c_in, k, k, h, w)
        gxp = np.zeros_like(xp)
        for di in range(k):
            for dj in range(k):
                gxp[:, di:di + h, dj:dj + w] += gcols[:, di, dj]
        grad_x = gxp[:, padding:padding + h, padding:padding + w]
        if padding == 0:
            grad_x = grad_x.copy()
        return grad_x, grad_kernels, grad_bias

    return _result(data, (x, kernels, bias), "conv2d", backward)


def _upsample_matrix(n: int, dtype) -> np.ndarray:
    """Row-stochastic (2n x n) matrix for x2 bilinear resampling, align_corners=false."""
    src = (np.arange(2 * n, dtype=np.float64) + 0.5) / 2.0 - 0.5
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    lo = np.clip(i0, 0, n - 1)
    hi = np.clip(i0 + 1, 0, n - 1)
    mat = np.zeros((2 * n, n), dtype=np.float64)
    rows = np.arange(2 * n)
    np.add.at(mat, (rows, lo), 1.0 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat.astype(dtype)


def bilinear_upsample_2x(x: Tensor) -> Tensor:
    """Double both spatial dims of a CxHxW tensor by bilinear interpolation."""
    if x.ndim != 3:
        raise DimensionError(f"bilinear_upsample_2x expects CxHxW, got {x.shape}")
    _, h, w = x.shape
    uy = _upsample_matrix(h, x.dtype)
    ux = _upsample_matrix(w, x.dtype)
    data = np.einsum("ij,cjk,lk->cil", uy, x.data, ux, optimize=True)

    def backward(g):
        return (np.einsum("ji,cjk,kl->cil", uy, g, ux, optimize=True),)

    return _result(data, (x,), "bilinear_upsample_2x", backward)


def grid_sample_bilinear(plane: Tensor, coords: np.ndarray) -> Tensor:
    """Sample a DxRaxRb plane at N normalized (a, b) coordinates, returning NxD.

    coords[:, 0] indexes the Ra axis, coords[:, 1] the Rb axis; values are
    clamped into [0, 1] before lookup. Gradients flow to the plane only (the
    query coordinates come from fixed ray geometry) and accumulate when
    queries share grid cells.
    """
    if plane.ndim != 3:
        raise DimensionError(f"grid_sample_bilinear expects a DxRaxRb plane, got {plane.shape}")
    coords = np.asarray(coords)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise DimensionError(f"coords must be Nx2, got {coords.shape}")
    d, ra, rb = plane.shape
    n = coords.shape[0]

    ca = np.clip(coords[:, 0], 0.0, 1.0) * (ra - 1)
    cb = np.clip(coords[:, 1], 0.0, 1.0) * (rb - 1)
    a0 = np.clip(np.floor(ca).astype(np.int64), 0, max(ra - 2, 0))
    b0 = np.clip(np.floor(cb).astype(np.int64), 0, max(rb - 2, 0))
    a1 = np.minimum(a0 + 1, ra - 1)
    b1 = np.minimum(b0 + 1, rb - 1)
    fa = (ca - a0).astype(plane.dtype)
    fb = (cb - b0).astype(plane.dtype)

    w00 = (1 - fa) * (1 - fb)
    w01 = (1 - fa) * fb
    w10 = fa * (1 - fb)
    w11 = fa * fb

    p = plane.data
    out = (w00 * p[:, a0, b0] + w01 * p[:, a0, b1] +
           w10 * p[:, a1, b0] + w11 * p[:, a1, b1]).T.copy()

    flat = np.stack([a0 * rb + b0, a0 * rb + b1, a1 * rb + b0, a1 * rb + b1])  # (4, N)
    weights = np.stack([w00, w01, w10, w11])  # (4, N)

    def backward(g):
        gt = g.T  # (D, N)
        # One flat histogram per (channel, corner, query); bincount keeps the
        # scatter-add deterministic and fast.
        idx = (np.arange(d, dtype=np.int64)[:, None, None] * (ra * rb) + flat[None]).reshape(-1)
        vals = (weights[None] * gt[:, None, :]).reshape(-1)
        grad_plane = np.bincount(idx, weights=vals, minlength=d * ra * rb)
        return (grad_plane.reshape(d, ra, rb).astype(plane.dtype),)

    return _result(out if out.dtype == plane.dtype else out.astype(plane.dtype), (plane,),
                   "grid_sample_bilinear", backward)


# ----------------------------------------------------------------------
# shape ops

def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of an empty tensor list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise DimensionError(f"concat: shape {t.shape} incompatible with {ref} along axis {axis}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _result(data, tensors, "concat", backward)


def cumsum(x: Tensor, axis: int) -> Tensor:
    data = np.cumsum(x.data, axis=axis)

    def backward(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _result(data, (x,), "cumsum", backward)


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)
    data = np.asarray(data, dtype=x.dtype)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(data, (x,), "sum", backward)


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _result(data, (x,), "reshape", backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    data = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _result(data, (x,), "transpose", backward)


def slice_tensor(x: Tensor, key) -> Tensor:
    """Basic (non-fancy) slicing with gradient scatter into the source."""
    data = x.data[key]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return _result(np.ascontiguousarray(data), (x,), "slice", backward)


# ----------------------------------------------------------------------
# convenience methods / operators

def _mean(x: Tensor) -> Tensor:
    return mul(tensor_sum(x), Tensor(np.asarray(1.0 / x.size, dtype=x.dtype)))


Tensor.__add__ = lambda self, other: add(self, _lift(other, self))
Tensor.__radd__ = lambda self, other: add(_lift(other, self), self)
Tensor.__sub__ = lambda self, other: sub(self, _lift(other, self))
Tensor.__rsub__ = lambda self, other: sub(_lift(other, self), self)
Tensor.__mul__ = lambda self, other: mul(self, _lift(other, self))
Tensor.__rmul__ = lambda self, other: mul(_lift(other, self), self)
Tensor.__neg__ = lambda self: mul(self, Tensor(np.asarray(-1.0, dtype=self.dtype)))
Tensor.__matmul__ = matmul
Tensor.relu = relu
Tensor.sigmoid = sigmoid
Tensor.exp = exp
Tensor.sum = tensor_sum
Tensor.mean = _mean
Tensor.reshape = reshape
Tensor.transpose = transpose
Tensor.__getitem__ = slice_tensor


def find_first_nonfinite(root: Tensor) -> Optional[Tensor]:
    """Earliest tensor (in forward order) whose values are not all finite."""
    for node in _topo_order(root):
        if not np.all(np.isfinite(node.data)):
            return node
    return None


def parameters_of(tensors: Iterable[Tensor]) -> list:
    """Filter to requires_grad leaves (convenience for optimizer wiring)."""
    return [t for t in tensors if t.requires_grad and t._backward is None]

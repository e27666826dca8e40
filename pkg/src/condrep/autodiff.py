"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records, on its output, the list of (parent, vjp) edges
needed to route the output gradient back to its inputs. That implicit
per-node record *is* the computation record: the set of nodes reachable
from a loss, visited in reverse topological order, replays the forward
pass backwards exactly once. Calling :func:`backward` twice on the same
loss raises, because the graph is consumed by the first call.

Operations accept arbitrary leading batch dimensions where the math
allows it (matmul, softmax, layer_norm, conv2d, elementwise ops); the
batched forms are exercised by the same finite-difference gradient suite
as the plain ones.

Graph construction is single-writer: do not build or backward one graph
from several threads. Reading a frozen parameter set (inference inside
``no_grad``) is safe to share.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .exceptions import ContractError, DimensionError, StateError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """n-dimensional float64 array with optional gradient tracking.

    ``data`` is always a contiguous float64 ndarray; ``grad`` is filled by
    :func:`backward` and has the same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_edges", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._edges = ()
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all routing goes through the module-level ops
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)

    def permute(self, axes):
        return permute(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out_data, edges) -> Tensor:
    """Wrap op output, recording only edges to grad-requiring parents."""
    out = Tensor(out_data)
    if _grad_enabled:
        kept = tuple((p, vjp) for p, vjp in edges if p.requires_grad)
        if kept:
            out.requires_grad = True
            out._edges = kept
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    return _make(out, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")
    return _make(out, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    ])


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    return _make(out, [
        (a, lambda g: _unbroadcast(g * b.data, a.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.shape)),
    ])


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)
    # subgradient at exactly 0 is 0
    return _make(out, [(x, lambda g: g * (x.data > 0.0))])


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    # subgradient 0 where x == 0 keeps composite graphs finite
    def vjp(g, out=out):
        return g * np.where(out > 0.0, 0.5 / np.where(out > 0.0, out, 1.0), 0.0)
    return _make(out, [(x, vjp)])


def log(x) -> Tensor:
    x = as_tensor(x)
    out = np.log(x.data)
    return _make(out, [(x, lambda g: g / x.data)])


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; either operand may carry leading batch dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must be >=2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def vjp_a(g):
        return _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape)

    def vjp_b(g):
        return _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape)

    return _make(out, [(a, vjp_a), (b, vjp_b)])


def softmax_lastdim(x) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"softmax_lastdim: empty last dimension in shape {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return y * (g - (g * y).sum(axis=-1, keepdims=True))

    return _make(y, [(x, vjp)])


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"layer_norm: empty normalized axis in shape {x.shape}")
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError(
            f"layer_norm: gamma/beta shapes {gamma.shape}/{beta.shape} do not match axis length {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    lead = tuple(range(x.ndim - 1))

    def vjp_x(g):
        dxhat = g * gamma.data
        return inv * (dxhat
                      - dxhat.mean(axis=-1, keepdims=True)
                      - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))

    return _make(out, [
        (x, vjp_x),
        (gamma, lambda g: (g * xhat).sum(axis=lead) if lead else g * xhat),
        (beta, lambda g: g.sum(axis=lead) if lead else g),
    ])


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (B,C_in,H,W) or (C_in,H,W) with (C_out,C_in,kh,kw)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d: expected image (C,H,W)/(B,C,H,W) and kernel "
                             f"(C_out,C_in,kh,kw), got {x.shape} and {kernel.shape}")
    b, cin, h, w = xd.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise DimensionError(f"conv2d: input channels {cin} != kernel channels {kcin}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input "
                             f"{h + 2 * padding}x{w + 2 * padding}")
    if stride < 1:
        raise ContractError(f"conv2d: stride must be positive, got {stride}")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]          # (B,Cin,H',W',kh,kw)
    ho, wo = windows.shape[2], windows.shape[3]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))
    cols = cols.reshape(b, ho * wo, cin * kh * kw)
    w2 = kernel.data.reshape(cout, cin * kh * kw)
    out = (cols @ w2.T).transpose(0, 2, 1).reshape(b, cout, ho, wo)
    if squeeze:
        out = out[0]

    def vjp_kernel(g):
        g4 = g[None] if squeeze else g
        g2 = g4.reshape(b, cout, ho * wo).transpose(0, 2, 1)       # (B,H'W',Cout)
        dw = np.tensordot(g2, cols, axes=([0, 1], [0, 1]))         # (Cout, Cin*kh*kw)
        return dw.reshape(kernel.shape)

    def vjp_x(g):
        g4 = g[None] if squeeze else g
        g2 = g4.reshape(b, cout, ho * wo).transpose(0, 2, 1)
        dcols = (g2 @ w2).reshape(b, ho, wo, cin, kh, kw)
        dxp = np.zeros((b, cin, h + 2 * padding, w + 2 * padding))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        return dx[0] if squeeze else dx

    return _make(out, [(x, vjp_x), (kernel, vjp_kernel)])


# ---------------------------------------------------------------------------
# shape / reduction ops
# ---------------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view shape {x.shape} as {tuple(shape)}")
    return _make(out, [(x, lambda g: g.reshape(x.shape))])


def permute(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"permute: axes {axes} are not a permutation for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    out = x.data.transpose(axes)
    return _make(out, [(x, lambda g: g.transpose(inv))])


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat: need at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(
            f"concat: shapes {[t.shape for t in tensors]} incompatible along axis {axis}")
    ax = axis if axis >= 0 else out.ndim + axis
    offsets = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            return g[tuple(sl)]
        return vjp

    return _make(out, [(t, make_vjp(i)) for i, t in enumerate(tensors)])


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a if a >= 0 else ndim + a for a in axis)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    if any(a >= x.ndim for a in axes):
        raise DimensionError(f"mean: axis {axis} out of range for shape {x.shape}")
    out = x.data.mean(axis=axes)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    keep_shape = tuple(1 if i in axes else s for i, s in enumerate(x.shape))

    def vjp(g):
        return np.broadcast_to(g.reshape(keep_shape), x.shape) * (1.0 / n)

    return _make(out, [(x, vjp)])


def sum_along(x, axis=None) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    if any(a >= x.ndim for a in axes):
        raise DimensionError(f"sum_along: axis {axis} out of range for shape {x.shape}")
    out = x.data.sum(axis=axes)
    keep_shape = tuple(1 if i in axes else s for i, s in enumerate(x.shape))

    def vjp(g):
        return np.broadcast_to(g.reshape(keep_shape), x.shape).copy()

    return _make(out, [(x, vjp)])


def max_pool2(x, stride: int = 2) -> Tensor:
    """Max pooling over non-overlapping stride x stride windows of (B,C,H,W).

    Ties inside a window share the gradient equally, which keeps the
    subgradient symmetric (and finite-difference checkable) on plateaued
    inputs like flat image regions.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"max_pool2: expected (B,C,H,W), got {x.shape}")
    b, c, h, w = x.shape
    if h % stride or w % stride:
        raise DimensionError(f"max_pool2: stride {stride} does not divide {h}x{w}")
    blocks = x.data.reshape(b, c, h // stride, stride, w // stride, stride)
    out = blocks.max(axis=(3, 5))

    def vjp(g):
        is_max = blocks == out[:, :, :, None, :, None]
        counts = is_max.sum(axis=(3, 5), keepdims=True)
        spread = g[:, :, :, None, :, None] * is_max / counts
        return spread.reshape(x.shape)

    return _make(out, [(x, vjp)])


def index_axis(x, axis: int, index: int) -> Tensor:
    """Select one slice along ``axis`` (the axis is removed)."""
    x = as_tensor(x)
    if not (0 <= axis < x.ndim) or not (0 <= index < x.shape[axis]):
        raise DimensionError(f"index_axis: (axis={axis}, index={index}) invalid for shape {x.shape}")
    sl = [slice(None)] * x.ndim
    sl[axis] = index
    sl = tuple(sl)
    out = x.data[sl]

    def vjp(g):
        z = np.zeros_like(x.data)
        z[sl] = g
        return z

    return _make(out, [(x, vjp)])


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor reachable from the scalar ``loss``."""
    if not isinstance(loss, Tensor):
        raise ContractError("backward: loss must be a Tensor")
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise StateError("backward: graph already consumed by a previous backward call")

    # iterative topological sort (graphs can exceed the recursion limit)
    topo = []
    state = {}  # id -> 0 visiting, 1 done
    stack = [loss]
    while stack:
        node = stack[-1]
        nid = id(node)
        if state.get(nid) == 1:
            stack.pop()
            continue
        if state.get(nid) == 0:
            state[nid] = 1
            topo.append(node)
            stack.pop()
            continue
        state[nid] = 0
        for parent, _ in node._edges:
            if state.get(id(parent)) is None:
                stack.append(parent)

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        g = node.grad
        if g is None or not node._edges:
            continue
        for parent, vjp in node._edges:
            contrib = vjp(g)
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += contrib
    loss._consumed = True

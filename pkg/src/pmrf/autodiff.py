"""Dense tensors with reverse-mode automatic differentiation.

Define-by-run: every op records its parents and a backward closure on the
result tensor; ``Tensor.backward()`` topologically sorts the recorded graph,
accumulates gradients into the tracked leaves, and then frees the graph.
Parameters and activations are float32 by default; reductions accumulate in
float64. Gradient checks run the whole graph in float64.
"""

from __future__ import annotations

import contextlib

import numpy as np

from pmrf import _convkernels as _kern

DEFAULT_DTYPE = np.float32

_grad_enabled = True
_nan_guard = False


class AutodiffError(RuntimeError):
    pass


class ShapeMismatch(AutodiffError):
    pass


class NumericsError(AutodiffError):
    """Raised when an op produces NaN/Inf while the NaN guard is active."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference / frozen-teacher forward passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def guard_nans(enabled=True):
    """Check every op output for NaN/Inf and abort naming the op."""
    global _nan_guard
    prev = _nan_guard
    _nan_guard = enabled
    try:
        yield
    finally:
        _nan_guard = prev


def _check_finite(data, op_name):
    if _nan_guard and not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite values produced by op '{op_name}'")


class Tensor:
    """N-dimensional array with an optional autodiff graph link."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self._op})"

    def item(self):
        return float(self.data.reshape(-1)[0])

    # -- graph management ----------------------------------------------

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        """Populate ``grad`` on every tracked tensor reachable from this scalar.

        Repeated calls (after re-running the forward) accumulate. The graph is
        released afterwards.
        """
        if self.size != 1:
            raise AutodiffError(f"backward requires a scalar loss, got shape {self.shape}")

        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backward is None:
                # tracked leaf
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            # free the graph as we go
            node._parents = ()
            node._backward = None

    # -- operators -------------------------------------------------------

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

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward, op):
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)

    def backward(g):
        return ((a, _unbroadcast(g * b.data, a.shape)), (b, _unbroadcast(g * a.data, b.shape)))

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ((a, ga), (b, gb))

    return _make(a.data / b.data, (a, b), backward, "div")


def power(a, exponent):
    a = _as_tensor(a)
    e = float(exponent)

    def backward(g):
        return ((a, g * e * np.power(a.data, e - 1.0)),)

    return _make(np.power(a.data, e), (a,), backward, "pow")


def sqrt(a):
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        return ((a, g / (2.0 * out_data)),)

    return _make(out_data, (a,), backward, "sqrt")


def exp(a):
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)

    def backward(g):
        return ((a, g * out_data),)

    return _make(out_data, (a,), backward, "exp")


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0

    def backward(g):
        return ((a, g * mask),)

    return _make(a.data * mask, (a,), backward, "relu")


def silu(a):
    """x * sigmoid(x); sigmoid via tanh to stay overflow-free in float32."""
    a = _as_tensor(a)
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def backward(g):
        return ((a, g * sig * (1.0 + a.data * (1.0 - sig))),)

    return _make(a.data * sig, (a,), backward, "silu")


# -- reductions and shape ops ----------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    # 64-bit accumulation, result cast back to the operand dtype
    out_data = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    if out_data.ndim == 0:
        out_data = out_data.reshape(())

    def backward(g):
        if axis is None:
            return ((a, np.broadcast_to(g, a.shape).astype(a.dtype)),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g_exp, a.shape).astype(a.dtype)),)

    return _make(out_data, (a,), backward, "sum")


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is None:
        n = a.size
    elif isinstance(axis, int):
        n = a.shape[axis]
    else:
        n = int(np.prod([a.shape[i] for i in axis]))
    s = tsum(a, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / n)


def reshape(a, shape):
    a = _as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        return ((a, g.reshape(a.shape)),)

    return _make(out_data, (a,), backward, "reshape")


def concat(tensors, axis=1):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        pairs = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            pairs.append((t, g[tuple(idx)]))
        return tuple(pairs)

    return _make(out_data, tuple(tensors), backward, "concat")


def matmul(a, b):
    """2-D matrix product, used for the time-embedding affine maps."""
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")

    def backward(g):
        return ((a, g @ b.data.T), (b, a.data.T @ g))

    return _make(a.data @ b.data, (a, b), backward, "matmul")


# -- spatial ops -------------------------------------------------------------


def _conv_out_side(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def _conv_forward_numpy(xp, wmat, stride, out_shape):
    n, f, do, ho, wo = out_shape
    c, k = wmat.shape[1], wmat.shape[2]
    L = do * ho * wo
    out = np.zeros((n, f, L), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                xv = xp[:, :, i : i + stride * do : stride, j : j + stride * ho : stride, l : l + stride * wo : stride]
                out += np.matmul(wmat[:, :, i, j, l], np.ascontiguousarray(xv).reshape(n, c, L))
    return out.reshape(out_shape)


def conv3d(x, kernel, bias=None, stride=1, padding=0):
    """Cross-correlation of [N,C,D,H,W] input with an [F,C,k,k,k] kernel.

    Stride-1 3x3x3 convolutions run through JIT kernels when numba is
    available; everything else (strided downsampling, 1x1x1 kernels) uses a
    GEMM-per-offset numpy lowering with identical semantics.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 5 or kernel.ndim != 5:
        raise ShapeMismatch(f"conv3d expects 5-D input/kernel, got {x.shape} and {kernel.shape}")
    n, c, d, h, w = x.shape
    f, ck, kd, kh, kw = kernel.shape
    if not (kd == kh == kw):
        raise ShapeMismatch(f"conv3d kernel must be cubic, got {kernel.shape}")
    k = kd
    if k % 2 != 1:
        raise ShapeMismatch(f"conv3d kernel size must be odd, got {k}")
    if ck != c:
        raise ShapeMismatch(f"input has {c} channels but kernel expects {ck}")
    if stride < 1 or padding < 0:
        raise ShapeMismatch(f"invalid stride={stride} / padding={padding}")

    do = _conv_out_side(d, k, stride, padding)
    ho = _conv_out_side(h, k, stride, padding)
    wo = _conv_out_side(w, k, stride, padding)
    if min(do, ho, wo) < 1:
        raise ShapeMismatch(f"conv3d output would be empty for input {x.shape}, k={k}")

    if padding:
        pw = ((0, 0), (0, 0), (padding, padding), (padding, padding), (padding, padding))
        xp = np.pad(x.data, pw)
    else:
        xp = x.data

    wmat = kernel.data
    out_shape = (n, f, do, ho, wo)
    fast = _kern.HAVE_NUMBA and stride == 1 and k == 3 and padding <= 2
    if fast:
        out = np.empty(out_shape, dtype=x.dtype)
        _kern.fwd_s1_k3(xp, wmat, out)
    else:
        out = _conv_forward_numpy(xp, wmat, stride, out_shape)
    if bias is not None:
        bias = _as_tensor(bias)
        out = out + bias.data.reshape(1, f, 1, 1, 1)

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    need_dx = x.requires_grad
    need_dw = kernel.requires_grad

    def backward(g):
        g = np.ascontiguousarray(g)
        dw = np.zeros_like(kernel.data)
        dx = None
        if fast:
            # input gradient is the correlation of g with the channel-swapped,
            # spatially flipped kernel; weight gradient has its own kernel
            if need_dx:
                pg = k - 1 - padding
                gp = np.pad(g, ((0, 0), (0, 0), (pg, pg), (pg, pg), (pg, pg))) if pg else g
                wt = np.ascontiguousarray(wmat[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
                dx = np.empty(x.shape, dtype=x.dtype)
                _kern.fwd_s1_k3(gp, wt, dx)
            if need_dw:
                _kern.dw_s1_k3(g, xp, dw)
        else:
            L = do * ho * wo
            g2 = g.reshape(n, f, L)
            dx_pad = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    for l in range(k):
                        sl = (
                            slice(None),
                            slice(None),
                            slice(i, i + stride * do, stride),
                            slice(j, j + stride * ho, stride),
                            slice(l, l + stride * wo, stride),
                        )
                        if need_dw:
                            xv = np.ascontiguousarray(xp[sl]).reshape(n, c, L)
                            dw[:, :, i, j, l] = np.einsum("nfl,ncl->fc", g2, xv, optimize=True)
                        if need_dx:
                            dv = np.matmul(wmat[:, :, i, j, l].T, g2)
                            dx_pad[sl] += dv.reshape(n, c, do, ho, wo)
            if need_dx:
                if padding:
                    dx = dx_pad[:, :, padding:-padding, padding:-padding, padding:-padding]
                else:
                    dx = dx_pad
        pairs = [(x, dx), (kernel, dw)]
        if bias is not None:
            pairs.append((bias, g.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(bias.dtype)))
        return tuple(pairs)

    return _make(out, parents, backward, "conv3d")


def upsample_nearest(x, factor=2):
    """Nearest-neighbour upsampling of the three spatial axes."""
    x = _as_tensor(x)
    if x.ndim != 5:
        raise ShapeMismatch(f"upsample_nearest expects 5-D input, got {x.shape}")
    f = int(factor)
    out_data = x.data.repeat(f, axis=2).repeat(f, axis=3).repeat(f, axis=4)

    def backward(g):
        n, c, d, h, w = x.shape
        gr = g.reshape(n, c, d, f, h, f, w, f)
        return ((x, gr.sum(axis=(3, 5, 7), dtype=np.float64).astype(x.dtype)),)

    return _make(out_data, (x,), backward, "upsample_nearest")


def group_norm(x, gamma, beta, groups, eps=1e-5):
    """Group normalization over [N,C,D,H,W]; statistics per (sample, group)."""
    x = _as_tensor(x)
    n, c, d, h, w = x.shape
    if c % groups != 0:
        raise ShapeMismatch(f"{c} channels not divisible into {groups} groups")
    xg = reshape(x, (n, groups, (c // groups) * d * h * w))
    mu = tmean(xg, axis=2, keepdims=True)
    xc = sub(xg, mu)
    var = tmean(mul(xc, xc), axis=2, keepdims=True)
    xhat = div(xc, sqrt(add(var, eps)))
    xhat = reshape(xhat, (n, c, d, h, w))
    gamma = _as_tensor(gamma)
    beta = _as_tensor(beta)
    return add(mul(xhat, reshape(gamma, (1, c, 1, 1, 1))), reshape(beta, (1, c, 1, 1, 1)))

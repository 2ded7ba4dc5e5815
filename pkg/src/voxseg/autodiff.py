"""Dense tensor arithmetic with reverse-mode differentiation.

Tensors wrap contiguous numpy arrays. Every non-leaf tensor records its
parents and a backward closure; ``backward()`` replays the recorded
operations in reverse execution order (a tape, ordered by creation id).

Layout convention for 5-D activations: (batch, channel, depth, height, width).
"""

import itertools
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording, e.g. for inference."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _triple(x):
    if isinstance(x, (tuple, list)):
        if len(x) != 3:
            raise ValueError(f"expected 3 values, got {x}")
        return tuple(int(v) for v in x)
    return (int(x),) * 3


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_tid")

    _counter = itertools.count()

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float32)
        if not self.data.flags.c_contiguous:
            self.data = np.ascontiguousarray(self.data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._tid = next(Tensor._counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- graph construction ------------------------------------------------

    @staticmethod
    def _make(data, parents, backward):
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without gradient requires a scalar")
            grad = np.ones_like(self.data)
        # collect reachable nodes, replay in reverse creation order
        nodes = []
        seen = set()
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t.requires_grad:
                nodes.append(t)
                stack.extend(t._parents)
        nodes.sort(key=lambda t: t._tid, reverse=True)
        self.grad = _accum(self.grad, np.asarray(grad, dtype=self.data.dtype))
        for node in nodes:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -_as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return add(-self, _as_tensor(other, self.dtype))

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _accum(buf, g):
    if buf is None:
        return g.copy() if g.base is not None or not g.flags.owndata else g
    buf = buf + g
    return buf


def _unbroadcast(grad, shape):
    """Reduce a broadcasted gradient back to the original shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _add_grad(t, g):
    t.grad = _accum(t.grad, g)


# -- elementwise ------------------------------------------------------------


def add(a, b):
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _add_grad(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _add_grad(b, _unbroadcast(g, b.shape))

    return Tensor._make(out_data, (a, b), backward)


def mul(a, b):
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _add_grad(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _add_grad(b, _unbroadcast(g * a.data, b.shape))

    return Tensor._make(out_data, (a, b), backward)


def div(a, b):
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _add_grad(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _add_grad(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor._make(out_data, (a, b), backward)


def scale(a, c):
    c = float(c)

    def backward(g):
        _add_grad(a, g * c)

    return Tensor._make(a.data * c, (a,), backward)


def power(a, exponent):
    exponent = float(exponent)
    out_data = a.data ** exponent

    def backward(g):
        _add_grad(a, g * exponent * a.data ** (exponent - 1.0))

    return Tensor._make(out_data, (a,), backward)


def sqrt(a):
    out_data = np.sqrt(a.data)

    def backward(g):
        _add_grad(a, g * (0.5 / out_data))

    return Tensor._make(out_data, (a,), backward)


def exp(a):
    out_data = np.exp(a.data)

    def backward(g):
        _add_grad(a, g * out_data)

    return Tensor._make(out_data, (a,), backward)


def log(a):
    out_data = np.log(a.data)

    def backward(g):
        _add_grad(a, g / a.data)

    return Tensor._make(out_data, (a,), backward)


def relu(a):
    mask = a.data > 0
    out_data = np.where(mask, a.data, 0)

    def backward(g):
        _add_grad(a, g * mask)

    return Tensor._make(out_data, (a,), backward)


def sigmoid(a):
    # numerically stable on both tails
    out_data = np.where(a.data >= 0,
                        1.0 / (1.0 + np.exp(-np.abs(a.data))),
                        np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))

    def backward(g):
        _add_grad(a, g * out_data * (1.0 - out_data))

    return Tensor._make(out_data, (a,), backward)


# -- reductions / shape ------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _add_grad(a, np.broadcast_to(g, a.shape).copy())

    return Tensor._make(out_data, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    out = tsum(a, axis=axis, keepdims=keepdims)
    return scale(out, 1.0 / n)


def reshape(a, shape):
    out_data = a.data.reshape(shape)

    def backward(g):
        _add_grad(a, g.reshape(a.shape))

    return Tensor._make(out_data, (a,), backward)


def transpose(a, axes):
    axes = tuple(axes)
    inv = np.argsort(axes)

    def backward(g):
        _add_grad(a, np.ascontiguousarray(g.transpose(inv)))

    return Tensor._make(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward)


def concat_channels(tensors, axis=1):
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _add_grad(t, np.ascontiguousarray(g[tuple(sl)]))

    return Tensor._make(out_data, tuple(tensors), backward)


def matmul(a, b):
    """Batched matrix product over the last two axes."""
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _add_grad(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _add_grad(b, _unbroadcast(gb, b.shape))

    return Tensor._make(out_data, (a, b), backward)


def softmax(a, axis):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _add_grad(a, out_data * (g - dot))

    return Tensor._make(out_data, (a,), backward)


def softmax_channel(a):
    """Per-voxel softmax across the channel axis of an (B,C,...) tensor."""
    return softmax(a, axis=1)


# -- convolution machinery ---------------------------------------------------


def _patches(xp, k, s):
    """(B,C,Dp,Hp,Wp) -> (B, Do,Ho,Wo, C, kd,kh,kw) windows of padded input."""
    w = sliding_window_view(xp, k, axis=(2, 3, 4))
    w = w[:, :, :: s[0], :: s[1], :: s[2]]
    return np.ascontiguousarray(w.transpose(0, 2, 3, 4, 1, 5, 6, 7))


def _scatter_windows(cols, shape, k, s):
    """Adjoint of _patches: scatter-add (B,Do,Ho,Wo,C,kd,kh,kw) into shape."""
    buf = np.zeros(shape, dtype=cols.dtype)
    B, Do, Ho, Wo = cols.shape[:4]
    c = cols.transpose(0, 4, 1, 2, 3, 5, 6, 7)  # (B,C,Do,Ho,Wo,kd,kh,kw)
    for ki in range(k[0]):
        for kj in range(k[1]):
            for kk in range(k[2]):
                buf[:, :,
                    ki: ki + Do * s[0]: s[0],
                    kj: kj + Ho * s[1]: s[1],
                    kk: kk + Wo * s[2]: s[2]] += c[..., ki, kj, kk]
    return buf


def _pad5(x, p):
    if p == (0, 0, 0):
        return x
    return np.pad(x, ((0, 0), (0, 0), (p[0], p[0]), (p[1], p[1]), (p[2], p[2])))


def conv3d(x, kernel, bias=None, stride=1, padding=0):
    """3-D cross-correlation. kernel: (Cout, Cin, kd, kh, kw)."""
    s, p = _triple(stride), _triple(padding)
    B, C = x.shape[:2]
    Cout, Cin = kernel.shape[:2]
    k = kernel.shape[2:]
    if C != Cin:
        raise ValueError(f"input has {C} channels but kernel expects {Cin}")
    for ax in range(3):
        if x.shape[2 + ax] + 2 * p[ax] < k[ax]:
            raise ValueError("kernel does not fit within padded input")
    xp = _pad5(x.data, p)
    cols = _patches(xp, k, s)  # (B,Do,Ho,Wo,C,kd,kh,kw)
    Do, Ho, Wo = cols.shape[1:4]
    N = Do * Ho * Wo
    cols2 = cols.reshape(B, N, -1)
    Wm = kernel.data.reshape(Cout, -1)
    out = cols2 @ Wm.T  # (B,N,Cout)
    if bias is not None:
        out = out + bias.data
    out_data = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(B, Cout, Do, Ho, Wo)

    def backward(g):
        gr = g.reshape(B, Cout, N).transpose(0, 2, 1)  # (B,N,Cout)
        if kernel.requires_grad:
            gW = np.einsum("bno,bnf->of", gr, cols2)
            _add_grad(kernel, gW.reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            _add_grad(bias, gr.sum(axis=(0, 1)))
        if x.requires_grad:
            gcols = (gr @ Wm).reshape(B, Do, Ho, Wo, C, *k)
            gxp = _scatter_windows(gcols, xp.shape, k, s)
            if p != (0, 0, 0):
                gxp = gxp[:, :, p[0]: gxp.shape[2] - p[0],
                          p[1]: gxp.shape[3] - p[1], p[2]: gxp.shape[4] - p[2]]
            _add_grad(x, np.ascontiguousarray(gxp))

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._make(out_data, parents, backward)


def transpose_conv3d(x, kernel, bias=None, stride=1, padding=0, output_padding=0):
    """Transposed 3-D convolution. kernel: (Cin, Cout, kd, kh, kw).

    Forward is the adjoint of conv3d's input gradient with the same kernel:
    <conv3d(a, K), b> == <a, transpose_conv3d(b, K)>.
    """
    s, p, op = _triple(stride), _triple(padding), _triple(output_padding)
    B, C = x.shape[:2]
    Cin, Cout = kernel.shape[:2]
    k = kernel.shape[2:]
    if C != Cin:
        raise ValueError(f"input has {C} channels but kernel expects {Cin}")
    Di, Hi, Wi = x.shape[2:]
    full = tuple((n - 1) * s[ax] + k[ax] for ax, n in enumerate((Di, Hi, Wi)))
    out_sp = tuple(full[ax] - 2 * p[ax] + op[ax] for ax in range(3))
    buf_sp = tuple(max(full[ax], p[ax] + out_sp[ax]) for ax in range(3))
    N = Di * Hi * Wi
    xr = x.data.reshape(B, C, N).transpose(0, 2, 1)  # (B,N,Cin)
    Wm = kernel.data.reshape(Cin, -1)  # (Cin, Cout*k3)
    cols = (xr @ Wm).reshape(B, Di, Hi, Wi, Cout, *k)
    buf = _scatter_windows(cols, (B, Cout) + buf_sp, k, s)
    out_data = np.ascontiguousarray(
        buf[:, :, p[0]: p[0] + out_sp[0], p[1]: p[1] + out_sp[1], p[2]: p[2] + out_sp[2]])
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, Cout, 1, 1, 1)

    def backward(g):
        gbuf = np.zeros((B, Cout) + buf_sp, dtype=g.dtype)
        gbuf[:, :, p[0]: p[0] + out_sp[0], p[1]: p[1] + out_sp[1],
             p[2]: p[2] + out_sp[2]] = g
        gcols = _patches(gbuf, k, s).reshape(B, N, -1)  # (B,N,Cout*k3)
        if x.requires_grad:
            gx = (gcols @ Wm.T).transpose(0, 2, 1).reshape(x.shape)
            _add_grad(x, np.ascontiguousarray(gx))
        if kernel.requires_grad:
            gW = np.einsum("bnf,bnk->fk", xr, gcols)
            _add_grad(kernel, gW.reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            _add_grad(bias, g.sum(axis=(0, 2, 3, 4)))

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._make(out_data, parents, backward)


def avg_pool3d(x, kernel, stride=None, padding=0):
    """Average pooling; padded positions are excluded from the mean."""
    k = _triple(kernel)
    s = _triple(stride) if stride is not None else k
    p = _triple(padding)
    xp = _pad5(x.data, p)
    cols = _patches(xp, k, s)  # (B,Do,Ho,Wo,C,kd,kh,kw)
    ones = np.ones((1, 1) + x.shape[2:], dtype=x.dtype)
    counts = _patches(_pad5(ones, p), k, s).sum(axis=(-3, -2, -1))  # (1,Do,Ho,Wo,1)
    out = cols.sum(axis=(-3, -2, -1)) / counts
    out_data = np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))

    def backward(g):
        gw = (g.transpose(0, 2, 3, 4, 1) / counts)[..., None, None, None]
        gcols = np.broadcast_to(gw, cols.shape)
        gxp = _scatter_windows(np.ascontiguousarray(gcols), xp.shape, k, s)
        if p != (0, 0, 0):
            gxp = gxp[:, :, p[0]: gxp.shape[2] - p[0],
                      p[1]: gxp.shape[3] - p[1], p[2]: gxp.shape[4] - p[2]]
        _add_grad(x, np.ascontiguousarray(gxp))

    return Tensor._make(out_data, (x,), backward)


def max_pool3d(x, kernel, stride=None):
    """Max pooling; gradient routes to the first-occurring maximum per window."""
    k = _triple(kernel)
    s = _triple(stride) if stride is not None else k
    cols = _patches(x.data, k, s)  # (B,Do,Ho,Wo,C,kd,kh,kw)
    B, Do, Ho, Wo, C = cols.shape[:5]
    flat = cols.reshape(B, Do, Ho, Wo, C, -1)
    idx = flat.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out_data = np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))

    def backward(g):
        ki, kj, kk = np.unravel_index(idx, k)
        b, do, ho, wo, c = np.indices(idx.shape, sparse=True)
        dd = do * s[0] + ki
        hh = ho * s[1] + kj
        ww = wo * s[2] + kk
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(gx, (b, c, dd, hh, ww), g.transpose(0, 2, 3, 4, 1))
        _add_grad(x, gx)

    return Tensor._make(out_data, (x,), backward)


def spatial_dropout(x, rate, rng=None, training=True):
    """Zero whole channels with probability `rate`; identity at inference."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout requires an rng")
    B, C = x.shape[:2]
    keep = (rng.random((B, C)) >= rate).astype(x.dtype) / (1.0 - rate)
    mask = keep.reshape((B, C) + (1,) * (x.ndim - 2))

    def backward(g):
        _add_grad(x, g * mask)

    return Tensor._make(x.data * mask, (x,), backward)

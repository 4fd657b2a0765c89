"""Reverse-mode automatic differentiation on numpy arrays.

Supports exactly the operation set the model architectures need: matmul,
elementwise arithmetic, concat/reshape/narrow, same-padded 2-D convolution,
spatial pooling, the usual nonlinearities, cross-entropy from logits,
dropout, embedding lookup, an LSTM cell, and straight-through
Gumbel-Softmax sampling.  No broadcasting beyond bias addition.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "Parameter", "AutodiffError", "ShapeError", "no_grad",
    "add", "sub", "mul", "neg", "matmul", "concat", "reshape", "narrow",
    "tsum", "tmean", "square", "relu", "sigmoid", "tanh", "softmax",
    "log_softmax", "cross_entropy_from_logits", "dropout", "embedding",
    "conv2d_same", "mean_pool_spatial", "max_pool_spatial", "lstm_step",
    "gumbel_softmax_st", "constant", "broadcast_spatial",
    "masked_cross_entropy_sum",
]


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    """Raised when operand shapes do not conform for an op."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {list(shapes)}")


# When True, every op output is checked for NaN/Inf.  Slow; meant for tests
# and debugging, not training loops (training checks the loss scalar only).
CHECK_FINITE = False

_grad_enabled = True


class no_grad:
    """Context manager disabling graph recording (eval-time speedup)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        """Backpropagate from a scalar; accumulates into .grad additively."""
        if self.data.size != 1:
            raise AutodiffError(
                f"backward requires a scalar loss, got shape {self.data.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        return self


class Parameter(Tensor):
    """A named, trainable tensor."""

    __slots__ = ("name",)

    def __init__(self, data, name, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data, dtype=None):
    return Tensor(data, requires_grad=False, dtype=dtype)


def _make(data, parents, backward_fn, op_name):
    """Wrap an op result, recording the backward closure if needed."""
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise AutodiffError(f"{op_name}: non-finite values in forward output")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Reduce gradient g down to `shape` (bias-style trailing broadcast)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), backward, "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(data, (a, b), backward, "sub")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape)

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward, "mul")


def neg(a):
    a = _as_tensor(a)

    def backward(g):
        _accum(a, -g)

    return _make(-a.data, (a,), backward, "neg")


def square(a):
    a = _as_tensor(a)

    def backward(g):
        _accum(a, 2.0 * a.data * g)

    return _make(a.data * a.data, (a,), backward, "square")


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(data, (a, b), backward, "matmul")


def bmm(a, b):
    """Batched matmul: (B, T, K) @ (B, K, M) -> (B, T, M)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[0] != b.shape[0] \
            or a.shape[2] != b.shape[1]:
        raise ShapeError("bmm", a.shape, b.shape)
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ b.data.transpose(0, 2, 1))
        if b.requires_grad:
            _accum(b, a.data.transpose(0, 2, 1) @ g)

    return _make(data, (a, b), backward, "bmm")


def tsum(a):
    a = _as_tensor(a)

    def backward(g):
        _accum(a, np.broadcast_to(g, a.shape).astype(a.dtype, copy=True))

    return _make(a.data.sum(keepdims=False), (a,), backward, "sum")


def tmean(a):
    a = _as_tensor(a)
    n = a.data.size

    def backward(g):
        _accum(a, np.full(a.shape, float(g) / n, dtype=a.dtype))

    return _make(a.data.mean(), (a,), backward, "mean")


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape):
    a = _as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape))

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _make(data, (a,), backward, "reshape")


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors])
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make(data, tuple(tensors), backward, "concat")


def narrow(a, axis, start, length):
    """Slice `length` entries along `axis` starting at `start`."""
    a = _as_tensor(a)
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError("narrow", a.shape, (axis, start, length))
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        full[idx] = g
        _accum(a, full)

    return _make(a.data[idx].copy(), (a,), backward, "narrow")


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a):
    a = _as_tensor(a)
    data = np.maximum(a.data, 0)

    def backward(g):
        _accum(a, g * (a.data > 0))

    return _make(data, (a,), backward, "relu")


def sigmoid(a):
    a = _as_tensor(a)
    data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        _accum(a, g * data * (1.0 - data))

    return _make(data, (a,), backward, "sigmoid")


def tanh(a):
    a = _as_tensor(a)
    data = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - data * data))

    return _make(data, (a,), backward, "tanh")


def _softmax_np(x):
    m = x - x.max(axis=-1, keepdims=True)
    e = np.exp(m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a):
    a = _as_tensor(a)
    data = _softmax_np(a.data)

    def backward(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        _accum(a, data * (g - dot))

    return _make(data, (a,), backward, "softmax")


def log_softmax(a):
    a = _as_tensor(a)
    m = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(m).sum(axis=-1, keepdims=True))
    data = m - lse
    sm = np.exp(data)

    def backward(g):
        _accum(a, g - sm * g.sum(axis=-1, keepdims=True))

    return _make(data, (a,), backward, "log_softmax")


def cross_entropy_from_logits(logits, targets):
    """Mean NLL of integer `targets` under softmax(logits).

    logits: (..., K); targets: integer array of the leading shape.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError("cross_entropy_from_logits", logits.shape, targets.shape)
    m = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(m).sum(axis=-1, keepdims=True))
    logp = m - lse
    flat_lp = logp.reshape(-1, logp.shape[-1])
    flat_t = targets.reshape(-1)
    picked = flat_lp[np.arange(flat_t.size), flat_t]
    n = flat_t.size
    data = np.asarray(-picked.mean(), dtype=logits.dtype)
    sm = np.exp(flat_lp)

    def backward(g):
        d = sm.copy()
        d[np.arange(flat_t.size), flat_t] -= 1.0
        d *= float(g) / n
        _accum(logits, d.reshape(logits.shape))

    return _make(data, (logits,), backward, "cross_entropy_from_logits")


def broadcast_spatial(a, h, w):
    """Tile a (B, F) tensor to every position of a (B, h, w, F) map."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("broadcast_spatial", a.shape)
    B, F = a.shape
    data = np.broadcast_to(a.data[:, None, None, :], (B, h, w, F)).copy()

    def backward(g):
        _accum(a, g.sum(axis=(1, 2)))

    return _make(data, (a,), backward, "broadcast_spatial")


def masked_cross_entropy_sum(logits, targets, mask):
    """Sum over rows of mask * NLL(targets | softmax(logits)).

    logits: (B, K); targets: (B,) ints; mask: (B,) floats in {0, 1}.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=logits.dtype)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],) \
            or mask.shape != (logits.shape[0],):
        raise ShapeError("masked_cross_entropy_sum",
                         logits.shape, targets.shape, mask.shape)
    m = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(m).sum(axis=-1, keepdims=True))
    logp = m - lse
    rows = np.arange(targets.size)
    data = np.asarray(-(logp[rows, targets] * mask).sum(), dtype=logits.dtype)
    sm = np.exp(logp)

    def backward(g):
        d = sm * mask[:, None]
        d[rows, targets] -= mask
        _accum(logits, d * float(g))

    return _make(data, (logits,), backward, "masked_cross_entropy_sum")


def dropout(a, p, train, rng):
    """Inverted dropout; identity when train is False.  p in [0, 1)."""
    a = _as_tensor(a)
    if not 0.0 <= p < 1.0:
        raise AutodiffError(f"dropout: p must be in [0,1), got {p}")
    if not train or p == 0.0:
        def backward_id(g):
            _accum(a, g)
        return _make(a.data, (a,), backward_id, "dropout")
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    mask = mask.astype(a.dtype)

    def backward(g):
        _accum(a, g * mask)

    return _make(a.data * mask, (a,), backward, "dropout")


def embedding(table, ids):
    """Lookup rows of `table` (V, D) by integer array `ids`."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError("embedding", table.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise AutodiffError(
            f"embedding: index out of range for table of {table.shape[0]} rows")
    data = table.data[ids]

    def backward(g):
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids.reshape(-1),
                  g.reshape(-1, table.shape[1]))

    return _make(data, (table,), backward, "embedding")


# ---------------------------------------------------------------------------
# convolution / pooling


def conv2d_same(x, w, b=None):
    """2-D convolution with stride 1 and zero-padded same output size.

    x: (B, H, W, Cin); w: (kh, kw, Cin, Cout); b: (Cout,) optional.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError("conv2d_same", x.shape, w.shape)
    B, H, W, Cin = x.shape
    kh, kw, _, Cout = w.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # win: (B, H, W, Cin, kh, kw) -> (B*H*W, kh*kw*Cin)
    col = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * H * W, kh * kw * Cin)
    wmat = w.data.reshape(kh * kw * Cin, Cout)
    out = col @ wmat
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (Cout,):
            raise ShapeError("conv2d_same(bias)", b.shape, (Cout,))
        out = out + b.data
    data = out.reshape(B, H, W, Cout)

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gf = g.reshape(B * H * W, Cout)
        if w.requires_grad:
            _accum(w, (col.T @ gf).reshape(w.shape))
        if b is not None and b.requires_grad:
            _accum(b, gf.sum(axis=0))
        if x.requires_grad:
            dcol = (gf @ wmat.T).reshape(B, H, W, kh, kw, Cin)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + H, j:j + W, :] += dcol[:, :, :, i, j, :]
            _accum(x, dxp[:, ph:ph + H, pw:pw + W, :])

    return _make(data, parents, backward, "conv2d_same")


def mean_pool_spatial(x):
    """(B, H, W, C) -> (B, C), averaging over H and W."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("mean_pool_spatial", x.shape)
    B, H, W, C = x.shape
    data = x.data.mean(axis=(1, 2))

    def backward(g):
        _accum(x, np.broadcast_to(
            g[:, None, None, :] / (H * W), x.shape).astype(x.dtype, copy=True))

    return _make(data, (x,), backward, "mean_pool_spatial")


def max_pool_spatial(x):
    """(B, H, W, C) -> (B, C), max over H and W."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("max_pool_spatial", x.shape)
    B, H, W, C = x.shape
    flat = x.data.reshape(B, H * W, C)
    arg = flat.argmax(axis=1)  # (B, C)
    data = np.take_along_axis(flat, arg[:, None, :], axis=1)[:, 0, :]

    def backward(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, arg[:, None, :], g[:, None, :], axis=1)
        _accum(x, dflat.reshape(x.shape))

    return _make(data, (x,), backward, "max_pool_spatial")


# ---------------------------------------------------------------------------
# recurrent cell


def lstm_step(x, h, c, wx, wh, b):
    """One LSTM cell step.

    x: (B, I); h, c: (B, H); wx: (I, 4H); wh: (H, 4H); b: (4H,).
    Gate layout along the last axis: input, forget, candidate, output.
    Returns (h_next, c_next).
    """
    hid = h.shape[-1]
    if wx.shape[1] != 4 * hid or wh.shape != (hid, 4 * hid):
        raise ShapeError("lstm_step", x.shape, h.shape, wx.shape, wh.shape)
    z = add(add(matmul(x, wx), matmul(h, wh)), b)
    i = sigmoid(narrow(z, 1, 0, hid))
    f = sigmoid(narrow(z, 1, hid, hid))
    g = tanh(narrow(z, 1, 2 * hid, hid))
    o = sigmoid(narrow(z, 1, 3 * hid, hid))
    c_next = add(mul(f, c), mul(i, g))
    h_next = mul(o, tanh(c_next))
    return h_next, c_next


# ---------------------------------------------------------------------------
# straight-through Gumbel-Softmax


def sample_gumbel(rng, shape, dtype=np.float64):
    u = rng.random(shape)
    return (-np.log(-np.log(u + 1e-20) + 1e-20)).astype(dtype)


def gumbel_softmax_st(logits, rng=None, noise_override=None):
    """Straight-through Gumbel-Softmax with temperature 1.

    logits: (..., k).  Forward output is the exact one-hot argmax of
    logits + Gumbel noise; the backward pass differentiates the soft value
    softmax(logits + noise) instead.
    """
    logits = _as_tensor(logits)
    k = logits.shape[-1]
    if k < 2:
        raise AutodiffError(f"gumbel_softmax_st: need k >= 2, got k={k}")
    if noise_override is not None:
        noise = np.asarray(noise_override, dtype=logits.dtype)
        if noise.shape != logits.shape:
            raise ShapeError("gumbel_softmax_st(noise)", logits.shape, noise.shape)
    else:
        noise = sample_gumbel(rng, logits.shape, logits.dtype)
    perturbed = logits.data + noise
    soft = _softmax_np(perturbed)
    hard = np.zeros_like(soft)
    flat = hard.reshape(-1, k)
    flat[np.arange(flat.shape[0]), perturbed.reshape(-1, k).argmax(axis=1)] = 1.0

    def backward(g):
        # gradient of the soft relaxation softmax(logits + noise)
        dot = (g * soft).sum(axis=-1, keepdims=True)
        _accum(logits, soft * (g - dot))

    return _make(hard, (logits,), backward, "gumbel_softmax_st")

"""Dense tensors with reverse-mode autodiff on a recording tape.

Forward ops append (output, inputs, backward_fn) entries to a thread-local
tape; ``backward`` replays the tape in exact reverse recording order.
Training paths run in float32; gradient-check paths build float64 tensors.
"""

import math
import threading

import numpy as np


class DimensionError(ValueError):
    """Shapes incompatible with an operation's contract."""


class ContractError(RuntimeError):
    """An operation was called outside its contract (not a shape issue)."""


_state = threading.local()


def _tls():
    if not hasattr(_state, "tape"):
        _state.tape = []
        _state.grad_enabled = True
        _state.nan_checks = False
    return _state


class no_grad:
    """Context manager: disable tape recording (inference / oracle evals)."""

    def __enter__(self):
        s = _tls()
        self._prev = s.grad_enabled
        s.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _tls().grad_enabled = self._prev
        return False


def set_nan_checks(flag):
    """Validate that every op output is finite (slow; used by check suites)."""
    _tls().nan_checks = bool(flag)


class Tensor:
    """A dense n-d float array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return "Tensor(shape=%s, dtype=%s, requires_grad=%s)" % (
            tuple(self.shape), self.data.dtype.name, self.requires_grad)


def param(shape, rng, scale=None, dtype=np.float32):
    """He-style initialized trainable tensor. fan_in = product of trailing dims."""
    shape = tuple(shape)
    if scale is None:
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
        scale = math.sqrt(2.0 / max(1, fan_in))
    data = rng.standard_normal(shape) * scale
    return Tensor(data.astype(dtype), requires_grad=True)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _from_op(data, inputs, backward_fn):
    s = _tls()
    if s.nan_checks and not np.all(np.isfinite(data)):
        raise ContractError("non-finite values produced by a forward op")
    req = s.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req)
    if req:
        s.tape.append((out, inputs, backward_fn))
    return out


def _unbroadcast(g, shape):
    # inverse of numpy broadcasting: sum out expanded axes
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss):
    """Populate grads of every tensor the scalar ``loss`` depends on.

    Traverses the tape in exact reverse recording order, then clears it.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractError("backward requires a scalar tensor")
    tape = _tls().tape
    loss.grad = np.ones_like(loss.data)
    for out, inputs, fn in reversed(tape):
        if out.grad is None:
            continue
        grads = fn(out.grad)
        donated = []
        for t, g in zip(inputs, grads):
            if g is None or not t.requires_grad:
                continue
            g = _unbroadcast(g, t.data.shape)
            if t.grad is None:
                # backward fns may hand back views or one shared buffer for
                # several inputs; only adopt a buffer once, copy otherwise
                if g.base is not None or g.dtype != t.dtype or any(g is d for d in donated):
                    t.grad = g.copy().astype(t.dtype, copy=False)
                else:
                    t.grad = g
                    donated.append(g)
            else:
                t.grad += g
        out.grad = None if out is not loss else out.grad
    tape.clear()


def clear_tape():
    _tls().tape.clear()


# ---------------------------------------------------------------------------
# elementwise ops (broadcasting per numpy rules)

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise DimensionError(str(e)) from None
    return _from_op(data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    try:
        data = a.data - b.data
    except ValueError as e:
        raise DimensionError(str(e)) from None
    return _from_op(data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise DimensionError(str(e)) from None
    return _from_op(data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x, s):
    s = float(s)
    return _from_op(x.data * s, (x,), lambda g: (g * s,))


def relu(x):
    # subgradient at 0 routed to 0
    return _from_op(np.maximum(x.data, 0), (x,),
                    lambda g: (g * (x.data > 0),))


def sigmoid(x):
    y = 1.0 / (1.0 + np.exp(-x.data))
    return _from_op(y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x):
    y = np.exp(x.data)
    return _from_op(y, (x,), lambda g: (g * y,))


# ---------------------------------------------------------------------------
# shape ops

def reshape(x, shape):
    old = x.data.shape
    return _from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose2d(x):
    if x.ndim != 2:
        raise DimensionError("transpose2d expects a 2-d tensor")
    return _from_op(x.data.T.copy(), (x,), lambda g: (g.T,))


def concat(tensors, axis=0):
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _from_op(data, tuple(tensors), bwd)


def index_axis(x, axis, index):
    """Select one slice along ``axis`` (the axis is dropped)."""
    sel = [slice(None)] * x.ndim
    sel[axis] = index
    sel = tuple(sel)
    shape = x.data.shape

    def bwd(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[sel] = g
        return (out,)

    return _from_op(x.data[sel].copy(), (x,), bwd)


def slice_axis(x, axis, start, stop):
    sel = [slice(None)] * x.ndim
    sel[axis] = slice(start, stop)
    sel = tuple(sel)
    shape = x.data.shape

    def bwd(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[sel] = g
        return (out,)

    return _from_op(x.data[sel].copy(), (x,), bwd)


def take_rows(table, idx):
    """Gather rows of a 2-d table: out[..., :] = table[idx[...], :]."""
    idx = np.asarray(idx)
    data = table.data[idx]
    vocab, dim = table.data.shape

    def bwd(g):
        gt = np.zeros((vocab, dim), dtype=g.dtype)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, dim))
        return (gt,)

    return _from_op(data, (table,), bwd)


def sum_all(x):
    shape = x.data.shape
    return _from_op(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                    lambda g: (np.broadcast_to(g, shape).astype(x.dtype),))


def mean_all(x):
    n = x.data.size
    shape = x.data.shape
    return _from_op(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                    lambda g: ((np.broadcast_to(g, shape) / n).astype(x.dtype),))


# ---------------------------------------------------------------------------
# matmul

def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul expects [M,K] @ [K,N], got %s @ %s"
                             % (a.shape, b.shape))
    data = a.data @ b.data

    def bwd(g):
        return (g @ b.data.T, a.data.T @ g)

    return _from_op(data, (a, b), bwd)


# ---------------------------------------------------------------------------
# convolution

def _conv_geometry(x, w, dilation, stride):
    if x.ndim == 3:
        xd = x.data[None]
        squeeze = True
    elif x.ndim == 4:
        xd = x.data
        squeeze = False
    else:
        raise DimensionError("conv2d input must be [C,H,W] or [N,C,H,W]")
    if w.ndim != 4:
        raise DimensionError("conv2d weight must be [C_out,C_in,k,k]")
    c_out, c_in, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise DimensionError("conv2d kernel must be square with odd side")
    if dilation < 1 or stride < 1:
        raise DimensionError("dilation and stride must be >= 1")
    if xd.shape[1] != c_in:
        raise DimensionError("conv2d channel mismatch: input %d, weight %d"
                             % (xd.shape[1], c_in))
    pad = dilation * (k // 2)
    n, _, h, wd_ = xd.shape
    h_out = (h + 2 * pad - dilation * (k - 1) - 1) // stride + 1
    w_out = (wd_ + 2 * pad - dilation * (k - 1) - 1) // stride + 1
    return xd, squeeze, (n, c_out, c_in, k, pad, h, wd_, h_out, w_out)


def _im2col(xp, k, dilation, stride, h_out, w_out):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, h_out, w_out), dtype=xp.dtype)
    for p in range(k):
        for q in range(k):
            cols[:, :, p, q] = xp[
                :, :,
                p * dilation: p * dilation + (h_out - 1) * stride + 1: stride,
                q * dilation: q * dilation + (w_out - 1) * stride + 1: stride]
    return cols


def conv2d(x, w, dilation=1, stride=1, bias=None):
    """2-d convolution, zero padded so stride-1 output preserves H, W.

    Accepts [C,H,W] or batched [N,C,H,W] input; weight is [C_out,C_in,k,k].
    ``bias``, when given, is a [C_out] tensor added per output channel.
    """
    xd, squeeze, geo = _conv_geometry(x, w, dilation, stride)
    n, c_out, c_in, k, pad, h, w_in, h_out, w_out = geo
    w2 = w.data.reshape(c_out, c_in * k * k)

    if k == 1 and stride == 1:
        cols = xd.reshape(n, c_in, h * w_in)
        pads = None
    else:
        if pad:
            xp = np.zeros((n, c_in, h + 2 * pad, w_in + 2 * pad), dtype=xd.dtype)
            xp[:, :, pad:pad + h, pad:pad + w_in] = xd
        else:
            xp = xd
        cols6 = _im2col(xp, k, dilation, stride, h_out, w_out)
        cols = cols6.reshape(n, c_in * k * k, h_out * w_out)
        pads = xp.shape
    y = (w2 @ cols).reshape(n, c_out, h_out, w_out)
    if bias is not None:
        y += bias.data.reshape(1, c_out, 1, 1)

    def bwd(g):
        gf = np.ascontiguousarray(g.reshape(n, c_out, h_out * w_out))
        grad_w = np.matmul(gf, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        grad_cols = np.matmul(w2.T, gf)
        if k == 1 and stride == 1:
            grad_x = grad_cols.reshape(n, c_in, h, w_in)
        else:
            gc6 = grad_cols.reshape(n, c_in, k, k, h_out, w_out)
            gxp = np.zeros(pads, dtype=g.dtype)
            for p in range(k):
                for q in range(k):
                    gxp[:, :,
                        p * dilation: p * dilation + (h_out - 1) * stride + 1: stride,
                        q * dilation: q * dilation + (w_out - 1) * stride + 1: stride
                        ] += gc6[:, :, p, q]
            grad_x = gxp[:, :, pad:pad + h, pad:pad + w_in] if pad else gxp
        if squeeze:
            grad_x = grad_x[0]
        if bias is None:
            return (grad_x, grad_w)
        return (grad_x, grad_w, gf.sum(axis=(0, 2)))

    inputs = (x, w) if bias is None else (x, w, bias)
    return _from_op(y[0] if squeeze else y, inputs, bwd)


# ---------------------------------------------------------------------------
# resampling

_LERP_CACHE = {}


def _lerp_matrix(h_out, h_in, dtype):
    # align-corners-false bilinear weights, one row per output position
    key = (h_out, h_in, np.dtype(dtype).str)
    hit = _LERP_CACHE.get(key)
    if hit is not None:
        return hit
    m = np.zeros((h_out, h_in), dtype=dtype)
    src = (np.arange(h_out) + 0.5) * (h_in / h_out) - 0.5
    a0 = np.floor(src).astype(int)
    frac = src - a0
    lo = np.clip(a0, 0, h_in - 1)
    hi = np.clip(a0 + 1, 0, h_in - 1)
    m[np.arange(h_out), lo] += 1.0 - frac
    m[np.arange(h_out), hi] += frac
    _LERP_CACHE[key] = m
    return m


def bilinear_upsample(x, h_out, w_out):
    """Bilinear resize to (h_out, w_out); integer scale factors required."""
    h, w = x.data.shape[-2:]
    if h_out % h or w_out % w:
        raise DimensionError("upsample target must be an integer multiple")
    u = _lerp_matrix(h_out, h, x.data.dtype)
    v = _lerp_matrix(w_out, w, x.data.dtype)
    y = np.matmul(np.matmul(u, x.data), v.T)

    def bwd(g):
        return (np.matmul(np.matmul(u.T, g), v),)

    return _from_op(y, (x,), bwd)


def max_downsample(x, h_out, w_out):
    """Max over each (H/h_out)x(W/w_out) window; ties pick the first cell
    in window row-major order."""
    h, w = x.data.shape[-2:]
    if h % h_out or w % w_out:
        raise DimensionError("downsample window must divide the input")
    f1, f2 = h // h_out, w // w_out
    lead = x.data.shape[:-2]
    xr = x.data.reshape(lead + (h_out, f1, w_out, f2))
    xr = np.moveaxis(xr, -3, -2).reshape(lead + (h_out, w_out, f1 * f2))
    arg = xr.argmax(axis=-1)
    y = np.take_along_axis(xr, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        gw = np.zeros(lead + (h_out, w_out, f1 * f2), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gw = gw.reshape(lead + (h_out, w_out, f1, f2))
        gw = np.moveaxis(gw, -2, -3).reshape(lead + (h, w))
        return (gw,)

    return _from_op(y, (x,), bwd)


# ---------------------------------------------------------------------------
# losses

def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _from_op(y, (x,), bwd)


def softmax_ce(logits, target_index):
    """Cross-entropy of a 1-d logit vector against one target index."""
    if logits.ndim != 1:
        raise DimensionError("softmax_ce expects a 1-d logit vector")
    n = logits.shape[0]
    if not 0 <= target_index < n:
        raise ContractError("target index %d out of range [0,%d)" % (target_index, n))
    z = logits.data - logits.data.max()
    lse = math.log(np.exp(z).sum())
    ce = lse - z[target_index]
    p = np.exp(z - lse)

    def bwd(g):
        gl = p.copy()
        gl[target_index] -= 1.0
        return (gl * g,)

    return _from_op(np.asarray(ce, dtype=logits.dtype), (logits,), bwd)


def softmax_ce_rows(logits, targets):
    """Mean cross-entropy over rows of [B, N] logits with per-row targets."""
    if logits.ndim != 2:
        raise DimensionError("softmax_ce_rows expects [B, N] logits")
    targets = np.asarray(targets, dtype=np.int64)
    b, n = logits.shape
    if targets.shape != (b,) or targets.min() < 0 or targets.max() >= n:
        raise ContractError("targets must be B indices in [0, N)")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    ce = (lse - z[np.arange(b), targets]).mean()
    p = np.exp(z - lse[:, None])

    def bwd(g):
        gl = p.copy()
        gl[np.arange(b), targets] -= 1.0
        return (gl * (g / b),)

    return _from_op(np.asarray(ce, dtype=logits.dtype), (logits,), bwd)


def mse(pred, target):
    t = _as_tensor(target, like=pred)
    if pred.shape != t.shape:
        raise DimensionError("mse operands must share a shape")
    diff = pred.data - t.data
    n = diff.size

    def bwd(g):
        gd = (2.0 / n) * diff * g
        return (gd, -gd)

    return _from_op(np.asarray((diff * diff).mean(), dtype=pred.dtype),
                    (pred, t), bwd)


# ---------------------------------------------------------------------------
# optimization

def cosine_lr(base_lr, epoch, total_epochs):
    """Half-cosine decay from base_lr at epoch 0 to 0 at total_epochs."""
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


class Adam:
    """Adam with optional L2 weight decay folded into the gradient.

    beta1=0.9, beta2=0.999, eps=1e-8.
    """

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr=None):
        self.t += 1
        lr = self.lr if lr is None else lr
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


def adam_step(params, state, lr, weight_decay=0.0, t=None):
    """One functional Adam update; ``state`` is an Adam carrying m/v/t."""
    state.weight_decay = weight_decay
    if t is not None:
        state.t = t - 1
    state.step(lr=lr)
    return params


# ---------------------------------------------------------------------------
# verification

def finite_diff_check(f, x, eps=1e-4, coords=None, rng=None):
    """Max relative error of the tape gradient of scalar ``f`` at ``x``
    against central finite differences.

    Error per coordinate: |analytic - central| / max(1, |central|). When
    ``coords`` is given, only that many randomly chosen coordinates are
    probed (deterministic under ``rng``); default probes all of them.
    """
    if not x.requires_grad:
        raise ContractError("finite_diff_check input must require grad")
    x.data = np.ascontiguousarray(x.data)  # the probe writes through a view
    x.grad = None
    clear_tape()
    y = f(x)
    backward(y)
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    n = flat.size
    if coords is None or coords >= n:
        probe = np.arange(n)
    else:
        rng = rng or np.random.default_rng(0)
        probe = rng.choice(n, size=coords, replace=False)
    worst = 0.0
    with no_grad():
        for i in probe:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(x).item()
            flat[i] = orig - eps
            fm = f(x).item()
            flat[i] = orig
            central = (fp - fm) / (2.0 * eps)
            err = abs(analytic.reshape(-1)[i] - central) / max(1.0, abs(central))
            worst = max(worst, err)
    return worst

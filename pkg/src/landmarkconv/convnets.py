"""Point-based baseline operators and the brute-force oracles used to
verify the scan kernels.

The oracles here are deliberately naive (explicit membership sets,
explicit loops) and share no code with the linear-time scans.
"""

import numpy as np

from . import tensor as T
from .tensor import ContractError, DimensionError, Tensor


# ---------------------------------------------------------------------------
# oracles

def naive_conv2d(x, w, dilation=1, stride=1):
    """Triple-loop convolution oracle with zero padding (numpy-level)."""
    x = np.asarray(x)
    c_out, c_in, k, _ = w.shape
    h, wd = x.shape[-2:]
    half = k // 2
    pad = dilation * half
    h_out = (h + 2 * pad - dilation * (k - 1) - 1) // stride + 1
    w_out = (wd + 2 * pad - dilation * (k - 1) - 1) // stride + 1
    y = np.zeros((c_out, h_out, w_out), dtype=np.float64)
    for o in range(c_out):
        for i in range(h_out):
            for j in range(w_out):
                acc = 0.0
                for c in range(c_in):
                    for p in range(k):
                        for q in range(k):
                            a = i * stride - pad + p * dilation
                            b = j * stride - pad + q * dilation
                            if 0 <= a < h and 0 <= b < wd:
                                acc += w[o, c, p, q] * x[c, a, b]
                y[o, i, j] = acc
    return y.astype(x.dtype)


def region_membership(scheme, group, node, h, w):
    """Membership mask built from explicit coordinate predicates."""
    return scheme.group_mask(group, node, h, w)


def region_max_oracle(x, scheme, node, group):
    """Literal per-channel max over one group's membership set at ``node``."""
    if not 0 <= group < scheme.group_count:
        raise ContractError("group %d out of range" % group)
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    h, w = data.shape[-2:]
    mask = region_membership(scheme, group, node, h, w)
    return data[..., mask].max(axis=-1)


def region_max_map_oracle(x, scheme, group):
    """Oracle map for every node: per-node slice max (quadratic time).

    Independent of both the scans and the mask-based oracle above; the
    three are cross-checked in tests.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    h, w = data.shape[-2:]
    d = scheme.directions[group]
    out = np.empty_like(data)
    for i in range(h):
        rs = slice(0, i + 1) if d.row_step > 0 else slice(i, h)
        if d.mode == "column" or d.mode == "global":
            rs = slice(0, h)
        for j in range(w):
            cs = slice(0, j + 1) if d.col_step > 0 else slice(j, w)
            if d.mode == "row" or d.mode == "global":
                cs = slice(0, w)
            out[..., i, j] = data[..., rs, cs].max(axis=(-2, -1))
    return out


def naive_lfc_oracle(layer, x):
    """Direct evaluation of the landmark layer over explicit membership
    sets: embed, relu, per-node region max, 1x1 aggregate, residual."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    c, h, w = data.shape
    pooled = []
    for g, wg in enumerate(layer.embed_w):
        e = np.maximum(np.einsum("mc,chw->mhw", wg.data[:, :, 0, 0], data), 0)
        m = np.empty_like(e)
        for i in range(h):
            for j in range(w):
                mask = layer.scheme.group_mask(g, (i, j), h, w)
                m[:, i, j] = e[:, mask].max(axis=-1)
        pooled.append(m)
    cat = np.concatenate(pooled, axis=0)
    y = np.einsum("om,mhw->ohw", layer.agg_w.data[:, :, 0, 0], cat)
    if layer.residual:
        y = y + data
    return y


def naive_attention_oracle(layer, x):
    """Literal double loop over (query, key) node pairs."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    c, h, w = data.shape
    th = np.einsum("mc,chw->mhw", layer.theta_w.data[:, :, 0, 0], data).reshape(-1, h * w)
    ph = np.einsum("mc,chw->mhw", layer.phi_w.data[:, :, 0, 0], data).reshape(-1, h * w)
    gv = np.einsum("mc,chw->mhw", layer.g_w.data[:, :, 0, 0], data).reshape(-1, h * w)
    n = h * w
    y = np.zeros_like(gv)
    for v in range(n):
        logits = np.array([th[:, v] @ ph[:, u] for u in range(n)])
        e = np.exp(logits - logits.max())
        f = e / e.sum()
        for u in range(n):
            y[:, v] += f[u] * gv[:, u]
    out = np.einsum("om,mn->on", layer.out_w.data[:, :, 0, 0], y)
    return out.reshape(-1, h, w)


# ---------------------------------------------------------------------------
# baseline operators

class AttentionLayer:
    """Global dot-product attention over all map cells (embedded-Gaussian
    affinity, rows softmax-normalized); no positional encoding."""

    def __init__(self, c_in, c_mid, c_out, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.c_in, self.c_mid, self.c_out = c_in, c_mid, c_out
        self.theta_w = T.param((c_mid, c_in, 1, 1), rng, dtype=dtype)
        self.phi_w = T.param((c_mid, c_in, 1, 1), rng, dtype=dtype)
        self.g_w = T.param((c_mid, c_in, 1, 1), rng, dtype=dtype)
        self.out_w = T.param((c_out, c_mid, 1, 1), rng, dtype=dtype)

    def params(self, prefix=""):
        return {prefix + "theta.w": self.theta_w, prefix + "phi.w": self.phi_w,
                prefix + "g.w": self.g_w, prefix + "out.w": self.out_w}

    def forward(self, x):
        if x.ndim == 4:
            outs = [self.forward(T.index_axis(x, 0, n)) for n in range(x.shape[0])]
            return T.concat([T.reshape(o, (1,) + o.shape) for o in outs], axis=0)
        c, h, w = x.shape
        n = h * w
        th = T.reshape(T.conv2d(x, self.theta_w), (self.c_mid, n))
        ph = T.reshape(T.conv2d(x, self.phi_w), (self.c_mid, n))
        gv = T.reshape(T.conv2d(x, self.g_w), (self.c_mid, n))
        affinity = T.softmax(T.matmul(T.transpose2d(th), ph), axis=-1)
        mixed = T.matmul(gv, T.transpose2d(affinity))
        return T.conv2d(T.reshape(mixed, (self.c_mid, h, w)), self.out_w)


def global_attention_forward(layer, x):
    return layer.forward(x)


class PointwiseBlock:
    """relu(1x1 conv): per-cell mixing only, no spatial context."""

    def __init__(self, c_in, c_out, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.w = T.param((c_out, c_in, 1, 1), rng, dtype=dtype)

    def params(self, prefix=""):
        return {prefix + "w": self.w}

    def forward(self, x):
        return T.relu(T.conv2d(x, self.w))


class DilatedBlock:
    """relu(3x3 conv with dilation 3): sparse long-range taps."""

    def __init__(self, c_in, c_out, rng=None, dilation=3, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.dilation = dilation
        self.w = T.param((c_out, c_in, 3, 3), rng, dtype=dtype)

    def params(self, prefix=""):
        return {prefix + "w": self.w}

    def forward(self, x):
        return T.relu(T.conv2d(x, self.w, dilation=self.dilation))


def pointwise_block(x, w):
    return T.relu(T.conv2d(x, w))


def dilated_block(x, w, dilation=3):
    return T.relu(T.conv2d(x, w, dilation=dilation))

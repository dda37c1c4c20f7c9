"""Direction-aware running-max scans and the landmark feature convolution.

Every scan computes, for each map cell simultaneously, the max of an
embedded feature over a directional region anchored at that cell (a
half-plane, a quadrant, or the whole map), in one or two linear passes.
Regions are inclusive: a cell always belongs to each of its own regions,
so the recurrence for the (+1,+1) quadrant is
h[i,j] = max(x[i,j], h[i-1,j], h[i,j-1]).

Tie-breaking is deterministic: the first maximizer in the pass's
processing order wins (row-major along the scan direction for quadrant
and full-width scans, column-major for full-height scans).
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractError, DimensionError, Tensor

# cells visited by full-map scan passes / by lower-order bookkeeping passes
scan_cell_visits = 0
scan_aux_ops = 0

# test hook: when True the quadrant recurrence drops the cell's own value,
# i.e. h[i,j] = max(h[i-1,j], h[i,j-1]) with borders only seeded from x
_FAULT_DROP_SELF = False


def reset_scan_counters():
    global scan_cell_visits, scan_aux_ops
    scan_cell_visits = 0
    scan_aux_ops = 0


@dataclass(frozen=True)
class DmpDirection:
    """One scan direction: step signs plus region mode.

    mode: 'quadrant' (2-d rectangle toward (row_step,col_step) origin),
    'column' (full-height half-plane, col_step picks the side),
    'row' (full-width half-plane, row_step picks the side),
    'global' (whole map).
    """
    row_step: int = 1
    col_step: int = 1
    mode: str = "quadrant"


GLOBAL, HALVES_V, HALVES_H, QUADRANTS = "p1", "p2v", "p2h", "p4"

_SCHEME_DIRECTIONS = {
    GLOBAL: (DmpDirection(mode="global"),),
    HALVES_V: (DmpDirection(col_step=1, mode="column"),
               DmpDirection(col_step=-1, mode="column")),
    HALVES_H: (DmpDirection(row_step=1, mode="row"),
               DmpDirection(row_step=-1, mode="row")),
    QUADRANTS: (DmpDirection(1, 1), DmpDirection(1, -1),
                DmpDirection(-1, 1), DmpDirection(-1, -1)),
}


@dataclass(frozen=True)
class PartitionScheme:
    """How the map splits into direction groups relative to each cell."""
    kind: str

    def __post_init__(self):
        if self.kind not in _SCHEME_DIRECTIONS:
            raise ContractError("unknown partition scheme %r" % self.kind)

    @property
    def group_count(self):
        return len(_SCHEME_DIRECTIONS[self.kind])

    @property
    def directions(self):
        return _SCHEME_DIRECTIONS[self.kind]

    def group_mask(self, group, node, h, w):
        """Boolean [h, w] membership mask of ``group`` relative to ``node``."""
        d = self.directions[group]
        i, j = node
        rows = np.arange(h)[:, None]
        cols = np.arange(w)[None, :]
        ok = np.ones((h, w), dtype=bool)
        if d.mode in ("quadrant", "row"):
            ok &= (rows <= i) if d.row_step > 0 else (rows >= i)
        if d.mode in ("quadrant", "column"):
            ok &= (cols <= j) if d.col_step > 0 else (cols >= j)
        return ok


def _running_max(a, axis):
    """Prefix max along ``axis`` plus the source index (first max on ties)."""
    m = np.maximum.accumulate(a, axis=axis)
    prev = np.empty_like(m)
    lead = (slice(None),) * (axis % a.ndim)
    prev[lead + (0,)] = -np.inf
    prev[lead + (slice(1, None),)] = m[lead + (slice(0, -1),)]
    shape = [1] * a.ndim
    shape[axis] = a.shape[axis]
    idx = np.arange(a.shape[axis]).reshape(shape)
    src = np.maximum.accumulate(np.where(a > prev, idx, 0), axis=axis)
    return m, src


def _scan_quadrant(x):
    # horizontal prefix then vertical prefix; argmax composes to the first
    # maximizer of the inclusive rectangle in row-major order
    global scan_cell_visits
    m1, src_col = _running_max(x, axis=-1)
    if _FAULT_DROP_SELF:
        m1 = np.concatenate([x[..., :, :1], m1[..., :, :-1]], axis=-1)
    h, src_row = _running_max(m1, axis=-2)
    src_col = np.take_along_axis(src_col, src_row, axis=-2)
    scan_cell_visits += 2 * x.size
    return h, src_row, src_col


def _scan_column(x):
    # reduce over rows, then prefix across columns; broadcast to all rows
    global scan_cell_visits, scan_aux_ops
    src_row0 = x.argmax(axis=-2)
    colmax = np.take_along_axis(x, src_row0[..., None, :], axis=-2)[..., 0, :]
    m, src_col = _running_max(colmax, axis=-1)
    src_row = np.take_along_axis(src_row0, src_col, axis=-1)
    scan_cell_visits += x.size
    scan_aux_ops += colmax.size
    hgt = x.shape[-2]
    expand = lambda a: np.repeat(a[..., None, :], hgt, axis=-2)
    return expand(m), expand(src_row), expand(src_col)


def _scan_row(x):
    global scan_cell_visits, scan_aux_ops
    src_col0 = x.argmax(axis=-1)
    rowmax = np.take_along_axis(x, src_col0[..., None], axis=-1)[..., 0]
    m, src_row = _running_max(rowmax, axis=-1)
    src_col = np.take_along_axis(src_col0, src_row, axis=-1)
    scan_cell_visits += x.size
    scan_aux_ops += rowmax.size
    wid = x.shape[-1]
    expand = lambda a: np.repeat(a[..., :, None], wid, axis=-1)
    return expand(m), expand(src_row), expand(src_col)


def _scan_global(x):
    global scan_cell_visits
    h, w = x.shape[-2:]
    flat = x.reshape(x.shape[:-2] + (h * w,))
    arg = flat.argmax(axis=-1)
    val = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    scan_cell_visits += x.size
    full = lambda a: np.broadcast_to(a[..., None, None], x.shape).copy()
    return full(val), full(arg // w), full(arg % w)


def scan_max(x, direction):
    """Numpy-level directional running max over [..., H, W].

    Returns (h, src_row, src_col) where (src_row, src_col) index the
    maximizing source cell for every output cell.
    """
    x = np.asarray(x)
    if x.ndim < 2 or x.shape[-1] == 0 or x.shape[-2] == 0:
        raise DimensionError("scan input must be [..., H, W] with H,W >= 1")
    flip_r = direction.mode in ("quadrant", "row") and direction.row_step < 0
    flip_c = direction.mode in ("quadrant", "column") and direction.col_step < 0
    v = x
    if flip_r:
        v = v[..., ::-1, :]
    if flip_c:
        v = v[..., :, ::-1]
    if direction.mode == "quadrant":
        h, sr, sc = _scan_quadrant(v)
    elif direction.mode == "column":
        h, sr, sc = _scan_column(v)
    elif direction.mode == "row":
        h, sr, sc = _scan_row(v)
    elif direction.mode == "global":
        h, sr, sc = _scan_global(v)
    else:
        raise ContractError("unknown scan mode %r" % direction.mode)
    if flip_r:
        h, sr, sc = h[..., ::-1, :], x.shape[-2] - 1 - sr[..., ::-1, :], sc[..., ::-1, :]
    if flip_c:
        h, sr, sc = h[..., :, ::-1], sr[..., :, ::-1], x.shape[-1] - 1 - sc[..., :, ::-1]
    return np.ascontiguousarray(h), np.ascontiguousarray(sr), np.ascontiguousarray(sc)


def scatter_max_grad(grad_h, src_row, src_col):
    """Scatter-add grad_h into its argmax source cells (numpy-level)."""
    grad_h = np.asarray(grad_h)
    if grad_h.shape != src_row.shape:
        raise DimensionError("gradient and argmax shapes differ")
    h, w = grad_h.shape[-2:]
    nc = int(np.prod(grad_h.shape[:-2], dtype=np.int64)) if grad_h.ndim > 2 else 1
    chan = np.arange(nc, dtype=np.int64)[:, None]
    lin = (chan * h + src_row.reshape(nc, -1).astype(np.int64)) * w \
        + src_col.reshape(nc, -1).astype(np.int64)
    flat = np.bincount(lin.reshape(-1), weights=grad_h.reshape(-1),
                       minlength=nc * h * w)
    return flat.reshape(grad_h.shape).astype(grad_h.dtype)


def dmp_scan(x, direction, store_uint16=True):
    """Directional running max of a Tensor; returns (h, (src_row, src_col)).

    Backward routes each output cell's gradient to its recorded source.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    h, sr, sc = scan_max(data, direction)
    if store_uint16:
        sr16, sc16 = sr.astype(np.uint16), sc.astype(np.uint16)
    else:
        sr16, sc16 = sr, sc
    if not isinstance(x, Tensor):
        return Tensor(h), (sr16, sc16)

    def bwd(g):
        return (scatter_max_grad(g, sr, sc),)

    return T._from_op(h, (x,), bwd), (sr16, sc16)


def dmp_backward(grad_h, argmax):
    """Route output-cell gradients back to their argmax sources."""
    grad = grad_h.data if isinstance(grad_h, Tensor) else np.asarray(grad_h)
    out = scatter_max_grad(grad, argmax[0], argmax[1])
    return Tensor(out) if isinstance(grad_h, Tensor) else out


def dmp_scan_parallel(x, direction, workers=2):
    """Channel-sliced parallel scan; bitwise identical to the serial scan."""
    from concurrent.futures import ThreadPoolExecutor

    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.ndim < 3 or workers < 2:
        return scan_max(data, direction)
    chunks = np.array_split(np.arange(data.shape[0]), workers)
    chunks = [c for c in chunks if c.size]
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        parts = list(pool.map(lambda c: scan_max(data[c[0]:c[-1] + 1], direction),
                              chunks))
    h = np.concatenate([p[0] for p in parts], axis=0)
    sr = np.concatenate([p[1] for p in parts], axis=0)
    sc = np.concatenate([p[2] for p in parts], axis=0)
    return h, sr, sc


class LfcLayer:
    """Landmark feature convolution.

    Per group g: embed the input with a group-private 1x1 kernel, relu,
    run the group's directional scan, then aggregate the concatenated
    group maps with one 1x1 convolution. A residual skip from the input
    is added when channel counts permit.
    """

    def __init__(self, scheme, c_in, c_mid, c_out, rng=None, residual=True,
                 dtype=np.float32):
        if isinstance(scheme, str):
            scheme = PartitionScheme(scheme)
        rng = rng or np.random.default_rng(0)
        self.scheme = scheme
        self.c_in, self.c_mid, self.c_out = c_in, c_mid, c_out
        self.residual = residual and c_in == c_out
        k = scheme.group_count
        self.embed_w = [T.param((c_mid, c_in, 1, 1), rng, dtype=dtype)
                        for _ in range(k)]
        self.agg_w = T.param((c_out, k * c_mid, 1, 1), rng, dtype=dtype)
        self.argmax_store = None

    def params(self, prefix=""):
        out = {}
        for g, w in enumerate(self.embed_w):
            out["%sembed.g%d.w" % (prefix, g)] = w
        out["%sagg.w" % prefix] = self.agg_w
        return out

    def forward(self, x, store_argmax=False):
        if x.shape[-3] != self.c_in:
            raise DimensionError("expected %d input channels, got %d"
                                 % (self.c_in, x.shape[-3]))
        if store_argmax and x.ndim != 3:
            raise ContractError("argmax store requires an unbatched [C,H,W] input")
        store = [] if store_argmax else None
        pooled = []
        for w, direction in zip(self.embed_w, self.scheme.directions):
            e = T.relu(T.conv2d(x, w))
            m, argmax = dmp_scan(e, direction)
            pooled.append(m)
            if store is not None:
                store.append(argmax)
        y = T.conv2d(T.concat(pooled, axis=-3), self.agg_w)
        if self.residual:
            y = T.add(y, x)
        self.argmax_store = store
        return y


def lfc_forward(layer, x, store_argmax=False):
    return layer.forward(x, store_argmax=store_argmax)


def decode_landmarks(layer, node):
    """All per-channel argmax sources feeding ``node``'s output.

    Returns k*c_mid tuples (group, channel, row, col), reading the argmax
    store of the last unbatched forward.
    """
    if not layer.argmax_store:
        raise ContractError("forward must run with store_argmax enabled")
    i, j = node
    out = []
    for g, (sr, sc) in enumerate(layer.argmax_store):
        for c in range(sr.shape[0]):
            out.append((g, c, int(sr[c, i, j]), int(sc[c, i, j])))
    return out


def splat_heatmap(landmarks, h_img, w_img, stride, sigma_cells=1.0 / 3.0):
    """Sum of unit Gaussians at each landmark's image-space cell center,
    max-normalized to [0, 1]. sigma is given in feature cells."""
    if sigma_cells <= 0:
        raise ContractError("sigma_cells must be positive")
    heat = np.zeros((h_img, w_img), dtype=np.float64)
    if not landmarks:
        return Tensor(heat.astype(np.float32))
    sigma = sigma_cells * stride
    ys = (np.arange(h_img) + 0.5)[:, None]
    xs = (np.arange(w_img) + 0.5)[None, :]
    for entry in landmarks:
        row, col = entry[-2], entry[-1]
        cy, cx = (row + 0.5) * stride, (col + 0.5) * stride
        heat += np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2.0 * sigma * sigma))
    peak = heat.max()
    if peak > 0:
        heat /= peak
    return Tensor(heat.astype(np.float32))

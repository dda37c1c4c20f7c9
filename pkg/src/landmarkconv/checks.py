"""Self-contained verification suite: every oracle and invariant check,
runnable with no dataset and no network. Each check returns its max
observed error; a check passes when that error is within its tolerance.
"""

import os
import tempfile
from dataclasses import dataclass

import numpy as np

from . import checkpoint, convnets, landmark, net
from . import tensor as T
from .convnets import (AttentionLayer, DilatedBlock, PointwiseBlock,
                       naive_conv2d, region_max_map_oracle, region_max_oracle)
from .landmark import (LfcLayer, PartitionScheme, dmp_backward, dmp_scan,
                       scan_max)
from .tensor import Tensor

SCHEMES = ("p1", "p2v", "p2h", "p4")


def _rand_sizes(rng, n, max_side=12, max_chan=3):
    for _ in range(n):
        yield (int(rng.integers(1, max_chan + 1)),
               int(rng.integers(1, max_side + 1)),
               int(rng.integers(1, max_side + 1)))


def check_dmp_scan_vs_region_oracle():
    """Scan output equals the literal membership-set max at every node."""
    rng = np.random.default_rng(11)
    worst = 0.0
    for c, h, w in _rand_sizes(rng, 16):
        x = rng.standard_normal((c, h, w)).astype(np.float32)
        for kind in SCHEMES:
            scheme = PartitionScheme(kind)
            for g, d in enumerate(scheme.directions):
                got, _, _ = scan_max(x, d)
                ref = region_max_map_oracle(x, scheme, g)
                worst = max(worst, float(np.abs(got - ref).max()))
    return worst


def check_dmp_argmax_membership():
    """Every recorded argmax lies inside its group's membership set and
    carries the maximal value."""
    rng = np.random.default_rng(12)
    bad = 0
    for c, h, w in _rand_sizes(rng, 8, max_side=9):
        x = rng.standard_normal((c, h, w)).astype(np.float32)
        for kind in SCHEMES:
            scheme = PartitionScheme(kind)
            for g, d in enumerate(scheme.directions):
                got, sr, sc = scan_max(x, d)
                for i in range(h):
                    for j in range(w):
                        mask = scheme.group_mask(g, (i, j), h, w)
                        for ch in range(c):
                            r, cc = sr[ch, i, j], sc[ch, i, j]
                            if not mask[r, cc] or x[ch, r, cc] != got[ch, i, j]:
                                bad += 1
    return float(bad)


def check_conv2d_vs_naive():
    rng = np.random.default_rng(13)
    worst = 0.0
    for k, dil, stride in ((1, 1, 1), (3, 1, 1), (3, 2, 1), (3, 3, 1), (3, 1, 2)):
        x = rng.standard_normal((3, 7, 7)).astype(np.float64)
        w = rng.standard_normal((2, 3, k, k)).astype(np.float64)
        got = T.conv2d(Tensor(x), Tensor(w), dilation=dil, stride=stride).data
        ref = naive_conv2d(x, w, dilation=dil, stride=stride)
        worst = max(worst, float(np.abs(got - ref).max() / max(np.abs(ref).max(), 1)))
    # integer inputs, dilation 1: bitwise agreement
    xi = rng.integers(-4, 5, (2, 6, 6)).astype(np.float64)
    wi = rng.integers(-3, 4, (2, 2, 3, 3)).astype(np.float64)
    bit = T.conv2d(Tensor(xi), Tensor(wi)).data
    if not np.array_equal(bit, naive_conv2d(xi, wi)):
        worst = max(worst, 1.0)
    return worst


def check_matmul_vs_naive():
    rng = np.random.default_rng(14)
    a = rng.standard_normal((7, 5))
    b = rng.standard_normal((5, 3))
    ref = np.zeros((7, 3))
    for i in range(7):
        for j in range(3):
            for k in range(5):
                ref[i, j] += a[i, k] * b[k, j]
    got = T.matmul(Tensor(a), Tensor(b)).data
    return float(np.abs(got - ref).max() / np.abs(ref).max())


def check_resampling():
    rng = np.random.default_rng(15)
    worst = 0.0
    const = Tensor(np.full((2, 4, 4), 3.25, dtype=np.float32))
    up = T.bilinear_upsample(const, 8, 8).data
    worst = max(worst, float(np.abs(up - 3.25).max()))
    # odd scale factor: output cells aligned with source centers reproduce
    # the source exactly
    x = rng.standard_normal((2, 5, 4)).astype(np.float64)
    up3 = T.bilinear_upsample(Tensor(x), 15, 12).data
    worst = max(worst, float(np.abs(up3[:, 1::3, 1::3] - x).max()))
    x2 = rng.standard_normal((2, 6, 6)).astype(np.float32)
    down = T.max_downsample(Tensor(x2), 3, 3).data
    ref = np.empty_like(down)
    for i in range(3):
        for j in range(3):
            ref[:, i, j] = x2[:, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max(axis=(1, 2))
    worst = max(worst, float(np.abs(down - ref).max()))
    return worst


def check_softmax_ce_closed_form():
    rng = np.random.default_rng(16)
    logits = rng.standard_normal(9).astype(np.float64)
    got = T.softmax_ce(Tensor(logits), 4).item()
    ref = float(np.log(np.exp(logits).sum()) - logits[4])
    worst = abs(got - ref) / max(abs(ref), 1)
    uni = T.softmax_ce(Tensor(np.zeros(4)), 1).item()
    worst = max(worst, abs(uni - np.log(4.0)))
    return worst


def check_grad_core_ops():
    rng = np.random.default_rng(17)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    m = Tensor(rng.standard_normal((16, 4)), requires_grad=True)

    def f(x):
        y = T.relu(T.conv2d(x, w, dilation=2))
        z = T.matmul(T.reshape(y, (3, 16)), m)
        return T.sum_all(T.sigmoid(z))

    x = Tensor(rng.standard_normal((2, 4, 4)) + 0.1, requires_grad=True)
    worst = T.finite_diff_check(f, x, eps=1e-5)
    # finite_diff_check perturbs the probed tensor's buffer in place, so a
    # closure-captured weight can be probed with a constant re-evaluation
    worst = max(worst, T.finite_diff_check(lambda _: f(x), w, eps=1e-5))
    worst = max(worst, T.finite_diff_check(lambda _: f(x), m, eps=1e-5))
    return worst


def check_grad_lfc_all_schemes():
    rng = np.random.default_rng(18)
    worst = 0.0
    for kind in SCHEMES:
        layer = LfcLayer(kind, 3, 2, 3, rng=rng, dtype=np.float64)
        x = Tensor(rng.standard_normal((3, 5, 5)), requires_grad=True)
        err = T.finite_diff_check(lambda t: T.sum_all(layer.forward(t)), x,
                                  eps=1e-5)
        worst = max(worst, err)
    return worst


def check_grad_film():
    rng = np.random.default_rng(19)
    cw = Tensor(rng.standard_normal((3, 3, 1, 1)), requires_grad=True)
    cb = Tensor(np.zeros(3), requires_grad=True)
    x = Tensor(rng.standard_normal((3, 4, 4)), requires_grad=False)

    def f(lang):
        gamma = T.slice_axis(lang, 0, 0, 3)
        beta = T.slice_axis(lang, 0, 3, 6)
        return T.sum_all(net.film_fuse(x, gamma, beta, cw, cb))

    lang = Tensor(rng.standard_normal(6) + 1.0, requires_grad=True)
    return T.finite_diff_check(f, lang, eps=1e-5)


def check_grad_attention():
    rng = np.random.default_rng(20)
    layer = AttentionLayer(3, 2, 3, rng=rng, dtype=np.float64)
    x = Tensor(rng.standard_normal((3, 4, 4)), requires_grad=True)
    return T.finite_diff_check(lambda t: T.sum_all(layer.forward(t)), x,
                               eps=1e-5)


def check_grad_dilated():
    rng = np.random.default_rng(21)
    layer = DilatedBlock(3, 2, rng=rng, dtype=np.float64)
    x = Tensor(rng.standard_normal((3, 6, 6)) + 0.05, requires_grad=True)
    return T.finite_diff_check(lambda t: T.sum_all(layer.forward(t)), x,
                               eps=1e-5)


def check_dmp_flip_symmetry():
    rng = np.random.default_rng(22)
    worst = 0.0
    for _ in range(10):
        x = rng.standard_normal((2, 6, 7)).astype(np.float32)
        a, _, _ = scan_max(x[..., ::-1], landmark.DmpDirection(1, 1))
        b, _, _ = scan_max(x, landmark.DmpDirection(1, -1))
        worst = max(worst, float(np.abs(a - b[..., ::-1]).max()))
        a2, _, _ = scan_max(x[..., ::-1, :], landmark.DmpDirection(1, 1))
        b2, _, _ = scan_max(x, landmark.DmpDirection(-1, 1))
        worst = max(worst, float(np.abs(a2 - b2[..., ::-1, :]).max()))
    return worst


def check_dmp_idempotence_monotonicity():
    rng = np.random.default_rng(23)
    worst = 0.0
    for kind in SCHEMES:
        for d in PartitionScheme(kind).directions:
            x = rng.standard_normal((2, 6, 6)).astype(np.float32)
            h1, _, _ = scan_max(x, d)
            h2, _, _ = scan_max(h1, d)
            worst = max(worst, float(np.abs(h2 - h1).max()))
            hi, _, _ = scan_max(x + np.abs(rng.standard_normal(x.shape)).astype(np.float32), d)
            if not np.all(hi >= h1):
                worst = max(worst, 1.0)
    return worst


def check_dmp_gradient_conservation():
    rng = np.random.default_rng(24)
    worst = 0.0
    for kind in SCHEMES:
        for d in PartitionScheme(kind).directions:
            x = rng.standard_normal((3, 7, 5)).astype(np.float32)
            _, sr, sc = scan_max(x, d)
            g = rng.integers(-6, 7, x.shape).astype(np.float32)
            back = dmp_backward(g, (sr, sc))
            worst = max(worst, abs(float(back.sum()) - float(g.sum())))
    return worst


def check_attention_normalization():
    rng = np.random.default_rng(25)
    layer = AttentionLayer(3, 2, 3, rng=rng)
    x = Tensor(rng.standard_normal((3, 4, 4)).astype(np.float32))
    th = T.reshape(T.conv2d(x, layer.theta_w), (2, 16))
    ph = T.reshape(T.conv2d(x, layer.phi_w), (2, 16))
    aff = T.softmax(T.matmul(T.transpose2d(th), ph), axis=-1).data
    worst = float(np.abs(aff.sum(axis=1) - 1.0).max())
    # zeroed embeddings: attention degenerates to mean pooling of g(x)
    layer.theta_w.data[:] = 0
    layer.phi_w.data[:] = 0
    y = layer.forward(x).data
    gmap = T.conv2d(x, layer.g_w).data.reshape(2, -1).mean(axis=1)
    ref = np.einsum("om,m->o", layer.out_w.data[:, :, 0, 0], gmap)
    worst = max(worst, float(np.abs(y - ref[:, None, None]).max()))
    return worst


def check_pointwise_locality():
    rng = np.random.default_rng(26)
    layer = PointwiseBlock(4, 3, rng=rng)
    x = rng.standard_normal((4, 5, 5)).astype(np.float32)
    base = layer.forward(Tensor(x)).data.copy()
    x2 = x.copy()
    x2[:, 3, 4] += 2.5
    pert = layer.forward(Tensor(x2)).data
    delta = pert.copy()
    delta[:, 3, 4] = base[:, 3, 4]
    return float(np.abs(delta - base).max())


def check_lfc_global_degeneration():
    rng = np.random.default_rng(27)
    layer = LfcLayer("p1", 3, 4, 3, rng=rng)
    x = rng.standard_normal((3, 6, 6)).astype(np.float32)
    y = layer.forward(Tensor(x)).data
    e = np.maximum(np.einsum("mc,chw->mhw", layer.embed_w[0].data[:, :, 0, 0], x), 0)
    pooled = e.max(axis=(1, 2))
    ref = np.einsum("om,m->o", layer.agg_w.data[:, :, 0, 0], pooled)
    ref = np.broadcast_to(ref[:, None, None], y.shape) + x
    denom = max(float(np.abs(ref).max()), 1.0)
    return float(np.abs(y - ref).max()) / denom


def check_loss_shift_invariance():
    rng = np.random.default_rng(28)
    cfg = net.ModelConfig(c_v=8, backbone_widths=(4, 8, 8))
    grid = net.CandidateGrid(cfg)
    logits = [Tensor(rng.standard_normal((2, 15, 8, 8)).astype(np.float32)),
              Tensor(rng.standard_normal((2, 15, 4, 4)).astype(np.float32))]
    pos = np.array([3, grid.count - 5])
    gt_t = rng.standard_normal((2, 4)).astype(np.float32)
    base = net.loss(logits, pos, gt_t, cfg).item()
    shifted = []
    for lg in logits:
        d = lg.data.copy().reshape(2, 3, 5, lg.shape[-2], lg.shape[-1])
        d[:, :, 4] += 11.75
        shifted.append(Tensor(d.reshape(lg.shape)))
    moved = net.loss(shifted, pos, gt_t, cfg).item()
    return abs(moved - base)


def check_checkpoint_roundtrip():
    rng = np.random.default_rng(29)
    entries = {"a.w": rng.standard_normal((3, 2)).astype(np.float32),
               "b/deep.name": rng.standard_normal((2, 1, 4)).astype(np.float32),
               "scalarish": np.array([1.5], dtype=np.float32)}
    with tempfile.TemporaryDirectory() as td:
        p = os.path.join(td, "x.ckpt")
        checkpoint.save(entries, p)
        back = checkpoint.load(p)
    worst = 0.0
    for k, v in entries.items():
        if not np.array_equal(back[k], v):
            worst = 1.0
    if list(back) != list(entries):
        worst = 1.0
    return worst


def check_scan_visit_counter():
    rng = np.random.default_rng(30)
    x = rng.standard_normal((3, 8, 9)).astype(np.float32)
    worst = 0
    for kind, passes in (("p1", 1), ("p2v", 1), ("p2h", 1), ("p4", 2)):
        scheme = PartitionScheme(kind)
        landmark.reset_scan_counters()
        for d in scheme.directions:
            scan_max(x, d)
        expect = passes * scheme.group_count * x.size
        worst = max(worst, abs(landmark.scan_cell_visits - expect))
        if landmark.scan_aux_ops > scheme.group_count * 3 * (8 + 9) * 4:
            worst = max(worst, 1)
    return float(worst)


@dataclass(frozen=True)
class Check:
    name: str
    fn: callable
    tol: float


CHECKS = (
    Check("dmp_scan_vs_region_oracle", check_dmp_scan_vs_region_oracle, 0.0),
    Check("dmp_scan_argmax_membership", check_dmp_argmax_membership, 0.0),
    Check("dmp_scan_flip_symmetry", check_dmp_flip_symmetry, 0.0),
    Check("dmp_scan_idempotence_monotonicity", check_dmp_idempotence_monotonicity, 0.0),
    Check("dmp_backward_gradient_conservation", check_dmp_gradient_conservation, 0.0),
    Check("dmp_scan_visit_counter", check_scan_visit_counter, 0.0),
    Check("conv2d_vs_naive_loop", check_conv2d_vs_naive, 1e-6),
    Check("matmul_vs_naive_loop", check_matmul_vs_naive, 1e-6),
    Check("resampling_identities", check_resampling, 1e-6),
    Check("softmax_ce_closed_form", check_softmax_ce_closed_form, 1e-6),
    Check("grad_core_ops_vs_finite_diff", check_grad_core_ops, 1e-4),
    Check("grad_lfc_vs_finite_diff", check_grad_lfc_all_schemes, 1e-4),
    Check("grad_film_vs_finite_diff", check_grad_film, 1e-4),
    Check("grad_attention_vs_finite_diff", check_grad_attention, 1e-4),
    Check("grad_dilated_vs_finite_diff", check_grad_dilated, 1e-4),
    Check("attention_row_normalization", check_attention_normalization, 1e-6),
    Check("pointwise_locality", check_pointwise_locality, 0.0),
    Check("lfc_global_degeneration", check_lfc_global_degeneration, 1e-6),
    Check("loss_shift_invariance", check_loss_shift_invariance, 0.0),
    Check("checkpoint_roundtrip", check_checkpoint_roundtrip, 0.0),
)


def run_all(log=print):
    """Run every check; returns (passed, failed) name lists."""
    passed, failed = [], []
    T.set_nan_checks(True)
    try:
        for chk in CHECKS:
            try:
                err = chk.fn()
            except Exception as exc:  # a crash is a failure, not an abort
                if log:
                    log("FAIL %-40s raised %s: %s" % (chk.name, type(exc).__name__, exc))
                failed.append(chk.name)
                continue
            ok = err <= chk.tol
            (passed if ok else failed).append(chk.name)
            if log:
                log("%s %-40s max_err=%.3e (tol %.1e)" % (
                    "PASS" if ok else "FAIL", chk.name, err, chk.tol))
    finally:
        T.set_nan_checks(False)
    return passed, failed

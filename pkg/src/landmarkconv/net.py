"""End-to-end grounding model: small CNN backbone, coordinate features,
language-conditioned affine fusion, cross-scale fusion, a pluggable
context head (scan-based or point-based), and an anchor regression head
with a single-positive ranking loss."""

import csv
import math
import os
import zlib
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint
from . import tensor as T
from .convnets import AttentionLayer, DilatedBlock, PointwiseBlock
from .landmark import LfcLayer
from .synthground import TOKEN_IDS, hflip_augment
from .tensor import ContractError, Tensor

HEADS = ("lfc", "pointwise", "dilated", "attention")
N_COORD = 8


@dataclass(frozen=True)
class ModelConfig:
    c_v: int = 32
    d_emb: int = 8
    scales: tuple = (8, 16)
    scheme: str = "p4"
    head: str = "lfc"
    c_mid: int = 16
    residual: bool = True
    anchors_fine: tuple = ((10, 10), (14, 14), (18, 18))
    coarse_anchor_scale: float = 1.5
    backbone_widths: tuple = (16, 32, 32)
    image_size: int = 64

    @property
    def c(self):
        return self.c_v + N_COORD

    @property
    def c_l(self):
        return 5 * self.d_emb

    @property
    def n_anchors(self):
        return len(self.anchors_fine)

    def anchors_at(self, scale_index):
        f = self.coarse_anchor_scale ** scale_index
        return tuple((w * f, h * f) for w, h in self.anchors_fine)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-4
    flip_prob: float = 0.5
    seed: int = 42
    eval_every: int = 1
    eval_batch: int = 125


@dataclass
class Prediction:
    box: tuple
    score: float
    source: tuple  # (scale_index, anchor_index, (row, col))


# ---------------------------------------------------------------------------
# geometry

def coord_features(h, w, dtype=np.float32):
    """Per-cell (x_min, y_min, x_max, y_max, x_c, y_c, cell_w, cell_h) in
    normalized [0,1] image coordinates, stacked as [8, h, w]."""
    ii = np.arange(h, dtype=np.float64)[:, None] * np.ones((1, w))
    jj = np.ones((h, 1)) * np.arange(w, dtype=np.float64)[None, :]
    feats = np.stack([jj / w, ii / h, (jj + 1) / w, (ii + 1) / h,
                      (jj + 0.5) / w, (ii + 0.5) / h,
                      np.full((h, w), 1.0 / w), np.full((h, w), 1.0 / h)])
    return feats.astype(dtype)


def iou(a, b):
    """IoU of [..., 4] boxes (x_min, y_min, x_max, y_max), broadcasting."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    x0 = np.maximum(a[..., 0], b[..., 0])
    y0 = np.maximum(a[..., 1], b[..., 1])
    x1 = np.minimum(a[..., 2], b[..., 2])
    y1 = np.minimum(a[..., 3], b[..., 3])
    inter = np.clip(x1 - x0, 0, None) * np.clip(y1 - y0, 0, None)
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


class CandidateGrid:
    """All (scale, anchor, cell) candidates in head-logit order: scales in
    config order, anchors within scale, cells row-major."""

    def __init__(self, cfg):
        boxes, scale_idx, anchor_idx, cells, strides, anchors = [], [], [], [], [], []
        for si, s in enumerate(cfg.scales):
            n = cfg.image_size // s
            cy = (np.arange(n) + 0.5) * s
            cx = (np.arange(n) + 0.5) * s
            for ai, (aw, ah) in enumerate(cfg.anchors_at(si)):
                gy, gx = np.meshgrid(cy, cx, indexing="ij")
                boxes.append(np.stack([gx - aw / 2, gy - ah / 2,
                                       gx + aw / 2, gy + ah / 2], -1).reshape(-1, 4))
                scale_idx.append(np.full(n * n, si))
                anchor_idx.append(np.full(n * n, ai))
                ij = np.stack(np.meshgrid(np.arange(n), np.arange(n),
                                          indexing="ij"), -1).reshape(-1, 2)
                cells.append(ij)
                strides.append(np.full(n * n, s))
                anchors.append(np.tile([aw, ah], (n * n, 1)))
        self.boxes = np.concatenate(boxes)
        self.scale_idx = np.concatenate(scale_idx)
        self.anchor_idx = np.concatenate(anchor_idx)
        self.cells = np.concatenate(cells)
        self.strides = np.concatenate(strides).astype(np.float64)
        self.anchors = np.concatenate(anchors)
        self.count = len(self.boxes)


def assign_positive(grid, gt_box):
    """Index of the candidate with the largest IoU (first wins on ties)."""
    gt = np.asarray(gt_box, dtype=np.float64)
    if gt.ndim == 1:
        gt = gt[None]
    if np.any(gt[:, 2] <= gt[:, 0]) or np.any(gt[:, 3] <= gt[:, 1]):
        raise ContractError("degenerate ground-truth box")
    overlaps = iou(gt[:, None, :], grid.boxes[None, :, :])
    idx = overlaps.argmax(axis=1)
    return idx if len(idx) > 1 else int(idx[0])


def decode(t, cell, anchor, stride, image_size=64):
    """YOLO-style offsets to a clipped pixel box. t = (tx, ty, tw, th)."""
    t = np.asarray(t, dtype=np.float64)
    i, j = cell
    cx = (1.0 / (1.0 + np.exp(-t[..., 0])) + j) * stride
    cy = (1.0 / (1.0 + np.exp(-t[..., 1])) + i) * stride
    bw = anchor[0] * np.exp(t[..., 2])
    bh = anchor[1] * np.exp(t[..., 3])
    box = np.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], -1)
    return np.clip(box, 0, image_size)


def encode(box, cell, anchor, stride, eps=1e-4):
    """Algebraic inverse of decode (fractional offsets clamped away from
    the sigmoid asymptotes)."""
    x0, y0, x1, y1 = box
    i, j = cell
    fx = np.clip((x0 + x1) / 2.0 / stride - j, eps, 1 - eps)
    fy = np.clip((y0 + y1) / 2.0 / stride - i, eps, 1 - eps)
    return np.array([math.log(fx / (1 - fx)), math.log(fy / (1 - fy)),
                     math.log(max(x1 - x0, eps) / anchor[0]),
                     math.log(max(y1 - y0, eps) / anchor[1])])


# ---------------------------------------------------------------------------
# fusion blocks

def film_fuse(x, gamma, beta, conv_w, conv_b):
    """relu(conv1x1(relu(gamma * x + beta))) with per-channel broadcast."""
    tail = (1,) * (x.ndim - gamma.ndim)
    g = T.reshape(gamma, gamma.shape + tail) if tail else gamma
    b = T.reshape(beta, beta.shape + tail) if tail else beta
    z = T.relu(T.add(T.mul(g, x), b))
    return T.relu(T.conv2d(z, conv_w, bias=conv_b))


def scale_fuse(maps, scales):
    """Average all scale maps resampled onto the finest grid."""
    target = max(m.shape[-2] for m in maps)
    parts = []
    for m in maps:
        h = m.shape[-2]
        if h == target:
            parts.append(m)
        elif h < target:
            parts.append(T.bilinear_upsample(m, target, target))
        else:
            parts.append(T.max_downsample(m, target, target))
    acc = parts[0]
    for p in parts[1:]:
        acc = T.add(acc, p)
    return T.scale(acc, 1.0 / len(parts))


def scale_unfuse(y, scales, image_size=64):
    """Redistribute the fused map back to each scale's grid."""
    out = []
    for s in scales:
        n = image_size // s
        if y.shape[-2] == n:
            out.append(y)
        elif y.shape[-2] > n:
            out.append(T.max_downsample(y, n, n))
        else:
            out.append(T.bilinear_upsample(y, n, n))
    return out


# ---------------------------------------------------------------------------
# model

def _name_rng(seed, name):
    return np.random.default_rng(np.random.SeedSequence(
        [seed, zlib.crc32(name.encode())]))


class Model:
    """Backbone + fusion + context head + per-scale anchor heads.

    Parameter values depend only on (seed, parameter name), so model
    variants share identical non-head weights at initialization.
    """

    def __init__(self, cfg, seed=0, dtype=np.float32):
        if cfg.head not in HEADS:
            raise ContractError("unknown head %r" % cfg.head)
        self.cfg = cfg
        self.dtype = dtype
        self.params = {}
        c = cfg.c

        def make(name, shape, scale=None, fill=None):
            rng = _name_rng(seed, name)
            if fill is not None:
                p = Tensor(np.full(shape, fill, dtype=dtype), requires_grad=True)
            else:
                p = T.param(shape, rng, scale=scale, dtype=dtype)
            self.params[name] = p
            return p

        self.embed_table = make("embed.table", (len(TOKEN_IDS), cfg.d_emb),
                                scale=0.3)

        w1, w2, w3 = cfg.backbone_widths
        chain = [(3, w1), (w1, w2), (w2, w3), (w3, w3)]
        self.backbone = []
        for li, (ci, co) in enumerate(chain):
            w = make("backbone.conv%d.w" % (li + 1), (co, ci, 3, 3))
            b = make("backbone.conv%d.b" % (li + 1), (co,), fill=0.0)
            self.backbone.append((w, b))
        self.lateral = {}
        for s in cfg.scales:
            w = make("lateral.s%d.w" % s, (cfg.c_v, w3, 1, 1))
            b = make("lateral.s%d.b" % s, (cfg.c_v,), fill=0.0)
            self.lateral[s] = (w, b)

        self.film = {}
        for s in cfg.scales:
            pre = "film.s%d." % s
            self.film[s] = {
                "gw": make(pre + "gamma.w", (cfg.c_l, c), scale=0.1),
                "gb": make(pre + "gamma.b", (c,), fill=1.0),
                "bw": make(pre + "beta.w", (cfg.c_l, c), scale=0.1),
                "bb": make(pre + "beta.b", (c,), fill=0.0),
                "cw": make(pre + "conv.w", (c, c, 1, 1)),
                "cb": make(pre + "conv.b", (c,), fill=0.0),
            }

        head_rng = _name_rng(seed, "head." + cfg.head)
        if cfg.head == "lfc":
            self.head = LfcLayer(cfg.scheme, c, cfg.c_mid, c, rng=head_rng,
                                 residual=cfg.residual, dtype=dtype)
        elif cfg.head == "pointwise":
            self.head = PointwiseBlock(c, c, rng=head_rng, dtype=dtype)
        elif cfg.head == "dilated":
            self.head = DilatedBlock(c, c, rng=head_rng, dtype=dtype)
        else:
            self.head = AttentionLayer(c, max(c // 2, 4), c, rng=head_rng,
                                       dtype=dtype)
        for name, p in self.head.params("head.%s." % cfg.head).items():
            self.params[name] = p

        k_out = cfg.n_anchors * 5
        self.loc = {}
        for s in cfg.scales:
            pre = "loc.s%d." % s
            self.loc[s] = {
                "hw": make(pre + "hidden.w", (c, c, 1, 1)),
                "hb": make(pre + "hidden.b", (c,), fill=0.0),
                "ow": make(pre + "out.w", (k_out, c, 1, 1), scale=0.05),
                "ob": make(pre + "out.b", (k_out,), fill=0.0),
            }

        self.grid = CandidateGrid(cfg)
        self._coord_cache = {}

    # -- sub-forwards -------------------------------------------------------

    def backbone_forward(self, images):
        """Strided conv stack emitting one [*, c_v, n, n] map per scale."""
        x = images
        feats = {}
        stride = 1
        for (w, b) in self.backbone:
            x = T.relu(T.conv2d(x, w, stride=2, bias=b))
            stride *= 2
            if stride in self.cfg.scales:
                lw, lb = self.lateral[stride]
                feats[stride] = T.relu(T.conv2d(x, lw, bias=lb))
        missing = [s for s in self.cfg.scales if s not in feats]
        if missing:
            raise ContractError("backbone cannot reach strides %s" % missing)
        return feats

    def _coords(self, batch, n):
        key = (batch, n)
        if key not in self._coord_cache:
            cf = coord_features(n, n, dtype=self.dtype)
            if batch:
                cf = np.broadcast_to(cf, (batch,) + cf.shape).copy()
            self._coord_cache[key] = Tensor(cf)
        return self._coord_cache[key]

    def encode_language(self, tokens):
        emb = T.take_rows(self.embed_table, tokens)
        flat = int(np.prod(emb.shape[-2:]))
        return T.reshape(emb, emb.shape[:-2] + (flat,))

    def forward(self, images, tokens):
        """images: Tensor [B,3,H,W]; tokens: int array [B,5].

        Returns per-scale logits [B, A*5, n, n] in config scale order.
        """
        batched = images.ndim == 4
        bsz = images.shape[0] if batched else 0
        lang = self.encode_language(tokens)
        feats = self.backbone_forward(images)

        fused = []
        for s in self.cfg.scales:
            f = feats[s]
            xd = T.concat([f, self._coords(bsz, f.shape[-1])], axis=-3)
            fl = self.film[s]
            gamma = T.add(T.matmul(lang, fl["gw"]) if lang.ndim == 2
                          else T.reshape(T.matmul(T.reshape(lang, (1, -1)), fl["gw"]), (-1,)),
                          fl["gb"])
            beta = T.add(T.matmul(lang, fl["bw"]) if lang.ndim == 2
                         else T.reshape(T.matmul(T.reshape(lang, (1, -1)), fl["bw"]), (-1,)),
                         fl["bb"])
            fused.append(film_fuse(xd, gamma, beta, fl["cw"], fl["cb"]))

        y = scale_fuse(fused, self.cfg.scales)
        y = self.head.forward(y)
        per_scale = scale_unfuse(y, self.cfg.scales, self.cfg.image_size)

        logits = []
        for s, z in zip(self.cfg.scales, per_scale):
            lc = self.loc[s]
            hid = T.relu(T.conv2d(z, lc["hw"], bias=lc["hb"]))
            logits.append(T.conv2d(hid, lc["ow"], bias=lc["ob"]))
        return logits

    # -- persistence --------------------------------------------------------

    def save(self, path):
        checkpoint.save(self.params, path)

    def load(self, path):
        loaded = checkpoint.load(path)
        if set(loaded) != set(self.params):
            raise ContractError("checkpoint parameter names do not match model")
        for name, arr in loaded.items():
            if self.params[name].data.shape != arr.shape:
                raise ContractError("shape mismatch for %r" % name)
            self.params[name].data = arr.astype(self.dtype)


# ---------------------------------------------------------------------------
# loss

def loss(per_scale_logits, positives, gt_t, cfg):
    """Single-positive ranking CE over every candidate of every scale,
    plus beta-weighted MSE on the positive's four box offsets."""
    a = cfg.n_anchors
    positives = np.asarray(positives)
    bsz = per_scale_logits[0].shape[0]
    conf_parts = []
    reg_terms = None
    offset = 0
    for si, (s, lg) in enumerate(zip(cfg.scales, per_scale_logits)):
        n = cfg.image_size // s
        r = T.reshape(lg, (bsz, a, 5, n * n))
        conf_parts.append(T.reshape(T.index_axis(r, 2, 4), (bsz, a * n * n)))
        tvals = T.slice_axis(r, 2, 0, 4)

        mask = np.zeros((bsz, a, 4, n * n), dtype=lg.dtype)
        tgt = np.zeros_like(mask)
        local = positives - offset
        inside = (local >= 0) & (local < a * n * n)
        rows = np.nonzero(inside)[0]
        if rows.size:
            ai = local[rows] // (n * n)
            cell = local[rows] % (n * n)
            mask[rows[:, None], ai[:, None], np.arange(4)[None, :], cell[:, None]] = 1.0
            tgt[rows[:, None], ai[:, None], np.arange(4)[None, :], cell[:, None]] = gt_t[rows]
        diff = T.sub(tvals, Tensor(tgt))
        term = T.sum_all(T.mul(T.mul(diff, diff), Tensor(mask)))
        reg_terms = term if reg_terms is None else T.add(reg_terms, term)
        offset += a * n * n

    ce = T.softmax_ce_rows(T.concat(conf_parts, axis=1), positives)
    return T.add(ce, T.scale(reg_terms, 5.0 / (4.0 * bsz)))


# ---------------------------------------------------------------------------
# training / evaluation

def _stack(samples):
    images = np.stack([s.image.data for s in samples])
    tokens = np.stack([s.expression.tokens() for s in samples])
    boxes = np.array([s.target for s in samples], dtype=np.float64)
    critical = np.array([s.relation_critical for s in samples], dtype=bool)
    return images, tokens, boxes, critical


_FLIP_LUT = None


def _flip_lut():
    global _FLIP_LUT
    if _FLIP_LUT is None:
        lut = np.arange(len(TOKEN_IDS), dtype=np.int64)
        lut[TOKEN_IDS["left-of"]] = TOKEN_IDS["right-of"]
        lut[TOKEN_IDS["right-of"]] = TOKEN_IDS["left-of"]
        _FLIP_LUT = lut
    return _FLIP_LUT


def _flip_batch(images, tokens, boxes, mask, image_size=64):
    if not mask.any():
        return images, tokens, boxes
    images = images.copy()
    tokens = tokens.copy()
    boxes = boxes.copy()
    images[mask] = images[mask][:, :, :, ::-1]
    tokens[mask] = _flip_lut()[tokens[mask]]
    x0 = boxes[mask, 0].copy()
    boxes[mask, 0] = image_size - boxes[mask, 2]
    boxes[mask, 2] = image_size - x0
    return images, tokens, boxes


def predict_boxes(model, images, tokens):
    """Decode the top-confidence candidate per sample (no grad)."""
    grid = model.grid
    cfg = model.cfg
    a = cfg.n_anchors
    with T.no_grad():
        logits = model.forward(Tensor(images.astype(model.dtype)), tokens)
    confs, tmaps = [], []
    for s, lg in zip(cfg.scales, logits):
        n = cfg.image_size // s
        r = lg.data.reshape(len(images), a, 5, n * n)
        confs.append(r[:, :, 4, :].reshape(len(images), a * n * n))
        tmaps.append(r[:, :, :4, :])
    conf = np.concatenate(confs, axis=1)
    best = conf.argmax(axis=1)
    preds = []
    for bi, ci in enumerate(best):
        si = grid.scale_idx[ci]
        ai = grid.anchor_idx[ci]
        i, j = grid.cells[ci]
        s = cfg.scales[si]
        n = cfg.image_size // s
        offset = sum(a * (cfg.image_size // ss) ** 2 for ss in cfg.scales[:si])
        cell = ci - offset - ai * n * n
        t = tmaps[si][bi, ai, :, cell]
        box = decode(t, (i, j), grid.anchors[ci], s, cfg.image_size)
        score = 1.0 / (1.0 + math.exp(-conf[bi, ci]))
        preds.append(Prediction(tuple(box), score, (int(si), int(ai), (int(i), int(j)))))
    return preds


def _eval_shard(model, images, tokens, boxes, batch):
    ious = np.zeros(len(images))
    for lo in range(0, len(images), batch):
        hi = min(lo + batch, len(images))
        preds = predict_boxes(model, images[lo:hi], tokens[lo:hi])
        pb = np.array([p.box for p in preds])
        ious[lo:hi] = iou(pb, boxes[lo:hi])
    return ious


def evaluate(model, samples, batch=125, workers=1):
    """Pr@0.5 / Pr@0.75 overall plus Pr@0.5 on the relation-critical split."""
    with threadpool_limits(limits=1):
        return _evaluate(model, samples, batch, workers)


def _evaluate(model, samples, batch, workers):
    images, tokens, boxes, critical = _stack(samples)
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        shards = np.array_split(np.arange(len(samples)), workers)
        shards = [s for s in shards if s.size]
        with ThreadPoolExecutor(max_workers=len(shards)) as pool:
            parts = list(pool.map(
                lambda idx: _eval_shard(model, images[idx], tokens[idx],
                                        boxes[idx], batch), shards))
        ious = np.concatenate(parts)
    else:
        ious = _eval_shard(model, images, tokens, boxes, batch)
    out = {"pr50": float((ious > 0.5).mean()),
           "pr75": float((ious > 0.75).mean())}
    out["pr50_critical"] = float((ious[critical] > 0.5).mean()) if critical.any() else float("nan")
    return out


def train(train_samples, test_samples, cfg=None, tcfg=None, out_dir=None,
          log=None, eval_workers=1):
    """Adam + cosine annealing + random flip augmentation.

    Returns (model, metrics) where metrics is one dict per epoch with
    keys epoch, loss, pr50, pr75, pr50_critical.
    """
    cfg = cfg or ModelConfig()
    tcfg = tcfg or TrainConfig()
    model = Model(cfg, seed=tcfg.seed)
    opt = T.Adam(model.params.values(), lr=tcfg.lr,
                 weight_decay=tcfg.weight_decay)
    images, tokens, boxes, _ = _stack(train_samples)
    rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 7]))
    metrics = []
    n = len(train_samples)
    with threadpool_limits(limits=1):  # small matmuls: thread sync dominates
        _train_epochs(model, opt, cfg, tcfg, images, tokens, boxes,
                      test_samples, rng, metrics, n, log, eval_workers)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        model.save(os.path.join(out_dir, "model.ckpt"))
        write_metrics(metrics, os.path.join(out_dir, "metrics.csv"))
    return model, metrics


def _train_epochs(model, opt, cfg, tcfg, images, tokens, boxes, test_samples,
                  rng, metrics, n, log, eval_workers):
    for epoch in range(tcfg.epochs):
        lr = T.cosine_lr(tcfg.lr, epoch, tcfg.epochs)
        perm = rng.permutation(n)
        flip = rng.random(n) < tcfg.flip_prob
        total, batches = 0.0, 0
        for lo in range(0, n - n % tcfg.batch_size, tcfg.batch_size):
            idx = perm[lo:lo + tcfg.batch_size]
            bi, bt, bb = _flip_batch(images[idx], tokens[idx], boxes[idx],
                                     flip[idx], cfg.image_size)
            pos = assign_positive(model.grid, bb)
            pos = np.atleast_1d(pos)
            gt_t = np.stack([
                encode(bb[k], model.grid.cells[pos[k]],
                       model.grid.anchors[pos[k]], model.grid.strides[pos[k]])
                for k in range(len(idx))]).astype(model.dtype)
            out = model.forward(Tensor(np.ascontiguousarray(bi)), bt)
            lval = loss(out, pos, gt_t, cfg)
            opt.zero_grad()
            T.backward(lval)
            opt.step(lr=lr)
            total += lval.item()
            batches += 1
        row = {"epoch": epoch, "loss": total / max(batches, 1)}
        if (epoch + 1) % tcfg.eval_every == 0 or epoch == tcfg.epochs - 1:
            row.update(evaluate(model, test_samples, batch=tcfg.eval_batch,
                                workers=eval_workers))
        metrics.append(row)
        if log:
            log("epoch %3d  lr %.2e  loss %.4f  pr50 %s  pr50_crit %s" % (
                epoch, lr, row["loss"], row.get("pr50", "-"),
                row.get("pr50_critical", "-")))


def write_metrics(metrics, path):
    cols = ("epoch", "loss", "pr50", "pr75", "pr50_critical")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in metrics:
            writer.writerow([row.get(c, "") for c in cols])


def augment_dataset_flip(samples, prob, seed):
    """Sample-level flip used by data pipelines outside the trainer."""
    rng = np.random.default_rng(seed)
    return [hflip_augment(s) if rng.random() < prob else s for s in samples]

"""Deterministic synthetic scenes and referring expressions.

Scenes are 64x64 RGB rasters of solid, non-overlapping shapes. Each
sample carries a five-slot expression (target color/shape, relation,
referent color/shape) with exactly one satisfying object. A configurable
fraction of samples is relation-critical: the scene contains a second
object identical to the target in color, shape and size, placed on the
opposite side of the referent, so appearance alone cannot pick the
target.
"""

import csv
import os
from dataclasses import dataclass, replace

import numpy as np

from . import checkpoint
from .tensor import ContractError, Tensor

IMAGE_SIZE = 64
RELATION_MARGIN = 8  # min center-coordinate difference along the relation axis

COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("square", "circle", "triangle")
RELATIONS = ("left-of", "right-of", "above", "below", "none")
NULL_TOKEN = "<null>"
VOCAB = COLORS + SHAPES + RELATIONS + (NULL_TOKEN,)
TOKEN_IDS = {tok: i for i, tok in enumerate(VOCAB)}

_RGB = {"red": (1, 0, 0), "green": (0, 1, 0), "blue": (0, 0, 1),
        "yellow": (1, 1, 0)}
_FLIP_RELATION = {"left-of": "right-of", "right-of": "left-of",
                  "above": "above", "below": "below", "none": "none"}


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    bbox: tuple  # (x_min, y_min, x_max, y_max), pixel edges, max exclusive

    @property
    def center(self):
        x0, y0, x1, y1 = self.bbox
        return ((x0 + x1) / 2.0, (y0 + y1) / 2.0)


@dataclass(frozen=True)
class Expression:
    tgt_color: str
    tgt_shape: str
    relation: str
    ref_color: str = None
    ref_shape: str = None

    def tokens(self):
        ref_c = self.ref_color if self.ref_color else NULL_TOKEN
        ref_s = self.ref_shape if self.ref_shape else NULL_TOKEN
        return np.array([TOKEN_IDS[self.tgt_color], TOKEN_IDS[self.tgt_shape],
                         TOKEN_IDS[self.relation], TOKEN_IDS[ref_c],
                         TOKEN_IDS[ref_s]], dtype=np.int64)


@dataclass
class GroundingSample:
    image: Tensor  # [3, 64, 64] in [0, 1]
    expression: Expression
    target: tuple  # target bbox
    relation_critical: bool
    objects: list
    sample_id: int = 0


def relation_holds(relation, a_center, b_center, margin=RELATION_MARGIN):
    """Ground-truth relation between centers, with an ambiguity margin."""
    ax, ay = a_center
    bx, by = b_center
    if relation == "left-of":
        return ax <= bx - margin
    if relation == "right-of":
        return ax >= bx + margin
    if relation == "above":
        return ay <= by - margin
    if relation == "below":
        return ay >= by + margin
    raise ContractError("relation %r has no geometric test" % relation)


def satisfies(obj, expression, referent):
    """Does ``obj`` satisfy every slot of the expression?"""
    if obj.color != expression.tgt_color or obj.shape != expression.tgt_shape:
        return False
    if expression.relation == "none":
        return True
    return relation_holds(expression.relation, obj.center, referent.center)


def find_referent(objects, expression):
    """The unique object matching the referent slots, or None."""
    if expression.relation == "none":
        return None
    hits = [o for o in objects if o.color == expression.ref_color
            and o.shape == expression.ref_shape]
    return hits[0] if len(hits) == 1 else None


# ---------------------------------------------------------------------------
# rasterization

def _draw(canvas, obj):
    x0, y0, x1, y1 = obj.bbox
    size_x, size_y = x1 - x0, y1 - y0
    ys = np.arange(y0, y1)[:, None] + 0.5
    xs = np.arange(x0, x1)[None, :] + 0.5
    if obj.shape == "square":
        mask = np.ones((size_y, size_x), dtype=bool)
    elif obj.shape == "circle":
        cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
        r = size_x / 2.0
        mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    else:  # triangle: apex at top center, base along the bottom row
        cx = (x0 + x1) / 2.0
        frac = (ys - y0) / size_y  # (0, 1] downward
        mask = np.abs(xs - cx) <= frac * (size_x / 2.0)
        mask[-1, :] = True  # base spans the box so the bbox stays tight
    rgb = _RGB[obj.color]
    for ch in range(3):
        region = canvas[ch, y0:y1, x0:x1]
        region[mask] = rgb[ch]


def render(objects):
    canvas = np.zeros((3, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    for obj in objects:
        _draw(canvas, obj)
    return canvas


def _boxes_disjoint(a, b):
    # strict gap of >= 1 px so candidate patches stay pixel-clean
    return (a[2] + 1 <= b[0] or b[2] + 1 <= a[0]
            or a[3] + 1 <= b[1] or b[3] + 1 <= a[1])


def _place(rng, size, existing, tries=60):
    lim = IMAGE_SIZE - size - 2
    for _ in range(tries):
        x0 = int(rng.integers(1, lim))
        y0 = int(rng.integers(1, lim))
        box = (x0, y0, x0 + size, y0 + size)
        if all(_boxes_disjoint(box, o.bbox) for o in existing):
            return box
    return None


def _place_on_axis(rng, size, existing, horizontal, lo, hi, tries=60):
    """Place with the relation-axis center constrained to [lo, hi]."""
    lo_i = int(np.ceil(lo - size / 2.0))
    hi_i = int(np.floor(hi - size / 2.0))
    lo_i = max(lo_i, 1)
    hi_i = min(hi_i, IMAGE_SIZE - size - 2)
    if hi_i < lo_i:
        return None
    for _ in range(tries):
        a = int(rng.integers(lo_i, hi_i + 1))
        b = int(rng.integers(1, IMAGE_SIZE - size - 2))
        x0, y0 = (a, b) if horizontal else (b, a)
        box = (x0, y0, x0 + size, y0 + size)
        if all(_boxes_disjoint(box, o.bbox) for o in existing):
            return box
    return None


# ---------------------------------------------------------------------------
# scene construction

def _appearance_pool(rng, exclude):
    pool = [(c, s) for c in COLORS for s in SHAPES if (c, s) not in exclude]
    return pool[int(rng.integers(0, len(pool)))]


def _build_plain(rng):
    """Unambiguous sample: unique-appearance target, relation 'none'."""
    tgt_app = (COLORS[int(rng.integers(0, 4))], SHAPES[int(rng.integers(0, 3))])
    n_extra = int(rng.integers(1, 5))
    objs = []
    size = int(rng.integers(8, 17))
    box = _place(rng, size, objs)
    if box is None:
        return None
    objs.append(SceneObject(tgt_app[1], tgt_app[0], box))
    for _ in range(n_extra):
        color, shape = _appearance_pool(rng, {tgt_app})
        size = int(rng.integers(8, 17))
        box = _place(rng, size, objs)
        if box is None:
            return None
        objs.append(SceneObject(shape, color, box))
    expr = Expression(tgt_app[0], tgt_app[1], "none")
    return objs, expr, objs[0], False


def _build_critical(rng):
    """Two identical candidates straddling a referent along one axis.

    Geometry is sampled first (candidate A, candidate B, referent
    strictly between them on the axis); an independent coin then picks
    which candidate the expression refers to, so the target's absolute
    position distribution matches the distractor's.
    """
    tgt_app = (COLORS[int(rng.integers(0, 4))], SHAPES[int(rng.integers(0, 3))])
    ref_app = _appearance_pool(rng, {tgt_app})
    horizontal = bool(rng.integers(0, 2))
    size = int(rng.integers(8, 13))
    ref_size = int(rng.integers(8, 13))

    objs = []
    box_a = _place(rng, size, objs)
    if box_a is None:
        return None
    obj_a = SceneObject(tgt_app[1], tgt_app[0], box_a)
    objs.append(obj_a)

    ax = obj_a.center[0] if horizontal else obj_a.center[1]
    # candidate B: same appearance, same size, >= 2*margin away on the axis
    for _ in range(60):
        box_b = _place(rng, size, objs)
        if box_b is None:
            return None
        bx = ((box_b[0] + box_b[2]) / 2.0 if horizontal
              else (box_b[1] + box_b[3]) / 2.0)
        if abs(bx - ax) >= 2 * RELATION_MARGIN + 2:
            break
    else:
        return None
    obj_b = SceneObject(tgt_app[1], tgt_app[0], box_b)
    objs.append(obj_b)

    lo, hi = sorted((ax, bx))
    box_r = _place_on_axis(rng, ref_size, objs, horizontal,
                           lo + RELATION_MARGIN, hi - RELATION_MARGIN)
    if box_r is None:
        return None
    referent = SceneObject(ref_app[1], ref_app[0], box_r)
    objs.append(referent)

    for _ in range(int(rng.integers(0, 3))):
        app = _appearance_pool(rng, {tgt_app, ref_app})
        fsize = int(rng.integers(8, 17))
        box = _place(rng, fsize, objs)
        if box is None:
            break
        objs.append(SceneObject(app[1], app[0], box))

    target = obj_a if rng.integers(0, 2) else obj_b
    t_axis = target.center[0] if horizontal else target.center[1]
    r_axis = referent.center[0] if horizontal else referent.center[1]
    if horizontal:
        relation = "left-of" if t_axis < r_axis else "right-of"
    else:
        relation = "above" if t_axis < r_axis else "below"
    expr = Expression(tgt_app[0], tgt_app[1], relation,
                      ref_app[0], ref_app[1])
    return objs, expr, target, True


def _valid(objs, expr, target):
    referent = find_referent(objs, expr)
    if expr.relation != "none" and referent is None:
        return False
    hits = [o for o in objs if satisfies(o, expr, referent)]
    if len(hits) != 1 or hits[0] is not target:
        return False
    if expr.relation != "none":
        # every same-appearance non-target must miss the relation by margin
        for o in objs:
            if o is target or o.color != expr.tgt_color or o.shape != expr.tgt_shape:
                continue
            mirrored = _FLIP_RELATION[expr.relation] if expr.relation in (
                "left-of", "right-of") else {"above": "below", "below": "above"}[expr.relation]
            if not relation_holds(mirrored, o.center, referent.center):
                return False
    return True


def gen_sample(index, seed, critical):
    """One deterministic sample; regeneration on placement failure uses a
    fresh per-attempt stream."""
    for attempt in range(200):
        rng = np.random.default_rng(np.random.SeedSequence([seed, index, attempt]))
        built = _build_critical(rng) if critical else _build_plain(rng)
        if built is None:
            continue
        objs, expr, target, flag = built
        if not _valid(objs, expr, target):
            continue
        return GroundingSample(Tensor(render(objs)), expr, target.bbox,
                               flag, objs, sample_id=index)
    raise ContractError("scene generation failed for sample %d" % index)


def gen_dataset(n, seed, critical_fraction=0.5):
    """n deterministic samples; an exact critical_fraction of them carry a
    relation-critical distractor."""
    if n <= 0 or not 0.0 <= critical_fraction <= 1.0:
        raise ContractError("need n > 0 and critical_fraction in [0, 1]")
    flags = [int((i + 1) * critical_fraction) > int(i * critical_fraction)
             for i in range(n)]
    return [gen_sample(i, seed, flags[i]) for i in range(n)]


# ---------------------------------------------------------------------------
# expression encoding and augmentation

def encode_expression(expression, table):
    """Concatenate the five slot embeddings in fixed slot order."""
    toks = expression.tokens()
    from . import tensor as T
    emb = T.take_rows(table, toks)
    return T.reshape(emb, (toks.size * table.shape[1],))


def hflip_augment(sample):
    """Mirror the scene about the vertical axis and swap left/right words."""
    img = Tensor(np.ascontiguousarray(sample.image.data[:, :, ::-1]))

    def flip_box(b):
        x0, y0, x1, y1 = b
        return (IMAGE_SIZE - x1, y0, IMAGE_SIZE - x0, y1)

    expr = replace(sample.expression,
                   relation=_FLIP_RELATION[sample.expression.relation])
    objs = [SceneObject(o.shape, o.color, flip_box(o.bbox))
            for o in sample.objects]
    return GroundingSample(img, expr, flip_box(sample.target),
                           sample.relation_critical, objs, sample.sample_id)


# ---------------------------------------------------------------------------
# persistence: CSV manifest + image blobs in the checkpoint container

MANIFEST = "manifest.csv"
BLOBS = "images.bin"
_FIELDS = ("id", "tgt_color", "tgt_shape", "relation", "ref_color",
           "ref_shape", "x_min", "y_min", "x_max", "y_max", "critical")


def save_dataset(samples, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, MANIFEST), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_FIELDS)
        for s in samples:
            e = s.expression
            writer.writerow([s.sample_id, e.tgt_color, e.tgt_shape, e.relation,
                             e.ref_color or "", e.ref_shape or "",
                             *s.target, int(s.relation_critical)])
    blobs = {str(s.sample_id): s.image.data for s in samples}
    checkpoint.save(blobs, os.path.join(out_dir, BLOBS))


def load_dataset(in_dir):
    blobs = checkpoint.load(os.path.join(in_dir, BLOBS))
    samples = []
    with open(os.path.join(in_dir, MANIFEST), newline="") as fh:
        for row in csv.DictReader(fh):
            expr = Expression(row["tgt_color"], row["tgt_shape"], row["relation"],
                              row["ref_color"] or None, row["ref_shape"] or None)
            target = tuple(int(row[k]) for k in ("x_min", "y_min", "x_max", "y_max"))
            samples.append(GroundingSample(
                Tensor(blobs[row["id"]]), expr, target,
                bool(int(row["critical"])), [], sample_id=int(row["id"])))
    return samples

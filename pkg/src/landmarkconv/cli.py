"""Command-line entry point: dataset generation, training, evaluation,
verification, benchmarking, and landmark visualization.

Exit codes: 0 success, 1 usage error, 2 check failure, 3 I/O error.
"""

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import bench as bench_mod
from . import checkpoint, checks, landmark, net, synthground
from . import tensor as T
from .checkpoint import CheckpointError
from .tensor import ContractError, DimensionError, Tensor

EXIT_OK, EXIT_USAGE, EXIT_CHECK, EXIT_IO = 0, 1, 2, 3

DEFAULT_CONFIG = {
    "model": asdict(net.ModelConfig()),
    "train": asdict(net.TrainConfig()),
    "data": {"train_size": 8000, "test_size": 1000,
             "critical_fraction": 0.5, "seed": 42},
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write("error: %s\n" % message)
        raise SystemExit(EXIT_USAGE)


def load_config(path=None, overrides=None):
    """Defaults, optionally updated from a JSON file, then from flags."""
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    if path:
        with open(path) as fh:
            user = json.load(fh)
        for section, values in user.items():
            cfg.setdefault(section, {}).update(values)
    for section, key, value in overrides or ():
        if value is not None:
            cfg[section][key] = value
    return cfg


def _model_cfg(cfg):
    fields = dict(cfg["model"])
    for tup in ("scales", "anchors_fine", "backbone_widths"):
        if tup in fields:
            inner = [tuple(v) if isinstance(v, list) else v for v in fields[tup]]
            fields[tup] = tuple(inner)
    return net.ModelConfig(**fields)


def _train_cfg(cfg):
    return net.TrainConfig(**cfg["train"])


# ---------------------------------------------------------------------------
# commands

def cmd_gen(args):
    cfg = load_config(args.config, [("data", "seed", args.seed),
                                    ("data", "train_size", args.train_size),
                                    ("data", "test_size", args.test_size)])
    data = cfg["data"]
    for split, size, salt in (("train", data["train_size"], 0),
                              ("test", data["test_size"], 1)):
        samples = synthground.gen_dataset(size, data["seed"] + salt,
                                          data["critical_fraction"])
        out = os.path.join(args.out, split)
        synthground.save_dataset(samples, out)
        print("wrote %d samples (%d relation-critical) to %s" % (
            len(samples), sum(s.relation_critical for s in samples), out))
    return EXIT_OK


def cmd_train(args):
    cfg = load_config(args.config, [
        ("model", "head", args.head), ("model", "scheme", args.scheme),
        ("train", "epochs", args.epochs), ("train", "seed", args.seed)])
    train_s = synthground.load_dataset(os.path.join(args.dataset, "train"))
    test_s = synthground.load_dataset(os.path.join(args.dataset, "test"))
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.json"), "w") as fh:
        json.dump(cfg, fh, indent=2)
    log = print if not args.quiet else None
    net.train(train_s, test_s, _model_cfg(cfg), _train_cfg(cfg),
              out_dir=args.out, log=log)
    print("checkpoint and metrics written to %s" % args.out)
    return EXIT_OK


def _load_run(run_dir):
    with open(os.path.join(run_dir, "config.json")) as fh:
        cfg = json.load(fh)
    model = net.Model(_model_cfg(cfg), seed=cfg["train"]["seed"])
    model.load(os.path.join(run_dir, "model.ckpt"))
    return model, cfg


def cmd_eval(args):
    model, _ = _load_run(args.run)
    samples = synthground.load_dataset(os.path.join(args.dataset, "test"))
    result = net.evaluate(model, samples, workers=args.workers)
    print("Pr@0.5          %.4f" % result["pr50"])
    print("Pr@0.75         %.4f" % result["pr75"])
    print("Pr@0.5 critical %.4f" % result["pr50_critical"])
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["pr50", "pr75", "pr50_critical"])
            writer.writerow([result["pr50"], result["pr75"],
                             result["pr50_critical"]])
    return EXIT_OK


def cmd_check(args):
    if getattr(args, "inject_fault", None) == "dmp":
        landmark._FAULT_DROP_SELF = True
    try:
        passed, failed = checks.run_all(log=print)
    finally:
        landmark._FAULT_DROP_SELF = False
    print("%d checks passed, %d failed" % (len(passed), len(failed)))
    return EXIT_OK if not failed else EXIT_CHECK


def cmd_bench(args):
    ops = list(bench_mod.OPERATORS)
    if args.parallel_lfc:
        ops.append("lfc_parallel")
    records = bench_mod.run_scaling(operators=ops, sizes=tuple(args.sizes),
                                    repeats=args.repeats, seed=args.seed,
                                    log=print)
    if args.out:
        bench_mod.write_csv(records, args.out)
        print("wrote %s" % args.out)
    for key in ("wall_ns", "peak_bytes"):
        slopes = bench_mod.slopes_by_operator(records, key)
        for op in ops:
            print("loglog slope %-12s %-10s %.3f" % (op, key, slopes[op]))
    return EXIT_OK


def write_pgm(values, path):
    """8-bit binary PGM from floats in [0, 1]."""
    arr = np.clip(np.asarray(values) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (arr.shape[1], arr.shape[0]))
        fh.write(arr.tobytes())


def cmd_visualize(args):
    model, cfg = _load_run(args.run)
    if cfg["model"]["head"] != "lfc":
        raise ContractError("landmark visualization needs an lfc head, "
                            "this run used %r" % cfg["model"]["head"])
    samples = synthground.load_dataset(os.path.join(args.dataset, "test"))
    by_id = {s.sample_id: s for s in samples}
    if args.sample_id not in by_id:
        raise CheckpointError("sample id %d not in dataset" % args.sample_id)
    sample = by_id[args.sample_id]

    with T.no_grad():
        logits = model.forward(Tensor(sample.image.data[None]),
                               sample.expression.tokens()[None])
    pred = net.predict_boxes(model, sample.image.data[None],
                             sample.expression.tokens()[None])[0]
    # landmarks are read at the fused-grid cell containing the predicted center
    fused_n = model.cfg.image_size // min(model.cfg.scales)
    stride = model.cfg.image_size // fused_n
    cx = (pred.box[0] + pred.box[2]) / 2.0
    cy = (pred.box[1] + pred.box[3]) / 2.0
    cell = (min(int(cy // stride), fused_n - 1),
            min(int(cx // stride), fused_n - 1))
    with T.no_grad():
        feats = model.backbone_forward(Tensor(sample.image.data))
        lang = model.encode_language(sample.expression.tokens())
        fused = []
        for s in model.cfg.scales:
            f = feats[s]
            xd = T.concat([f, model._coords(0, f.shape[-1])], axis=-3)
            fl = model.film[s]
            gamma = T.add(T.reshape(T.matmul(T.reshape(lang, (1, -1)), fl["gw"]), (-1,)), fl["gb"])
            beta = T.add(T.reshape(T.matmul(T.reshape(lang, (1, -1)), fl["bw"]), (-1,)), fl["bb"])
            fused.append(net.film_fuse(xd, gamma, beta, fl["cw"], fl["cb"]))
        y = net.scale_fuse(fused, model.cfg.scales)
        model.head.forward(y, store_argmax=True)
    marks = landmark.decode_landmarks(model.head, cell)
    heat = landmark.splat_heatmap(marks, model.cfg.image_size,
                                  model.cfg.image_size, stride,
                                  sigma_cells=args.sigma)

    os.makedirs(args.out, exist_ok=True)
    write_pgm(heat.data, os.path.join(args.out, "heatmap.pgm"))
    with open(os.path.join(args.out, "landmarks.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group", "channel", "row", "col"])
        writer.writerows(marks)
    with open(os.path.join(args.out, "boxes.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "x_min", "y_min", "x_max", "y_max", "score"])
        writer.writerow(["predicted", *("%.2f" % v for v in pred.box),
                         "%.4f" % pred.score])
        writer.writerow(["ground_truth", *sample.target, ""])
    print("wrote heatmap.pgm, landmarks.csv, boxes.csv to %s" % args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="landmarkconv",
                     description="scan-based direction-aware convolution toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate the synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--train-size", type=int, dest="train_size")
    p.add_argument("--test-size", type=int, dest="test_size")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--head", choices=net.HEADS)
    p.add_argument("--scheme", choices=checks.SCHEMES)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("check", help="run the oracle and invariant suite")
    p.add_argument("--inject-fault", choices=("dmp",), dest="inject_fault",
                   help=argparse.SUPPRESS)
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("bench", help="scaling benchmark (time and memory)")
    p.add_argument("--out")
    p.add_argument("--sizes", type=int, nargs="+",
                   default=list(bench_mod.DEFAULT_SIZES))
    p.add_argument("--repeats", type=int, default=7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--parallel-lfc", action="store_true", dest="parallel_lfc")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("visualize", help="landmark heatmap for one sample")
    p.add_argument("--run", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--sample-id", type=int, required=True, dest="sample_id")
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, default=1.0 / 3.0)
    p.set_defaults(fn=cmd_visualize)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    try:
        return args.fn(args)
    except (ContractError, DimensionError, ValueError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, CheckpointError, OSError) as exc:
        print("i/o error: %s" % exc, file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

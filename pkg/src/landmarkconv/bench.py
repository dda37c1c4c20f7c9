"""Forward-only scaling benchmark: wall time and peak allocated bytes per
operator as the map grows, plus log-log slope fits.

Timing runs single-threaded (BLAS pinned) with one excluded warm-up and a
median over repeats; memory is the tracemalloc high-water mark of one
post-warm-up call, kept separate from the timed runs because tracing
slows execution.
"""

import csv
import time
import tracemalloc
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .convnets import AttentionLayer, DilatedBlock, PointwiseBlock
from .landmark import LfcLayer, dmp_scan_parallel
from .tensor import ContractError, Tensor

OPERATORS = ("lfc", "attention", "pointwise", "dilated")
DEFAULT_SIZES = (16, 32, 64, 128)


@dataclass
class BenchRecord:
    operator: str
    size: int
    nodes: int
    channels: int
    wall_ns: int
    peak_bytes: int


def _build(op, channels, seed):
    rng = np.random.default_rng(seed)
    if op == "lfc":
        layer = LfcLayer("p4", channels, channels, channels, rng=rng)
        return lambda x: layer.forward(x)
    if op == "lfc_parallel":
        layer = LfcLayer("p4", channels, channels, channels, rng=rng)

        def run(x):
            y = layer.forward(x)
            for d in layer.scheme.directions:
                dmp_scan_parallel(x.data, d, workers=2)
            return y
        # parallel scans timed on top of the layer for the comparison row
        return run
    if op == "attention":
        layer = AttentionLayer(channels, channels, channels, rng=rng)
        return lambda x: layer.forward(x)
    if op == "pointwise":
        layer = PointwiseBlock(channels, channels, rng=rng)
        return lambda x: layer.forward(x)
    if op == "dilated":
        layer = DilatedBlock(channels, channels, rng=rng)
        return lambda x: layer.forward(x)
    raise ContractError("unknown benchmark operator %r" % op)


def run_scaling(operators=OPERATORS, sizes=DEFAULT_SIZES, channels=16,
                repeats=7, seed=0, log=None):
    """One BenchRecord per (operator, size); forward passes on fixed-seed
    random inputs."""
    if repeats < 5:
        raise ContractError("need at least 5 repeats for a stable median")
    records = []
    rng = np.random.default_rng(seed)
    with threadpool_limits(limits=1), T.no_grad():
        for op in operators:
            for size in sizes:
                fn = _build(op, channels, seed)
                x = Tensor(rng.standard_normal(
                    (channels, size, size)).astype(np.float32))
                fn(x)  # warm-up, excluded
                times = []
                for _ in range(repeats):
                    t0 = time.perf_counter_ns()
                    fn(x)
                    times.append(time.perf_counter_ns() - t0)
                tracemalloc.start()
                tracemalloc.reset_peak()
                fn(x)
                _, peak = tracemalloc.get_traced_memory()
                tracemalloc.stop()
                rec = BenchRecord(op, size, size * size, channels,
                                  int(np.median(times)), int(peak))
                records.append(rec)
                if log:
                    log("%-12s size %4d  %10.3f ms  peak %8.2f MiB" % (
                        op, size, rec.wall_ns / 1e6, rec.peak_bytes / 2**20))
    return records


def fit_loglog_slope(records, key="wall_ns"):
    """Least-squares slope of log(metric) against log(node count)."""
    if len(records) < 3:
        raise ContractError("need at least 3 sizes to fit a slope")
    x = np.log([r.nodes for r in records])
    y = np.log([max(getattr(r, key), 1) for r in records])
    return float(np.polyfit(x, y, 1)[0])


def slopes_by_operator(records, key="wall_ns"):
    out = {}
    for op in {r.operator for r in records}:
        out[op] = fit_loglog_slope([r for r in records if r.operator == op], key)
    return out


def write_csv(records, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["operator", "size", "nodes", "channels",
                         "wall_ns", "peak_bytes"])
        for r in records:
            writer.writerow([r.operator, r.size, r.nodes, r.channels,
                             r.wall_ns, r.peak_bytes])

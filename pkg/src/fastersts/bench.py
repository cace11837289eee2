"""Timing harness for the node-mixing and kernel contractions.

Each size is timed ``reps`` times after ``warmup`` discarded runs; the median
is reported together with the interquartile range. Slopes are least-squares
fits of log(median time) against log(N).
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .graph import flop_count
from .layer import kernel_flop_count
from .tensor import contract_nodes_np, softmax_columns_np

WARMUP = 2


class BenchError(RuntimeError):
    pass


@dataclass
class BenchResult:
    op: str
    sizes: list[int]
    median_ns: list[float] = field(default_factory=list)
    iqr_ns: list[float] = field(default_factory=list)
    flops: list[int] = field(default_factory=list)
    slope: float = float("nan")

    def rows(self):
        for n, t, f in zip(self.sizes, self.median_ns, self.flops):
            yield {"op": self.op, "N": n, "median_ns": int(round(t)), "flops": f}

    def to_dict(self) -> dict:
        return asdict(self)


def loglog_slope(sizes: Sequence[float], times: Sequence[float]) -> float:
    slope, _ = np.polyfit(np.log(np.asarray(sizes, float)), np.log(np.asarray(times, float)), 1)
    return float(slope)


def time_call(fn: Callable[[], object], reps: int, warmup: int = WARMUP) -> tuple[float, float]:
    """(median, interquartile range) in nanoseconds."""
    for _ in range(warmup):
        fn()
    samples = np.empty(reps)
    for i in range(reps):
        t0 = time.perf_counter_ns()
        fn()
        samples[i] = time.perf_counter_ns() - t0
    q1, med, q3 = np.percentile(samples, [25, 50, 75])
    return float(max(med, 1.0)), float(q3 - q1)


def fast_path_np(graphs: np.ndarray, weight: np.ndarray, bias: np.ndarray, x: np.ndarray) -> np.ndarray:
    agg = contract_nodes_np(graphs, x)
    out = contract_nodes_np(weight, agg)
    out += bias[:, None, None]
    return out


def dense_path_np(adj: np.ndarray, x: np.ndarray) -> np.ndarray:
    B, N, T, H = x.shape
    return np.matmul(adj, x.reshape(B, N, T * H)).reshape(B, N, T, H)


def _check_sweep(n_sweep: Sequence[int]) -> list[int]:
    sizes = [int(n) for n in n_sweep]
    if len(sizes) < 2 or sorted(sizes) != sizes or sizes[0] < 1:
        raise ValueError(f"size sweep must be ascending positive integers, got {sizes}")
    return sizes


def _finish(res: BenchResult) -> BenchResult:
    res.slope = loglog_slope(res.sizes, res.median_ns) if len(res.sizes) >= 2 else float("nan")
    return res


def bench_graph_ops(n_sweep: Sequence[int] = (256, 512, 1024, 2048, 4096), d_e: int = 8, T: int = 12,
                    H: int = 32, reps: int = 9, seed: int = 0, threads: int = 1,
                    batch: int = 1) -> tuple[BenchResult, BenchResult]:
    """Factorized aggregate+project against the dense N x N application."""
    sizes = _check_sweep(n_sweep)
    fast = BenchResult("graph_fast", sizes)
    dense = BenchResult("graph_dense", sizes)
    rng = np.random.default_rng(seed)
    with threadpool_limits(limits=threads):
        for N in sizes:
            try:
                x = rng.standard_normal((batch, N, T, H))
                graphs = softmax_columns_np(rng.standard_normal((H, N, d_e)))
                weight = rng.standard_normal((d_e, N)) / np.sqrt(d_e)
                bias = rng.standard_normal(N)
                adj = rng.standard_normal((N, N)) / np.sqrt(N)
            except MemoryError:
                raise BenchError(f"cannot allocate the N={N} problem; reduce the largest N in the sweep") from None
            for res, fn in ((fast, lambda: fast_path_np(graphs, weight, bias, x)),
                            (dense, lambda: dense_path_np(adj, x))):
                med, iqr = time_call(fn, reps)
                res.median_ns.append(med)
                res.iqr_ns.append(iqr)
            fast.flops.append(batch * flop_count("fast", N, d_e, T, H))
            dense.flops.append(batch * flop_count("dense", N, d_e, T, H))
            del adj
    return _finish(fast), _finish(dense)


def bench_kernel(T: int = 12, H: int = 32, d: int = 8, n_sweep: Sequence[int] = (512, 1024, 2048),
                 reps: int = 9, seed: int = 0, threads: int = 1) -> tuple[BenchResult, BenchResult]:
    """Kernel contraction through width d against a dense [T*H, T*H] kernel."""
    sizes = _check_sweep(n_sweep)
    TH = T * H
    fact = BenchResult("kernel_factorized", sizes)
    dense = BenchResult("kernel_dense", sizes)
    rng = np.random.default_rng(seed)
    psi = softmax_columns_np(rng.standard_normal((TH, d)))
    out_w = rng.standard_normal((d, TH)) / np.sqrt(d)
    full = rng.standard_normal((TH, TH)) / np.sqrt(TH)
    with threadpool_limits(limits=threads):
        for N in sizes:
            try:
                x = rng.standard_normal((N, TH))
            except MemoryError:
                raise BenchError(f"cannot allocate the N={N} problem; reduce the largest N in the sweep") from None
            for res, fn in ((fact, lambda: (x @ psi) @ out_w), (dense, lambda: x @ full)):
                med, iqr = time_call(fn, reps)
                res.median_ns.append(med)
                res.iqr_ns.append(iqr)
            fact.flops.append(kernel_flop_count("factorized", N, T, H, d))
            dense.flops.append(kernel_flop_count("dense", N, T, H, d))
    return _finish(fact), _finish(dense)


def speedup(slow: BenchResult, fast: BenchResult, N: int) -> float:
    i = slow.sizes.index(N)
    return slow.median_ns[i] / fast.median_ns[fast.sizes.index(N)]


def write_csv(results: Sequence[BenchResult], fh) -> None:
    w = csv.DictWriter(fh, fieldnames=["op", "N", "median_ns", "flops"], lineterminator="\n")
    w.writeheader()
    for res in results:
        w.writerows(res.rows())


def summary(results: Sequence[BenchResult], **params) -> dict:
    return {
        "params": params,
        "results": [
            {"op": r.op, "slope": r.slope, "sizes": r.sizes, "median_ns": r.median_ns,
             "iqr_ns": r.iqr_ns, "flops": r.flops}
            for r in results
        ],
    }

"""
Timing the node-mixing and kernel contractions
===============================================

Median wall time over a sweep of node counts, single-threaded BLAS. A log-log
fit of time against N gives the empirical exponent.
"""

from fastersts import bench

fast, dense = bench.bench_graph_ops((256, 512, 1024, 2048, 4096), d_e=8, T=12, H=32, reps=5, threads=1)
for res in (fast, dense):
    times = ", ".join(f"{t / 1e6:.2f}" for t in res.median_ns)
    print(f"{res.op:<12} ms: {times}   slope {res.slope:.2f}")

# the factorized kernel avoids a (T*H) x (T*H) contraction per node
fact, full = bench.bench_kernel(12, 32, 8, n_sweep=(512, 1024, 2048), reps=5, threads=1)
print(f"kernel speedup at N=2048: {bench.speedup(full, fact, 2048):.1f}x")

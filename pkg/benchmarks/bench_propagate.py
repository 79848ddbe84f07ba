"""Compare the numba CSR kernel with the dense numpy fallback for graph propagation.

Usage::

    python3 benchmarks/bench_propagate.py [--buildings 22] [--repeats 20]

Both backends are timed on the OD-pair operator of a synthetic campus for the
activation widths a training step produces (``n_graphs * hidden``), and their
outputs are checked against each other.  Run with ``CAMPUSFLOW_DISABLE_NUMBA=1``
to confirm the fallback is picked when numba is switched off.
"""

import argparse
import time

import numpy as np

from campusflow import _accel
from campusflow.graph import build_od_graph
from campusflow.kernels import Propagator
from campusflow.synth import SynthConfig, generate_campus


def time_apply(op, x, repeats):
    op.apply(x)  # warm-up (numba compiles on first call)
    t0 = time.perf_counter()
    for _ in range(repeats):
        op.apply(x)
    return (time.perf_counter() - t0) / repeats


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--buildings", type=int, default=22)
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--widths", default="14,448,1024,4096")
    args = ap.parse_args()

    campus = generate_campus(SynthConfig(n_buildings=args.buildings, seed=0))
    graph = build_od_graph(campus.buildings)
    mat = graph.norm_adjacency
    print(f"numba available: {_accel.HAVE_NUMBA} (active backend: {_accel.backend_name()})")
    print(f"operator: {mat.shape[0]} nodes, {np.count_nonzero(mat)} nonzeros "
          f"({np.count_nonzero(mat) / mat.size:.1%} dense)")

    backends = ["numpy"] + (["numba"] if _accel.HAVE_NUMBA else [])
    ops = {b: Propagator(mat, backend=b) for b in backends}
    rng = np.random.default_rng(0)
    print(f"{'width':>7} " + " ".join(f"{b + ' ms':>10}" for b in backends) + ("   speedup" if len(backends) > 1 else ""))
    for width in (int(w) for w in args.widths.split(",")):
        x = rng.standard_normal((mat.shape[0], width))
        times = {b: time_apply(op, x, args.repeats) for b, op in ops.items()}
        if len(backends) > 1:
            diff = np.max(np.abs(ops["numba"].apply(x) - ops["numpy"].apply(x)))
            if diff > 1e-9:
                raise SystemExit(f"backends disagree by {diff:g} at width {width}")
        cells = " ".join(f"{times[b] * 1e3:10.3f}" for b in backends)
        extra = f"   {times['numpy'] / times['numba']:7.2f}x" if len(backends) > 1 else ""
        print(f"{width:7d} {cells}{extra}")


if __name__ == "__main__":
    main()

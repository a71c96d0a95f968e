"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N] [--starts K]

Times the law objective+gradient, one L-BFGS solve, and a small multi-start
fit on each backend, then prints the speedup.
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from moescale import _kernels_py
from moescale.paramlaw import HUBER_DELTA, LawData, ScalingLawCoeffs, select_starts, _start_vector, grid_starts
from moescale.synth import SynthDesign, generate_runs

try:
    from moescale import _kernels as _compiled
except ImportError:  # pragma: no cover
    _compiled = None


def _data():
    truth = ScalingLawCoeffs.published_estimate()
    table = generate_runs(SynthDesign(truth=truth, sparsities=(0.0, 0.25, 0.5, 0.75, 0.9, 0.95), sizes_per_cell=17, noise_sigma=0.01))
    return LawData.from_table(table)


def _time(fn, repeat):
    out = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return statistics.median(out)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--starts", type=int, default=40)
    args = ap.parse_args()

    data = _data()
    target = np.log(data.loss)
    feats = (data.ln_n, data.ln_d, data.ln_1ms)
    theta = ScalingLawCoeffs.published_estimate().vector() + 0.05
    _, axes = grid_starts("moe")
    idx = select_starts(axes, args.starts / 437_400, seed=0)
    starts = [_start_vector(axes, int(i)) for i in idx]

    backends = {"python": _kernels_py}
    if _compiled is not None:
        backends["cython"] = _compiled

    cases = {
        "objective+grad x1000": lambda k: [k.law_objective_grad(theta, *feats, target, HUBER_DELTA, True, True) for _ in range(1000)],
        "lbfgs one solve": lambda k: k.lbfgs_law(theta, *feats, target, HUBER_DELTA, True, True, 10, 500),
        f"lbfgs {len(starts)} grid starts": lambda k: [k.lbfgs_law(s, *feats, target, HUBER_DELTA, True, True, 10, 500) for s in starts],
    }
    print(f"records: {len(data.loss)}, repeats: {args.repeat}")
    print(f"{'case':<26}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name, fn in cases.items():
        times = {b: _time(lambda k=k: fn(k), args.repeat) for b, k in backends.items()}
        row = f"{name:<26}" + "".join(f"{t * 1e3:>10.1f}ms" for t in times.values())
        if len(times) > 1:
            row += f"{times['python'] / times['cython']:>11.1f}x"
        print(row)


if __name__ == "__main__":
    main()

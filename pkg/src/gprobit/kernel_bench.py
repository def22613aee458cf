"""Benchmark the compiled kernels against the pure-Python fallback.

Run as ``python -m gprobit.kernel_bench``; times the mean-field sweep
and the Gibbs chain on a representative design for every available
backend and prints one row per (kernel, backend), plus the speedup.
"""

from __future__ import annotations

import sys
import time

import numpy as np

from ._backend import get_kernels
from .bench import SimDesign, gen_dataset
from .em import EMConfig, fit_ml
from .estep import estep_region
from .mcem import GibbsConfig, gibbs_latent
from .model import ModelParams


def _available_backends():
    names = ["python"]
    try:
        get_kernels("compiled")
        names.insert(0, "compiled")
    except RuntimeError:
        pass
    return names


def _time(fn, repeats=5):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None) -> int:
    design = SimDesign(N=100, G=10, R=200, seed=3)
    dataset, truth = gen_dataset(design)
    params = ModelParams.from_covariance(np.array([1.0]), truth["sigma_G"])
    backends = _available_backends()
    rows = []
    for name in backends:
        cfg = EMConfig(moment_map="group_average", backend=name, max_outer=500)
        sweep_t = _time(lambda: [estep_region(b, params, cfg, backend=name)
                                 for b in dataset.regions])
        gcfg = GibbsConfig(n_samples=300, burn_in=100, seed=11)
        gibbs_t = _time(
            lambda: gibbs_latent(dataset.regions[0], params, gcfg, backend=name),
            repeats=3,
        )
        fit_t = _time(lambda: fit_ml(dataset, cfg), repeats=1)
        rows.append((name, sweep_t, gibbs_t, fit_t))
        sys.stdout.write(
            f"{name:>9}: estep(all regions) {sweep_t * 1e3:8.2f} ms   "
            f"gibbs(1 region, 400 scans) {gibbs_t * 1e3:8.2f} ms   "
            f"full fit {fit_t:7.3f} s\n"
        )
    if len(rows) == 2:
        sys.stdout.write(
            f"speedup  : estep x{rows[1][1] / rows[0][1]:.1f}   "
            f"gibbs x{rows[1][2] / rows[0][2]:.1f}   "
            f"fit x{rows[1][3] / rows[0][3]:.1f}\n"
        )
    return 0


if __name__ == "__main__":
    sys.exit(main())

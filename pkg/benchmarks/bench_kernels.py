"""Time the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Workloads match the default pipeline: the ODE residual kernel on a full
181-respondent cohort, and Gram-form coordinate descent on a stage-2 sized
design (54 rows, 91 columns) along part of a lambda path.
"""
import argparse
import sys
import time

import numpy as np

sys.path.insert(0, __file__.rsplit("/", 2)[0] + "/tests")

from cohorts import truth_latents  # noqa: E402
from spdyn import _backend, lasso2, odenet  # noqa: E402
from spdyn.synthcohort import CohortSpec, gen_cohort  # noqa: E402


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def ode_workload():
    obs, _, _, truth = gen_cohort(CohortSpec(), seed=0)
    data = odenet.prepare_cohort(truth_latents(obs, truth))
    rng = np.random.default_rng(0)
    theta = np.c_[rng.uniform(-0.5, 0.5, (data.n_rows, 4)), rng.normal(size=(data.n_rows, 2))]
    return lambda b: _backend.ode_loss_grad(theta, data.events, b)


def lasso_workload():
    rng = np.random.default_rng(1)
    X, _, _ = lasso2.standardize(rng.normal(size=(54, 91)))
    y = X[:, 3] - 0.5 * X[:, 50] + rng.normal(size=54)
    y -= y.mean()
    G, c = X.T @ X, X.T @ y
    lams = lasso2.lambda_grid(lasso2.lambda_max(X, y, np.ones(91)), 30, 0.05)

    def run(b):
        beta = np.zeros(91)
        for lam in lams:
            _backend.lasso_cd(G, c, np.full(91, lam), beta, 1e-8, 10_000, b)
        return beta
    return run


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = _backend.available()
    if len(backends) < 2:
        print("compiled kernels not built; only the Python fallback is available")
    print(f"{'kernel':<16}" + "".join(f"{b.name:>12}" for b in backends) + "     speedup")
    for name, make in (("ode_loss_grad", ode_workload), ("lasso_cd path", lasso_workload)):
        work = make()
        results = [work(b) for b in backends]
        if len(results) == 2:
            a, b = results
            pairs = zip(a, b) if isinstance(a, tuple) else [(a, b)]
            for x, y in pairs:
                np.testing.assert_allclose(x, y, rtol=1e-9, atol=1e-12)
        secs = [best_of(lambda b=b: work(b), args.repeat) for b in backends]
        speed = f"{secs[-1] / secs[0]:10.1f}x" if len(secs) == 2 else ""
        print(f"{name:<16}" + "".join(f"{s * 1e3:10.2f}ms" for s in secs) + speed)


if __name__ == "__main__":
    main()

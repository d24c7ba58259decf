"""Compare the compiled (numba) and pure-numpy kernel backends.

Runs each benchmark in a subprocess with SMOOTHFIT_NUMBA set so both
backends exercise identical code paths, and prints a timing table.

    python3 benchmarks/bench_kernels.py [--quick]
"""

import argparse
import json
import os
import subprocess
import sys

WORKLOAD = r"""
import json
import time

import numpy as np
import scipy.sparse as sp

from smoothfit import backend_name, kernels, sparsela
from smoothfit.basis import bspline_basis
from smoothfit.families import CoxphFamily, SurvivalData, coxph_hess

quick = {quick}
rng = np.random.default_rng(0)
results = {{"backend": backend_name()}}

def timeit(label, fn, repeat=3):
    fn()  # warm-up / JIT
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    results[label] = best

# sparse Cholesky + solves on a multi-level-shaped pattern
levels, k = (12, 8) if quick else (40, 12)
blocks = [np.eye(k) + 0.3 * rng.standard_normal((k, k)) for _ in range(levels)]
A = sp.block_diag([b @ b.T + k * np.eye(k) for b in blocks], format="csc")
border = sp.csc_array(rng.standard_normal((A.shape[0], 6)))
A = sp.csc_array(sp.bmat([[A, border], [border.T,
                 sp.csc_array(100 * np.eye(6))]], format="csc"))
A = sp.csc_array(0.5 * (A + A.T))
sym = sparsela.SymbolicChol(A, sparsela.fill_reducing_permutation(A))
vals = sparsela.as_csc(A).data
b = rng.standard_normal(A.shape[0])
timeit("cholesky_factor", lambda: sym.factor(vals))
factor = sym.factor(vals)
timeit("triangular_solve", lambda: factor.solve(b))

# B-spline design evaluation
n = 20000 if quick else 200000
x = rng.uniform(-1.0, 1.0, n)
timeit("bspline_design", lambda: bspline_basis(x, 20, 3))

# Cox negative Hessian accumulation
n, p = (400, 10) if quick else (2000, 20)
t = rng.uniform(0.1, 5.0, n)
data, order = SurvivalData.from_unsorted(t, rng.integers(0, 2, n))
X = rng.standard_normal((n, p))[order]
eta = rng.standard_normal(n)
timeit("coxph_hessian", lambda: coxph_hess(data, eta, X))

print(json.dumps(results))
"""


def run_backend(numba_on, quick):
    env = dict(os.environ, SMOOTHFIT_NUMBA="1" if numba_on else "0")
    code = WORKLOAD.format(quick=repr(quick))
    out = subprocess.run([sys.executable, "-c", code], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--quick", action="store_true",
                    help="smaller problems (used by the test suite)")
    args = ap.parse_args()
    res_nb = run_backend(True, args.quick)
    res_np = run_backend(False, args.quick)
    labels = [k for k in res_nb if k != "backend"]
    width = max(len(l) for l in labels)
    print(f"{'kernel':<{width}}  {res_nb['backend']:>12}  "
          f"{res_np['backend']:>12}  speedup")
    for label in labels:
        a, b = res_nb[label], res_np[label]
        print(f"{label:<{width}}  {a:12.5f}  {b:12.5f}  {b / a:7.1f}x")


if __name__ == "__main__":
    main()

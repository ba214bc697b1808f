"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Inputs mirror a g=10, c=3 trial: 20,000 sampled schemes over 30 clusters,
four balancing covariates and a 20,000-split pairwise reference set.
"""
import argparse
import timeit

import numpy as np

from mcrt._kernels import backend_module
from mcrt.design import TrialDesign
from mcrt.lmm import SufficientStats
from mcrt.space import sample_space


def cases(rng):
    design = TrialDesign.balanced(3, 10, 150)
    labels = sample_space(design, 20000, seed=1).labels
    W = rng.normal(size=(30, 4))
    u = rng.normal(size=30)
    combos = np.sort(rng.permuted(np.tile(np.arange(20, dtype=np.int32), (20000, 1)), axis=1)[:, :10],
                     axis=1)
    fixed = W[20:].mean(axis=0, keepdims=True)
    X = np.column_stack([np.ones(4500), rng.normal(size=(4500, 6))])
    y = rng.normal(size=4500)
    st = SufficientStats.from_arrays(X, y, design.cluster_sizes)
    prof = (st.XtX, st.Xty, st.yty, st.S, st.t, st.m, float(st.n_obs), True)
    return {
        "balance_scores": lambda k: k.balance_scores(labels, W, (10, 10, 10)),
        "pair_subset_scores": lambda k: k.pair_subset_scores(combos, W[:20], fixed, 10, 10, 0.0),
        "arm_sums": lambda k: k.arm_sums(labels, u, 3),
        "subset_sums": lambda k: k.subset_sums(combos, u[:20]),
        "combinations(20,10)": lambda k: k.combinations(20, 10),
        "enumerate_labels(3,3,3)": lambda k: k.enumerate_labels((3, 3, 3)),
        "profile_objective": lambda k: k.profile_objective(0.05, *prof),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    py, cy = backend_module("python"), backend_module("cython")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<26}{'python ms':>12}{'cython ms':>12}{'speedup':>10}  max |diff|")
    for name, call in cases(rng).items():
        a, b = np.asarray(call(py), float), np.asarray(call(cy), float)
        diff = float(np.max(np.abs(a - b))) if a.size else 0.0
        n = max(1, args.repeat)
        tp = min(timeit.repeat(lambda: call(py), number=1, repeat=n)) * 1e3
        tc = min(timeit.repeat(lambda: call(cy), number=1, repeat=n)) * 1e3
        print(f"{name:<26}{tp:12.3f}{tc:12.3f}{tp / tc:10.1f}  {diff:.1e}")


if __name__ == "__main__":
    main()

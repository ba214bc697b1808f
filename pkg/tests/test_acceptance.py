"""Acceptance criteria 1-9.

Each Monte Carlo grid runs once per module at ``MCRT_ACCEPTANCE_REPS``
replicates per cell (default 2000) and every criterion reports one
pass/fail line in the terminal summary.
"""
import math
import os
import time
import warnings

import numpy as np
import pytest
from scipy.linalg import block_diag

from conftest import ACCEPTANCE_LINES, random_dataset
from mcrt.balance import BalanceScorer, BalanceSpec, Metric
from mcrt.design import TrialDesign
from mcrt.lmm import Method, ModelSpec, cs_inverse, marginal_loglik
from mcrt.randtests import randomization_test_global
from mcrt.sim import TESTS, DesignArm, ExperimentGrid, Family, run_grid
from mcrt.space import (SmallSpaceWarning, conditional_subspace, enumerate_space,
                        multinomial_count)

pytestmark = pytest.mark.slow

REPS = int(os.environ.get("MCRT_ACCEPTANCE_REPS", "2000"))
SEED = 20240615
DESIGNS = ("SR", "CR50", "CR10")
R_GLOBAL = TESTS.index(("R", "global"))
PAPER_POWER = {"SR": 0.469, "CR50": 0.642, "CR10": 0.826}


def arms():
    return tuple(DesignArm.parse(d) for d in DESIGNS)


def label(design):
    return "SR" if design == "SR" else f"{design}[both,l2]"


def report_line(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


class Grid:
    def __init__(self, report, grid):
        self.report = report
        self.grid = grid

    def pvalues(self, design, analysis, test_index):
        """Stored p-values of one test across replicates (single-scenario grids)."""
        a_idx = [a.label for a in self.grid.design_arms].index(label(design))
        an_idx = self.grid.analyses_for(self.grid.design_arms[a_idx]).index(analysis)
        p = self.report.results[0].pvalues[:, a_idx, an_idx, test_index]
        return p[~np.isnan(p)]

    def rate(self, design, analysis, test, hypothesis="global", alpha=0.05):
        return self.report.rate(design=label(design), analysis=analysis, test=test,
                                hypothesis=hypothesis, alpha=alpha)

    def row(self, design, analysis, test, hypothesis="global", alpha=0.05):
        return self.report.lookup(design=label(design), analysis=analysis, test=test,
                                  hypothesis=hypothesis, alpha=alpha)


def run(**kw):
    grid = ExperimentGrid(design_arms=arms(), replicates=REPS, **kw)
    t0 = time.perf_counter()
    rep = run_grid(grid, SEED, keep_results=True)
    print(f"grid {kw} ran in {time.perf_counter() - t0:.0f}s")
    return Grid(rep, grid)


@pytest.fixture(scope="module")
def null10():
    return run(g=(10,), analyses=("unadj", "fully_adj_c", "fully_adj_i"))


@pytest.fixture(scope="module")
def null3():
    return run(g=(3,), analyses=("unadj", "fully_adj_c"))


@pytest.fixture(scope="module")
def power10():
    return run(g=(10,), effect_sizes=((0.5, 0.75),), analyses=("unadj", "fully_adj_i"))


@pytest.fixture(scope="module")
def power10_half():
    return run(g=(10,), effect_sizes=((0.25, 0.375),), analyses=("fully_adj_i",))


@pytest.fixture(scope="module")
def cauchy10():
    return run(g=(10,), families=(Family.CAUCHY_RESIDUAL,), analyses=("unadj",))


def within(x, lo, hi):
    return lo <= x <= hi


def test_criterion_1_global_type_i_error(null10):
    checks = {
        "unadj chisq SR": (null10.rate("SR", "unadj", "chisq"), 0.055, 0.085),
        "unadj F SR": (null10.rate("SR", "unadj", "F"), 0.038, 0.068),
        "unadj F CR10": (null10.rate("CR10", "unadj", "F"), 0.0, 0.005),
        "adj-I F SR": (null10.rate("SR", "fully_adj_i", "F"), 0.035, 0.065),
        "adj-I F CR10": (null10.rate("CR10", "fully_adj_i", "F"), 0.035, 0.065),
    }
    for d in DESIGNS:
        for a in ("unadj", "fully_adj_c", "fully_adj_i"):
            checks[f"R {a} {d}"] = (null10.rate(d, a, "R"), 0.035, 0.065)
    bad = {k: v[0] for k, v in checks.items() if not within(*v)}
    report_line(1, not bad, "; ".join(f"{k}={v[0]:.4f}" for k, v in checks.items()))
    assert not bad


def test_criterion_2_pairwise_type_i_error(null10):
    checks = {"unadj t SR arm1": (null10.rate("SR", "unadj", "t", "arm1"), 0.039, 0.069),
              "unadj t SR arm2": (null10.rate("SR", "unadj", "t", "arm2"), 0.039, 0.069)}
    for d in ("SR", "CR10"):
        for a in ("unadj", "fully_adj_c", "fully_adj_i"):
            for h in ("arm1", "arm2"):
                checks[f"R {a} {d} {h}"] = (null10.rate(d, a, "R", h), 0.033, 0.063)
    bad = {k: v[0] for k, v in checks.items() if not within(*v)}
    report_line(2, not bad, "; ".join(f"{k}={v[0]:.4f}" for k, v in checks.items()))
    assert not bad


def test_criterion_3_small_trial(null3):
    r_rates = {f"{d} {a} {h}": null3.rate(d, a, "R", h)
               for d in DESIGNS for a in ("unadj", "fully_adj_c") for h in ("arm1", "arm2")}
    sr = null3.row("SR", "unadj", "R", "arm1")
    f_rate = null3.rate("SR", "fully_adj_c", "F")
    ok = all(v == 0.0 for v in r_rates.values()) and f_rate <= 0.01
    report_line(3, ok, f"max pairwise R rate={max(r_rates.values()):.4f} (SR reference sets of 20, "
                       f"n_invalid={sr['n_invalid']}); adj-C F SR={f_rate:.4f}")
    assert ok


def test_criterion_4_power_ordering(power10):
    p = {d: power10.rate(d, "unadj", "R") for d in DESIGNS}
    steps = (p["CR50"] - p["SR"], p["CR10"] - p["CR50"])
    ordered = min(steps) >= 0.10
    absolute = all(abs(p[d] - PAPER_POWER[d]) <= 0.08 for d in DESIGNS)
    report_line(4, ordered and absolute,
                "power " + ", ".join(f"{d}={p[d]:.3f} (target {PAPER_POWER[d]})" for d in DESIGNS)
                + f"; steps {steps[0]:.3f}, {steps[1]:.3f}; ordering {'ok' if ordered else 'FAILED'}, "
                  f"absolute {'ok' if absolute else 'FAILED'}")
    assert ordered


def test_criterion_4_power_absolute(power10):
    p = {d: power10.rate(d, "unadj", "R") for d in DESIGNS}
    off = {d: p[d] - PAPER_POWER[d] for d in DESIGNS if abs(p[d] - PAPER_POWER[d]) > 0.08}
    assert not off, f"power outside +/-0.08 of the published values: {off}"


def test_criterion_5_adjusted_power(power10, power10_half):
    full = {f"{t} {d}": power10.rate(d, "fully_adj_i", t) for d in DESIGNS for t in ("F", "R")}
    half = {d: (power10_half.rate(d, "fully_adj_i", "F"), power10_half.rate(d, "fully_adj_i", "R"))
            for d in DESIGNS}
    ok = min(full.values()) >= 0.99 and all(abs(f - r) <= 0.05 for f, r in half.values())
    report_line(5, ok, "full effect: " + ", ".join(f"{k}={v:.3f}" for k, v in full.items())
                + "; half effect F/R: " + ", ".join(f"{d}={f:.3f}/{r:.3f}" for d, (f, r) in half.items()))
    assert ok


def test_criterion_6_cauchy_residuals(cauchy10):
    r = {d: cauchy10.rate(d, "unadj", "R") for d in DESIGNS}
    f = {d: cauchy10.rate(d, "unadj", "F") for d in DESIGNS}
    ok = all(within(v, 0.035, 0.065) for v in r.values())
    report_line(6, ok, "R " + ", ".join(f"{d}={v:.4f}" for d, v in r.items())
                + " | F (recorded) " + ", ".join(f"{d}={v:.4f}" for d, v in f.items()))
    assert ok


def test_criterion_7_oracle_equivalences():
    rng = np.random.default_rng(7)
    worst = {}
    # (a) compound-symmetry inverse
    err = 0.0
    for _ in range(200):
        m = int(rng.integers(1, 60))
        se, sg = rng.uniform(0.05, 10), rng.uniform(0, 10)
        S = se * np.eye(m) + sg * np.ones((m, m))
        err = max(err, np.max(np.abs(S @ cs_inverse(m, se, sg) - np.eye(m))))
    worst["a"] = (err, 1e-10)
    # (b) marginal log-likelihood against a dense multivariate normal
    from scipy.stats import multivariate_normal
    from mcrt.lmm import build_design
    err = 0.0
    for _ in range(50):
        sizes = tuple(int(x) for x in rng.integers(1, 6, size=9))
        d = TrialDesign((3, 3, 3), sizes)
        ds = random_dataset(d, rng)
        spec = ModelSpec((0,), (), (0,))
        coef = rng.normal(size=5)
        se, sg = rng.uniform(0.2, 4), rng.uniform(0, 4)
        X = build_design(ds, spec).X
        V = block_diag(*[se * np.eye(m) + sg * np.ones((m, m)) for m in sizes])
        want = multivariate_normal(X @ coef, V).logpdf(ds.y)
        err = max(err, abs(marginal_loglik(ds, spec, coef, se, sg, Method.ML) - want) / abs(want))
    worst["b"] = (err, 1e-8)
    # (c) LMPR statistic against dense efficient-score algebra
    from test_randtests import dense_Q_all
    err = 0.0
    for _ in range(3):
        d = TrialDesign((3, 3, 3), tuple(int(x) for x in rng.integers(2, 6, size=9)))
        ds = random_dataset(d, rng)
        space = enumerate_space(d)
        spec = ModelSpec((0,), (), (0,))
        res = randomization_test_global(ds, space, spec)
        want = dense_Q_all(ds, spec, [ds.scheme.array])[0]
        err = max(err, abs(res.statistic - want) / want)
    worst["c"] = (err, 1e-8)
    # (d) Mahalanobis with a diagonal sample covariance equals l2 with default weights
    err = 0.0
    G = 12
    labels = enumerate_space(TrialDesign((4, 4, 4), (1,) * G), limit=10**5).labels[::97]
    for _ in range(50):
        A = rng.normal(size=(G, 3))
        Q, _ = np.linalg.qr(A - A.mean(axis=0))
        X = Q * rng.uniform(0.5, 3, size=3) + rng.normal(size=3)
        assert np.allclose(np.cov(X, rowvar=False), np.diag(np.diag(np.cov(X, rowvar=False))))
        l2 = BalanceScorer(X, BalanceSpec(Metric.L2)).scores(labels, (4, 4, 4))
        maha = BalanceScorer(X, BalanceSpec(Metric.MAHALANOBIS)).scores(labels, (4, 4, 4))
        err = max(err, np.max(np.abs(l2 - maha)))
    worst["d"] = (err, 1e-10)
    # (e) enumeration sizes
    bad_e = []
    for c in range(2, 6):
        for g in range(1, 8):
            d = TrialDesign.balanced(c, g, 1)
            n = math.factorial(c * g) // math.factorial(g) ** c
            if n <= 10**4 and (len(enumerate_space(d)) != n or multinomial_count(d) != n):
                bad_e.append((c, g))
    worst["e"] = (float(len(bad_e)), 0.0)
    # (f) conditional subspace sizes
    bad_f = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SmallSpaceWarning)
        for cpa in ((2, 2, 2), (3, 3, 3), (2, 3, 4), (4, 2, 3)):
            d = TrialDesign(cpa, (1,) * sum(cpa))
            space = enumerate_space(d)
            obs = space.labels[int(rng.integers(len(space)))]
            for arm in (1, 2):
                sub = conditional_subspace(space, obs, arm)
                if len(sub) != math.comb(cpa[arm - 1] + cpa[-1], cpa[arm - 1]):
                    bad_f.append((cpa, arm))
    worst["f"] = (float(len(bad_f)), 0.0)
    ok = all(v <= tol for v, tol in worst.values())
    report_line(7, ok, "; ".join(f"({k}) {v:.2e} <= {tol:g}" for k, (v, tol) in worst.items()))
    assert ok


def test_criterion_8_p_value_exactness(null3):
    rates = {}
    for d in DESIGNS:
        for a in ("unadj", "fully_adj_c"):
            for alpha in (0.01, 0.05, 0.10):
                rates[(d, a, alpha)] = float(np.mean(null3.pvalues(d, a, R_GLOBAL) <= alpha))
    bad = {k: v for k, v in rates.items() if v > k[2] + 0.02}
    report_line(8, not bad, "; ".join(f"{d} {a} a={al}: {v:.4f}" for (d, a, al), v in rates.items()))
    assert not bad


def test_criterion_9_bonferroni_cell(null10):
    rates = {f"{d} {h}": null10.rate(d, "fully_adj_i", "t", h, alpha=0.025)
             for d in ("SR", "CR10") for h in ("arm1", "arm2")}
    ok = all(within(v, 0.015, 0.035) for v in rates.values())
    report_line(9, ok, "adj-I t at 0.025: " + ", ".join(f"{k}={v:.4f}" for k, v in rates.items()))
    assert ok

import math

import numpy as np
import pytest

from mcrt.design import AllocationScheme
from mcrt.errors import ValidationError
from mcrt.sim import (ANALYSES, TESTS, DesignArm, DgpConfig, ExperimentGrid, Family,
                      effect_from_es, generate_covariates, generate_dataset, icc_to_sigma_gamma2,
                      rejection_rate, run_grid, run_replicate, run_scenario)
from mcrt.space import Count, Quantile


def test_icc_conversion_example():
    assert icc_to_sigma_gamma2(0.05, 4.0) == pytest.approx(4 / 19)
    assert icc_to_sigma_gamma2(0.0, 4.0) == 0.0
    with pytest.raises(ValidationError):
        icc_to_sigma_gamma2(1.0, 4.0)


def test_effect_size_example():
    assert effect_from_es(0.5, 0.05, 4.0) == pytest.approx(0.5130, abs=5e-5)
    assert DgpConfig(effect_sizes=(0.5, 0.75)).delta[1] == pytest.approx(
        0.75 * math.sqrt(4 + 4 / 19) / 2)
    assert DgpConfig(deltas=(0.1, 0.2)).delta == (0.1, 0.2)
    assert DgpConfig(effect_sizes=(0.5, 0.75)).scaled(0.5).effect_sizes == (0.25, 0.375)


def test_config_validation():
    with pytest.raises(ValidationError):
        DgpConfig(effect_sizes=(0.5,))
    with pytest.raises(ValidationError):
        DgpConfig(c=1)
    with pytest.raises(ValidationError):
        DgpConfig(p_x=1.0)


def test_covariate_generator():
    cfg = DgpConfig(g=4, m=30)
    cov = generate_covariates(cfg, np.random.default_rng(1))
    assert cov.cluster_level.shape == (12, 2) and cov.individual_level.shape == (360, 2)
    assert set(np.unique(cov.cluster_level)) <= {0.0, 1.0}
    assert np.all(cov.cluster_level.var(axis=0) > 0)
    zbar = cov.individual_level.reshape(12, 30, 2).mean(axis=1)
    # shared cluster mean: both z columns centre on the same mu_j
    assert np.max(np.abs(zbar[:, 0] - zbar[:, 1])) < 1.5
    within = cov.individual_level.reshape(12, 30, 2) - zbar[:, None, :]
    assert within.var() == pytest.approx(1.0, rel=0.15)


def test_outcome_moments():
    cfg = DgpConfig(g=20, m=40, rho=0.2, effect_sizes=(0.5, 0.0))
    d = cfg.design
    rng = np.random.default_rng(3)
    scheme = AllocationScheme(tuple(d.base_labels), d)
    means, within = [], []
    for _ in range(40):
        ds = generate_dataset(cfg, scheme, rng)
        cov = ds.covariates
        idx = np.repeat(np.arange(d.n_clusters), d.cluster_sizes)
        mean = (cov.individual_level @ np.array(cfg.beta_z)
                + (cov.cluster_level @ np.array(cfg.beta_x)
                   + scheme.indicators @ np.array(cfg.delta))[idx] + cfg.mu_gamma)
        r = (ds.y - mean).reshape(d.n_clusters, cfg.m)
        means.append(r.mean(axis=1))
        within.append(r.var(axis=1, ddof=1).mean())
    means = np.concatenate(means)
    assert abs(means.mean()) < 0.05
    assert means.var() == pytest.approx(cfg.sigma_gamma2 + cfg.sigma_eps2 / cfg.m, rel=0.1)
    assert np.mean(within) == pytest.approx(cfg.sigma_eps2, rel=0.02)


def test_cauchy_families_are_heavy_tailed():
    cfg = DgpConfig(g=2, m=2000, family=Family.CAUCHY_RESIDUAL)
    d = cfg.design
    rng = np.random.default_rng(5)
    cov = generate_covariates(cfg, rng)
    ds = generate_dataset(cfg, AllocationScheme(tuple(d.base_labels), d), rng, covariates=cov)
    idx = np.repeat(np.arange(d.n_clusters), d.cluster_sizes)
    r = ds.y - cov.individual_level.sum(axis=1) - cov.cluster_level.sum(axis=1)[idx]
    r = r - np.median(r)
    # standard Cauchy: median |e| is 1 and extremes are far out
    assert np.max(np.abs(r)) > 100


def test_design_arm_parsing():
    assert DesignArm.parse("SR").cutoff is None
    cr = DesignArm.parse("CR10", covset="x")
    assert cr.cutoff == Quantile(0.1) and cr.covset == "x" and cr.label == "CR10[x,l2]"
    assert DesignArm.parse("CRn100").cutoff == Count(100)
    with pytest.raises(ValidationError):
        DesignArm.parse("XR")
    with pytest.raises(ValidationError):
        DesignArm("CR", Quantile(0.1), "nope")


def test_grid_validation_lists_every_problem():
    with pytest.raises(ValidationError) as exc:
        ExperimentGrid(g=(0,), rho=(1.5,), replicates=0, analyses=("bogus",))
    msg = str(exc.value)
    for part in ("replicates", "g values", "ICC", "bogus"):
        assert part in msg


def test_grid_scenarios_and_defaults():
    grid = ExperimentGrid(g=(2, 3), rho=(0.01, 0.05), effect_sizes=((0, 0), (0.5, 0.75)))
    assert len(list(grid.scenarios())) == 8
    sr, cr50, cr10 = grid.design_arms
    assert grid.analyses_for(sr) == ANALYSES
    assert grid.analyses_for(cr10) == ("unadj", "fully_adj_c", "fully_adj_i")


SMALL = ExperimentGrid(g=(2,), replicates=6, m=20, design_arms=(
    DesignArm("SR"), DesignArm("CR50", Quantile(0.5), "both")), analyses=("unadj", "fully_adj_i"))


def test_replicate_is_deterministic_and_shaped():
    cfg = next(SMALL.scenarios())
    a = run_replicate(cfg, SMALL, 7, 0, 3)
    b = run_replicate(cfg, SMALL, 7, 0, 3)
    np.testing.assert_array_equal(a[0], b[0])
    assert a[0].shape == (2, 2, len(TESTS))
    # g=2: C(6; 2,2,2) = 90 schemes, pairwise sets C(4, 2) = 6
    assert tuple(a[1][0]) == (90, 6, 6)
    # scores are invariant to relabelling arms, so ties come in groups of 3! = 6
    assert a[1][1][0] == 48
    assert not a[2].any()
    c = run_replicate(cfg, SMALL, 7, 0, 4)
    assert not np.array_equal(a[0], c[0], equal_nan=True)


def test_failed_analysis_does_not_void_the_others(monkeypatch):
    import mcrt.sim as sim

    real = sim._analysis_row

    def flaky(stats, labels, obs, layouts, design, name, *rest):
        if name == "fully_adj_i":
            raise sim.McrtError("forced")
        return real(stats, labels, obs, layouts, design, name, *rest)

    cfg = next(SMALL.scenarios())
    ref = run_replicate(cfg, SMALL, 7, 0, 3)
    monkeypatch.setattr(sim, "_analysis_row", flaky)
    pv, _, err = run_replicate(cfg, SMALL, 7, 0, 3)
    np.testing.assert_array_equal(err, [[0, 1], [0, 1]])
    np.testing.assert_array_equal(pv[:, 0], ref[0][:, 0])
    assert np.isnan(pv[:, 1]).all()


def test_worker_count_does_not_change_results():
    cfg = next(SMALL.scenarios())
    grid = ExperimentGrid(g=(2,), replicates=30, m=10, design_arms=(DesignArm("SR"),),
                          analyses=("unadj",))
    one = run_scenario(cfg, grid, 11, workers=1)
    two = run_scenario(cfg, grid, 11, workers=2)
    np.testing.assert_array_equal(one.pvalues, two.pvalues)
    np.testing.assert_array_equal(one.sizes, two.sizes)


def test_frozen_covariates_share_one_draw():
    grid = ExperimentGrid(g=(2,), replicates=2, m=10, design_arms=(DesignArm("CR10", Quantile(0.1), "x"),),
                          analyses=("unadj",), freeze_covariates=True)
    cfg = next(grid.scenarios())
    a = run_replicate(cfg, grid, 1, 0, 0)
    b = run_replicate(cfg, grid, 1, 0, 1)
    # same covariates give the same constrained space size
    assert a[1][0, 0] == b[1][0, 0]


def test_rejection_rate_rules():
    p = np.array([0.01, 0.05, 0.2, np.nan])
    rate, se, n = rejection_rate(p, 0.05)
    assert (rate, n) == (pytest.approx(2 / 3), 3)
    assert se == pytest.approx(math.sqrt(2 / 3 * 1 / 3 / 3))
    assert rejection_rate(p, 0.05, randomization=True)[0] == pytest.approx(1 / 3)
    assert math.isnan(rejection_rate([np.nan], 0.05)[0])


def test_report_is_reproducible():
    a = run_grid(SMALL, seed=2, config_hash="abc")
    b = run_grid(SMALL, seed=2, config_hash="abc")
    assert a.to_csv() == b.to_csv()
    lines = a.to_csv().splitlines()
    assert lines[0] == "# schema_version=1"
    assert "# config_hash=abc" in lines and "# seed=2" in lines
    row = a.lookup(design="SR", analysis="unadj", test="R", hypothesis="arm1", alpha=0.05)
    # every g=2 pairwise reference set has 6 schemes
    assert row["n_invalid"] == 6 and row["replicates"] == 6
    assert row["rate"] == 0.0
    # global tests are reported at the first alpha only
    with pytest.raises(KeyError):
        a.lookup(design="SR", analysis="unadj", test="chisq", hypothesis="global", alpha=0.025)
    assert a.summary()["n_rows"] == len(a.rows)

import itertools
import warnings

import numpy as np
import pytest
from scipy.linalg import block_diag

from conftest import random_dataset
from mcrt.balance import BalanceScorer, BalanceSpec
from mcrt.design import AllocationScheme, TrialDesign
from mcrt.errors import ProtocolError, ValidationError
from mcrt.lmm import Method, ModelSpec, build_design
from mcrt.randtests import (invert_ci, lmpr_statistic, null_fit_for, permutation_p_value,
                            randomization_test_global, randomization_test_pairwise, score_blocks,
                            umpr_statistic)
from mcrt.space import Quantile, constrain, enumerate_space, sample_space

SPEC = ModelSpec(cluster_columns=(0,), individual_columns=(0,))


def dense_V(design, s_eps2, s_gam2):
    return block_diag(*[s_eps2 * np.eye(m) + s_gam2 * np.ones((m, m)) for m in design.cluster_sizes])


def indicator_matrix(labels, design):
    T = np.where(np.asarray(labels)[:, None] == np.asarray(design.treatment_arms)[None, :], 1.0, -1.0)
    return np.repeat(T, design.cluster_sizes, axis=0)


def dense_Q_all(dataset, spec, all_labels):
    """Efficient-score statistic for every scheme from dense matrices.

    The information blocks are averaged by brute force over every scheme of
    the unconstrained design.
    """
    design = dataset.design
    nf, _ = null_fit_for(dataset, spec)
    Z = build_design(dataset, spec.with_treatments(())).X
    Vi = np.linalg.inv(dense_V(design, nf.sigma_eps2, nf.sigma_gamma2))
    r = dataset.y - Z @ nf.coef
    full = enumerate_space(design).labels
    Idd = np.zeros((design.n_arms - 1,) * 2)
    Ide = np.zeros((design.n_arms - 1, Z.shape[1]))
    for lab in full:
        D = indicator_matrix(lab, design)
        Idd += D.T @ Vi @ D
        Ide += D.T @ Vi @ Z
    Idd /= len(full)
    Ide /= len(full)
    M = Idd - Ide @ np.linalg.solve(Z.T @ Vi @ Z, Ide.T)
    out = []
    for lab in all_labels:
        S = indicator_matrix(lab, design).T @ Vi @ r
        out.append(S @ np.linalg.solve(M, S))
    return np.array(out)


@pytest.fixture
def trial(rng, small_design):
    ds = random_dataset(small_design, rng, effects=(0.4, 0.1))
    return ds, enumerate_space(small_design)


def test_global_statistic_matches_dense_oracle(trial):
    ds, space = trial
    Q = dense_Q_all(ds, SPEC, space.labels)
    res = randomization_test_global(ds, space, SPEC)
    obs = space.index_of(ds.scheme)
    assert res.statistic == pytest.approx(Q[obs], rel=1e-8)
    assert res.p_value == pytest.approx(np.mean(Q >= Q[obs] - 1e-9 * Q.max()), abs=1e-12)
    assert res.reference_size == 1680


def test_score_blocks_match_dense_oracle(trial):
    ds, space = trial
    nf, _ = null_fit_for(ds, SPEC)
    other = space.labels[7]
    blocks = score_blocks(ds, nf, other, SPEC)
    assert lmpr_statistic(blocks) == pytest.approx(dense_Q_all(ds, SPEC, [other])[0], rel=1e-8)


def test_global_statistic_without_covariates(rng):
    d = TrialDesign((2, 2, 2), (3, 5, 2, 4, 6, 3))
    ds = random_dataset(d, rng, p_cluster=0, p_indiv=0)
    space = enumerate_space(d)
    Q = dense_Q_all(ds, ModelSpec(), space.labels)
    res = randomization_test_global(ds, space)
    assert res.statistic == pytest.approx(Q[space.index_of(ds.scheme)], rel=1e-8)


def test_two_arm_global_is_squared_score(rng):
    d = TrialDesign.balanced(2, 4, 6)
    ds = random_dataset(d, rng, p_cluster=0)
    nf, _ = null_fit_for(ds, ModelSpec(individual_columns=(0,)))
    b = score_blocks(ds, nf, spec=ModelSpec(individual_columns=(0,)))
    M = b.efficient_information
    assert M.shape == (1, 1)
    assert lmpr_statistic(b) == pytest.approx(b.S_delta[0] ** 2 / M[0, 0], rel=1e-12)


def test_q_invariant_to_covariate_order(trial, rng):
    ds, space = trial
    cov = ds.covariates
    Z2 = np.column_stack([cov.individual_level, rng.normal(size=cov.individual_level.shape[0])])
    from mcrt.design import CovariateTable, OutcomeDataset
    ds2 = OutcomeDataset(ds.design, ds.scheme, CovariateTable(cov.cluster_level, Z2, cov.cluster_sizes), ds.y)
    a = randomization_test_global(ds2, space, ModelSpec(individual_columns=(0, 1)))
    b = randomization_test_global(ds2, space, ModelSpec(individual_columns=(1, 0)))
    assert a.statistic == pytest.approx(b.statistic, rel=1e-9)
    assert a.p_value == b.p_value


def test_pairwise_matches_brute_force(trial):
    ds, space = trial
    design = ds.design
    obs = ds.scheme.array
    for arm in (1, 2):
        other = 3 - arm
        spec = SPEC
        X = build_design(ds, spec.with_treatments((other,))).X
        nf, _ = null_fit_for(ds, spec, drop=(arm,))
        Vi = np.linalg.inv(dense_V(design, nf.sigma_eps2, nf.sigma_gamma2))
        r = ds.y - X @ nf.coef
        stats_ = []
        for lab in space.labels:
            if np.array_equal(lab == other, obs == other):
                t = np.repeat(np.where(lab == arm, 1.0, -1.0), design.cluster_sizes)
                stats_.append(abs(t @ Vi @ r))
        stats_ = np.array(stats_)
        observed = abs(np.repeat(np.where(obs == arm, 1.0, -1.0), design.cluster_sizes) @ Vi @ r)
        res = randomization_test_pairwise(ds, space, arm, spec)
        assert res.reference_size == len(stats_) == 20
        assert res.statistic == pytest.approx(observed, rel=1e-8)
        assert res.p_value == pytest.approx(np.mean(stats_ >= observed - 1e-9 * stats_.max()))
        assert abs(umpr_statistic(ds, nf, arm, ds.scheme)) == pytest.approx(observed, rel=1e-8)


def test_flipping_indicators_negates_score(trial):
    ds, _ = trial
    nf, _ = null_fit_for(ds, SPEC, drop=(1,))
    lab = ds.scheme.array.copy()
    swapped = np.where(lab == 1, 3, np.where(lab == 3, 1, lab))
    a = umpr_statistic(ds, nf, 1, ds.scheme)
    b = umpr_statistic(ds, nf, 1, AllocationScheme(tuple(swapped), ds.design))
    # arm-1 and reference labels trade places, so T flips on every pooled cluster
    pooled = np.isin(lab, (1, 3))
    u = nf.weights * nf.cluster_resid
    assert a + b == pytest.approx(-2 * np.sum(u[~pooled]), abs=1e-10)
    with pytest.raises(ValidationError):
        umpr_statistic(ds, null_fit_for(ds, SPEC)[0].__class__ and
                       null_fit_for(ds, SPEC, drop=(2,))[0], 1, ds.scheme)


def test_p_value_floor_and_rule():
    assert permutation_p_value([3.0, 1.0, 2.0], 0) == pytest.approx(1 / 3)
    assert permutation_p_value([1.0, 1.0, 2.0], 0) == 1.0
    assert permutation_p_value([5.0] * 4, 2) == 1.0
    # rounding noise does not break a tie
    assert permutation_p_value([2.0, 2.0 - 1e-13, 1.0], 0) == pytest.approx(2 / 3)


def test_strict_rejection_at_floor(rng):
    d = TrialDesign.balanced(2, 3, 5)
    ds = random_dataset(d, rng, effects=(3.0,), sigma_gamma=0.0)
    space = enumerate_space(d)
    res = randomization_test_pairwise(ds, space, 1, ModelSpec())
    assert res.reference_size == 20 and res.valid
    assert res.p_value >= 0.05
    assert not res.reject
    assert res.min_achievable_p == 0.05


def test_observed_outside_space_is_refused(trial, rng):
    ds, space = trial
    X = rng.normal(size=(9, 1))
    con = constrain(space.scored(BalanceScorer(X)), BalanceScorer(X), Quantile(0.05))
    outside = next(l for l in space.labels if con.index_of(l) < 0)
    bad = ds.__class__(ds.design, AllocationScheme(tuple(outside), ds.design), ds.covariates, ds.y)
    with pytest.raises(ProtocolError):
        randomization_test_global(bad, con)
    with pytest.raises(ProtocolError):
        randomization_test_pairwise(bad, con, 1)


def test_single_scheme_space(rng):
    d = TrialDesign.balanced(2, 2, 4)
    ds = random_dataset(d, rng, p_cluster=0, p_indiv=0)
    space = enumerate_space(d)
    tiny = space.__class__(d, ds.scheme.array[None, :], None, space.provenance, 0)
    with pytest.warns(UserWarning):
        res = randomization_test_global(ds, tiny)
    assert res.p_value == 1.0 and res.flags == ("small_reference_space",)
    assert not res.valid


def test_sampled_space_pairwise_uses_seed(rng):
    d = TrialDesign.balanced(3, 12, 4)
    ds = random_dataset(d, rng, p_cluster=0)
    space = sample_space(d, 300, seed=4)
    if ds.scheme not in space:
        ds = ds.__class__(d, space.schemes[0], ds.covariates, ds.y)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = randomization_test_pairwise(ds, space, 1, seed=9)
        b = randomization_test_pairwise(ds, space, 1, seed=9)
    assert a == b
    assert a.reference_size >= 290


def test_confidence_interval_inversion(trial):
    ds, space = trial
    ci = invert_ci(ds, space, 1, spec=SPEC, alpha=0.1, n_grid=21)
    assert ci.lower is not None and ci.lower <= ci.upper
    kept = ci.grid[ci.p_values > 0.1]
    assert ci.lower == kept.min() and ci.upper == kept.max()
    assert ci.difference == (2 * ci.lower, 2 * ci.upper)
    # spot-check one grid point against a direct shifted test
    k = 5
    ind = np.repeat(np.where(ds.scheme.array == 1, 1.0, -1.0), ds.design.cluster_sizes)
    shifted = ds.with_outcomes(ds.y - ci.grid[k] * ind)
    assert randomization_test_pairwise(shifted, space, 1, SPEC).p_value == ci.p_values[k]
    with pytest.raises(ValidationError):
        invert_ci(ds, space, 1, grid=[0.2, 0.1])
    top = float(ci.p_values.max())
    none = invert_ci(ds, space, 1, grid=ci.grid, spec=SPEC, alpha=top)
    assert none.lower is None and none.flags == ("degenerate",)

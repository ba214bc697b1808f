"""Randomization tests built on score statistics from a null mixed-model fit.

Nuisance parameters come from one fit of the null model to the observed data
and stay fixed over the reference set.  A candidate scheme then only changes
the +/-1 indicators, and both statistics are linear in them through the
weighted cluster residual totals ``u_j = W_j * sum_k (Y_jk - fitted_jk)``:

* pairwise (arm i vs reference): ``S_i = sum_j T_ij u_j`` with the other
  arms' effects estimated and held at their observed indicators;
* global: ``Q = S' M^{-1} S`` with ``S_i = sum_j T_ij u_j`` from the fit
  without any treatment effect and ``M`` the efficient information.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .design import OutcomeDataset, TrialDesign, check_labels
from .errors import NumericalError, ProtocolError, ValidationError
from .lmm import LmmFit, Method, ModelSpec, SufficientStats, build_design, fit, fit_stats
from .space import (MIN_REFERENCE_SIZE, PairwiseLayout, RandomizationSpace,
                    pairwise_layout)


@dataclass(frozen=True)
class RandTestResult:
    hypothesis: str
    statistic: float
    reference_size: int
    p_value: float
    alpha: float = 0.05
    flags: tuple = ()

    @property
    def min_achievable_p(self) -> float:
        return 1.0 / self.reference_size

    @property
    def valid(self) -> bool:
        return self.reference_size >= MIN_REFERENCE_SIZE

    @property
    def reject(self) -> bool:
        # strict: with R = 20 the smallest p is 0.05 and must not reject at 0.05
        return bool(self.p_value < self.alpha)

    def to_dict(self) -> dict:
        return {
            "hypothesis": self.hypothesis,
            "statistic": self.statistic,
            "reference_size": self.reference_size,
            "p_value": self.p_value,
            "min_achievable_p": self.min_achievable_p,
            "alpha": self.alpha,
            "reject": self.reject,
            "flags": list(self.flags),
        }


def _flags(R):
    return ("small_reference_space",) if R < MIN_REFERENCE_SIZE else ()


TIE_RTOL = 1e-9


def permutation_p_value(values, observed_index: int) -> float:
    """Share of reference values at least as extreme as the observed one, observed included.

    Values within ``TIE_RTOL`` (relative to the largest magnitude) count as
    ties, so schemes that are equivalent up to relabelling are not split by
    rounding noise.
    """
    values = np.asarray(values, float)
    tol = TIE_RTOL * max(1.0, float(np.max(np.abs(values))))
    return float(np.count_nonzero(values >= values[observed_index] - tol) / values.shape[0])


def weighted_residual_totals(null_fit: LmmFit) -> np.ndarray:
    """``u_j = W_j`` times the cluster total of null-model residuals."""
    return null_fit.weights * null_fit.cluster_resid


def umpr_statistic(dataset: OutcomeDataset, null_fit: LmmFit, arm: int, scheme) -> float:
    """``S_i`` for a candidate scheme; other arms' effects use the observed indicators."""
    if arm in null_fit.treatment_arms:
        raise ValidationError(f"the null fit must exclude arm {arm}")
    lab = scheme.array if hasattr(scheme, "array") else check_labels(scheme, dataset.design)
    T = np.where(lab == arm, 1.0, -1.0)
    return float(T @ weighted_residual_totals(null_fit))


@dataclass(frozen=True)
class ScoreBlocks:
    S_delta: np.ndarray
    I_dd: np.ndarray
    I_de: np.ndarray
    I_ee: np.ndarray
    pi: np.ndarray
    W: np.ndarray = field(repr=False)

    @property
    def I_ed(self) -> np.ndarray:
        return self.I_de.T

    @property
    def efficient_information(self) -> np.ndarray:
        M = self.I_dd - self.I_de @ np.linalg.solve(self.I_ee, self.I_ed)
        return 0.5 * (M + M.T)


def information_blocks(null_stats: SufficientStats, null_fit: LmmFit, design: TrialDesign):
    """Randomization-averaged information blocks ``(I_dd, I_de, I_ee)``.

    ``null_stats`` must describe the design of ``null_fit`` (no treatment columns).
    """
    W = null_fit.weights
    m = null_stats.m
    s2 = null_fit.sigma_eps2
    pi = design.allocation
    arms = np.asarray(design.treatment_arms) - 1
    p_t = pi[arms]
    k = arms.shape[0]
    Q = 1.0 - 2.0 * p_t[:, None] - 2.0 * p_t[None, :]
    np.fill_diagonal(Q, 1.0)
    I_dd = float(np.sum(m * W)) * Q
    w = null_fit.theta / (1.0 + m * null_fit.theta)
    I_ee = (null_stats.XtX - (null_stats.S * w[:, None]).T @ null_stats.S) / s2
    zsum = null_stats.S.T @ W
    I_de = (2.0 * p_t - 1.0)[:, None] * zsum[None, :]
    return I_dd, I_de.reshape(k, -1), I_ee


def score_blocks(dataset: OutcomeDataset, null_fit: LmmFit, scheme=None,
                 spec: ModelSpec = ModelSpec()) -> ScoreBlocks:
    """Efficient-score pieces for the global null at ``scheme`` (observed by default)."""
    if null_fit.treatment_arms:
        raise ValidationError("the global null fit must not contain treatment effects")
    design = dataset.design
    dm = build_design(dataset, spec.with_treatments(()))
    st = SufficientStats.from_arrays(dm.X, dataset.y, design.cluster_sizes)
    I_dd, I_de, I_ee = information_blocks(st, null_fit, design)
    sch = dataset.scheme if scheme is None else scheme
    lab = sch.array if hasattr(sch, "array") else check_labels(sch, design)
    u = weighted_residual_totals(null_fit)
    T = np.where(lab[:, None] == np.asarray(design.treatment_arms)[None, :], 1.0, -1.0)
    return ScoreBlocks(T.T @ u, I_dd, I_de, I_ee, design.allocation, null_fit.weights)


def efficient_chol(I_dd, I_de, I_ee) -> np.ndarray:
    M = I_dd - I_de @ np.linalg.solve(I_ee, I_de.T)
    M = 0.5 * (M + M.T)
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("efficient information is not positive definite") from exc


def lmpr_statistic(blocks: ScoreBlocks) -> float:
    """``Q = S' (I_dd - I_de I_ee^{-1} I_ed)^{-1} S``."""
    L = efficient_chol(blocks.I_dd, blocks.I_de, blocks.I_ee)
    z = np.linalg.solve(L, blocks.S_delta)
    return float(z @ z)


def lmpr_values(labels, u, design: TrialDesign, chol) -> np.ndarray:
    """Q for every label row, given weighted residual totals and ``chol(M)``."""
    sums = _kernels.arm_sums(labels, u, design.n_arms)
    cols = np.asarray(design.treatment_arms) - 1
    S = 2.0 * sums[:, cols] - float(np.sum(u))
    Z = np.linalg.solve(chol, S.T)
    return np.einsum("kr,kr->r", Z, Z)


def umpr_values(layout: PairwiseLayout, u) -> np.ndarray:
    """|S_i| for every candidate of a pairwise layout."""
    u = np.asarray(u, float)
    part = _kernels.subset_sums(layout.combos, u[layout.pool])
    return np.abs(2.0 * part - float(np.sum(u)))


def _null_stats(dataset, spec, drop):
    design = dataset.design
    keep = tuple(a for a in spec.arms_for(design) if a not in drop)
    dm = build_design(dataset, spec.with_treatments(keep))
    st = SufficientStats.from_arrays(dm.X, dataset.y, design.cluster_sizes)
    return dm, st


def null_fit_for(dataset, spec=ModelSpec(), method=Method.REML, drop=None):
    """Fit with the arms in ``drop`` removed (all arms when ``drop`` is None)."""
    design = dataset.design
    drop = design.treatment_arms if drop is None else tuple(drop)
    dm, st = _null_stats(dataset, spec, drop)
    nf = fit_stats(st, dm.names, method, treatment_arms=dm.treatment_arms,
                   all_treatment_arms=design.treatment_arms,
                   treatment_slice=dm.treatment_slice, n_cluster_level=dm.n_cluster_level)
    return nf, st


def _observed_row(space, dataset):
    idx = space.index_of(dataset.scheme)
    if idx < 0:
        raise ProtocolError("observed scheme is not a member of the randomization space; "
                            "the test refuses to append it")
    return idx


def randomization_test_global(dataset: OutcomeDataset, space: RandomizationSpace,
                              spec: ModelSpec = ModelSpec(), method=Method.REML,
                              alpha: float = 0.05) -> RandTestResult:
    """LMPR test of no effect in any arm, referenced to every scheme in ``space``."""
    if space.design != dataset.design:
        raise ValidationError("space and dataset use different designs")
    obs = _observed_row(space, dataset)
    nf, st = null_fit_for(dataset, spec, method)
    chol = efficient_chol(*information_blocks(st, nf, dataset.design))
    Q = lmpr_values(space.labels, weighted_residual_totals(nf), dataset.design, chol)
    R = len(space)
    if R < MIN_REFERENCE_SIZE:
        warnings.warn(f"reference space has only {R} schemes", UserWarning, stacklevel=2)
    return RandTestResult("global", float(Q[obs]), R, permutation_p_value(Q, obs), alpha, _flags(R))


def randomization_test_pairwise(dataset: OutcomeDataset, space: RandomizationSpace, arm: int,
                                spec: ModelSpec = ModelSpec(), method=Method.REML,
                                alpha: float = 0.05, seed=None,
                                layout: PairwiseLayout | None = None) -> RandTestResult:
    """UMPR test of arm ``arm`` against the reference arm.

    Other arms keep their observed assignment.  ``layout`` may be passed to
    reuse a reference set across calls (as the interval inversion does).
    """
    if space.design != dataset.design:
        raise ValidationError("space and dataset use different designs")
    _observed_row(space, dataset)
    if layout is None:
        layout = pairwise_layout(space, dataset.scheme, arm, seed=seed, check=False)
    nf, _ = null_fit_for(dataset, spec, method, drop=(arm,))
    vals = umpr_values(layout, weighted_residual_totals(nf))
    obs = layout.observed_index()
    R = len(layout)
    return RandTestResult(f"arm{arm}", float(vals[obs]), R, permutation_p_value(vals, obs),
                          alpha, _flags(R))


@dataclass(frozen=True)
class ConfidenceInterval:
    arm: int
    lower: float | None
    upper: float | None
    grid: np.ndarray = field(repr=False)
    p_values: np.ndarray = field(repr=False)
    alpha: float = 0.05
    flags: tuple = ()

    @property
    def difference(self) -> tuple:
        """The interval on the arm-minus-reference scale (twice the effect)."""
        if self.lower is None:
            return (None, None)
        return (2 * self.lower, 2 * self.upper)

    def to_dict(self) -> dict:
        return {"arm": self.arm, "delta": [self.lower, self.upper],
                "difference": list(self.difference), "alpha": self.alpha,
                "grid_points": int(self.grid.shape[0]), "flags": list(self.flags)}


def invert_ci(dataset: OutcomeDataset, space: RandomizationSpace, arm: int, grid=None,
              alpha: float = 0.05, spec: ModelSpec = ModelSpec(), method=Method.REML,
              seed=None, n_grid: int = 81, width_se: float = 4.0) -> ConfidenceInterval:
    """Interval for ``delta_arm`` from the grid values the pairwise test does not reject.

    For each ``d0`` the outcomes are shifted by ``-d0 * T_arm`` (observed
    indicators) and the pairwise test is rerun on the same reference set.
    The default grid has ``n_grid`` points over the full-model estimate
    plus or minus ``width_se`` standard errors.
    """
    _observed_row(space, dataset)
    if grid is None:
        full = fit(dataset, spec, method)
        est, se = full.effect(arm), full.effect_se(arm)
        grid = np.linspace(est - width_se * se, est + width_se * se, n_grid)
    grid = np.asarray(grid, float)
    if grid.ndim != 1 or grid.size == 0 or not np.all(np.isfinite(grid)):
        raise ValidationError("CI grid must be a finite, nonempty vector")
    if np.any(np.diff(grid) <= 0):
        raise ValidationError("CI grid must be strictly increasing")
    layout = pairwise_layout(space, dataset.scheme, arm, seed=seed, check=False)
    ind = np.where(dataset.scheme.array == arm, 1.0, -1.0)
    ind = np.repeat(ind, dataset.design.cluster_sizes)
    pv = np.empty(grid.shape[0])
    for g, d0 in enumerate(grid):
        shifted = dataset.with_outcomes(dataset.y - d0 * ind)
        pv[g] = randomization_test_pairwise(shifted, space, arm, spec, method, alpha,
                                            layout=layout).p_value
    kept = np.flatnonzero(pv > alpha)
    flags = []
    if kept.size == 0:
        return ConfidenceInterval(arm, None, None, grid, pv, alpha, ("degenerate",))
    if kept[-1] - kept[0] + 1 != kept.size:
        flags.append("non_contiguous")
    if kept[0] == 0 or kept[-1] == grid.shape[0] - 1:
        flags.append("grid_edge")
    return ConfidenceInterval(arm, float(grid[kept[0]]), float(grid[kept[-1]]), grid, pv,
                              alpha, tuple(flags))

"""Random-intercept linear mixed model fitted by profile (restricted) likelihood.

Each cluster has covariance ``sigma_eps2 * I + sigma_gamma2 * J``.  Writing
``theta = sigma_gamma2 / sigma_eps2`` and ``w_j = theta / (1 + m_j theta)``,

    Sigma_j^{-1} = (I - w_j J) / sigma_eps2,
    log|Sigma_j| = m_j log sigma_eps2 + log(1 + m_j theta),

so every GLS quantity follows from the pooled cross products ``X'X``, ``X'y``,
``y'y`` and the per-cluster totals ``s_j = X_j' 1`` and ``t_j = y_j' 1``.  For
fixed theta the fixed effects and sigma_eps2 have closed forms; theta itself is
found by a bounded one-dimensional search.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from . import _kernels
from .design import (OutcomeDataset, aggregate_to_cluster, cluster_index, cluster_sums,
                     is_cluster_constant)
from .errors import CollinearityError, ConvergenceError, NumericalError, ValidationError

THETA_MAX = 50.0
THETA_XATOL = 1e-9
_GRID = np.concatenate([[0.0], np.geomspace(1e-4, THETA_MAX, 28)])


class Method(str, enum.Enum):
    ML = "ML"
    REML = "REML"


@dataclass(frozen=True)
class ModelSpec:
    """Mean-model specification.

    ``cluster_columns`` index the cluster-level covariate table,
    ``aggregate_columns`` index individual-level columns entered as cluster
    means, ``individual_columns`` index individual-level columns entered as is.
    ``treatment_arms`` lists the arms whose effects are estimated; ``None``
    means every non-reference arm and an empty tuple fits the null model.
    """

    cluster_columns: tuple = ()
    aggregate_columns: tuple = ()
    individual_columns: tuple = ()
    treatment_arms: tuple | None = None

    def __post_init__(self):
        for name in ("cluster_columns", "aggregate_columns", "individual_columns"):
            object.__setattr__(self, name, tuple(int(c) for c in getattr(self, name)))
        if self.treatment_arms is not None:
            object.__setattr__(self, "treatment_arms", tuple(int(a) for a in self.treatment_arms))

    @classmethod
    def unadjusted(cls, treatment_arms=None):
        return cls(treatment_arms=treatment_arms)

    @classmethod
    def cluster_level(cls, cluster_columns=(), aggregate_columns=(), treatment_arms=None):
        return cls(tuple(cluster_columns), tuple(aggregate_columns), (), treatment_arms)

    @classmethod
    def individual_level(cls, individual_columns=(), cluster_columns=(), treatment_arms=None):
        return cls(tuple(cluster_columns), (), tuple(individual_columns), treatment_arms)

    def with_treatments(self, arms) -> "ModelSpec":
        return ModelSpec(self.cluster_columns, self.aggregate_columns,
                         self.individual_columns, tuple(arms))

    def arms_for(self, design) -> tuple:
        if self.treatment_arms is None:
            return design.treatment_arms
        bad = [a for a in self.treatment_arms if a not in design.treatment_arms]
        if bad:
            raise ValidationError(f"arms {bad} are not treatment arms of the design")
        return tuple(a for a in design.treatment_arms if a in self.treatment_arms)


def cs_inverse_apply(v, sigma_eps2, sigma_gamma2):
    """``Sigma_j^{-1} v`` for one cluster in O(m_j), without forming the matrix."""
    if not sigma_eps2 > 0:
        raise ValidationError("sigma_eps2 must be positive")
    if sigma_gamma2 < 0:
        raise ValidationError("sigma_gamma2 must be nonnegative")
    v = np.asarray(v, float)
    m = v.shape[0]
    shrink = sigma_gamma2 / (sigma_eps2 * (sigma_eps2 + m * sigma_gamma2))
    return v / sigma_eps2 - shrink * v.sum(axis=0)


def cs_inverse(m, sigma_eps2, sigma_gamma2) -> np.ndarray:
    """Dense ``Sigma_j^{-1}``; meant for small clusters and checks."""
    return cs_inverse_apply(np.eye(int(m)), sigma_eps2, sigma_gamma2)


def cs_logdet(m, sigma_eps2, sigma_gamma2) -> float:
    return (m - 1) * math.log(sigma_eps2) + math.log(sigma_eps2 + m * sigma_gamma2)


@dataclass(frozen=True)
class DesignMatrix:
    X: np.ndarray = field(repr=False)
    names: tuple
    n_cluster_level: int
    treatment_arms: tuple
    treatment_slice: slice


def build_design(dataset: OutcomeDataset, spec: ModelSpec) -> DesignMatrix:
    """Fixed-effect design ``[1 | cluster covs | aggregates | individual covs | T]``."""
    design, cov = dataset.design, dataset.covariates
    idx = cluster_index(design.cluster_sizes)
    parts, names = [np.ones((design.n_individuals, 1))], ["(Intercept)"]
    for c in spec.cluster_columns:
        if not 0 <= c < cov.cluster_level.shape[1]:
            raise ValidationError(f"cluster covariate {c} out of range")
        parts.append(cov.cluster_level[idx, c][:, None])
        names.append(cov.cluster_names[c])
    if spec.aggregate_columns:
        for c in spec.aggregate_columns:
            if not 0 <= c < cov.individual_level.shape[1]:
                raise ValidationError(f"individual covariate {c} out of range")
        agg = aggregate_to_cluster(cov)
        for c in spec.aggregate_columns:
            parts.append(agg[idx, c][:, None])
            names.append(f"mean({cov.individual_names[c]})")
    n_cl = len(spec.cluster_columns) + len(spec.aggregate_columns)
    for c in spec.individual_columns:
        if not 0 <= c < cov.individual_level.shape[1]:
            raise ValidationError(f"individual covariate {c} out of range")
        col = cov.individual_level[:, c]
        parts.append(col[:, None])
        names.append(cov.individual_names[c])
        if is_cluster_constant(col, design.cluster_sizes):
            n_cl += 1
    arms = spec.arms_for(design)
    start = sum(p.shape[1] for p in parts)
    if arms:
        ind = dataset.scheme.indicators.astype(float)
        cols = [design.treatment_column(a) for a in arms]
        parts.append(ind[idx][:, cols])
        names.extend(f"delta{a}" for a in arms)
    X = np.hstack(parts)
    return DesignMatrix(X, tuple(names), n_cl, arms, slice(start, start + len(arms)))


@dataclass(frozen=True)
class SufficientStats:
    """Cross products of a centred design, enough to fit any column subset.

    Column 0 must be the intercept; every other column is centred at its
    individual-level mean, recorded in ``center``.
    """

    XtX: np.ndarray
    Xty: np.ndarray
    yty: float
    S: np.ndarray
    t: np.ndarray
    m: np.ndarray
    center: np.ndarray
    n_obs: int

    @classmethod
    def from_arrays(cls, X, y, cluster_sizes) -> "SufficientStats":
        X = np.asarray(X, float)
        y = np.asarray(y, float)
        center = X.mean(axis=0)
        center[0] = 0.0
        Xc = X - center
        return cls(Xc.T @ Xc, Xc.T @ y, float(y @ y), cluster_sums(Xc, cluster_sizes),
                   cluster_sums(y, cluster_sizes), np.asarray(cluster_sizes, float),
                   center, int(X.shape[0]))

    def subset(self, cols) -> "SufficientStats":
        cols = np.asarray(cols, dtype=np.intp)
        if cols[0] != 0:
            raise ValidationError("column subsets must start with the intercept")
        return SufficientStats(np.ascontiguousarray(self.XtX[np.ix_(cols, cols)]),
                               self.Xty[cols], self.yty, np.ascontiguousarray(self.S[:, cols]),
                               self.t, self.m, self.center[cols], self.n_obs)



@dataclass(frozen=True)
class LmmFit:
    names: tuple
    coef: np.ndarray = field(repr=False)
    vcov_fixed: np.ndarray = field(repr=False)
    sigma_gamma2: float
    sigma_eps2: float
    loglik: float
    method: Method
    theta: float
    treatment_arms: tuple
    all_treatment_arms: tuple
    treatment_slice: slice
    n_cluster_level: int
    n_clusters: int
    n_obs: int
    cluster_sizes: np.ndarray = field(repr=False)
    cluster_resid: np.ndarray = field(repr=False)
    at_boundary: bool = False

    @property
    def lambda_(self) -> float:
        return float(self.coef[0])

    @property
    def beta(self) -> np.ndarray:
        return self.coef[1:self.treatment_slice.start]

    @property
    def delta(self) -> np.ndarray:
        """Effects for every non-reference arm, zero where constrained."""
        out = np.zeros(len(self.all_treatment_arms))
        for k, a in enumerate(self.treatment_arms):
            out[self.all_treatment_arms.index(a)] = self.coef[self.treatment_slice][k]
        return out

    @property
    def delta_vcov(self) -> np.ndarray:
        s = self.treatment_slice
        return self.vcov_fixed[s, s]

    @property
    def icc(self) -> float:
        return self.sigma_gamma2 / (self.sigma_gamma2 + self.sigma_eps2)

    @property
    def n_arms(self) -> int:
        return len(self.all_treatment_arms) + 1

    @property
    def weights(self) -> np.ndarray:
        """Per-cluster ``W_j = 1 / (sigma_eps2 + m_j sigma_gamma2)``."""
        return 1.0 / (self.sigma_eps2 + self.cluster_sizes * self.sigma_gamma2)

    def effect(self, arm) -> float:
        return float(self.delta[self.all_treatment_arms.index(arm)])

    def effect_se(self, arm) -> float:
        k = self.treatment_arms.index(arm)
        return float(np.sqrt(self.delta_vcov[k, k]))

    def summary(self) -> dict:
        se = np.sqrt(np.diag(self.vcov_fixed))
        return {
            "method": self.method.value,
            "coefficients": {n: {"estimate": float(b), "se": float(s)}
                             for n, b, s in zip(self.names, self.coef, se)},
            "sigma_gamma2": self.sigma_gamma2,
            "sigma_eps2": self.sigma_eps2,
            "icc": self.icc,
            "loglik": self.loglik,
            "n_clusters": self.n_clusters,
            "n_obs": self.n_obs,
            "n_cluster_level_covariates": self.n_cluster_level,
            "theta_at_boundary": self.at_boundary,
        }


def check_rank(XtX, names):
    """Raise :class:`CollinearityError` naming columns that lie in the span of earlier ones."""
    p = XtX.shape[0]
    d = np.sqrt(np.clip(np.diag(XtX), 0, None))
    bad = []
    L = np.zeros((p, p))
    keep = []
    for k in range(p):
        if d[k] == 0:
            bad.append(names[k])
            continue
        col = XtX[keep, k] / (d[keep] * d[k]) if keep else np.zeros(0)
        v = np.linalg.solve(L[np.ix_(range(len(keep)), range(len(keep)))], col) if keep else col
        resid = 1.0 - float(v @ v)
        if resid < 1e-10:
            bad.append(names[k])
            continue
        n = len(keep)
        L[n, :n] = v
        L[n, n] = math.sqrt(resid)
        keep.append(k)
    if bad:
        raise CollinearityError(bad, "design matrix is rank deficient; collinear columns: "
                                + ", ".join(map(str, bad)))


_NONFINITE = 1e300


def _optimize_theta(stats: SufficientStats, reml: bool):
    args = (stats.XtX, stats.Xty, stats.yty, stats.S, stats.t, stats.m, float(stats.n_obs), reml)
    obj = _kernels.profile_objective
    vals = np.array([obj(th, *args) for th in _GRID])
    if not np.isfinite(vals).any():
        raise ConvergenceError("profile likelihood is not finite anywhere on the theta grid")
    k = int(np.argmin(vals))
    # bracket with finite neighbours only; Brent breaks down on infinite values
    lo = _GRID[k - 1] if k > 0 and np.isfinite(vals[k - 1]) else _GRID[k]
    hi = _GRID[k + 1] if k + 1 < len(_GRID) and np.isfinite(vals[k + 1]) else _GRID[k]
    best_theta, best_val = float(_GRID[k]), float(vals[k])
    if hi > lo:
        def finite_obj(th, *a):
            v = obj(th, *a)
            return v if np.isfinite(v) else _NONFINITE

        res = minimize_scalar(finite_obj, bounds=(lo, hi), args=args, method="bounded",
                              options={"xatol": THETA_XATOL, "maxiter": 500})
        if not res.success:
            raise ConvergenceError(f"theta search did not converge: {res.message}")
        if res.fun <= best_val:
            best_theta, best_val = float(res.x), float(res.fun)
    if k == 0 or best_theta <= THETA_XATOL:
        v0 = obj(0.0, *args)
        if v0 <= best_val:
            best_theta, best_val = 0.0, v0
    return best_theta, best_val


def fit_stats(stats: SufficientStats, names, method=Method.REML, *, treatment_arms=(),
              all_treatment_arms=(), treatment_slice=None, n_cluster_level=0,
              check=True) -> LmmFit:
    """Fit from sufficient statistics; see :func:`fit` for the public entry point."""
    method = Method(method)
    p = stats.XtX.shape[0]
    if p >= stats.n_obs:
        raise ValidationError(f"{p} fixed effects for {stats.n_obs} observations")
    if check:
        check_rank(stats.XtX, names)
    reml = method is Method.REML
    theta, negll = _optimize_theta(stats, reml)
    w = theta / (1.0 + stats.m * theta)
    A = stats.XtX - (stats.S * w[:, None]).T @ stats.S
    b = stats.Xty - stats.S.T @ (w * stats.t)
    c = stats.yty - float(w @ (stats.t * stats.t))
    try:
        Ainv = np.linalg.inv(A)
    except np.linalg.LinAlgError as exc:
        raise CollinearityError(list(names), "GLS cross-product matrix is singular") from exc
    beta_c = Ainv @ b
    rss = c - float(b @ beta_c)
    s2 = rss / (stats.n_obs - p if reml else stats.n_obs)
    if not s2 > 0:
        raise ConvergenceError("residual variance estimate is not positive")
    # undo centring: intercept absorbs -center'beta
    Tm = np.eye(p)
    Tm[0, 1:] = -stats.center[1:]
    coef = Tm @ beta_c
    vcov = s2 * (Tm @ Ainv @ Tm.T)
    vcov = 0.5 * (vcov + vcov.T)
    if not np.all(np.diag(vcov) > 0):
        raise NumericalError("fixed-effect covariance is not positive definite")
    resid = stats.t - stats.S @ beta_c
    ts = treatment_slice if treatment_slice is not None else slice(p, p)
    return LmmFit(tuple(names), coef, vcov, theta * s2, s2, -negll, method, theta,
                  tuple(treatment_arms), tuple(all_treatment_arms), ts, int(n_cluster_level),
                  stats.S.shape[0], stats.n_obs, stats.m, resid,
                  bool(theta >= THETA_MAX * (1 - 1e-6) or theta == 0.0))


def fit(dataset: OutcomeDataset, spec: ModelSpec = ModelSpec(), method=Method.REML) -> LmmFit:
    """Fit the random-intercept model by profile likelihood over theta in [0, 50]."""
    dm = build_design(dataset, spec)
    stats = SufficientStats.from_arrays(dm.X, dataset.y, dataset.design.cluster_sizes)
    return fit_stats(stats, dm.names, method, treatment_arms=dm.treatment_arms,
                     all_treatment_arms=dataset.design.treatment_arms,
                     treatment_slice=dm.treatment_slice, n_cluster_level=dm.n_cluster_level)


def marginal_loglik(dataset: OutcomeDataset, spec: ModelSpec, coef, sigma_eps2, sigma_gamma2,
                    method=Method.ML) -> float:
    """Log-likelihood at given parameters, accumulated cluster by cluster.

    With ``method=REML`` the restricted-likelihood adjustment
    ``(p/2) log(2 pi) - 1/2 log|sum_j X_j' Sigma_j^{-1} X_j|`` is added; it equals
    the REML criterion when ``coef`` is the GLS estimate.
    """
    if not sigma_eps2 > 0 or sigma_gamma2 < 0:
        raise ValidationError("variance components out of range")
    dm = build_design(dataset, spec)
    coef = np.asarray(coef, float)
    if coef.shape[0] != dm.X.shape[1]:
        raise ValidationError(f"{coef.shape[0]} coefficients for {dm.X.shape[1]} columns")
    r = dataset.y - dm.X @ coef
    offs = np.concatenate([[0], np.cumsum(dataset.design.cluster_sizes)])
    ll = 0.0
    info = np.zeros((dm.X.shape[1], dm.X.shape[1]))
    for j, m in enumerate(dataset.design.cluster_sizes):
        rj = r[offs[j]:offs[j + 1]]
        Xj = dm.X[offs[j]:offs[j + 1]]
        quad = float(rj @ cs_inverse_apply(rj, sigma_eps2, sigma_gamma2))
        ll -= 0.5 * (m * math.log(2 * math.pi) + cs_logdet(m, sigma_eps2, sigma_gamma2) + quad)
        if Method(method) is Method.REML:
            info += Xj.T @ cs_inverse_apply(Xj, sigma_eps2, sigma_gamma2)
    if Method(method) is Method.REML:
        sign, logdet = np.linalg.slogdet(info)
        ll += 0.5 * dm.X.shape[1] * math.log(2 * math.pi) - 0.5 * logdet
    return ll


def profile_loglik(dataset: OutcomeDataset, spec: ModelSpec, theta, method=Method.REML) -> float:
    """Profiled (restricted) log-likelihood at a given variance ratio."""
    dm = build_design(dataset, spec)
    st = SufficientStats.from_arrays(dm.X, dataset.y, dataset.design.cluster_sizes)
    return -_kernels.profile_objective(float(theta), st.XtX, st.Xty, st.yty, st.S, st.t, st.m,
                                       float(st.n_obs), Method(method) is Method.REML)

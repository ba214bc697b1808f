"""Multi-arm covariate balance metrics.

Both metrics reduce to the largest pairwise squared Euclidean distance between
arm means after a fixed linear transform of the covariates: column scaling by
``sqrt(w)`` for the weighted l2 metric, and whitening by ``S^{-1/2}`` for the
Mahalanobis metric.  :class:`BalanceScorer` caches that transform so a whole
randomization space can be scored with one kernel call.
"""
from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .design import AllocationScheme, TrialDesign, check_labels
from .errors import DegenerateCovariateError, ValidationError


class Metric(str, enum.Enum):
    L2 = "l2"
    MAHALANOBIS = "mahalanobis"


class SingularCovarianceWarning(UserWarning):
    """Covariance of the balancing covariates is singular; a pseudo-inverse is used."""


def default_weights(X, names=None) -> np.ndarray:
    """Inverse unbiased sample variance of each column."""
    X = _as_matrix(X)
    var = X.var(axis=0, ddof=1) if X.shape[0] > 1 else np.zeros(X.shape[1])
    for l, v in enumerate(var):
        if not v > 0:
            raise DegenerateCovariateError(names[l] if names else l)
    return 1.0 / var


def _as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[1] == 0:
        raise ValidationError("balance needs at least one covariate column")
    return X


@dataclass(frozen=True)
class BalanceSpec:
    """Metric choice plus the columns of the cluster-level matrix it balances.

    ``columns=None`` selects every column.  ``weights=None`` means the default
    inverse-variance weights (l2 only).
    """

    metric: Metric = Metric.L2
    columns: tuple | None = None
    weights: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "metric", Metric(self.metric))
        if self.columns is not None:
            object.__setattr__(self, "columns", tuple(int(c) for c in self.columns))
        if self.weights is not None:
            w = tuple(float(x) for x in self.weights)
            if any(not (x >= 0) for x in w):
                raise ValidationError("balance weights must be nonnegative")
            if self.metric is Metric.MAHALANOBIS:
                raise ValidationError("weights apply to the l2 metric only")
            object.__setattr__(self, "weights", w)

    def select(self, X) -> np.ndarray:
        X = _as_matrix(X)
        if self.columns is None:
            return X
        bad = [c for c in self.columns if not 0 <= c < X.shape[1]]
        if bad:
            raise ValidationError(f"balance columns {bad} out of range")
        return X[:, list(self.columns)]


class BalanceScorer:
    """Scores allocation schemes on a fixed G x L covariate matrix."""

    def __init__(self, X, spec: BalanceSpec = BalanceSpec(), names=None):
        self.spec = spec
        Xs = spec.select(X)
        self.X = Xs
        self.singular = False
        if spec.metric is Metric.L2:
            w = np.asarray(spec.weights, float) if spec.weights is not None \
                else default_weights(Xs, names)
            if w.shape[0] != Xs.shape[1]:
                raise ValidationError(f"{w.shape[0]} weights for {Xs.shape[1]} columns")
            self.weights = w
            self.covariance = None
            self.transform = np.diag(np.sqrt(w))
        else:
            S = np.atleast_2d(np.cov(Xs, rowvar=False, ddof=1))
            self.weights = None
            self.covariance = S
            vals, vecs = np.linalg.eigh(S)
            tol = vals.max(initial=0.0) * S.shape[0] * np.finfo(float).eps
            keep = vals > tol
            if not keep.any():
                raise DegenerateCovariateError(names[0] if names else 0,
                                               "balancing covariates are all constant")
            if not keep.all():
                self.singular = True
                warnings.warn("covariance of the balancing covariates is singular; "
                              "using its pseudo-inverse", SingularCovarianceWarning, stacklevel=2)
            self.transform = vecs[:, keep] / np.sqrt(vals[keep])
        self.whitened = np.ascontiguousarray(Xs @ self.transform)

    def scores(self, labels, counts) -> np.ndarray:
        """Scores for an R x G matrix of label rows under arm sizes ``counts``."""
        lab = np.ascontiguousarray(np.atleast_2d(labels), dtype=np.int8)
        return _kernels.balance_scores(lab, self.whitened, np.asarray(counts, np.int64))

    def score(self, scheme: AllocationScheme) -> float:
        return float(self.scores(scheme.array[None, :], scheme.design.clusters_per_arm)[0])


def _arm_means(labels, X, n_arms):
    return np.array([X[labels == a].mean(axis=0) for a in range(1, n_arms + 1)])


def _max_pairwise(means, metric_matrix):
    best = 0.0
    for a in range(means.shape[0]):
        for b in range(a + 1, means.shape[0]):
            d = means[a] - means[b]
            best = max(best, float(d @ metric_matrix @ d))
    return best


def l2_score(scheme: AllocationScheme, X, weights=None) -> float:
    """Largest weighted squared difference of arm means over all arm pairs."""
    X = _as_matrix(X)
    w = default_weights(X) if weights is None else np.asarray(weights, float)
    if np.any(w < 0):
        raise ValidationError("balance weights must be nonnegative")
    means = _arm_means(scheme.array, X, scheme.design.n_arms)
    return _max_pairwise(means, np.diag(w))


def mahalanobis_score(scheme: AllocationScheme, X, covariance=None) -> float:
    """Largest Mahalanobis distance between arm means, S from all clusters by default."""
    X = _as_matrix(X)
    S = np.atleast_2d(np.cov(X, rowvar=False, ddof=1)) if covariance is None \
        else np.atleast_2d(np.asarray(covariance, float))
    try:
        Sinv = np.linalg.inv(S)
        if not np.all(np.isfinite(Sinv)) or np.linalg.cond(S) > 1e12:
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        warnings.warn("covariance of the balancing covariates is singular; "
                      "using its pseudo-inverse", SingularCovarianceWarning, stacklevel=2)
        Sinv = np.linalg.pinv(S)
    means = _arm_means(scheme.array, X, scheme.design.n_arms)
    return _max_pairwise(means, Sinv)


def arm_means_table(labels, X, design: TrialDesign) -> np.ndarray:
    """c x L table of per-arm covariate means (unweighted over clusters)."""
    lab = check_labels(labels, design)
    return _arm_means(lab, _as_matrix(X), design.n_arms)

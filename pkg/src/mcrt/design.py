"""Trial designs, allocation schemes, covariate tables and outcome datasets.

Arms are labelled ``1..c``.  Treatment indicators use the +/-1 coding: column
``i`` of the indicator matrix is +1 for clusters in treatment arm ``i`` and -1
otherwise, with one column per non-reference arm.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DesignError, ValidationError


def _frozen(a, dtype=None):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TrialDesign:
    """Multi-arm parallel cluster trial layout.

    ``clusters_per_arm[i-1]`` is g_i; ``cluster_sizes`` has one entry per cluster
    in the order clusters appear in every scheme and dataset.
    """

    clusters_per_arm: tuple
    cluster_sizes: tuple
    reference_arm: int | None = None

    def __post_init__(self):
        g = tuple(int(x) for x in self.clusters_per_arm)
        m = tuple(int(x) for x in self.cluster_sizes)
        if len(g) < 2:
            raise DesignError("a trial needs at least two arms")
        if min(g) < 1:
            raise DesignError(f"every arm needs at least one cluster, got {g}")
        if len(m) != sum(g):
            raise DesignError(
                f"{len(m)} cluster sizes given for {sum(g)} clusters")
        if min(m) < 1:
            raise DesignError("every cluster needs at least one individual")
        ref = len(g) if self.reference_arm is None else int(self.reference_arm)
        if not 1 <= ref <= len(g):
            raise DesignError(f"reference arm {ref} outside 1..{len(g)}")
        object.__setattr__(self, "clusters_per_arm", g)
        object.__setattr__(self, "cluster_sizes", m)
        object.__setattr__(self, "reference_arm", ref)

    @classmethod
    def balanced(cls, n_arms, clusters_per_arm, cluster_size, reference_arm=None):
        g = (int(clusters_per_arm),) * int(n_arms)
        return cls(g, (int(cluster_size),) * sum(g), reference_arm)

    @property
    def n_arms(self) -> int:
        return len(self.clusters_per_arm)

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_sizes)

    @property
    def n_individuals(self) -> int:
        return sum(self.cluster_sizes)

    @property
    def allocation(self) -> np.ndarray:
        """Allocation proportions pi_i = g_i / G, indexed by arm - 1."""
        return np.asarray(self.clusters_per_arm, float) / self.n_clusters

    @property
    def treatment_arms(self) -> tuple:
        """Non-reference arms in indicator-column order."""
        return tuple(a for a in range(1, self.n_arms + 1) if a != self.reference_arm)

    def treatment_column(self, arm: int) -> int:
        try:
            return self.treatment_arms.index(int(arm))
        except ValueError:
            raise DesignError(f"arm {arm} is not a treatment arm of this design") from None

    @property
    def base_labels(self) -> np.ndarray:
        """Sorted label vector with g_i copies of each arm i."""
        return np.repeat(np.arange(1, self.n_arms + 1, dtype=np.int8), self.clusters_per_arm)


def check_labels(labels, design: TrialDesign) -> np.ndarray:
    lab = np.asarray(labels)
    if lab.ndim != 1 or lab.shape[0] != design.n_clusters:
        raise DesignError(
            f"expected {design.n_clusters} labels, got shape {lab.shape}")
    if not np.issubdtype(lab.dtype, np.integer):
        if not np.all(np.equal(np.mod(lab, 1), 0)):
            raise DesignError("arm labels must be integers")
    lab = lab.astype(np.int8)
    if lab.min() < 1 or lab.max() > design.n_arms:
        raise DesignError(f"arm labels must lie in 1..{design.n_arms}")
    counts = np.bincount(lab, minlength=design.n_arms + 1)[1:]
    if tuple(counts) != design.clusters_per_arm:
        raise DesignError(
            f"arm counts {tuple(int(c) for c in counts)} do not match the "
            f"design {design.clusters_per_arm}")
    return lab


def indicators_from_labels(labels, design: TrialDesign) -> np.ndarray:
    """G x (c-1) matrix of +/-1 treatment indicators."""
    lab = check_labels(labels, design)
    arms = np.asarray(design.treatment_arms, dtype=np.int8)
    return np.where(lab[:, None] == arms[None, :], 1, -1).astype(np.int8)


def labels_from_indicators(indicators, design: TrialDesign) -> np.ndarray:
    ind = np.asarray(indicators)
    if ind.shape != (design.n_clusters, design.n_arms - 1):
        raise DesignError(f"indicator matrix has shape {ind.shape}")
    if not np.all(np.isin(ind, (-1, 1))) or np.any((ind == 1).sum(axis=1) > 1):
        raise DesignError("each row needs entries in {-1, +1} with at most one +1")
    lab = np.full(design.n_clusters, design.reference_arm, dtype=np.int8)
    for col, arm in enumerate(design.treatment_arms):
        lab[ind[:, col] == 1] = arm
    return check_labels(lab, design)


@dataclass(frozen=True, eq=False)
class AllocationScheme:
    """Arm label per cluster.  Equality and hashing use the label vector only."""

    labels: tuple
    design: TrialDesign

    def __post_init__(self):
        lab = check_labels(self.labels, self.design)
        object.__setattr__(self, "labels", tuple(int(x) for x in lab))

    @classmethod
    def from_indicators(cls, indicators, design):
        return cls(tuple(labels_from_indicators(indicators, design)), design)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.labels, dtype=np.int8)

    @property
    def indicators(self) -> np.ndarray:
        return indicators_from_labels(self.labels, self.design)

    def __eq__(self, other):
        if not isinstance(other, AllocationScheme):
            return NotImplemented
        return self.labels == other.labels

    def __hash__(self):
        return hash(self.labels)

    def __repr__(self):
        return f"AllocationScheme({''.join(map(str, self.labels))})"


def dummy_code(values: Sequence, name: str, categories=None):
    """Reference-cell dummy coding; the lexicographically first category is the reference.

    Returns ``(matrix, column_names)``.
    """
    vals = np.asarray([str(v) for v in values])
    cats = sorted(set(vals)) if categories is None else sorted(str(c) for c in categories)
    unknown = set(vals) - set(cats)
    if unknown:
        raise ValidationError(f"column {name!r} has undeclared categories {sorted(unknown)}")
    cols = cats[1:]
    mat = np.column_stack([(vals == c).astype(float) for c in cols]) if cols \
        else np.zeros((len(vals), 0))
    return mat, [f"{name}[{c}]" for c in cols]


def cluster_index(cluster_sizes) -> np.ndarray:
    sizes = np.asarray(cluster_sizes, dtype=np.int64)
    return np.repeat(np.arange(sizes.shape[0]), sizes)


def cluster_offsets(cluster_sizes) -> np.ndarray:
    sizes = np.asarray(cluster_sizes, dtype=np.int64)
    return np.concatenate([[0], np.cumsum(sizes)])


def cluster_sums(values, cluster_sizes) -> np.ndarray:
    """Per-cluster column sums of a stacked (N,) or (N, p) array."""
    sizes = np.asarray(cluster_sizes, dtype=np.int64)
    if np.any(sizes < 1):
        raise DesignError("empty cluster")
    v = np.asarray(values, dtype=float)
    starts = cluster_offsets(sizes)[:-1]
    if v.shape[0] != sizes.sum():
        raise DesignError(f"{v.shape[0]} rows for {sizes.sum()} individuals")
    if v.ndim == 1:
        return np.add.reduceat(v, starts)
    if v.shape[1] == 0:
        return np.zeros((sizes.shape[0], 0))
    return np.add.reduceat(v, starts, axis=0)


def is_cluster_constant(column, cluster_sizes) -> bool:
    """Exact check that a stacked column takes a single value within every cluster."""
    col = np.asarray(column, dtype=float)
    offs = cluster_offsets(cluster_sizes)
    first = col[offs[:-1]]
    return bool(np.all(col == np.repeat(first, np.diff(offs))))


@dataclass(frozen=True)
class CovariateTable:
    """Cluster-level covariates (G x p1) plus stacked individual-level covariates (N x p2).

    Individual rows are ordered by cluster, with ``cluster_sizes[j]`` rows for cluster j.
    """

    cluster_level: np.ndarray
    individual_level: np.ndarray
    cluster_sizes: tuple
    cluster_names: tuple = ()
    individual_names: tuple = ()

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.cluster_sizes)
        if min(sizes, default=1) < 1:
            raise DesignError("empty cluster in covariate table")
        G, N = len(sizes), sum(sizes)
        xc = np.asarray(self.cluster_level, float)
        if xc.ndim == 1:
            xc = xc.reshape(G, -1) if xc.size else np.zeros((G, 0))
        zi = np.asarray(self.individual_level, float)
        if zi.ndim == 1:
            zi = zi.reshape(N, -1) if zi.size else np.zeros((N, 0))
        if xc.shape[0] != G:
            raise DesignError(f"cluster-level table has {xc.shape[0]} rows for {G} clusters")
        if zi.shape[0] != N:
            raise DesignError(f"individual-level table has {zi.shape[0]} rows for {N} individuals")
        if not (np.all(np.isfinite(xc)) and np.all(np.isfinite(zi))):
            raise ValidationError("covariates contain missing or non-finite values")
        cn = tuple(self.cluster_names) or tuple(f"x{l + 1}" for l in range(xc.shape[1]))
        iname = tuple(self.individual_names) or tuple(f"z{l + 1}" for l in range(zi.shape[1]))
        if len(cn) != xc.shape[1] or len(iname) != zi.shape[1]:
            raise ValidationError("covariate names do not match column counts")
        object.__setattr__(self, "cluster_level", _frozen(xc))
        object.__setattr__(self, "individual_level", _frozen(zi))
        object.__setattr__(self, "cluster_sizes", sizes)
        object.__setattr__(self, "cluster_names", cn)
        object.__setattr__(self, "individual_names", iname)

    @property
    def n_clusters(self):
        return len(self.cluster_sizes)

    def individual_blocks(self):
        offs = cluster_offsets(self.cluster_sizes)
        return [self.individual_level[offs[j]:offs[j + 1]] for j in range(self.n_clusters)]

    def cluster_matrix(self, cluster_columns=(), aggregate_columns=()) -> np.ndarray:
        """G x L matrix of selected cluster covariates followed by selected aggregates."""
        parts = [self.cluster_level[:, list(cluster_columns)]]
        if len(aggregate_columns):
            parts.append(aggregate_to_cluster(self)[:, list(aggregate_columns)])
        return np.column_stack(parts) if parts else np.zeros((self.n_clusters, 0))


def aggregate_to_cluster(covariates: CovariateTable) -> np.ndarray:
    """Per-cluster means of every individual-level column (G x p2)."""
    if covariates.individual_level.shape[1] == 0:
        raise ValidationError("no individual-level covariates to aggregate")
    sums = cluster_sums(covariates.individual_level, covariates.cluster_sizes)
    return sums / np.asarray(covariates.cluster_sizes, float)[:, None]


@dataclass(frozen=True)
class OutcomeDataset:
    design: TrialDesign
    scheme: AllocationScheme
    covariates: CovariateTable
    y: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.scheme.design != self.design:
            raise DesignError("scheme was built for a different design")
        if tuple(self.covariates.cluster_sizes) != self.design.cluster_sizes:
            raise DesignError("covariate table cluster sizes differ from the design")
        y = np.asarray(self.y, float).ravel()
        if y.shape[0] != self.design.n_individuals:
            raise DesignError(
                f"{y.shape[0]} outcomes for {self.design.n_individuals} individuals")
        if not np.all(np.isfinite(y)):
            raise ValidationError("outcomes contain missing or non-finite values")
        object.__setattr__(self, "y", _frozen(y))

    @property
    def cluster_sizes(self) -> np.ndarray:
        return np.asarray(self.design.cluster_sizes, float)

    def outcome_blocks(self):
        offs = cluster_offsets(self.design.cluster_sizes)
        return [self.y[offs[j]:offs[j + 1]] for j in range(self.design.n_clusters)]

    def with_outcomes(self, y) -> "OutcomeDataset":
        return OutcomeDataset(self.design, self.scheme, self.covariates, y)

    def with_scheme(self, scheme) -> "OutcomeDataset":
        return OutcomeDataset(self.design, scheme, self.covariates, self.y)

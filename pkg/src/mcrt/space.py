"""Randomization spaces: enumeration, sampling, constraint and conditioning.

A space stores its schemes as an ``R x G`` matrix of 1-based ``int8`` labels.
Enumerated spaces are sorted lexicographically; sampled spaces keep the order
in which distinct schemes were first drawn.
"""
from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import _kernels
from .balance import BalanceScorer
from .design import AllocationScheme, TrialDesign, check_labels
from .errors import MustSampleError, ProtocolError, ValidationError
from .rng import make_rng

ENUMERATION_LIMIT = 200_000
DEFAULT_DRAWS = 20_000
MIN_REFERENCE_SIZE = 20


class SmallSpaceWarning(UserWarning):
    """Reference space has fewer than 20 schemes and cannot support a 0.05-level test."""


class Provenance(str, enum.Enum):
    ENUMERATED = "enumerated"
    SAMPLED = "sampled"


@dataclass(frozen=True)
class Quantile:
    q: float

    def __post_init__(self):
        if not 0 < self.q <= 1:
            raise ValidationError(f"quantile cutoff must lie in (0, 1], got {self.q}")


@dataclass(frozen=True)
class Count:
    n: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValidationError(f"count cutoff must be a positive integer, got {self.n}")


@dataclass(frozen=True)
class Constraint:
    """How a space was constrained; ``cutoff_score`` is the realized B*."""

    cutoff: Quantile | Count
    cutoff_score: float
    scorer: BalanceScorer = field(repr=False, compare=False)
    parent_size: int = 0


@dataclass(frozen=True, eq=False)
class PairwiseLayout:
    """Reference schemes for one pairwise comparison with every other arm held fixed.

    ``pool`` lists the clusters that are in ``arm`` or ``reference`` under the
    observed scheme.  Row r of ``combos`` gives the pool positions assigned to
    ``arm`` in candidate r; the rest of the pool goes to ``reference``.
    """

    observed: np.ndarray
    arm: int
    reference: int
    pool: np.ndarray
    combos: np.ndarray

    def __len__(self):
        return self.combos.shape[0]

    def labels(self) -> np.ndarray:
        out = np.repeat(self.observed[None, :], len(self), axis=0)
        block = np.full((len(self), self.pool.shape[0]), self.reference, dtype=np.int8)
        np.put_along_axis(block, self.combos.astype(np.intp), self.arm, axis=1)
        out[:, self.pool] = block
        return out

    def observed_index(self) -> int:
        obs = np.flatnonzero(self.observed[self.pool] == self.arm).astype(np.int32)
        hit = np.flatnonzero((self.combos == obs).all(axis=1))
        if hit.size == 0:
            raise ProtocolError("observed scheme is missing from the pairwise reference set")
        return int(hit[0])


@dataclass(frozen=True, eq=False)
class RandomizationSpace:
    design: TrialDesign
    labels: np.ndarray = field(repr=False)
    scores: np.ndarray | None = field(default=None, repr=False)
    provenance: Provenance = Provenance.ENUMERATED
    n_draws: int | None = None
    constraint: Constraint | None = None
    pairwise: PairwiseLayout | None = field(default=None, repr=False)

    def __post_init__(self):
        lab = np.ascontiguousarray(self.labels, dtype=np.int8)
        if lab.ndim != 2 or lab.shape[1] != self.design.n_clusters or lab.shape[0] < 1:
            raise ValidationError(f"space labels have shape {lab.shape}")
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "provenance", Provenance(self.provenance))
        if self.scores is not None:
            s = np.array(self.scores, dtype=float)
            if s.shape != (lab.shape[0],):
                raise ValidationError("scores must align with schemes")
            s.setflags(write=False)
            object.__setattr__(self, "scores", s)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def size(self) -> int:
        return len(self)

    @property
    def schemes(self) -> list:
        return [AllocationScheme(tuple(row), self.design) for row in self.labels]

    def index_of(self, scheme) -> int:
        """Row of ``scheme`` in the space, or -1."""
        obs = _labels_of(scheme, self.design)
        hit = np.flatnonzero((self.labels == obs).all(axis=1))
        return int(hit[0]) if hit.size else -1

    def __contains__(self, scheme) -> bool:
        return self.index_of(scheme) >= 0

    def scored(self, scorer: BalanceScorer) -> "RandomizationSpace":
        scores = scorer.scores(self.labels, self.design.clusters_per_arm)
        return RandomizationSpace(self.design, self.labels, scores, self.provenance,
                                  self.n_draws, self.constraint, self.pairwise)


def _labels_of(scheme, design) -> np.ndarray:
    if isinstance(scheme, AllocationScheme):
        return scheme.array
    return check_labels(scheme, design)


def multinomial_count(design: TrialDesign) -> int:
    total, rem = 1, design.n_clusters
    for g in design.clusters_per_arm:
        total *= math.comb(rem, g)
        rem -= g
    return total


def enumerate_space(design: TrialDesign, limit: int = ENUMERATION_LIMIT) -> RandomizationSpace:
    """Every balanced allocation, lexicographically sorted by label vector."""
    count = multinomial_count(design)
    if count > limit:
        raise MustSampleError(count, limit)
    labels = _kernels.enumerate_labels(np.asarray(design.clusters_per_arm, np.int64))
    return RandomizationSpace(design, labels, provenance=Provenance.ENUMERATED)


def unique_rows(labels: np.ndarray, n_arms: int) -> np.ndarray:
    """Indices of the first occurrence of each distinct row, in original order."""
    G = labels.shape[1]
    if G * math.log2(n_arms + 1) < 62:
        powers = (n_arms + 1) ** np.arange(G, dtype=np.int64)
        keys = labels.astype(np.int64) @ powers
    else:
        lab = np.ascontiguousarray(labels)
        keys = lab.view(np.dtype((np.void, lab.dtype.itemsize * G))).ravel()
    _, first = np.unique(keys, return_index=True)
    return np.sort(first)


def sample_space(design: TrialDesign, n_draws: int = DEFAULT_DRAWS, seed=None) -> RandomizationSpace:
    """Uniform i.i.d. draws of balanced allocations, deduplicated in draw order."""
    if int(n_draws) < 1:
        raise ValidationError("n_draws must be at least 1")
    rng = make_rng(seed)
    draws = rng.permuted(np.tile(design.base_labels, (int(n_draws), 1)), axis=1)
    keep = unique_rows(draws, design.n_arms)
    return RandomizationSpace(design, draws[keep], provenance=Provenance.SAMPLED,
                              n_draws=int(n_draws))


def build_space(design: TrialDesign, n_draws: int = DEFAULT_DRAWS, seed=None,
                limit: int = ENUMERATION_LIMIT) -> RandomizationSpace:
    """Enumerate when the full space fits under ``limit``, otherwise sample."""
    if multinomial_count(design) <= limit:
        return enumerate_space(design, limit)
    return sample_space(design, n_draws, seed)


def cutoff_rank(cutoff, size: int) -> int:
    """Number of sorted scores up to and including the cutoff position."""
    if isinstance(cutoff, Quantile):
        # round away binary noise such as 0.1 * 1680 = 168.00000000000003
        return max(1, math.ceil(round(cutoff.q * size, 9)))
    if cutoff.n > size:
        raise ValidationError(f"count cutoff {cutoff.n} exceeds space size {size}")
    return int(cutoff.n)


def retained_mask(scores, cutoff) -> tuple:
    """(mask of retained schemes, realized cutoff score B*)."""
    scores = np.asarray(scores, float)
    R = scores.shape[0]
    k = cutoff_rank(cutoff, R)
    order = np.argsort(scores, kind="stable")
    b_star = float(scores[order[k - 1]])
    if isinstance(cutoff, Quantile):
        keep = scores <= b_star
    else:
        keep = np.zeros(R, dtype=bool)
        keep[order[:k]] = True
    return keep, b_star


def constrain(space: RandomizationSpace, scorer: BalanceScorer, cutoff) -> RandomizationSpace:
    """Retain the best-balanced schemes.

    ``Quantile(q)`` keeps every scheme scoring at most the lower empirical
    q-quantile (ties kept).  ``Count(n)`` keeps exactly n schemes, breaking
    ties by position in the space.  Retained schemes keep their order.
    """
    if not isinstance(cutoff, (Quantile, Count)):
        raise ValidationError("cutoff must be Quantile or Count")
    if space.constraint is not None:
        raise ValidationError("space is already constrained")
    scored = space if space.scores is not None else space.scored(scorer)
    scores = scored.scores
    keep, b_star = retained_mask(scores, cutoff)
    con = Constraint(cutoff, b_star, scorer, len(space))
    return RandomizationSpace(space.design, space.labels[keep], scores[keep],
                              space.provenance, space.n_draws, con)


def select_scheme(space: RandomizationSpace, seed=None) -> AllocationScheme:
    """Uniform draw from the schemes in ``space``."""
    rng = make_rng(seed)
    r = int(rng.integers(len(space)))
    return AllocationScheme(tuple(space.labels[r]), space.design)


def _warn_small(n, what):
    if n < MIN_REFERENCE_SIZE:
        warnings.warn(f"{what} has {n} schemes; fewer than {MIN_REFERENCE_SIZE} "
                      "cannot support a 0.05-level test", SmallSpaceWarning, stacklevel=3)


def conditional_subspace(space: RandomizationSpace, observed, arm: int,
                         reference: int | None = None) -> RandomizationSpace:
    """Schemes agreeing with ``observed`` on every cluster outside arms {arm, reference}."""
    design = space.design
    ref = design.reference_arm if reference is None else int(reference)
    obs = _labels_of(observed, design)
    if arm == ref or not 1 <= arm <= design.n_arms:
        raise ValidationError(f"cannot compare arm {arm} with reference {ref}")
    if space.index_of(obs) < 0:
        raise ProtocolError("observed scheme is not a member of the randomization space")
    fixed = ~np.isin(obs, (arm, ref))
    keep = (space.labels[:, fixed] == obs[fixed]).all(axis=1)
    lab = space.labels[keep]
    _warn_small(lab.shape[0], "conditional reference space")
    pool = np.flatnonzero(~fixed)
    combos = _combos_from_labels(lab[:, pool], arm)
    layout = PairwiseLayout(obs, int(arm), ref, pool, combos)
    scores = None if space.scores is None else space.scores[keep]
    return RandomizationSpace(design, lab, scores, space.provenance, space.n_draws,
                              space.constraint, layout)


def _combos_from_labels(pool_labels, arm):
    k = int((pool_labels[0] == arm).sum())
    rows, cols = np.nonzero(pool_labels == arm)
    return np.ascontiguousarray(cols.reshape(pool_labels.shape[0], k), dtype=np.int32)


@lru_cache(maxsize=16)
def _cached_combinations(n: int, k: int) -> np.ndarray:
    out = _kernels.combinations(n, k)
    out.setflags(write=False)
    return out


def pairwise_layout(space: RandomizationSpace, observed, arm: int,
                    reference: int | None = None, seed=None,
                    limit: int = ENUMERATION_LIMIT, check: bool = True) -> PairwiseLayout:
    """Reference schemes for a pairwise randomization test, in compact form.

    Enumerated spaces are filtered as in :func:`conditional_subspace`.  A
    sampled space rarely contains any other scheme matching the observed
    labels outside the compared arms, so the conditional space is rebuilt:
    the pooled clusters of the two arms are re-split by enumeration (when the
    count fits under ``limit``) or by sampling ``space.n_draws`` splits.  If
    the design space was constrained, candidates scoring above the realized
    cutoff are dropped.  The observed scheme is always kept.
    """
    if space.provenance is Provenance.ENUMERATED:
        return conditional_subspace(space, observed, arm, reference).pairwise
    design = space.design
    ref = design.reference_arm if reference is None else int(reference)
    obs = _labels_of(observed, design)
    if arm == ref or not 1 <= arm <= design.n_arms:
        raise ValidationError(f"cannot compare arm {arm} with reference {ref}")
    if check and space.index_of(obs) < 0:
        raise ProtocolError("observed scheme is not a member of the randomization space")
    pool = np.flatnonzero(np.isin(obs, (arm, ref)))
    n, k = pool.shape[0], design.clusters_per_arm[arm - 1]
    obs_combo = np.flatnonzero(obs[pool] == arm).astype(np.int32)
    if math.comb(n, k) <= limit:
        combos = _cached_combinations(n, k)
        obs_row = combination_rank(obs_combo, n)
    else:
        rng = make_rng(seed)
        n_draws = space.n_draws or DEFAULT_DRAWS
        draws = rng.permuted(np.tile(np.arange(n, dtype=np.int32), (n_draws, 1)), axis=1)
        draws = np.sort(draws[:, :k], axis=1)
        mask = np.zeros((n_draws, n), dtype=np.int8)
        np.put_along_axis(mask, draws.astype(np.intp), 1, axis=1)
        draws = draws[unique_rows(mask, 1)]
        hit = np.flatnonzero((draws == obs_combo).all(axis=1))
        if hit.size == 0:
            draws = np.vstack([obs_combo[None, :], draws])
            obs_row = 0
        else:
            obs_row = int(hit[0])
        combos = np.ascontiguousarray(draws, dtype=np.int32)
    if space.constraint is not None:
        Wt = space.constraint.scorer.whitened
        fixed_arms = [a for a in range(1, design.n_arms + 1) if a not in (arm, ref)]
        fixed_means = np.array([Wt[obs == a].mean(axis=0) for a in fixed_arms]).reshape(
            len(fixed_arms), Wt.shape[1])
        fixed_max = 0.0
        for x in range(len(fixed_arms)):
            for y in range(x + 1, len(fixed_arms)):
                d = fixed_means[x] - fixed_means[y]
                fixed_max = max(fixed_max, float(d @ d))
        scores = _kernels.pair_subset_scores(combos, Wt[pool], fixed_means, k,
                                             design.clusters_per_arm[ref - 1], fixed_max)
        keep = scores <= space.constraint.cutoff_score
        keep[obs_row] = True
        combos = combos[keep]
    _warn_small(combos.shape[0], "pairwise reference space")
    return PairwiseLayout(obs, int(arm), ref, pool, np.ascontiguousarray(combos))


def pairwise_reference_space(space: RandomizationSpace, observed, arm: int,
                             reference: int | None = None, seed=None,
                             limit: int = ENUMERATION_LIMIT) -> RandomizationSpace:
    """:func:`pairwise_layout` expanded into a full space of label vectors."""
    if space.provenance is Provenance.ENUMERATED:
        return conditional_subspace(space, observed, arm, reference)
    layout = pairwise_layout(space, observed, arm, reference, seed, limit)
    return RandomizationSpace(space.design, layout.labels(), None, space.provenance,
                              space.n_draws, space.constraint, layout)


def combination_rank(combo, n: int) -> int:
    """Position of a sorted k-subset of range(n) in lexicographic order."""
    k = len(combo)
    rank, prev = 0, -1
    for i, c in enumerate(int(x) for x in combo):
        for j in range(prev + 1, c):
            rank += math.comb(n - 1 - j, k - 1 - i)
        prev = c
    return rank

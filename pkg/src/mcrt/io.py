"""CSV and config-file I/O.

Files are UTF-8, comma separated, with a mandatory header row.  Lines
starting with ``#`` before the header carry ``key=value`` provenance
metadata (schema version, config hash, seed).  Floats are written with
``repr`` so a write/read cycle reproduces the same arrays bit for bit.
"""
from __future__ import annotations

import csv
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .balance import BalanceScorer, BalanceSpec, Metric
from .design import AllocationScheme, CovariateTable, OutcomeDataset, TrialDesign, dummy_code
from .errors import DesignError, ValidationError
from .space import Constraint, Count, Provenance, Quantile, RandomizationSpace

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# config


def load_config(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"{path}: {exc}") from exc


def config_hash(section: dict) -> str:
    """First 16 hex digits of the SHA-256 of the canonical JSON form."""
    blob = json.dumps(section, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# generic table reading


@dataclass
class Table:
    header: list
    rows: list
    lines: list
    meta: dict
    path: str

    def column(self, name) -> int:
        try:
            return self.header.index(name)
        except ValueError:
            raise ValidationError(f"{self.path}: no column {name!r}; have {self.header}") from None

    def fail(self, k, msg):
        raise ValidationError(f"{self.path}:{self.lines[k]}: {msg}")

    def floats(self, col) -> np.ndarray:
        out = np.empty(len(self.rows))
        for k, row in enumerate(self.rows):
            try:
                out[k] = float(row[col])
            except ValueError:
                self.fail(k, f"column {self.header[col]!r}: {row[col]!r} is not a number")
            if not np.isfinite(out[k]):
                self.fail(k, f"column {self.header[col]!r}: non-finite value")
        return out


def read_table(path) -> Table:
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc
    meta, header, rows, lines = {}, None, [], []
    with fh:
        reader = csv.reader(fh)
        for row in reader:
            lineno = reader.line_num
            if header is None and row and row[0].startswith("#"):
                text = ",".join(row)[1:].strip()
                if "=" in text:
                    k, v = text.split("=", 1)
                    meta[k.strip()] = v.strip()
                continue
            if not row or all(not c.strip() for c in row):
                continue
            row = [c.strip() for c in row]
            if header is None:
                header = row
                if len(set(header)) != len(header):
                    raise ValidationError(f"{path}:{lineno}: duplicate column names")
                continue
            if len(row) != len(header):
                raise ValidationError(
                    f"{path}:{lineno}: expected {len(header)} fields, found {len(row)}")
            rows.append(row)
            lines.append(lineno)
    if header is None:
        raise ValidationError(f"{path}: missing header row")
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    return Table(header, rows, lines, meta, str(path))


def _write(path, meta: dict, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# schema_version={SCHEMA_VERSION}\n")
        for k in sorted(meta):
            fh.write(f"# {k}={meta[k]}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _num(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# cluster covariates


@dataclass(frozen=True)
class ClusterCovariates:
    ids: tuple
    values: np.ndarray
    names: tuple
    raw_columns: tuple

    def select(self, names) -> np.ndarray:
        idx = []
        for n in names:
            if n in self.names:
                idx.append(self.names.index(n))
            else:
                # a raw categorical name selects all of its dummy columns
                hits = [k for k, c in enumerate(self.names) if c.startswith(f"{n}[")]
                if not hits:
                    raise ValidationError(f"unknown cluster covariate {n!r}; have {list(self.names)}")
                idx.extend(hits)
        return self.values[:, idx], tuple(self.names[k] for k in idx)


def _is_numeric(values) -> bool:
    try:
        [float(v) for v in values]
    except ValueError:
        return False
    return True


def read_cluster_covariates(path, categorical=(), id_column="cluster_id") -> ClusterCovariates:
    """One row per cluster.  Non-numeric columns and those in ``categorical``
    are dummy coded against their lexicographically first level."""
    t = read_table(path)
    ic = t.column(id_column)
    ids = [r[ic] for r in t.rows]
    seen = {}
    for k, cid in enumerate(ids):
        if not cid:
            t.fail(k, "empty cluster_id")
        if cid in seen:
            t.fail(k, f"duplicate cluster_id {cid!r} (first on line {t.lines[seen[cid]]})")
        seen[cid] = k
    unknown = set(categorical) - set(t.header)
    if unknown:
        raise ValidationError(f"{path}: categorical columns {sorted(unknown)} not in header")
    cols, names, raw = [], [], []
    for c, name in enumerate(t.header):
        if c == ic:
            continue
        raw.append(name)
        vals = [r[c] for r in t.rows]
        if name in categorical or not _is_numeric(vals):
            for k, v in enumerate(vals):
                if not v:
                    t.fail(k, f"column {name!r}: empty value")
            mat, nm = dummy_code(vals, name)
            cols.extend(mat.T)
            names.extend(nm)
        else:
            cols.append(t.floats(c))
            names.append(name)
    values = np.column_stack(cols) if cols else np.zeros((len(ids), 0))
    return ClusterCovariates(tuple(ids), values, tuple(names), tuple(raw))


def write_cluster_covariates(path, ids, values, names, meta=None):
    _write(path, meta or {}, ["cluster_id", *names],
           [[i, *(_num(v) for v in row)] for i, row in zip(ids, np.asarray(values, float))])


# ---------------------------------------------------------------------------
# outcomes


@dataclass(frozen=True)
class OutcomeTable:
    ids: tuple           # cluster order
    cluster_sizes: tuple
    individual: np.ndarray
    individual_names: tuple
    y: np.ndarray


def read_outcomes(path, outcome=None, individual=(), order=None,
                  id_column="cluster_id") -> OutcomeTable:
    """Individual rows.  ``outcome`` defaults to the last column.

    Rows are regrouped by cluster in ``order`` (default: first appearance);
    within a cluster the file order is kept.
    """
    t = read_table(path)
    ic = t.column(id_column)
    oc = len(t.header) - 1 if outcome is None else t.column(outcome)
    if oc == ic:
        raise ValidationError(f"{path}: the outcome column cannot be {id_column!r}")
    zc = [t.column(n) for n in individual]
    ids = [r[ic] for r in t.rows]
    first = list(dict.fromkeys(ids))
    if order is None:
        order = first
    else:
        order = list(order)
        missing = set(order) - set(first)
        extra = set(first) - set(order)
        if missing or extra:
            raise DesignError(f"{path}: cluster ids do not match the allocation; "
                              f"missing {sorted(missing)[:5]}, unknown {sorted(extra)[:5]}")
    pos = {cid: k for k, cid in enumerate(order)}
    key = np.array([pos[i] for i in ids])
    perm = np.argsort(key, kind="stable")
    y = t.floats(oc)[perm]
    Z = (np.column_stack([t.floats(c) for c in zc]) if zc
         else np.zeros((len(ids), 0)))[perm]
    sizes = tuple(int(n) for n in np.bincount(key, minlength=len(order)))
    return OutcomeTable(tuple(order), sizes, Z, tuple(individual), y)


def write_outcomes(path, dataset: OutcomeDataset, ids, outcome="y", meta=None):
    cov = dataset.covariates
    sizes = dataset.design.cluster_sizes
    rows, r = [], 0
    for cid, m in zip(ids, sizes):
        for _ in range(m):
            rows.append([cid, *(_num(v) for v in cov.individual_level[r]), _num(dataset.y[r])])
            r += 1
    _write(path, meta or {}, ["cluster_id", *cov.individual_names, outcome], rows)


def read_dataset(outcome_path, scheme_path, outcome=None, individual=(),
                 cluster: ClusterCovariates | None = None, cluster_columns=(),
                 reference_arm=None):
    """Join outcomes with an allocation (and optional cluster covariates)."""
    alloc = read_scheme(scheme_path)
    ot = read_outcomes(outcome_path, outcome, individual, order=alloc.ids)
    labels = alloc.labels
    n_arms = int(labels.max())
    counts = tuple(int((labels == a).sum()) for a in range(1, n_arms + 1))
    if reference_arm is None and "reference_arm" in alloc.meta:
        reference_arm = int(alloc.meta["reference_arm"])
    design = TrialDesign(counts, ot.cluster_sizes, reference_arm)
    if cluster is not None and cluster_columns:
        pos = {cid: k for k, cid in enumerate(cluster.ids)}
        missing = [i for i in alloc.ids if i not in pos]
        if missing:
            raise DesignError(f"clusters {missing[:5]} have no cluster-level covariates")
        X, xnames = cluster.select(cluster_columns)
        X = X[[pos[i] for i in alloc.ids]]
    else:
        X, xnames = np.zeros((len(alloc.ids), 0)), ()
    cov = CovariateTable(X, ot.individual, ot.cluster_sizes, xnames, ot.individual_names)
    scheme = AllocationScheme(tuple(int(v) for v in labels), design)
    return OutcomeDataset(design, scheme, cov, ot.y), alloc


# ---------------------------------------------------------------------------
# allocations and spaces


@dataclass(frozen=True)
class Allocation:
    ids: tuple
    labels: np.ndarray
    meta: dict


def write_scheme(path, ids, scheme: AllocationScheme, meta=None):
    meta = dict(meta or {})
    meta.setdefault("reference_arm", scheme.design.reference_arm)
    _write(path, meta, ["cluster_id", "arm"], [[i, int(a)] for i, a in zip(ids, scheme.labels)])


def read_scheme(path) -> Allocation:
    t = read_table(path)
    ic, ac = t.column("cluster_id"), t.column("arm")
    ids, labels = [], []
    for k, r in enumerate(t.rows):
        try:
            a = int(r[ac])
        except ValueError:
            t.fail(k, f"arm {r[ac]!r} is not an integer")
        if a < 1:
            t.fail(k, "arms are numbered from 1")
        if r[ic] in ids:
            t.fail(k, f"duplicate cluster_id {r[ic]!r}")
        ids.append(r[ic])
        labels.append(a)
    labels = np.array(labels, dtype=np.int8)
    if set(labels.tolist()) != set(range(1, int(labels.max()) + 1)):
        raise DesignError(f"{path}: some arm between 1 and {labels.max()} has no clusters")
    return Allocation(tuple(ids), labels, t.meta)


def write_space(path, space: RandomizationSpace, retained: np.ndarray, meta=None):
    """Full scored space; ``retained`` flags the constrained subspace."""
    meta = dict(meta or {})
    meta.update(provenance=space.provenance.value,
                clusters_per_arm=" ".join(map(str, space.design.clusters_per_arm)),
                reference_arm=space.design.reference_arm)
    if space.n_draws is not None:
        meta["n_draws"] = space.n_draws
    scores = space.scores if space.scores is not None else np.zeros(len(space))
    rows = [[",".join(map(str, lab.tolist())), _num(s), int(r)]
            for lab, s, r in zip(space.labels, scores, retained)]
    _write(path, meta, ["labels", "score", "retained"], rows)


@dataclass(frozen=True)
class SpaceSnapshot:
    labels: np.ndarray
    scores: np.ndarray
    retained: np.ndarray
    meta: dict

    @property
    def provenance(self) -> Provenance:
        return Provenance(self.meta.get("provenance", "enumerated"))

    @property
    def constrained(self) -> bool:
        return "cutoff_score" in self.meta and not self.retained.all()

    @property
    def needs_scorer(self) -> bool:
        """Sampled constrained spaces need the scorer to filter regenerated pairwise splits."""
        return self.constrained and self.provenance is Provenance.SAMPLED

    @property
    def categorical(self) -> list:
        return json.loads(self.meta.get("categorical", "[]"))

    def scorer(self, covariates: "ClusterCovariates", ids) -> BalanceScorer:
        """Rebuild the design's balance scorer and check it reproduces the stored scores."""
        pos = {cid: k for k, cid in enumerate(covariates.ids)}
        missing = [i for i in ids if i not in pos]
        if missing:
            raise DesignError(f"clusters {missing[:5]} have no cluster-level covariates")
        X, names = covariates.select(json.loads(self.meta.get("balance_columns", "[]")))
        X = X[[pos[i] for i in ids]]
        spec = BalanceSpec(Metric(self.meta.get("metric", "l2")), None,
                           json.loads(self.meta.get("weights", "null")))
        sc = BalanceScorer(X, spec, names)
        k = int(np.argmax(self.retained))
        cpa = tuple(int(x) for x in self.meta["clusters_per_arm"].split())
        got = float(sc.scores(self.labels[k:k + 1], cpa)[0])
        if not np.isclose(got, self.scores[k], rtol=1e-8, atol=1e-12):
            raise DesignError("cluster covariates do not reproduce the balance scores in the "
                              "space snapshot")
        return sc

    def space(self, design: TrialDesign, retained_only=True,
              scorer: BalanceScorer | None = None) -> RandomizationSpace:
        keep = self.retained if retained_only else np.ones_like(self.retained)
        cpa = self.meta.get("clusters_per_arm")
        if cpa and tuple(int(x) for x in cpa.split()) != design.clusters_per_arm:
            raise DesignError("space snapshot and allocation disagree on arm sizes")
        n_draws = int(self.meta["n_draws"]) if "n_draws" in self.meta else None
        constraint = None
        if scorer is not None and self.constrained:
            constraint = Constraint(_cutoff_from_meta(self.meta, int(keep.sum()), len(keep)),
                                    float(self.meta["cutoff_score"]), scorer, len(keep))
        return RandomizationSpace(design, self.labels[keep], self.scores[keep], self.provenance,
                                  n_draws, constraint)


def _cutoff_from_meta(meta, kept, total):
    text = meta.get("cutoff", "")
    if text.startswith("count:"):
        return Count(int(text[6:]))
    if text.startswith("quantile:"):
        return Quantile(float(text[9:]))
    return Quantile(kept / total)


def read_space(path) -> SpaceSnapshot:
    t = read_table(path)
    lc, sc, rc = t.column("labels"), t.column("score"), t.column("retained")
    width = None
    labels = []
    for k, r in enumerate(t.rows):
        try:
            lab = [int(v) for v in r[lc].split(",")]
        except ValueError:
            t.fail(k, f"bad labels field {r[lc]!r}")
        if width is None:
            width = len(lab)
        elif len(lab) != width:
            t.fail(k, f"scheme has {len(lab)} clusters, expected {width}")
        if r[rc] not in ("0", "1"):
            t.fail(k, f"retained must be 0 or 1, got {r[rc]!r}")
        labels.append(lab)
    retained = np.array([r[rc] == "1" for r in t.rows])
    if not retained.any():
        raise ValidationError(f"{path}: no retained schemes")
    return SpaceSnapshot(np.array(labels, dtype=np.int8), t.floats(sc), retained, t.meta)

"""Command-line front end: ``mcrt design``, ``mcrt analyze``, ``mcrt simulate``.

Settings come from a TOML file with one table per subcommand; command-line
flags override the file.  Exit codes: 0 success, 2 validation error,
3 protocol error (scheme outside the space), 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from . import io as mio
from .balance import BalanceScorer, BalanceSpec, Metric, arm_means_table
from .design import TrialDesign
from .errors import DesignError, McrtError, ValidationError
from .lmm import Method, ModelSpec, fit
from .model_tests import (between_within_df, bonferroni, wald_global_chisq, wald_global_f,
                          wald_pairwise_t, wald_pairwise_z)
from .randtests import invert_ci, randomization_test_global, randomization_test_pairwise
from .rng import child_seed
from .space import (DEFAULT_DRAWS, ENUMERATION_LIMIT, Count, Quantile, build_space, constrain,
                    retained_mask, select_scheme)

THREADS_ENV = "MCRT_THREADS"

DESIGN_KEYS = {"arms", "reference_arm", "metric", "cutoff", "count", "columns", "categorical",
               "weights", "n_draws", "enumeration_limit", "seed"}
ANALYZE_KEYS = {"outcome", "individual", "aggregate", "cluster", "categorical", "covariates",
                "method", "alpha", "ci", "ci_points", "ci_width_se", "seed"}
SIMULATE_KEYS = {"g", "rho", "effect_sizes", "families", "designs", "covset", "metric",
                 "analyses", "alphas", "replicates", "n_draws", "method", "m", "sigma_z2",
                 "shared_mu", "freeze_covariates", "enumeration_limit", "seed"}


class _Errors(list):
    def check(self, cond, msg):
        if not cond:
            self.append(msg)

    def raise_if_any(self, where):
        if self:
            raise ValidationError(f"invalid {where} configuration:\n  - " + "\n  - ".join(self))


def _section(cfg: dict, name: str, allowed: set, errs: _Errors) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        errs.append(f"[{name}] must be a table")
        return {}
    for k in sorted(set(sec) - allowed):
        errs.append(f"[{name}] unknown key {k!r}")
    return dict(sec)


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _str_list(sec, key, errs, where):
    v = sec.get(key, [])
    if not isinstance(v, list) or not all(isinstance(x, str) for x in v):
        errs.append(f"[{where}] {key} must be a list of strings")
        return []
    return v


def _seed(args, sec, errs, where):
    seed = args.seed if args.seed is not None else sec.get("seed")
    if seed is None:
        errs.append(f"[{where}] a seed is required (config 'seed' or --seed)")
    elif not _is_int(seed) or seed < 0:
        errs.append(f"[{where}] seed must be a nonnegative integer")
    return seed


def _resolved(sec, seed):
    out = dict(sec)
    out["seed"] = seed
    return out


def _out_dir(args) -> Path:
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=False, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    return v


# ---------------------------------------------------------------------------
# design


def _cutoff_text(cutoff) -> str:
    if isinstance(cutoff, Count):
        return f"count:{cutoff.n}"
    return f"quantile:{cutoff.q!r}"


def _parse_cutoff(sec, errs):
    if "cutoff" in sec and "count" in sec:
        errs.append("[design] give either cutoff or count, not both")
        return None
    if "count" in sec:
        n = sec["count"]
        if not _is_int(n) or n < 1:
            errs.append("[design] count must be a positive integer")
            return None
        return Count(n)
    q = sec.get("cutoff", 1.0)
    if not _is_num(q) or not 0 < q <= 1:
        errs.append("[design] cutoff must be a fraction in (0, 1]")
        return None
    return Quantile(float(q))


def balance_report(labels, X, names, design) -> list:
    """Baseline balance rows: covariate, per-arm means, overall mean."""
    means = arm_means_table(labels, X, design)
    overall = X.mean(axis=0)
    return [[n, *means[:, l].tolist(), float(overall[l])] for l, n in enumerate(names)]


def format_balance(rows, design) -> str:
    head = ["Covariate"] + [f"Arm {a} (n={g})" for a, g in
                            enumerate(design.clusters_per_arm, 1)] + ["Overall"]
    body = [[r[0]] + [f"{v:.3f}" for v in r[1:]] for r in rows]
    w = [max(len(str(x)) for x in col) for col in zip(head, *body)]
    lines = ["  ".join(str(x).rjust(wi) if k else str(x).ljust(wi)
                       for k, (x, wi) in enumerate(zip(line, w))) for line in [head, *body]]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)


def cmd_design(args) -> int:
    errs = _Errors()
    cfg = mio.load_config(args.config) if args.config else {}
    sec = _section(cfg, "design", DESIGN_KEYS, errs)
    arms = sec.get("arms")
    if not isinstance(arms, list) or len(arms) < 2 or not all(_is_int(a) and a > 0 for a in arms):
        errs.append("[design] arms must list at least two positive cluster counts")
        arms = None
    ref = sec.get("reference_arm")
    if ref is not None and (not _is_int(ref) or arms is None or not 1 <= ref <= len(arms)):
        errs.append("[design] reference_arm must name one of the arms")
    try:
        metric = Metric(sec.get("metric", "l2"))
    except ValueError:
        errs.append("[design] metric must be 'l2' or 'mahalanobis'")
        metric = Metric.L2
    cutoff = _parse_cutoff(sec, errs)
    columns = _str_list(sec, "columns", errs, "design") or None
    categorical = _str_list(sec, "categorical", errs, "design")
    weights = sec.get("weights")
    if weights is not None:
        if not isinstance(weights, list) or not all(_is_num(w) and w >= 0 for w in weights):
            errs.append("[design] weights must be a list of nonnegative numbers")
        elif metric is Metric.MAHALANOBIS:
            errs.append("[design] weights apply to the l2 metric only")
    n_draws = sec.get("n_draws", DEFAULT_DRAWS)
    errs.check(_is_int(n_draws) and n_draws > 0, "[design] n_draws must be a positive integer")
    limit = sec.get("enumeration_limit", ENUMERATION_LIMIT)
    errs.check(_is_int(limit) and limit > 0, "[design] enumeration_limit must be a positive integer")
    seed = _seed(args, sec, errs, "design")
    errs.raise_if_any("design")

    resolved = _resolved(sec, seed)
    chash = mio.config_hash(resolved)
    data = mio.read_cluster_covariates(args.covariates, categorical)
    G = len(data.ids)
    if G != sum(arms):
        raise DesignError(f"{args.covariates}: {G} clusters, but the arms need {sum(arms)}")
    # cluster sizes play no part in the design phase
    design = TrialDesign(tuple(arms), (1,) * G, ref)
    if columns is None:
        X, names = data.values, data.names
    else:
        X, names = data.select(columns)
    if X.shape[1] == 0:
        raise ValidationError("no covariates to balance")
    if weights is not None and len(weights) != X.shape[1]:
        raise ValidationError(f"[design] {len(weights)} weights for {X.shape[1]} covariates {list(names)}")
    scorer = BalanceScorer(X, BalanceSpec(metric, None, weights), names)

    space = build_space(design, n_draws, child_seed(seed, 0), limit).scored(scorer)
    sub = constrain(space, scorer, cutoff)
    scheme = select_scheme(sub, child_seed(seed, 1))
    retained, _ = retained_mask(space.scores, cutoff)

    out = _out_dir(args)
    meta = {"config_hash": chash, "seed": seed, "mcrt_version": __version__}
    mio.write_scheme(out / "scheme.csv", data.ids, scheme, meta)
    mio.write_space(out / "space.csv", space, retained,
                    {**meta, "cutoff_score": repr(sub.constraint.cutoff_score),
                     "metric": metric.value, "cutoff": _cutoff_text(cutoff),
                     "balance_columns": json.dumps(list(names)),
                     "categorical": json.dumps(categorical),
                     "weights": json.dumps(weights)})
    rows = balance_report(scheme.array, X, names, design)
    mio._write(out / "balance.csv", meta,
               ["covariate", *[f"arm{a}" for a in range(1, design.n_arms + 1)], "overall"],
               [[r[0], *(mio._num(v) for v in r[1:])] for r in rows])
    summary = {
        "schema_version": mio.SCHEMA_VERSION, "config_hash": chash, "seed": seed,
        "n_clusters": G, "clusters_per_arm": list(design.clusters_per_arm),
        "reference_arm": design.reference_arm, "metric": metric.value,
        "covariates": list(names), "provenance": space.provenance.value,
        "space_size": len(space), "retained": int(retained.sum()),
        "cutoff_score": sub.constraint.cutoff_score,
        "selected_score": float(scorer.score(scheme)),
        "allocation": dict(zip(data.ids, map(int, scheme.labels))),
    }
    _write_json(out / "design.json", summary)
    print(f"space: {len(space)} schemes ({space.provenance.value}), retained {int(retained.sum())},"
          f" cutoff B* = {sub.constraint.cutoff_score:.6g}")
    print(format_balance(rows, design))
    return 0


# ---------------------------------------------------------------------------
# analyze


def cmd_analyze(args) -> int:
    errs = _Errors()
    cfg = mio.load_config(args.config) if args.config else {}
    sec = _section(cfg, "analyze", ANALYZE_KEYS, errs)
    outcome = sec.get("outcome")
    errs.check(outcome is None or isinstance(outcome, str), "[analyze] outcome must be a column name")
    indiv = _str_list(sec, "individual", errs, "analyze")
    agg = _str_list(sec, "aggregate", errs, "analyze")
    clus = _str_list(sec, "cluster", errs, "analyze")
    categorical = _str_list(sec, "categorical", errs, "analyze")
    cov_path = args.covariates or sec.get("covariates")
    errs.check(not clus or cov_path, "[analyze] cluster covariates need a covariate CSV (--covariates)")
    try:
        method = Method(str(sec.get("method", "reml")).upper())
    except ValueError:
        errs.append("[analyze] method must be 'reml' or 'ml'")
        method = Method.REML
    alpha = sec.get("alpha", 0.05)
    errs.check(_is_num(alpha) and 0 < alpha < 1, "[analyze] alpha must lie in (0, 1)")
    ci = sec.get("ci", False)
    errs.check(isinstance(ci, bool), "[analyze] ci must be true or false")
    ci_points = sec.get("ci_points", 81)
    errs.check(_is_int(ci_points) and ci_points >= 3, "[analyze] ci_points must be an integer >= 3")
    ci_width = sec.get("ci_width_se", 4.0)
    errs.check(_is_num(ci_width) and ci_width > 0, "[analyze] ci_width_se must be positive")
    seed = _seed(args, sec, errs, "analyze")
    errs.raise_if_any("analyze")

    resolved = _resolved(sec, seed)
    chash = mio.config_hash(resolved)
    zcols = list(dict.fromkeys(indiv + agg))
    cluster = mio.read_cluster_covariates(cov_path, categorical) if clus else None
    dataset, alloc = mio.read_dataset(args.outcomes, args.scheme, outcome, zcols, cluster, clus)
    snap = mio.read_space(args.space)
    scorer = None
    if snap.needs_scorer:
        # sampled pairwise reference sets are regenerated and must respect B*
        if not cov_path:
            raise ValidationError(f"{args.space} is a sampled, constrained space; pass the design's "
                                  "cluster covariate CSV with --covariates")
        scorer = snap.scorer(mio.read_cluster_covariates(cov_path, snap.categorical), alloc.ids)
    space = snap.space(dataset.design, scorer=scorer)
    spec = ModelSpec(tuple(range(dataset.covariates.cluster_level.shape[1])),
                     tuple(zcols.index(c) for c in agg), tuple(zcols.index(c) for c in indiv))

    design = dataset.design
    full = fit(dataset, spec, method)
    arms = design.treatment_arms
    model = [wald_global_chisq(full, alpha), wald_global_f(full, alpha=alpha)]
    for a in arms:
        model += [wald_pairwise_z(full, a, alpha), wald_pairwise_t(full, a, alpha=alpha)]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rglob = randomization_test_global(dataset, space, spec, method, alpha)
        rpair = [randomization_test_pairwise(dataset, space, a, spec, method, alpha,
                                             seed=child_seed(seed, 2, a)) for a in arms]
        cis = []
        if ci:
            cis = [invert_ci(dataset, space, a, alpha=alpha, spec=spec, method=method,
                             seed=child_seed(seed, 2, a), n_grid=ci_points,
                             width_se=ci_width) for a in arms]
    t_p = [r.p_value for r in model if r.reference == "t"]
    bonf_t = bonferroni(t_p, alpha) if all(np.isfinite(t_p)) else None
    bonf_r = bonferroni([r.p_value for r in rpair], alpha, strict=True)
    report = {
        "schema_version": mio.SCHEMA_VERSION,
        "config_hash": chash,
        "seed": seed,
        "inputs": {"outcomes": str(args.outcomes), "scheme": str(args.scheme),
                   "space": str(args.space), "space_config_hash": snap.meta.get("config_hash")},
        "design": {"clusters_per_arm": list(design.clusters_per_arm),
                   "reference_arm": design.reference_arm, "n_clusters": design.n_clusters,
                   "n_individuals": design.n_individuals},
        "fit": full.summary(),
        "degrees_of_freedom": {
            "G": design.n_clusters, "c": design.n_arms,
            "cluster_level_covariates": full.n_cluster_level,
            "between_within": between_within_df(full),
            "formula": "G - c - cluster_level_covariates",
        },
        "model_tests": [r.to_dict() for r in model],
        "randomization_tests": [r.to_dict() for r in [rglob, *rpair]],
        "bonferroni": {
            "t": None if bonf_t is None else {"level": bonf_t.level, "reject": list(bonf_t.reject)},
            "randomization": {"level": bonf_r.level, "reject": list(bonf_r.reject)},
            "arms": list(arms),
        },
        "confidence_intervals": [c.to_dict() for c in cis],
        "warnings": sorted({str(w.message) for w in caught}),
    }
    out = _out_dir(args)
    _write_json(out / "analysis.json", _clean(report))
    for r in model:
        print(f"{r.reference:>6} {r.hypothesis:<7} stat={r.statistic:10.4f}  p={r.p_value:.4g}")
    for r in [rglob, *rpair]:
        print(f"{'R':>6} {r.hypothesis:<7} stat={r.statistic:10.4f}  p={r.p_value:.4g}"
              f"  (R={r.reference_size})")
    return 0


# ---------------------------------------------------------------------------
# simulate


def _threads(args, errs) -> int:
    if args.threads is not None:
        n = args.threads
    elif os.environ.get(THREADS_ENV):
        try:
            n = int(os.environ[THREADS_ENV])
        except ValueError:
            errs.append(f"{THREADS_ENV} must be an integer")
            return 1
    else:
        return 1
    if n < 1:
        errs.append("thread count must be at least 1")
        return 1
    return n


def build_grid(sec: dict, replicates=None, errs: _Errors | None = None):
    """ExperimentGrid from a [simulate] table; every problem goes to ``errs``."""
    from .sim import ANALYSES, COVSETS, DesignArm, ExperimentGrid, Family

    errs = _Errors() if errs is None else errs
    kw = {}

    def num_list(key, kind, cast):
        v = sec.get(key)
        if v is None:
            return
        if not isinstance(v, list) or not v or not all(kind(x) for x in v):
            errs.append(f"[simulate] {key} must be a nonempty list of numbers")
            return
        kw[key] = tuple(cast(x) for x in v)

    num_list("g", _is_int, int)
    num_list("rho", _is_num, float)
    num_list("alphas", _is_num, float)
    es = sec.get("effect_sizes")
    if es is not None:
        if (not isinstance(es, list) or not es
                or not all(isinstance(e, list) and all(_is_num(x) for x in e) for e in es)):
            errs.append("[simulate] effect_sizes must be a list of [es1, es2] pairs")
        else:
            kw["effect_sizes"] = tuple(tuple(float(x) for x in e) for e in es)
    fams = sec.get("families")
    if fams is not None:
        valid = [f.value for f in Family]
        bad = [f for f in fams if f not in valid] if isinstance(fams, list) else [fams]
        if bad:
            errs.append(f"[simulate] unknown families {bad}; choose from {valid}")
        else:
            kw["families"] = tuple(fams)
    covset = sec.get("covset", "both")
    if covset not in COVSETS:
        errs.append(f"[simulate] covset must be one of {sorted(COVSETS)}")
        covset = "both"
    try:
        metric = Metric(sec.get("metric", "l2"))
    except ValueError:
        errs.append("[simulate] metric must be 'l2' or 'mahalanobis'")
        metric = Metric.L2
    designs = sec.get("designs")
    if designs is not None:
        arms = []
        for d in designs if isinstance(designs, list) else [designs]:
            try:
                arms.append(DesignArm.parse(str(d), covset, metric))
            except (ValidationError, ValueError):
                errs.append(f"[simulate] cannot parse design {d!r} (use SR, CR50, CR10, CRn100)")
        kw["design_arms"] = tuple(arms)
    elif "covset" in sec or "metric" in sec:
        from .sim import default_design_arms
        kw["design_arms"] = default_design_arms(covset, metric)
    an = sec.get("analyses")
    if an is not None:
        bad = [a for a in an if a not in ANALYSES] if isinstance(an, list) else [an]
        if bad:
            errs.append(f"[simulate] unknown analyses {bad}; choose from {list(ANALYSES)}")
        else:
            kw["analyses"] = tuple(an)
    reps = replicates if replicates is not None else sec.get("replicates", 2000)
    if not _is_int(reps) or reps < 1:
        errs.append("[simulate] replicates must be a positive integer")
    else:
        kw["replicates"] = reps
    for key in ("n_draws", "m", "enumeration_limit"):
        if key in sec:
            if not _is_int(sec[key]) or sec[key] < 1:
                errs.append(f"[simulate] {key} must be a positive integer")
            else:
                kw[key] = sec[key]
    if "sigma_z2" in sec:
        if not _is_num(sec["sigma_z2"]) or sec["sigma_z2"] < 0:
            errs.append("[simulate] sigma_z2 must be nonnegative")
        else:
            kw["sigma_z2"] = float(sec["sigma_z2"])
    for key in ("shared_mu", "freeze_covariates"):
        if key in sec:
            if not isinstance(sec[key], bool):
                errs.append(f"[simulate] {key} must be true or false")
            else:
                kw[key] = sec[key]
    if "method" in sec:
        try:
            kw["method"] = Method(str(sec["method"]).upper())
        except ValueError:
            errs.append("[simulate] method must be 'reml' or 'ml'")
    # run the grid's own checks without raising so every problem is listed
    probe = ExperimentGrid.__new__(ExperimentGrid)
    for f, v in {**_grid_defaults(), **kw}.items():
        object.__setattr__(probe, f, v)
    errs.extend(f"[simulate] {e}" for e in probe.validate()
                if not (e.startswith("replicates") and "replicates" not in kw))
    if errs:
        return None
    return ExperimentGrid(**kw)


def _grid_defaults():
    from dataclasses import MISSING, fields

    from .sim import ExperimentGrid
    out = {}
    for f in fields(ExperimentGrid):
        out[f.name] = f.default_factory() if f.default is MISSING else f.default
    return out


def cmd_simulate(args) -> int:
    from .sim import run_grid

    errs = _Errors()
    cfg = mio.load_config(args.config) if args.config else {}
    sec = _section(cfg, "simulate", SIMULATE_KEYS, errs)
    seed = _seed(args, sec, errs, "simulate")
    workers = _threads(args, errs)
    grid = build_grid(sec, args.replicates, errs)
    errs.raise_if_any("simulate")

    resolved = _resolved(sec, seed)
    if args.replicates is not None:
        resolved["replicates"] = args.replicates
    chash = mio.config_hash(resolved)
    report = run_grid(grid, seed, workers=workers, config_hash=chash)
    out = _out_dir(args)
    (out / "simulation.csv").write_text(report.to_csv(), encoding="utf-8")
    _write_json(out / "simulation_summary.json", {**report.summary(), "workers": workers})
    print(f"{len(report.rows)} rows written to {out / 'simulation.csv'} "
          f"in {report.wall_time:.1f} s")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mcrt",
        description="Design and analysis of multi-arm cluster randomized trials with "
                    "covariate-constrained randomization.",
        epilog=f"Exit codes: 0 success, 2 validation error, 3 protocol error, "
               f"4 numerical failure.  {THREADS_ENV} sets the worker count when "
               f"--threads is absent.")
    p.add_argument("--version", action="version", version=f"mcrt {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML file with a table for this command")
        sp.add_argument("--seed", type=int, help="root seed (overrides the config)")
        sp.add_argument("--out-dir", default=".", help="directory for output files")

    d = sub.add_parser("design", help="constrained randomization of clusters to arms",
                       description="Score the randomization space on cluster covariates, "
                                   "constrain it and select one allocation.  Writes "
                                   "scheme.csv, space.csv, balance.csv and design.json.")
    d.add_argument("covariates", help="CSV with cluster_id then one column per covariate")
    common(d)
    d.set_defaults(func=cmd_design)

    a = sub.add_parser("analyze", help="model-based and randomization tests",
                       description="Fit the mixed model and run Wald and randomization "
                                   "tests.  Writes analysis.json.")
    a.add_argument("outcomes", help="CSV with cluster_id, individual covariates, outcome")
    a.add_argument("scheme", help="allocation written by 'mcrt design'")
    a.add_argument("space", help="space snapshot written by 'mcrt design'")
    a.add_argument("--covariates", help="cluster covariate CSV for cluster-level adjustment")
    common(a)
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("simulate", help="Monte Carlo type I error and power",
                       description="Run an experiment grid.  Writes simulation.csv and "
                                   "simulation_summary.json.")
    common(s)
    s.add_argument("--replicates", type=int, help="replicates per scenario")
    s.add_argument("--threads", type=int, help=f"worker processes (default: ${THREADS_ENV} or 1)")
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except McrtError as exc:
        print(f"mcrt {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

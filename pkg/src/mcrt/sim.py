"""Monte Carlo harness for type I error and power of design/analysis strategies.

Data follow the random-intercept model with two Bernoulli(0.3) cluster-level
covariates ``x`` and two normal individual-level covariates ``z`` whose cluster
means are uniform on (-2, 2).

One replicate draws covariates, builds one randomization space and, for each
design arm (simple or constrained randomization), selects a scheme, draws
outcomes and runs every test of every analysis allowed for that arm.  All
analyses of a design arm share the replicate's data.  Per-replicate streams
come from :func:`mcrt.rng.child_seed`, so results do not depend on the worker
count.
"""
from __future__ import annotations

import csv
import enum
import io
import itertools
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats as sps

from .balance import BalanceScorer, BalanceSpec, Metric
from .design import (AllocationScheme, CovariateTable, OutcomeDataset, TrialDesign,
                     aggregate_to_cluster, cluster_index, is_cluster_constant)
from .errors import McrtError, ValidationError
from .lmm import Method, SufficientStats, fit_stats
from .model_tests import between_within_df
from .randtests import (efficient_chol, information_blocks, lmpr_values, permutation_p_value,
                        umpr_values, weighted_residual_totals)
from .rng import child_rng
from .space import (DEFAULT_DRAWS, ENUMERATION_LIMIT, Count, Quantile, SmallSpaceWarning,
                    build_space, constrain, pairwise_layout)

SCHEMA_VERSION = 1


class Family(str, enum.Enum):
    NORMAL = "normal"
    CAUCHY_CLUSTER = "cauchy_cluster"
    CAUCHY_RESIDUAL = "cauchy_residual"


def icc_to_sigma_gamma2(rho: float, sigma_eps2: float) -> float:
    if not 0 <= rho < 1:
        raise ValidationError(f"ICC must lie in [0, 1), got {rho}")
    if not sigma_eps2 > 0:
        raise ValidationError("sigma_eps2 must be positive")
    return rho * sigma_eps2 / (1.0 - rho)


def effect_from_es(es: float, rho: float, sigma_eps2: float) -> float:
    """Effect ``delta`` whose arm difference ``2 delta`` is ``es`` total outcome SDs."""
    if es < 0:
        raise ValidationError("effect size must be nonnegative")
    return es * math.sqrt(sigma_eps2 + icc_to_sigma_gamma2(rho, sigma_eps2)) / 2.0


@dataclass(frozen=True)
class DgpConfig:
    g: int = 10
    c: int = 3
    m: int = 150
    rho: float = 0.05
    sigma_eps2: float = 4.0
    mu_gamma: float = 1.0
    beta_z: tuple = (1.0, 1.0)
    beta_x: tuple = (1.0, 1.0)
    p_x: float = 0.3
    mu_range: tuple = (-2.0, 2.0)
    sigma_z2: float = 1.0
    shared_mu: bool = True
    effect_sizes: tuple = (0.0, 0.0)
    deltas: tuple | None = None
    family: Family = Family.NORMAL

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if self.g < 1 or self.c < 2 or self.m < 1:
            raise ValidationError("g, c and m must be positive with c >= 2")
        icc_to_sigma_gamma2(self.rho, self.sigma_eps2)
        k = self.c - 1
        if self.deltas is not None:
            object.__setattr__(self, "deltas", tuple(float(d) for d in self.deltas))
            if len(self.deltas) != k:
                raise ValidationError(f"need {k} deltas")
        else:
            es = tuple(float(e) for e in self.effect_sizes)
            if len(es) != k:
                raise ValidationError(f"need {k} effect sizes")
            object.__setattr__(self, "effect_sizes", es)
        if len(self.beta_z) != 2 or len(self.beta_x) != 2:
            raise ValidationError("the generator uses two x and two z covariates")
        if self.sigma_z2 < 0 or not 0 < self.p_x < 1:
            raise ValidationError("invalid covariate distribution parameters")

    @property
    def sigma_gamma2(self) -> float:
        return icc_to_sigma_gamma2(self.rho, self.sigma_eps2)

    @property
    def delta(self) -> tuple:
        if self.deltas is not None:
            return self.deltas
        return tuple(effect_from_es(e, self.rho, self.sigma_eps2) for e in self.effect_sizes)

    @property
    def design(self) -> TrialDesign:
        return TrialDesign.balanced(self.c, self.g, self.m)

    def scaled(self, factor: float) -> "DgpConfig":
        """Same configuration with every effect multiplied by ``factor``."""
        d = dict(asdict(self))
        if self.deltas is not None:
            d["deltas"] = tuple(factor * x for x in self.deltas)
        else:
            d["effect_sizes"] = tuple(factor * x for x in self.effect_sizes)
        return DgpConfig(**d)


def generate_covariates(config: DgpConfig, rng) -> CovariateTable:
    """Draw ``x`` and ``z``; redraw ``x`` until neither column is constant over clusters."""
    G, m = config.g * config.c, config.m
    for _ in range(1000):
        x = rng.binomial(1, config.p_x, size=(G, 2)).astype(float)
        if np.all(x.var(axis=0) > 0):
            break
    else:
        raise ValidationError("could not draw non-constant cluster covariates")
    lo, hi = config.mu_range
    if config.shared_mu:
        mu = np.repeat(rng.uniform(lo, hi, size=(G, 1)), 2, axis=1)
    else:
        mu = rng.uniform(lo, hi, size=(G, 2))
    z = np.repeat(mu, m, axis=0) + math.sqrt(config.sigma_z2) * rng.standard_normal((G * m, 2))
    return CovariateTable(x, z, (m,) * G, ("x1", "x2"), ("z1", "z2"))


def generate_outcomes(config: DgpConfig, covariates: CovariateTable, scheme: AllocationScheme,
                      rng) -> np.ndarray:
    G, m = config.g * config.c, config.m
    idx = cluster_index(covariates.cluster_sizes)
    T = scheme.indicators.astype(float)
    mean_c = covariates.cluster_level @ np.asarray(config.beta_x) + T @ np.asarray(config.delta)
    if config.family is Family.CAUCHY_CLUSTER:
        gamma = rng.standard_cauchy(G)
    else:
        gamma = config.mu_gamma + math.sqrt(config.sigma_gamma2) * rng.standard_normal(G)
    if config.family is Family.CAUCHY_RESIDUAL:
        eps = rng.standard_cauchy(G * m)
    else:
        eps = math.sqrt(config.sigma_eps2) * rng.standard_normal(G * m)
    return (covariates.individual_level @ np.asarray(config.beta_z)
            + (mean_c + gamma)[idx] + eps)


def generate_dataset(config: DgpConfig, scheme: AllocationScheme, rng,
                     covariates: CovariateTable | None = None) -> OutcomeDataset:
    """Outcomes for ``scheme``; covariates are drawn first unless supplied."""
    if scheme.design != config.design:
        raise ValidationError("scheme does not match the configured design")
    cov = generate_covariates(config, rng) if covariates is None else covariates
    y = generate_outcomes(config, cov, scheme, rng)
    return OutcomeDataset(scheme.design, scheme, cov, y)


# ---------------------------------------------------------------------------
# experiment grid

# columns of the superset design [1, x1, x2, zbar1, zbar2, z1, z2, T...]
_ANALYSIS_COLUMNS = {
    "unadj": (),
    "adj_c_x": (1, 2),
    "adj_c_zbar": (3, 4),
    "adj_i_z": (5, 6),
    "fully_adj_c": (1, 2, 3, 4),
    "fully_adj_i": (1, 2, 5, 6),
}
ANALYSES = tuple(_ANALYSIS_COLUMNS)

COVSETS = {"x": (0, 1), "zbar": (2, 3), "both": (0, 1, 2, 3)}

# analyses run for each design arm by default (simple randomization: all)
TABLE3 = {
    None: ANALYSES,
    "x": ("unadj", "adj_c_x", "fully_adj_c", "fully_adj_i"),
    "zbar": ("unadj", "adj_c_zbar", "adj_i_z", "fully_adj_c", "fully_adj_i"),
    "both": ("unadj", "fully_adj_c", "fully_adj_i"),
}

TESTS = (("chisq", "global"), ("F", "global"),
         ("z", "arm1"), ("z", "arm2"), ("t", "arm1"), ("t", "arm2"),
         ("R", "global"), ("R", "arm1"), ("R", "arm2"))


@dataclass(frozen=True)
class DesignArm:
    """Simple randomization when ``cutoff`` is None, else constrained on ``covset``."""

    name: str
    cutoff: Quantile | Count | None = None
    covset: str | None = None
    metric: Metric = Metric.L2

    def __post_init__(self):
        object.__setattr__(self, "metric", Metric(self.metric))
        if self.cutoff is None:
            object.__setattr__(self, "covset", None)
        elif self.covset not in COVSETS:
            raise ValidationError(f"covariate set must be one of {sorted(COVSETS)}")

    @classmethod
    def parse(cls, text: str, covset: str = "both", metric=Metric.L2) -> "DesignArm":
        """``SR``, ``CR50`` (quantile 0.5), ``CR10`` or ``CRn100`` (exactly 100 schemes)."""
        t = text.strip()
        if t.upper() == "SR":
            return cls("SR")
        if t.upper().startswith("CRN"):
            return cls(t, Count(int(t[3:])), covset, metric)
        if t.upper().startswith("CR"):
            return cls(t, Quantile(float(t[2:]) / 100.0), covset, metric)
        raise ValidationError(f"cannot parse design arm {text!r}")

    @property
    def label(self) -> str:
        if self.cutoff is None:
            return self.name
        return f"{self.name}[{self.covset},{self.metric.value}]"


def default_design_arms(covset="both", metric=Metric.L2):
    return (DesignArm("SR"), DesignArm("CR50", Quantile(0.5), covset, metric),
            DesignArm("CR10", Quantile(0.1), covset, metric))


@dataclass(frozen=True)
class ExperimentGrid:
    """Factorial grid of scenarios (g, ICC, effect, noise family) times design arms.

    ``analyses=None`` runs the default combinations (``TABLE3``) for each design arm;
    otherwise the listed analyses run for every arm.  ``freeze_covariates``
    keeps one covariate draw across replicates of a scenario.
    """

    g: tuple = (10,)
    rho: tuple = (0.05,)
    effect_sizes: tuple = ((0.0, 0.0),)
    families: tuple = (Family.NORMAL,)
    design_arms: tuple = field(default_factory=default_design_arms)
    analyses: tuple | None = None
    alphas: tuple = (0.05, 0.025)
    replicates: int = 2000
    n_draws: int = DEFAULT_DRAWS
    method: Method = Method.REML
    m: int = 150
    c: int = 3
    sigma_z2: float = 1.0
    shared_mu: bool = True
    enumeration_limit: int = ENUMERATION_LIMIT
    freeze_covariates: bool = False

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise ValidationError("; ".join(errors))
        object.__setattr__(self, "families", tuple(Family(f) for f in self.families))
        object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "effect_sizes", tuple(tuple(float(x) for x in e)
                                                       for e in self.effect_sizes))

    def validate(self) -> list:
        errs = []
        if int(self.replicates) < 1:
            errs.append("replicates must be at least 1")
        if self.c != 3:
            errs.append("the simulation grid supports c = 3 (two treatment arms)")
        if not self.g or any(int(g) < 1 for g in self.g):
            errs.append("g values must be positive")
        if any(not 0 <= r < 1 for r in self.rho):
            errs.append("ICC values must lie in [0, 1)")
        if any(len(e) != self.c - 1 or min(e) < 0 for e in self.effect_sizes):
            errs.append(f"each effect entry needs {self.c - 1} nonnegative effect sizes")
        if self.analyses is not None:
            bad = [a for a in self.analyses if a not in _ANALYSIS_COLUMNS]
            if bad:
                errs.append(f"unknown analyses {bad}; choose from {list(ANALYSES)}")
        if any(not 0 < a < 1 for a in self.alphas):
            errs.append("alpha levels must lie in (0, 1)")
        if not self.design_arms:
            errs.append("at least one design arm is needed")
        if int(self.n_draws) < 1:
            errs.append("n_draws must be at least 1")
        try:
            [Family(f) for f in self.families]
        except ValueError as exc:
            errs.append(str(exc))
        return errs

    def analyses_for(self, arm: DesignArm) -> tuple:
        if self.analyses is not None:
            return tuple(self.analyses)
        return TABLE3[arm.covset]

    def scenarios(self):
        for g, rho, es, fam in itertools.product(self.g, self.rho, self.effect_sizes,
                                                 self.families):
            yield DgpConfig(g=int(g), c=self.c, m=self.m, rho=float(rho), effect_sizes=es,
                            family=fam, sigma_z2=self.sigma_z2, shared_mu=self.shared_mu)


# ---------------------------------------------------------------------------
# one replicate


def _superset(cov: CovariateTable, scheme: AllocationScheme):
    idx = cluster_index(cov.cluster_sizes)
    zbar = aggregate_to_cluster(cov)
    T = scheme.indicators.astype(float)
    X = np.column_stack([np.ones(idx.shape[0]), cov.cluster_level[idx], zbar[idx],
                         cov.individual_level, T[idx]])
    return X


def _n_cluster_level(cols, z_constant):
    n = sum(1 for c in cols if c in (1, 2, 3, 4))
    n += sum(1 for c in cols if c in (5, 6) and z_constant[c - 5])
    return n


_NAMES = ("(Intercept)", "x1", "x2", "mean(z1)", "mean(z2)", "z1", "z2", "delta1", "delta2")


def _fit(stats, cols, n_cl, arms, method):
    cols = (0,) + tuple(cols)
    sub = stats.subset(cols)
    t_pos = [k for k, c in enumerate(cols) if c >= 7]
    ts = slice(t_pos[0], t_pos[-1] + 1) if t_pos else slice(len(cols), len(cols))
    return fit_stats(sub, [_NAMES[c] for c in cols], method, treatment_arms=arms,
                     all_treatment_arms=(1, 2), treatment_slice=ts, n_cluster_level=n_cl,
                     check=False), sub


def analyze_replicate(stats, space_labels, obs_index, layouts, design, analyses, method,
                      z_constant):
    """p-values (len(TESTS) per analysis) and a per-analysis failure flag.

    A failed fit leaves only its own row NaN.
    """
    out = np.full((len(analyses), len(TESTS)), np.nan)
    failed = np.zeros(len(analyses), dtype=bool)
    for a_idx, name in enumerate(analyses):
        try:
            out[a_idx] = _analysis_row(stats, space_labels, obs_index, layouts, design, name,
                                       method, z_constant)
        except (McrtError, np.linalg.LinAlgError, FloatingPointError):
            failed[a_idx] = True
    return out, failed


def _analysis_row(stats, space_labels, obs_index, layouts, design, name, method, z_constant):
    row = np.full(len(TESTS), np.nan)
    cov_cols = _ANALYSIS_COLUMNS[name]
    n_cl = _n_cluster_level(cov_cols, z_constant)
    full, _ = _fit(stats, cov_cols + (7, 8), n_cl, (1, 2), method)
    d = full.coef[full.treatment_slice]
    V = full.delta_vcov
    R = float(d @ np.linalg.solve(V, d))
    df2 = between_within_df(full)
    z = d / np.sqrt(np.diag(V))
    row[0] = sps.chi2.sf(R, 2)
    row[2:4] = 2 * sps.norm.sf(np.abs(z))
    if df2 >= 1:
        row[1] = sps.f.sf(R / 2, 2, df2)
        row[4:6] = 2 * sps.t.sf(np.abs(z), df2)
    nf, nst = _fit(stats, cov_cols, n_cl, (), method)
    chol = efficient_chol(*information_blocks(nst, nf, design))
    Q = lmpr_values(space_labels, weighted_residual_totals(nf), design, chol)
    row[6] = permutation_p_value(Q, obs_index)
    for k, arm in enumerate((1, 2)):
        other = 8 if arm == 1 else 7
        pf, _ = _fit(stats, cov_cols + (other,), n_cl, (3 - arm,), method)
        lay, lay_obs = layouts[k]
        vals = umpr_values(lay, weighted_residual_totals(pf))
        row[7 + k] = permutation_p_value(vals, lay_obs)
    return row


def run_replicate(config: DgpConfig, grid: ExperimentGrid, root_seed: int, scenario: int,
                  rep: int):
    """Returns (p-values [arms, analyses, tests], reference sizes [arms, 3],
    errors [arms, analyses])."""
    design = config.design
    arms = grid.design_arms
    n_an = max(len(grid.analyses_for(a)) for a in arms)
    pv = np.full((len(arms), n_an, len(TESTS)), np.nan)
    sizes = np.zeros((len(arms), 3), dtype=np.int64)
    errors = np.zeros((len(arms), n_an), dtype=np.int64)
    # frozen covariates reuse replicate 0's covariate stream
    rng = child_rng(root_seed, scenario, 0 if grid.freeze_covariates else rep, 0)
    cov = generate_covariates(config, rng)
    space = build_space(design, grid.n_draws, child_rng(root_seed, scenario, rep, 1),
                        grid.enumeration_limit)
    zbar = aggregate_to_cluster(cov)
    bal_matrix = np.column_stack([cov.cluster_level, zbar])
    z_constant = [is_cluster_constant(cov.individual_level[:, l], cov.cluster_sizes)
                  for l in range(2)]
    scored = {}
    for a_idx, arm in enumerate(arms):
        try:
            if arm.cutoff is None:
                sp = space
            else:
                key = (arm.covset, arm.metric)
                if key not in scored:
                    scorer = BalanceScorer(bal_matrix,
                                           BalanceSpec(arm.metric, COVSETS[arm.covset]),
                                           names=("x1", "x2", "mean(z1)", "mean(z2)"))
                    scored[key] = (scorer, space.scored(scorer))
                scorer, sc_space = scored[key]
                sp = constrain(sc_space, scorer, arm.cutoff)
            srng = child_rng(root_seed, scenario, rep, 2, a_idx)
            obs = int(srng.integers(len(sp)))
            scheme = AllocationScheme(tuple(sp.labels[obs]), design)
            y = generate_outcomes(config, cov, scheme, child_rng(root_seed, scenario, rep, 3, a_idx))
            stats = SufficientStats.from_arrays(_superset(cov, scheme), y, design.cluster_sizes)
            layouts = []
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", SmallSpaceWarning)
                for k, t_arm in enumerate((1, 2)):
                    lay = pairwise_layout(sp, scheme, t_arm,
                                          seed=child_rng(root_seed, scenario, rep, 4, a_idx, k),
                                          limit=grid.enumeration_limit, check=False)
                    layouts.append((lay, lay.observed_index()))
            sizes[a_idx] = (len(sp), len(layouts[0][0]), len(layouts[1][0]))
        except (McrtError, np.linalg.LinAlgError, FloatingPointError):
            errors[a_idx] += 1
            continue
        analyses = grid.analyses_for(arm)
        pv[a_idx, :len(analyses)], failed = analyze_replicate(
            stats, sp.labels, obs, layouts, design, analyses, grid.method, z_constant)
        errors[a_idx, :len(analyses)] += failed
    return pv, sizes, errors


# ---------------------------------------------------------------------------
# running and reporting


@dataclass
class ScenarioResult:
    config: DgpConfig
    pvalues: np.ndarray      # (replicates, arms, analyses, tests)
    sizes: np.ndarray        # (replicates, arms, 3): space, pair arm1, pair arm2
    errors: np.ndarray       # (replicates, arms, analyses)


def _run_chunk(args):
    config, grid, seed, scenario, reps = args
    out = [run_replicate(config, grid, seed, scenario, r) for r in reps]
    return (np.stack([o[0] for o in out]), np.stack([o[1] for o in out]),
            np.stack([o[2] for o in out]))


def run_scenario(config: DgpConfig, grid: ExperimentGrid, seed: int, scenario: int = 0,
                 replicates: int | None = None, workers: int = 1) -> ScenarioResult:
    """All replicates of one scenario.  Identical output for any ``workers``."""
    n = grid.replicates if replicates is None else int(replicates)
    if n < 1:
        raise ValidationError("replicates must be at least 1")
    if workers <= 1:
        pv, sz, er = _run_chunk((config, grid, seed, scenario, range(n)))
    else:
        chunks = [range(lo, min(lo + 25, n)) for lo in range(0, n, 25)]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_run_chunk, [(config, grid, seed, scenario, c) for c in chunks]))
        pv = np.concatenate([p[0] for p in parts])
        sz = np.concatenate([p[1] for p in parts])
        er = np.concatenate([p[2] for p in parts])
    return ScenarioResult(config, pv, sz, er)


def rejection_rate(pvalues, alpha, randomization=False):
    """(rate, se, n_valid) ignoring NaN p-values.

    Model-based tests reject at ``p <= alpha``; randomization tests at
    ``p < alpha`` so a 20-scheme reference set cannot reject at 0.05.
    """
    p = np.asarray(pvalues, float)
    ok = ~np.isnan(p)
    n = int(ok.sum())
    if n == 0:
        return float("nan"), float("nan"), 0
    rej = (p[ok] < alpha) if randomization else (p[ok] <= alpha)
    rate = float(rej.mean())
    return rate, math.sqrt(rate * (1 - rate) / n), n


REPORT_COLUMNS = ("g", "icc", "es1", "es2", "family", "design", "analysis", "test",
                  "hypothesis", "alpha", "rate", "se", "n", "n_invalid", "n_errors",
                  "replicates")


@dataclass
class SimulationReport:
    rows: list
    meta: dict
    results: list = field(default_factory=list, repr=False)
    wall_time: float = 0.0

    def lookup(self, **keys) -> dict:
        hits = [r for r in self.rows if all(r[k] == v for k, v in keys.items())]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} rows match {keys}")
        return hits[0]

    def rate(self, **keys) -> float:
        return self.lookup(**keys)["rate"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# schema_version={SCHEMA_VERSION}\n")
        for k in sorted(self.meta):
            buf.write(f"# {k}={self.meta[k]}\n")
        w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: _fmt(r[k]) for k in REPORT_COLUMNS})
        return buf.getvalue()

    def summary(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **self.meta,
                "n_rows": len(self.rows), "wall_time_seconds": round(self.wall_time, 3)}


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:.6g}"
    return v


def summarize(result: ScenarioResult, grid: ExperimentGrid) -> list:
    rows = []
    cfg = result.config
    reps = result.pvalues.shape[0]
    for a_idx, arm in enumerate(grid.design_arms):
        for an_idx, name in enumerate(grid.analyses_for(arm)):
            n_err = int(result.errors[:, a_idx, an_idx].sum())
            for t_idx, (test, hyp) in enumerate(TESTS):
                p = result.pvalues[:, a_idx, an_idx, t_idx]
                randomization = test == "R"
                if randomization:
                    col = {"global": 0, "arm1": 1, "arm2": 2}[hyp]
                    size = result.sizes[:, a_idx, col]
                    n_invalid = int(np.count_nonzero((size > 0) & (size < 20)))
                else:
                    n_invalid = int(np.count_nonzero(np.isnan(p))) - n_err
                alphas = grid.alphas if hyp != "global" else grid.alphas[:1]
                for alpha in alphas:
                    rate, se, n = rejection_rate(p, alpha, randomization)
                    rows.append({
                        "g": cfg.g, "icc": cfg.rho, "es1": cfg.effect_sizes[0],
                        "es2": cfg.effect_sizes[1], "family": cfg.family.value,
                        "design": arm.label, "analysis": name, "test": test,
                        "hypothesis": hyp, "alpha": alpha, "rate": rate, "se": se, "n": n,
                        "n_invalid": n_invalid, "n_errors": n_err, "replicates": reps,
                    })
    return rows


def run_grid(grid: ExperimentGrid, seed: int, workers: int = 1, keep_results: bool = False,
             config_hash: str = "") -> SimulationReport:
    t0 = time.perf_counter()
    rows, results = [], []
    for s_idx, cfg in enumerate(grid.scenarios()):
        res = run_scenario(cfg, grid, seed, s_idx, workers=workers)
        rows.extend(summarize(res, grid))
        if keep_results:
            results.append(res)
    meta = {"seed": int(seed), "replicates": int(grid.replicates), "method": grid.method.value,
            "n_draws": int(grid.n_draws), "config_hash": config_hash}
    return SimulationReport(rows, meta, results, time.perf_counter() - t0)

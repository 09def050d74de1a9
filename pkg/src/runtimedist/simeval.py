"""Synthetic ground truth and evaluation metrics.

A TrueCostWorld stands in for a real DBMS plus hardware: it hides true
cost-unit distributions and true per-operator cost coefficients. The
predictor sees the world only through calibration records and cost-model
probe oracles; "actual" running times are simulated by evaluating the true
cost model at the true selectivities with fresh cost-unit draws per run.

Also here: the exact enumeration oracle for Var[rho_n], a Monte Carlo
variance oracle for covariance-free plans, workload generation, and the
correlation / error-distribution metrics.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import plan as planmod
from .calib import CalibrationRecord, COST_UNITS
from .costfit import ARITY, design_row
from .plan import Plan, DEFAULT_COST_PROFILES
from .propagate import term_vars


# ---------------------------------------------------------------------------
# Normal CDF via the Abramowitz-Stegun 26.2.17 rational approximation,
# absolute error < 7.5e-8.

_AS_B = (0.319381530, -0.356563782, 1.781477937, -1.821255978, 1.330274429)
_AS_P = 0.2316419
_INV_SQRT_2PI = 0.3989422804014327


def normal_cdf(x: float) -> float:
    """Standard normal CDF Phi(x), accurate to better than 1e-7."""
    if x < 0:
        return 1.0 - normal_cdf(-x)
    t = 1.0 / (1.0 + _AS_P * x)
    poly = t * (_AS_B[0] + t * (_AS_B[1] + t * (_AS_B[2] + t * (_AS_B[3] + t * _AS_B[4]))))
    return 1.0 - _INV_SQRT_2PI * math.exp(-0.5 * x * x) * poly


# ---------------------------------------------------------------------------
# Correlation metrics.


def pearson(xs, ys) -> float:
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.size != ys.size or xs.size < 2:
        raise ValueError("pearson needs two equal-length vectors of >= 2 points")
    xd = xs - xs.mean()
    yd = ys - ys.mean()
    denom = math.sqrt(float(xd @ xd) * float(yd @ yd))
    if denom == 0.0:
        raise ValueError("pearson undefined: zero variance input")
    return float(xd @ yd) / denom


def _ranks(xs) -> np.ndarray:
    """Ranks starting at 1; tied values share the average of their ranks."""
    xs = np.asarray(xs, dtype=float)
    order = np.argsort(xs, kind="stable")
    ranks = np.empty(xs.size, dtype=float)
    i = 0
    while i < xs.size:
        j = i
        while j + 1 < xs.size and xs[order[j + 1]] == xs[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(xs, ys) -> float:
    return pearson(_ranks(xs), _ranks(ys))


# ---------------------------------------------------------------------------
# Evaluation records and the error-distribution distance.


@dataclass
class EvalRecord:
    plan_id: str
    predicted_mean: float
    predicted_stddev: float
    actual: float

    @property
    def error(self) -> float:
        return abs(self.predicted_mean - self.actual)

    @property
    def norm_error(self) -> float:
        return self.error / self.predicted_stddev


def default_alpha_grid(step: float = 0.01, upper: float = 6.0) -> np.ndarray:
    """Uniform alpha grid over (0, upper], 600 points at the defaults."""
    count = int(round(upper / step))
    return np.arange(1, count + 1) * step


def error_distribution_distance(records, alphas=None):
    """Per-alpha D_n(alpha) = |Pr_n(alpha) - (2 Phi(alpha) - 1)| and its mean.

    Pr_n is the empirical fraction of normalized errors <= alpha. Records
    with zero predicted stddev are excluded and counted.
    """
    if alphas is None:
        alphas = default_alpha_grid()
    usable = [r for r in records if r.predicted_stddev > 0.0]
    excluded = len(records) - len(usable)
    if not usable:
        raise ValueError("no usable records (all have zero predicted stddev)")
    e = np.array([r.norm_error for r in usable])
    d = []
    for a in alphas:
        pr_n = float(np.mean(e <= a))
        pr = 2.0 * normal_cdf(float(a)) - 1.0
        d.append(abs(pr_n - pr))
    d = np.asarray(d)
    return d, float(d.mean()), excluded


# ---------------------------------------------------------------------------
# The synthetic world.

_DEFAULT_UNIT_MEANS = {
    "c_s": 2.0e-5,
    "c_r": 1.0e-4,
    "c_t": 1.0e-6,
    "c_i": 2.0e-6,
    "c_o": 5.0e-7,
}


@dataclass
class TrueCostWorld:
    unit_means: dict[str, float]
    unit_vars: dict[str, float]
    coefs: dict[str, dict[str, tuple[float, ...]]]  # kind -> unit -> a's
    seed: int

    @classmethod
    def generate(cls, seed: int, noise_cv: float = 0.12) -> "TrueCostWorld":
        """Random world: hidden unit normals plus true a-coefficients for
        every (operator kind, cost unit) slot of the default profiles."""
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC057]))
        unit_means = {
            u: m * float(rng.uniform(0.8, 1.25)) for u, m in _DEFAULT_UNIT_MEANS.items()
        }
        unit_vars = {u: (noise_cv * m) ** 2 for u, m in unit_means.items()}
        coefs: dict[str, dict[str, tuple[float, ...]]] = {}
        for kind, profile in DEFAULT_COST_PROFILES.items():
            coefs[kind] = {}
            for unit, tag in profile.items():
                n_coef = {"C1": 1, "C2": 2, "C3": 2, "C4": 3, "C5": 3, "C6": 4}[tag]
                a = [float(rng.uniform(0.5, 2.0)) for _ in range(n_coef - 1)]
                a.append(float(rng.uniform(0.0, 20.0)))  # additive constant
                if tag == "C1":
                    a = [float(rng.uniform(0.0, 20.0))]
                coefs[kind][unit] = tuple(a)
        return cls(unit_means=unit_means, unit_vars=unit_vars, coefs=coefs, seed=seed)

    # -- serialization -----------------------------------------------------

    def to_json(self) -> str:
        return json.dumps(
            {
                "seed": self.seed,
                "unit_means": self.unit_means,
                "unit_vars": self.unit_vars,
                "coefs": {k: {u: list(a) for u, a in per.items()} for k, per in self.coefs.items()},
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "TrueCostWorld":
        doc = json.loads(text)
        return cls(
            unit_means=doc["unit_means"],
            unit_vars=doc["unit_vars"],
            coefs={k: {u: tuple(a) for u, a in per.items()} for k, per in doc["coefs"].items()},
            seed=int(doc["seed"]),
        )

    # -- what the predictor may see ----------------------------------------

    def calibration_records(self, repetitions: int, seed: int) -> list[CalibrationRecord]:
        """Synthesize calibration observations: known primitive counts with
        elapsed times drawn from the hidden unit distributions."""
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xCA11]))
        records = []
        for unit in COST_UNITS:
            mu = self.unit_means[unit]
            sd = math.sqrt(self.unit_vars[unit])
            for _ in range(repetitions):
                count = int(rng.integers(500_000, 2_000_000))
                c = max(float(rng.normal(mu, sd)), 0.0)
                records.append(
                    CalibrationRecord(unit=unit, count=count, elapsed_seconds=c * count)
                )
        return records

    def true_b(self, plan: Plan, relations, node_id: int, unit: str) -> tuple[str, tuple[float, ...]]:
        """True selectivity-space coefficients for one operator term."""
        node = plan.node(node_id)
        tag = node.cost_profile[unit]
        a = self.coefs[node.kind][unit]
        own = _leaf_product(plan, relations, node_id)
        if tag == "C1":
            return tag, (a[0],)
        if tag == "C2":
            return tag, (a[0] * own, a[1])
        if tag in ("C3", "C4"):
            p_l = (
                _leaf_product(plan, relations, node.children[0])
                if node.children
                else relations[node.relation].row_count
            )
            if tag == "C3":
                return tag, (a[0] * p_l, a[1])
            return tag, (a[0] * p_l * p_l, a[1] * p_l, a[2])
        p_l = _leaf_product(plan, relations, node.children[0])
        p_r = _leaf_product(plan, relations, node.children[1])
        if tag == "C5":
            return tag, (a[0] * p_l, a[1] * p_r, a[2])
        return tag, (a[0] * p_l * p_r, a[1] * p_l, a[2] * p_r, a[3])

    def cost_oracle(self, plan: Plan, relations):
        """Probe oracle: true logical cost of (node, unit) at a selectivity
        coordinate. This is all the predictor learns of the cost model."""

        def oracle(key, coord):
            node_id, unit = key
            tag, b = self.true_b(plan, relations, node_id, unit)
            return float(np.dot(b, design_row(tag, tuple(coord))))

        return oracle


def _leaf_product(plan: Plan, relations, node_id: int) -> float:
    out = 1.0
    for rel, _ in planmod.leaf_tables(plan, node_id):
        out *= relations[rel].row_count
    return out


def simulate_actual_runtime(plan: Plan, relations, world: TrueCostWorld, seed: int, truth=None) -> float:
    """One simulated run: true cost model at true selectivities, with fresh
    cost-unit draws. Deterministic for a given seed."""
    if truth is None:
        truth = planmod.selectivity_truth(plan, relations)
    rng = np.random.default_rng(np.random.SeedSequence([world.seed, seed, 0x5EED]))
    total = 0.0
    for node in plan.postorder():
        for unit, (tag, vars_) in term_vars(plan, node).items():
            _, b = world.true_b(plan, relations, node.id, unit)
            coord = tuple(1.0 if v is None else truth[v] for v in vars_)
            draw = max(
                float(rng.normal(world.unit_means[unit], math.sqrt(world.unit_vars[unit]))), 0.0
            )
            total += float(np.dot(b, design_row(tag, coord))) * draw
    return total


def actual_runtime(plan: Plan, relations, world: TrueCostWorld, seed: int, runs: int = 5) -> float:
    """Reported actual running time: the mean of `runs` simulated runs."""
    truth = planmod.selectivity_truth(plan, relations)
    return float(
        np.mean([simulate_actual_runtime(plan, relations, world, seed * 1000 + r, truth=truth) for r in range(runs)])
    )


# ---------------------------------------------------------------------------
# Monte Carlo variance oracle (covariance-free plans only).


def _eval_cf_array(tag, b, coords):
    if tag == "C1":
        return b[0]
    if tag in ("C2", "C3"):
        return b[0] * coords[0] + b[1]
    if tag == "C4":
        return b[0] * coords[0] ** 2 + b[1] * coords[0] + b[2]
    if tag == "C5":
        return b[0] * coords[0] + b[1] * coords[1] + b[2]
    return b[0] * coords[0] * coords[1] + b[1] * coords[0] + b[2] * coords[1] + b[3]


def monte_carlo_variance(plan: Plan, estimates, costfuncs, units, draws: int = 1_000_000, seed: int = 0):
    """Empirical (mean, variance) of t_q under independent normal draws of
    every cost unit and every selectivity variable.

    Only valid when all selectivity variables in the plan are pairwise
    independent; correlated variables are refused because their joint
    distribution is not determined by the marginals.
    """
    var_ids = set()
    var_dist = {}
    per_term = []
    for node in plan.postorder():
        for unit, (tag, vars_) in term_vars(plan, node).items():
            cf = costfuncs[node.id][unit]
            resolved = []
            for v in vars_:
                if v is None:
                    resolved.append(None)
                else:
                    est = estimates[v]
                    resolved.append(est.var_id)
                    var_ids.add(est.var_id)
                    var_dist[est.var_id] = (est.rho_n, est.sigma2, set(est.leaf_set))
            per_term.append((unit, cf.tag, cf.b, tuple(resolved)))
    ids = sorted(var_ids)
    for i, a in enumerate(ids):
        for b in ids[i + 1 :]:
            if var_dist[a][2] & var_dist[b][2]:
                raise ValueError(
                    "monte_carlo_variance requires pairwise-independent selectivities "
                    f"(variables {a} and {b} share leaf tables)"
                )
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x3C0]))
    xs = {
        v: rng.normal(var_dist[v][0], math.sqrt(var_dist[v][1]), size=draws) for v in ids
    }
    total = np.zeros(draws)
    ones = np.ones(draws)
    for unit, tag, b, resolved in per_term:
        coords = [ones if v is None else xs[v] for v in resolved]
        cs = rng.normal(units.mean(unit), math.sqrt(units.variance(unit)), size=draws)
        total += _eval_cf_array(tag, b, coords) * cs
    return float(total.mean()), float(total.var(ddof=1))


# ---------------------------------------------------------------------------
# Exact Var[rho_n] enumeration and pool resampling oracles.


def membership_tensor(plan: Plan, relations) -> tuple[np.ndarray, list]:
    """Boolean tensor over base tuple index combinations: True where the
    combination appears in the plan's root output. Axes follow the plan's
    leaf order. Computed by executing the plan with every base relation
    wrapped as an exhaustive sample table."""
    from .store import SampleTable

    appearances = planmod.leaf_appearance_map(plan)
    leaf_order = planmod.leaf_tables(plan, None)
    bindings = {}
    for app in appearances.values():
        rel = relations[app[0]]
        rows = tuple((i, r) for i, r in enumerate(rel.rows))
        bindings[app] = SampleTable(relation=rel.name, table_index=app[1], n=rel.row_count, rows=rows)
        bindings[("__schema__", rel.name)] = rel.column_names
    results = planmod.execute(plan, bindings, track_provenance=True)
    shape = tuple(relations[rel].row_count for rel, _ in leaf_order)
    z = np.zeros(shape, dtype=bool)
    root = results[plan.root]
    if root.provenance is None:
        raise ValueError("root operator does not carry provenance (aggregate above?)")
    for prov in root.provenance:
        z[prov] = True
    return z, leaf_order


def var_rho_enumeration(plan: Plan, relations, n: int) -> float:
    """Exact variance of rho_n by enumeration over all base-tuple
    combinations: sum over subset sizes r of (n-1)^(K-r)/n^K times the mean
    squared deviation of the fixed-coordinate selectivities."""
    z, leaf_order = membership_tensor(plan, relations)
    K = z.ndim
    if K > 3 or any(s > 8 for s in z.shape) or n > 12:
        raise ValueError("enumeration oracle is desk-scale only (K<=3, |R|<=8, n<=12)")
    zf = z.astype(float)
    rho = float(zf.mean())
    total = 0.0
    axes = list(range(K))
    for r in range(1, K + 1):
        coeff = (n - 1) ** (K - r) / float(n) ** K
        subset_sum = 0.0
        for S in itertools.combinations(axes, r):
            comp = tuple(a for a in axes if a not in S)
            rho_s = zf.mean(axis=comp) if comp else zf
            subset_sum += float(np.mean((rho_s - rho) ** 2))
        total += coeff * subset_sum
    return total


def resample_rho(plan: Plan, relations, n: int, pools: int, seed: int, chunk: int = 20000) -> np.ndarray:
    """rho_n over many independently drawn sample pools, vectorized.

    Follows the estimator's probability model: every sampling step picks a
    tuple uniformly and independently per leaf position (so n may exceed a
    relation's size, and repeated relations behave like distinct sample
    tables)."""
    z, leaf_order = membership_tensor(plan, relations)
    K = z.ndim
    sizes = z.shape
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBEEF]))
    out = np.empty(pools)
    done = 0
    while done < pools:
        p = min(chunk, pools - done)
        picks = [rng.integers(0, sizes[k], size=(p, n)) for k in range(K)]
        if K == 1:
            sub = z[picks[0]]
            out[done : done + p] = sub.mean(axis=1)
        elif K == 2:
            sub = z[picks[0][:, :, None], picks[1][:, None, :]]
            out[done : done + p] = sub.reshape(p, -1).mean(axis=1)
        else:
            sub = z[
                picks[0][:, :, None, None],
                picks[1][:, None, :, None],
                picks[2][:, None, None, :],
            ]
            out[done : done + p] = sub.reshape(p, -1).mean(axis=1)
        done += p
    return out


# ---------------------------------------------------------------------------
# Synthetic database and workload generation.


def generate_database(seed: int, sizes=(2000, 2000, 2000), key_domain: int = 200, val_domain: int = 10000):
    """Three-relation synthetic database with join keys and a selection
    column per relation."""
    from .store import Relation

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDB]))
    relations = {}
    for i, size in enumerate(sizes, start=1):
        name = f"r{i}"
        ids = rng.permutation(size)
        keys = rng.integers(0, key_domain, size=size)
        keys2 = rng.integers(0, key_domain, size=size)
        vals = rng.integers(0, val_domain, size=size)
        schema = (
            (f"{name}_id", "int64"),
            (f"{name}_key", "int64"),
            (f"{name}_key2", "int64"),
            (f"{name}_val", "int64"),
        )
        rows = tuple(
            (int(ids[j]), int(keys[j]), int(keys2[j]), int(vals[j])) for j in range(size)
        )
        relations[name] = Relation(name=name, schema=schema, rows=rows)
    return relations


def _threshold_for(relation, column: str, target: float):
    """Value v such that the fraction of rows with column < v is close to
    the target selectivity."""
    vals = sorted(relation.column(column))
    idx = int(round(target * len(vals)))
    idx = min(max(idx, 0), len(vals) - 1)
    return vals[idx]


@dataclass
class WorkloadSpec:
    scan_targets: list[float] = field(default_factory=list)
    join_targets: list[tuple[float, float]] = field(default_factory=list)
    three_way_targets: list[tuple[float, float, float]] = field(default_factory=list)
    seed: int = 0


def _scan_node(nid, rel, target, relations, kind="SeqScan"):
    thr = _threshold_for(relations[rel], f"{rel}_val", target)
    return {
        "id": nid,
        "kind": kind,
        "relation": rel,
        "children": [],
        "predicate": [{"col": f"{rel}_val", "op": "<", "value": int(thr)}],
    }


def generate_workload(spec: WorkloadSpec, relations, tolerance: float = 0.10):
    """Plans whose true selectivities land within the tolerance of their
    targets, verified against the ground-truth data; unrealizable targets
    are skipped with a warning string returned alongside."""
    import warnings

    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x3141]))
    rels = sorted(relations)
    plans = []
    skipped = []

    def verify(doc, checks, label):
        p = planmod.parse_plan(json.dumps(doc))
        truth = planmod.selectivity_truth(p, relations)
        for nid, target in checks:
            if target <= 0:
                return None
            if abs(truth[nid] - target) > tolerance * target:
                return None
        return p

    for i, s in enumerate(spec.scan_targets):
        rel = rels[int(rng.integers(0, len(rels)))]
        doc = {"nodes": [_scan_node(1, rel, s, relations)], "root": 1}
        p = verify(doc, [(1, s)], f"scan-{i}")
        if p is None:
            skipped.append(f"scan target {s} unrealizable")
            continue
        plans.append((f"scan-{i}", p))

    join_kinds = ["HashJoin", "NestLoopJoin", "MergeJoin"]
    for i, (s1, s2) in enumerate(spec.join_targets):
        r1, r2 = "r1", "r2"
        kind = join_kinds[i % len(join_kinds)]
        doc = {
            "nodes": [
                _scan_node(1, r1, s1, relations),
                _scan_node(2, r2, s2, relations),
                {
                    "id": 3,
                    "kind": kind,
                    "children": [1, 2],
                    "predicate": [{"left": f"{r1}_key", "right": f"{r2}_key"}],
                },
            ],
            "root": 3,
        }
        p = verify(doc, [(1, s1), (2, s2)], f"join-{i}")
        if p is None:
            skipped.append(f"join targets ({s1},{s2}) unrealizable")
            continue
        plans.append((f"join-{i}", p))

    for i, (s1, s2, s3) in enumerate(spec.three_way_targets):
        doc = {
            "nodes": [
                _scan_node(1, "r1", s1, relations),
                _scan_node(2, "r2", s2, relations),
                _scan_node(3, "r3", s3, relations),
                {
                    "id": 4,
                    "kind": "HashJoin",
                    "children": [1, 2],
                    "predicate": [{"left": "r1_key", "right": "r2_key"}],
                },
                {
                    "id": 5,
                    "kind": "HashJoin",
                    "children": [4, 3],
                    "predicate": [{"left": "r2_key2", "right": "r3_key2"}],
                },
            ],
            "root": 5,
        }
        p = verify(doc, [(1, s1), (2, s2), (3, s3)], f"join3-{i}")
        if p is None:
            skipped.append(f"3-way targets ({s1},{s2},{s3}) unrealizable")
            continue
        plans.append((f"join3-{i}", p))

    for msg in skipped:
        warnings.warn(msg)
    return plans, skipped


def evaluate_workload(plans, relations, pool, units, world: TrueCostWorld, policy: str = "all", W: int = 10, runs: int = 5):
    """Predict every plan, simulate its actual runtime, and compute the
    correlation and error-distribution metrics."""
    from .propagate import predict_distribution

    records = []
    for idx, (label, p) in enumerate(plans):
        oracle = world.cost_oracle(p, relations)
        dist, _, _, _ = predict_distribution(
            p, pool, relations, units, oracle=oracle, W=W, policy=policy
        )
        act = actual_runtime(p, relations, world, seed=idx, runs=runs)
        records.append(
            EvalRecord(
                plan_id=label,
                predicted_mean=dist.mean,
                predicted_stddev=dist.stddev,
                actual=act,
            )
        )
    usable = [r for r in records if r.predicted_stddev > 0.0]
    sigmas = [r.predicted_stddev for r in usable]
    errors = [r.error for r in usable]
    summary = {
        "count": len(records),
        "excluded_zero_sigma": len(records) - len(usable),
        "r_p": pearson(sigmas, errors),
        "r_s": spearman(sigmas, errors),
    }
    _, dbar, _ = error_distribution_distance(usable)
    summary["d_bar"] = dbar
    return records, summary

"""Shared fixtures and independent oracles for the test suite.

The oracles here recompute estimator quantities by brute force, without
going through the package's executor or streaming accumulators, so the
package paths can be checked against genuinely independent arithmetic.
"""

from __future__ import annotations

import itertools
import json
import math
import operator

import numpy as np
import pytest

from runtimedist import plan as planmod, selest, simeval, store

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


_OPS = {
    "=": operator.eq,
    "!=": operator.ne,
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
}


# ---------------------------------------------------------------------------
# Tiny random instances: database + plan + an executor-independent
# description of the predicates for brute-force evaluation.


def make_tiny_relations(rng, count=3, size_range=(3, 8), domain=3):
    """Small relations t1..tN with a filter column x and join columns y, z."""
    relations = {}
    for i in range(1, count + 1):
        name = f"t{i}"
        size = int(rng.integers(size_range[0], size_range[1] + 1))
        schema = ((f"{name}_x", "int64"), (f"{name}_y", "int64"), (f"{name}_z", "int64"))
        rows = tuple(
            tuple(int(v) for v in rng.integers(0, domain, size=3)) for _ in range(size)
        )
        relations[name] = store.Relation(name=name, schema=schema, rows=rows)
    return relations


def tiny_instance(seed, shape=None):
    """(relations, plan, desc) where desc lists scan and join predicates in
    leaf order for brute-force membership evaluation.

    Shapes: 1 = single scan, 2 = two-way join, 3 = three-way join.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7E57]))
    relations = make_tiny_relations(rng)
    if shape is None:
        shape = int(rng.integers(1, 4))

    def scan_doc(nid, name):
        op = ["<", "<=", "=", ">", ">=", "!="][int(rng.integers(0, 6))]
        thr = int(rng.integers(0, 3))
        doc = {
            "id": nid,
            "kind": "SeqScan",
            "relation": name,
            "children": [],
            "predicate": [{"col": f"{name}_x", "op": op, "value": thr}],
        }
        return doc, (name, 0, op, thr)

    leaves = []
    docs = []
    for pos in range(shape):
        doc, pred = scan_doc(pos + 1, f"t{pos + 1}")
        docs.append(doc)
        leaves.append(pred)
    joins = []
    if shape >= 2:
        docs.append(
            {
                "id": 10,
                "kind": "HashJoin",
                "children": [1, 2],
                "predicate": [{"left": "t1_y", "right": "t2_y"}],
            }
        )
        joins.append((0, 1, 1, 1))  # positions 0 and 1 join on column index 1
        root = 10
    else:
        root = 1
    if shape == 3:
        docs.append(
            {
                "id": 11,
                "kind": "HashJoin",
                "children": [10, 3],
                "predicate": [{"left": "t2_z", "right": "t3_z"}],
            }
        )
        joins.append((1, 2, 2, 2))  # positions 1 and 2 join on column index 2
        root = 11
    plan = planmod.parse_plan(json.dumps({"nodes": docs, "root": root}))
    desc = {"leaves": leaves, "joins": joins}
    return relations, plan, desc


def brute_membership(desc, tables) -> np.ndarray:
    """Boolean tensor over the rows of `tables` (one table per leaf
    position, plain row tuples): True where the combination satisfies every
    scan predicate and every join atom. Pure nested-loop evaluation."""
    shape = tuple(len(t) for t in tables)
    z = np.zeros(shape, dtype=bool)
    preds = []
    for pos, (_, col, op, thr) in enumerate(desc["leaves"]):
        preds.append((pos, col, _OPS[op], thr))
    for idx in itertools.product(*(range(s) for s in shape)):
        rows = [tables[pos][i] for pos, i in enumerate(idx)]
        ok = all(op(rows[pos][col], thr) for pos, col, op, thr in preds)
        if ok:
            for pl, cl, pr, cr in desc["joins"]:
                if rows[pl][cl] != rows[pr][cr]:
                    ok = False
                    break
        z[idx] = ok
    return z


def sample_rows_in_index_order(table: store.SampleTable):
    """Sample tuples ordered by sample index, so tensor axis j == index j."""
    return [row for _, row in sorted(table.rows)]


# ---------------------------------------------------------------------------
# Independent evaluation of the variance formulas from a membership tensor.


def s2_position_terms(z: np.ndarray, n: int):
    """(rho, per-position terms) of the sample variance formula: for each
    position k, (1/(n-1)) * sum_j (Q_kj / n^(K-1) - rho)^2 with Q_kj the
    match count of sample index j at position k."""
    K = z.ndim
    rho = float(z.mean())
    if n <= 1:
        return rho, [0.0] * K
    terms = []
    for k in range(K):
        axes = tuple(a for a in range(K) if a != k)
        counts = z.sum(axis=axes) if axes else z.astype(np.int64)
        dev = counts / float(n) ** (K - 1) - rho
        terms.append(float(np.sum(dev * dev)) / (n - 1))
    return rho, terms


def s2_enumeration(z: np.ndarray, n: int) -> float:
    rho, terms = s2_position_terms(z, n)
    return sum(terms)


def snm_enumeration(z: np.ndarray, n: int, positions) -> float:
    """Shared-position variance restricted to the given leaf positions."""
    rho, terms = s2_position_terms(z, n)
    return sum(terms[p] for p in positions)


# ---------------------------------------------------------------------------
# The end-to-end synthetic study shared by the workload-level criteria.


@pytest.fixture(scope="session")
def study():
    """Seeded 200-query synthetic study: heterogeneous database, hidden
    cost world, calibrated units, sample pool, and the verified workload."""
    import warnings

    from runtimedist import calib

    sizes = (500, 2000, 8000)
    relations = simeval.generate_database(42, sizes=sizes)
    world = simeval.TrueCostWorld.generate(42)
    units = calib.fit_cost_units(world.calibration_records(50, seed=42))
    pool = store.build_pool(relations, n=25, pool_size=2, seed=42)

    scan_targets = list(np.linspace(0.05, 0.95, 80))
    side = int(round(math.sqrt(80)))
    grid = np.linspace(0.1, 0.9, side)
    join_targets = [(float(a), float(b)) for a in grid for b in grid][:80]
    side3 = round(40 ** (1.0 / 3.0))
    grid3 = np.linspace(0.2, 0.8, side3 + 1)
    three = [(float(a), float(b), float(c)) for a in grid3 for b in grid3 for c in grid3][:40]
    spec = simeval.WorkloadSpec(
        scan_targets=scan_targets, join_targets=join_targets,
        three_way_targets=three, seed=42,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        plans, skipped = simeval.generate_workload(spec, relations)
    return {
        "relations": relations,
        "world": world,
        "units": units,
        "pool": pool,
        "plans": plans,
        "skipped": skipped,
        "sizes": sizes,
    }

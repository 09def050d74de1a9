"""Moment propagation, covariance computation, and the output normal."""

import json
import math

import numpy as np
import pytest

from runtimedist import calib, plan as planmod, propagate, selest, store
from runtimedist.costfit import CostFunction
from runtimedist.selest import SelEstimate


def _units(means, variances):
    return calib.CostUnitModel(
        units={
            u: calib.UnitModel(mean=means.get(u, 0.0), variance=variances.get(u, 0.0),
                               observations=2)
            for u in planmod.COST_UNITS
        }
    )


def _scan_estimate(nid, rho, n=100, rel="R", app=0):
    s2 = rho * (1.0 - rho)
    return SelEstimate(op_id=nid, rho_n=rho, s2_n=s2, n=n, K=1,
                       leaf_set=((rel, app),), snm={1: s2})


def _single_scan_plan(profile=None):
    doc = {"nodes": [{"id": 1, "kind": "SeqScan", "relation": "R", "children": []}],
           "root": 1}
    if profile is not None:
        doc["nodes"][0]["cost_profile"] = profile
    return planmod.parse_plan(json.dumps(doc))


# ---------------------------------------------------------------------------
# Moment formulas


def test_moments_c1():
    assert propagate.cost_function_moments(CostFunction("C1", (4.0,)), []) == (4.0, 0.0)


def test_moments_c2_linear():
    e, v = propagate.cost_function_moments(CostFunction("C2", (10.0, 0.0)), [(0.5, 0.01)])
    assert (e, v) == pytest.approx((5.0, 1.0))


def test_moments_c4_pinned():
    e, v = propagate.cost_function_moments(CostFunction("C4", (2.0, 1.0, 0.0)), [(0.5, 0.01)])
    assert v == pytest.approx(0.0908)
    assert e == pytest.approx(2.0 * (0.25 + 0.01) + 0.5)


def test_moments_c6_degenerate():
    cf = CostFunction("C6", (2.0, 3.0, 4.0, 5.0))
    e, v = propagate.cost_function_moments(cf, [(0.3, 0.0), (0.7, 0.0)])
    assert v == 0.0
    assert e == pytest.approx(cf.evaluate(0.3, 0.7))


def test_moments_missing_distribution():
    with pytest.raises(Exception):
        propagate.cost_function_moments(CostFunction("C5", (1.0, 1.0, 1.0)), [(0.5, 0.01)])


def test_term_variance_pinned():
    assert propagate.term_variance(5.0, 1.0, 2.0, 0.04) == pytest.approx(5.04)
    assert propagate.term_variance(5.0, 0.0, 2.0, 0.0) == 0.0
    assert propagate.term_variance(5.0, 0.0, 2.0, 0.04) == pytest.approx(25 * 0.04)


# ---------------------------------------------------------------------------
# Covariances


def _ctx_single(mu, s2):
    plan = _single_scan_plan()
    est = {1: _scan_estimate(1, 0.5)}
    return propagate.CovContext(plan, est, {1: (mu, s2)})


def test_cov_square_linear_pinned():
    ctx = _ctx_single(1.0, 0.25)
    value = propagate.cov_direct(ctx, ((1, 2),), ((1, 1),))
    assert value == pytest.approx(0.5)


def test_cov_basic_identities():
    mu, s2 = 0.7, 0.09
    ctx = _ctx_single(mu, s2)
    assert propagate.cov_direct(ctx, ((1, 1),), ((1, 1),)) == pytest.approx(s2)
    assert propagate.cov_direct(ctx, ((1, 2),), ((1, 2),)) == pytest.approx(
        2 * s2 * (2 * mu * mu + s2)
    )


def test_cov_product_decomposition():
    # Cov(Xl*Xr, Xl) = mu_r * sigma_l^2 for independent Xl, Xr.
    doc = {
        "nodes": [
            {"id": 1, "kind": "SeqScan", "relation": "A", "children": []},
            {"id": 2, "kind": "SeqScan", "relation": "B", "children": []},
            {"id": 3, "kind": "NestLoopJoin", "children": [1, 2],
             "predicate": [{"left": "a", "right": "b"}]},
        ],
        "root": 3,
    }
    plan = planmod.parse_plan(json.dumps(doc))
    est = {1: _scan_estimate(1, 0.5, rel="A"), 2: _scan_estimate(2, 0.5, rel="B")}
    dists = {1: (0.4, 0.02), 2: (0.6, 0.03)}
    ctx = propagate.CovContext(plan, est, dists)
    value = propagate.cov_direct(ctx, ((1, 1), (2, 1)), ((1, 1),))
    assert value == pytest.approx(0.6 * 0.02)
    # mu_l = 0 zeroes the symmetric case
    ctx0 = propagate.CovContext(plan, est, {1: (0.0, 0.02), 2: (0.6, 0.03)})
    assert propagate.cov_direct(ctx0, ((1, 1), (2, 1)), ((2, 1),)) == pytest.approx(0.0)


def test_cov_independent_is_zero():
    doc = {
        "nodes": [
            {"id": 1, "kind": "SeqScan", "relation": "A", "children": []},
            {"id": 2, "kind": "SeqScan", "relation": "B", "children": []},
            {"id": 3, "kind": "HashJoin", "children": [1, 2],
             "predicate": [{"left": "a", "right": "b"}]},
        ],
        "root": 3,
    }
    plan = planmod.parse_plan(json.dumps(doc))
    est = {1: _scan_estimate(1, 0.5, rel="A"), 2: _scan_estimate(2, 0.5, rel="B")}
    ctx = propagate.CovContext(plan, est, {1: (0.5, 0.01), 2: (0.5, 0.01)})
    value, kind = ctx.cov_monomials(((1, 1),), ((2, 1),))
    assert (value, kind) == (0.0, "zero")


def _nested_pair(s2_desc, anc_count=5000):
    """Manual ancestor/descendant estimates: join over (A,B) below a
    three-way join over (A,B,C), n=100."""
    desc = SelEstimate(op_id=10, rho_n=0.5, s2_n=s2_desc, n=100, K=2,
                       leaf_set=(("A", 0), ("B", 0)),
                       snm={1: s2_desc, 2: s2_desc},
                       q=[{0: anc_count}, {0: anc_count}])
    anc = SelEstimate(op_id=11, rho_n=0.5, s2_n=1.0, n=100, K=3,
                      leaf_set=(("A", 0), ("B", 0), ("C", 0)),
                      snm={1: 0.5, 2: 0.5, 3: 1.0},
                      q=[{0: anc_count}, {0: anc_count}, {0: anc_count}])
    doc = {
        "nodes": [
            {"id": 1, "kind": "SeqScan", "relation": "A", "children": []},
            {"id": 2, "kind": "SeqScan", "relation": "B", "children": []},
            {"id": 3, "kind": "SeqScan", "relation": "C", "children": []},
            {"id": 10, "kind": "HashJoin", "children": [1, 2],
             "predicate": [{"left": "a", "right": "b"}]},
            {"id": 11, "kind": "HashJoin", "children": [10, 3],
             "predicate": [{"left": "b", "right": "c"}]},
        ],
        "root": 11,
    }
    plan = planmod.parse_plan(json.dumps(doc))
    est = {10: desc, 11: anc,
           1: _scan_estimate(1, 0.5, rel="A"),
           2: _scan_estimate(2, 0.5, rel="B"),
           3: _scan_estimate(3, 0.5, rel="C")}
    dists = {k: (e.rho_n, e.sigma2) for k, e in est.items()}
    return propagate.CovContext(plan, est, dists)


def test_bound_b3_pinned_value():
    # With a large descendant variance, B1 exceeds the closed-form bound
    # (1 - (1-1/n)^m) g(rho) g(rho'); n=100, m=2, rho=rho'=0.5.
    ctx = _nested_pair(s2_desc=50.0)
    value, kind = propagate.cov_bound(ctx, 10, 1, 11, 1)
    assert kind == "bound-B3"
    assert value == pytest.approx(0.0049750, abs=1e-7)


def test_bound_b1_when_smaller():
    ctx = _nested_pair(s2_desc=1e-4)
    value, kind = propagate.cov_bound(ctx, 10, 1, 11, 1)
    assert kind == "bound-B1"
    # B1 = sqrt(S2_desc/n * S2_anc_restricted/n); the crafted q gives the
    # ancestor restriction 2 * (99*0.25)/99 = 0.5.
    assert value == pytest.approx(math.sqrt((1e-4 / 100) * (0.5 / 100)))


def test_bound_degenerate_rho_vanishes():
    for rho in (0.0, 1.0):
        ctx = _nested_pair(s2_desc=50.0)
        for est in ctx.estimates.values():
            est.rho_n = rho
        for pa, pb in [(1, 1), (2, 2), (2, 1), (1, 2)]:
            value, _ = ctx.bound_pair(10, pa, 11, pb)
            assert value == pytest.approx(0.0, abs=1e-12)


def test_bound_square_forms_nonnegative_and_symmetric():
    ctx = _nested_pair(s2_desc=0.3)
    v22, _ = ctx.bound_pair(10, 2, 11, 2)
    v21, _ = ctx.bound_pair(10, 2, 11, 1)
    v12r, _ = ctx.bound_pair(11, 1, 10, 2)
    assert v22 >= 0.0 and v21 >= 0.0
    assert v21 == pytest.approx(v12r)


def test_cov_bound_rejects_non_nested():
    ctx = _nested_pair(s2_desc=0.3)
    with pytest.raises(propagate.PropagationError):
        propagate.cov_bound(ctx, 1, 1, 2, 1)


def test_cov_direct_refuses_nested():
    ctx = _nested_pair(s2_desc=0.3)
    with pytest.raises(propagate.PropagationError, match="cov_bound"):
        propagate.cov_direct(ctx, ((10, 1),), ((11, 1),))


# ---------------------------------------------------------------------------
# Whole-plan variance


def _world_fixture(seed=5, sizes=(300, 300, 300)):
    from runtimedist import simeval

    relations = simeval.generate_database(seed, sizes=sizes, key_domain=30)
    world = simeval.TrueCostWorld.generate(seed)
    units = calib.fit_cost_units(world.calibration_records(100, seed=seed))
    pool = store.build_pool(relations, n=50, pool_size=2, seed=seed)
    return relations, world, units, pool


def _scan_only_costfuncs():
    return {1: {
        "c_s": CostFunction("C1", (0.0,)),
        "c_r": CostFunction("C1", (0.0,)),
        "c_t": CostFunction("C3", (0.0, 5.0)),
        "c_o": CostFunction("C2", (0.0, 0.0)),
    }}


def test_single_scan_matches_term_variance():
    plan = _single_scan_plan()
    est = {1: _scan_estimate(1, 0.5)}
    units = _units({"c_t": 2.0}, {"c_t": 0.04})
    cfs = _scan_only_costfuncs()
    # E[f]=5, Var[f]=0 for the C3 term (leaf input is the constant 1).
    total, breakdown, entries, flags = propagate.variance_time(plan, cfs, est, units)
    assert total == pytest.approx(25 * 0.04)
    assert entries == []
    # give the term selectivity variance through the c_o term instead
    cfs[1]["c_o"] = CostFunction("C2", (2.0, 0.0))
    units2 = _units({"c_t": 2.0, "c_o": 1.0}, {"c_t": 0.04, "c_o": 0.0})
    total2, *_ = propagate.variance_time(plan, cfs, est, units2)
    sigma2 = est[1].sigma2
    assert total2 == pytest.approx(25 * 0.04 + 4.0 * sigma2)


def test_disjoint_scans_sum_exactly():
    doc = {
        "nodes": [
            {"id": 1, "kind": "SeqScan", "relation": "A", "children": []},
            {"id": 2, "kind": "SeqScan", "relation": "B", "children": []},
            {"id": 3, "kind": "HashJoin", "children": [1, 2],
             "predicate": [{"left": "a", "right": "b"}]},
        ],
        "root": 3,
    }
    plan = planmod.parse_plan(json.dumps(doc))
    est = {
        1: _scan_estimate(1, 0.3, rel="A"),
        2: _scan_estimate(2, 0.6, rel="B"),
        3: SelEstimate(op_id=3, rho_n=0.1, s2_n=0.2, n=100, K=2,
                       leaf_set=(("A", 0), ("B", 0)), snm={1: 0.1, 2: 0.2},
                       q=[{0: 10}, {0: 10}]),
    }
    units = _units({u: 1.0 for u in planmod.COST_UNITS},
                   {u: 0.01 for u in planmod.COST_UNITS})
    cfs = {
        1: {u: CostFunction("C2", (1.0, 0.5)) for u in ("c_o",)},
        2: {u: CostFunction("C2", (2.0, 0.5)) for u in ("c_o",)},
        3: {u: CostFunction("C5", (1.0, 1.0, 0.0)) for u in ("c_t", "c_o")},
    }
    # restrict profiles to the provided terms
    for nid in (1, 2):
        plan.node(nid).cost_profile = {"c_o": "C2"}
    plan.node(3).cost_profile = {"c_t": "C5", "c_o": "C5"}
    total, breakdown, entries, flags = propagate.variance_time(plan, cfs, est, units)
    # scans are independent of each other: no (1,2) entry
    assert not any(e.pair == (1, 2) for e in entries)
    # the join terms share the scans' variables: direct entries appear
    assert any(e.pair == (1, 3) and e.kind == "direct" for e in entries)
    op_var = sum(v for name, v, kind in breakdown if name.startswith("op:"))
    cov = sum(v for name, v, kind in breakdown if name.startswith("cov:"))
    assert total == pytest.approx(op_var + cov)


def test_zero_uncertainty_collapse():
    relations, world, _, pool = _world_fixture()
    units = _units({u: world.unit_means[u] for u in planmod.COST_UNITS}, {})
    doc = {
        "nodes": [
            {"id": 1, "kind": "SeqScan", "relation": "r1", "children": [],
             "predicate": [{"col": "r1_val", "op": ">=", "value": 0}]},
        ],
        "root": 1,
    }
    plan = planmod.parse_plan(json.dumps(doc))
    # every sampled row passes: rho_n = 1, S2 = 0
    dist, est, _, entries = propagate.predict_distribution(
        plan, pool, relations, units, oracle=world.cost_oracle(plan, relations)
    )
    assert est[1].rho_n == 1.0 and est[1].s2_n == 0.0
    assert dist.variance == 0.0
    assert entries == []


def test_mean_consistency():
    relations, world, units, pool = _world_fixture()
    doc = {
        "nodes": [
            {"id": 1, "kind": "SeqScan", "relation": "r1", "children": [],
             "predicate": [{"col": "r1_val", "op": "<", "value": 5000}]},
            {"id": 2, "kind": "SeqScan", "relation": "r2", "children": [],
             "predicate": [{"col": "r2_val", "op": "<", "value": 7000}]},
            {"id": 3, "kind": "MergeJoin", "children": [1, 2],
             "predicate": [{"left": "r1_key", "right": "r2_key"}]},
        ],
        "root": 3,
    }
    plan = planmod.parse_plan(json.dumps(doc))
    dist, est, cfs, _ = propagate.predict_distribution(
        plan, pool, relations, units, oracle=world.cost_oracle(plan, relations)
    )
    direct = propagate.expected_time(plan, cfs, est, units)
    assert dist.mean == pytest.approx(direct, rel=1e-12)


def test_scale_equivariance():
    relations, world, units, pool = _world_fixture()
    doc = {
        "nodes": [
            {"id": 1, "kind": "SeqScan", "relation": "r3", "children": [],
             "predicate": [{"col": "r3_val", "op": "<", "value": 6000}]},
        ],
        "root": 1,
    }
    plan = planmod.parse_plan(json.dumps(doc))
    oracle = world.cost_oracle(plan, relations)
    dist, est, cfs, _ = propagate.predict_distribution(plan, pool, relations, units, oracle=oracle)
    s = 3.0
    scaled = calib.CostUnitModel(units={
        u: calib.UnitModel(mean=s * m.mean, variance=s * s * m.variance,
                           observations=m.observations)
        for u, m in units.units.items()
    })
    dist2, *_ = propagate.predict_distribution(
        plan, pool, relations, scaled, costfuncs=cfs, estimates=est
    )
    assert dist2.mean == pytest.approx(s * dist.mean, rel=1e-12)
    assert dist2.variance == pytest.approx(s * s * dist.variance, rel=1e-12)


def test_policies():
    relations, world, units, pool = _world_fixture()
    doc = {
        "nodes": [
            {"id": 1, "kind": "SeqScan", "relation": "r1", "children": [],
             "predicate": [{"col": "r1_val", "op": "<", "value": 5000}]},
            {"id": 2, "kind": "SeqScan", "relation": "r2", "children": [],
             "predicate": [{"col": "r2_val", "op": "<", "value": 7000}]},
            {"id": 3, "kind": "HashJoin", "children": [1, 2],
             "predicate": [{"left": "r1_key", "right": "r2_key"}],
             "cost_profile": {"c_t": "C2", "c_o": "C5"}},
        ],
        "root": 3,
    }
    plan = planmod.parse_plan(json.dumps(doc))
    oracle = world.cost_oracle(plan, relations)
    results = {}
    for policy in propagate.POLICIES:
        dist, *_ = propagate.predict_distribution(
            plan, pool, relations, units, oracle=oracle, policy=policy
        )
        results[policy] = dist
    assert results["no-cov"].variance <= results["all"].variance
    assert results["no-var-x"].variance < results["all"].variance
    assert results["no-var-c"].variance < results["all"].variance
    means = {p: d.mean for p, d in results.items()}
    assert len({round(m, 15) for m in means.values()}) == 1
    with pytest.raises(propagate.PropagationError):
        propagate.predict_distribution(plan, pool, relations, units, oracle=oracle,
                                       policy="bogus")


def test_three_level_breakdown_pattern():
    # Scans under a join under a join, every operator costed on its own
    # output selectivity: nested pairs get bounds, disjoint pairs vanish.
    relations, world, units, pool = _world_fixture()
    join_profile = {"c_t": "C2", "c_o": "C2"}
    doc = {
        "nodes": [
            {"id": 1, "kind": "SeqScan", "relation": "r1", "children": [],
             "predicate": [{"col": "r1_val", "op": "<", "value": 5000}]},
            {"id": 2, "kind": "SeqScan", "relation": "r2", "children": [],
             "predicate": [{"col": "r2_val", "op": "<", "value": 7000}]},
            {"id": 3, "kind": "SeqScan", "relation": "r3", "children": [],
             "predicate": [{"col": "r3_val", "op": "<", "value": 6000}]},
            {"id": 4, "kind": "HashJoin", "children": [1, 2],
             "predicate": [{"left": "r1_key", "right": "r2_key"}],
             "cost_profile": join_profile},
            {"id": 5, "kind": "HashJoin", "children": [4, 3],
             "predicate": [{"left": "r2_key2", "right": "r3_key2"}],
             "cost_profile": join_profile},
        ],
        "root": 5,
    }
    plan = planmod.parse_plan(json.dumps(doc))
    plan.node(4).cost_profile = dict(join_profile)
    plan.node(5).cost_profile = dict(join_profile)
    dist, est, cfs, entries = propagate.predict_distribution(
        plan, pool, relations, units, oracle=world.cost_oracle(plan, relations)
    )
    bounded = {e.pair for e in entries if e.kind.startswith("bound")}
    assert bounded == {(1, 4), (2, 4), (1, 5), (2, 5), (3, 5), (4, 5)}
    for pair in [(1, 2), (1, 3), (2, 3), (3, 4)]:
        assert not any(e.pair == pair for e in entries)
    assert dist.variance >= 0.0

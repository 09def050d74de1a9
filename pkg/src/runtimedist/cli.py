"""Command-line pipeline wiring.

Subcommands: ingest, sample, calibrate, fitcost, predict, evaluate, oracle,
gen-workload, gen-world. All take a flat key-value configuration file
(`key = value` per line); command-line flags override config values. Runs
are deterministic for a fixed config and seed; reports differ only in
their timestamp field.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time

from . import calib, costfit, plan as planmod, propagate, selest, simeval, store

DEFAULTS = {
    "data_dir": "data",
    "out_dir": "out",
    "seed": 42,
    "sample_n": 0,          # 0: derive from sample_ratio
    "sample_ratio": 0.05,
    "pool_size": 2,
    "grid_w": 10,
    "policy": "all",
    "alpha_step": 0.01,
    "alpha_max": 6.0,
    "calib_reps": 50,
    "runs": 5,
    "world": "",            # path to world.json; default <out_dir>/world.json
    "scan_count": 80,
    "join_count": 80,
    "join3_count": 40,
    "relation_size": 2000,
    "key_domain": 200,
}

ABLATIONS = {"all": "all", "no-var-c": "no-var-c", "no-var-x": "no-var-x", "no-cov": "no-cov"}


class ConfigError(ValueError):
    pass


def parse_config_file(path) -> dict:
    """Flat `key = value` pairs; quotes optional, ints/floats detected."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, _, raw = line.partition("=")
            out[key.strip()] = _coerce(raw.strip().strip('"').strip("'"))
    return out


def _coerce(raw: str):
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw


def load_config(args) -> dict:
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        cfg.update(parse_config_file(args.config))
    for key in cfg:
        flag = key.replace("-", "_")
        if getattr(args, flag, None) not in (None, ""):
            cfg[key] = getattr(args, flag)
    if getattr(args, "ablation", None):
        if args.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {args.ablation!r}; one of {sorted(ABLATIONS)}")
        cfg["policy"] = ABLATIONS[args.ablation]
    if cfg["policy"] not in ABLATIONS:
        raise ConfigError(f"unknown policy {cfg['policy']!r}")
    return cfg


# ---------------------------------------------------------------------------
# Shared loading helpers.


def load_relations(cfg) -> dict:
    data_dir = cfg["data_dir"]
    if not os.path.isdir(data_dir):
        raise ConfigError(f"data directory {data_dir!r} does not exist")
    relations = {}
    for entry in sorted(os.listdir(data_dir)):
        if not entry.endswith(".schema"):
            continue
        name = entry[: -len(".schema")]
        csv_path = os.path.join(data_dir, name + ".csv")
        if not os.path.exists(csv_path):
            raise ConfigError(f"schema sidecar {entry} has no CSV {name}.csv")
        schema = store.read_schema_sidecar(os.path.join(data_dir, entry))
        relations[name] = store.ingest_csv(csv_path, schema)
    if not relations:
        raise ConfigError(f"no .schema sidecars found in {data_dir!r}")
    return relations


def sample_n_for(cfg, relations) -> int:
    n = int(cfg["sample_n"])
    if n <= 0:
        n = math.ceil(float(cfg["sample_ratio"]) * min(r.row_count for r in relations.values()))
    return max(n, 2)


def build_pool(cfg, relations) -> store.SamplePool:
    return store.build_pool(
        relations, sample_n_for(cfg, relations), int(cfg["pool_size"]), int(cfg["seed"])
    )


def world_path(cfg) -> str:
    return cfg["world"] or os.path.join(cfg["out_dir"], "world.json")


def load_world(cfg) -> simeval.TrueCostWorld:
    path = world_path(cfg)
    if not os.path.exists(path):
        raise ConfigError(f"world file {path!r} not found; run gen-world first")
    with open(path, encoding="utf-8") as fh:
        return simeval.TrueCostWorld.from_json(fh.read())


def load_units(cfg) -> calib.CostUnitModel:
    path = os.path.join(cfg["out_dir"], "units.json")
    if not os.path.exists(path):
        raise ConfigError(f"unit model {path!r} not found; run calibrate first")
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    units = {
        u: calib.UnitModel(mean=v["mean"], variance=v["variance"], observations=v["observations"])
        for u, v in doc["units"].items()
    }
    return calib.CostUnitModel(units=units, metadata=doc.get("metadata", {}))


def load_plan(path) -> planmod.Plan:
    with open(path, encoding="utf-8") as fh:
        return planmod.parse_plan(fh.read())


def _write_json(path, doc):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _stamp(doc: dict) -> dict:
    doc["generated_at"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    return doc


# ---------------------------------------------------------------------------
# Subcommands.


def cmd_gen_world(args):
    cfg = load_config(args)
    world = simeval.TrueCostWorld.generate(int(cfg["seed"]))
    path = world_path(cfg)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(world.to_json())
        fh.write("\n")
    print(f"wrote {path}")
    return 0


def cmd_gen_workload(args):
    cfg = load_config(args)
    size = int(cfg["relation_size"])
    relations = simeval.generate_database(
        int(cfg["seed"]), sizes=(size, size, size), key_domain=int(cfg["key_domain"])
    )
    os.makedirs(cfg["data_dir"], exist_ok=True)
    for name, rel in relations.items():
        with open(os.path.join(cfg["data_dir"], f"{name}.csv"), "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(rel.column_names)
            writer.writerows(rel.rows)
        with open(os.path.join(cfg["data_dir"], f"{name}.schema"), "w", encoding="utf-8") as fh:
            for col, typ in rel.schema:
                fh.write(f"{col},{typ}\n")
    spec = default_workload_spec(cfg)
    plans, skipped = simeval.generate_workload(spec, relations)
    wl_dir = os.path.join(cfg["out_dir"], "workload")
    os.makedirs(wl_dir, exist_ok=True)
    manifest = []
    for label, p in plans:
        path = os.path.join(wl_dir, f"{label}.plan")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(planmod.serialize_plan(p))
            fh.write("\n")
        manifest.append({"label": label, "path": path})
    _write_json(os.path.join(wl_dir, "manifest.json"), {"plans": manifest, "skipped": skipped})
    print(f"wrote {len(manifest)} plans to {wl_dir} ({len(skipped)} targets skipped)")
    return 0


def default_workload_spec(cfg) -> simeval.WorkloadSpec:
    import numpy as np

    scan_count = int(cfg["scan_count"])
    join_count = int(cfg["join_count"])
    join3_count = int(cfg["join3_count"])
    scan_targets = list(np.linspace(0.05, 0.95, scan_count)) if scan_count else []
    join_targets = []
    if join_count:
        side = max(int(round(math.sqrt(join_count))), 1)
        grid = np.linspace(0.1, 0.9, side)
        join_targets = [(float(a), float(b)) for a in grid for b in grid][:join_count]
    three = []
    if join3_count:
        side = max(int(round(join3_count ** (1.0 / 3.0))), 1)
        grid = np.linspace(0.2, 0.8, side + 1)
        three = [
            (float(a), float(b), float(c)) for a in grid for b in grid for c in grid
        ][:join3_count]
    return simeval.WorkloadSpec(
        scan_targets=scan_targets,
        join_targets=join_targets,
        three_way_targets=three,
        seed=int(cfg["seed"]),
    )


def cmd_ingest(args):
    cfg = load_config(args)
    relations = load_relations(cfg)
    doc = {
        name: {"rows": rel.row_count, "columns": list(rel.column_names)}
        for name, rel in relations.items()
    }
    _write_json(os.path.join(cfg["out_dir"], "ingest.json"), _stamp({"relations": doc}))
    for name, rel in sorted(relations.items()):
        print(f"{name}: {rel.row_count} rows, {len(rel.schema)} columns")
    return 0


def cmd_sample(args):
    cfg = load_config(args)
    relations = load_relations(cfg)
    pool = build_pool(cfg, relations)
    out = os.path.join(cfg["out_dir"], "samples")
    os.makedirs(out, exist_ok=True)
    for name, tables in sorted(pool.tables.items()):
        for table in tables:
            path = os.path.join(out, f"{name}.{table.table_index}.csv")
            with open(path, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(("sample_index",) + relations[name].column_names)
                for j, row in table.rows:
                    writer.writerow((j,) + row)
    print(f"pool: n={pool.n}, J={pool.pool_size}, {len(pool.tables)} relations -> {out}")
    return 0


def cmd_calibrate(args):
    cfg = load_config(args)
    if getattr(args, "records", None):
        records = calib.read_calibration_csv(args.records)
    else:
        world = load_world(cfg)
        records = world.calibration_records(int(cfg["calib_reps"]), int(cfg["seed"]))
        calib.write_calibration_csv(os.path.join(cfg["out_dir"], "calibration.csv"), records)
    model = calib.fit_cost_units(records)
    doc = {
        "units": {
            u: {"mean": m.mean, "variance": m.variance, "observations": m.observations}
            for u, m in model.units.items()
        },
        "metadata": model.metadata,
    }
    _write_json(os.path.join(cfg["out_dir"], "units.json"), doc)
    for u, m in sorted(model.units.items()):
        print(f"{u}: mean={m.mean:.3e} var={m.variance:.3e} ({m.observations} obs)")
    return 0


def _fit_for_plan(cfg, p, relations, pool, world):
    estimates = selest.estimate_all(p, pool, relations)
    oracle = world.cost_oracle(p, relations)
    fitted = propagate.fit_all_cost_functions(p, estimates, oracle, W=int(cfg["grid_w"]))
    return estimates, fitted


def cmd_fitcost(args):
    cfg = load_config(args)
    relations = load_relations(cfg)
    pool = build_pool(cfg, relations)
    world = load_world(cfg)
    p = load_plan(args.plan)
    _, fitted = _fit_for_plan(cfg, p, relations, pool, world)
    doc = {
        "oracle": "simulator-true-cost-model",
        "functions": {
            str(nid): {u: {"type": cf.tag, "b": list(cf.b), "degenerate": cf.degenerate}
                       for u, cf in per.items()}
            for nid, per in fitted.items()
        },
    }
    path = os.path.join(cfg["out_dir"], "costfit.json")
    _write_json(path, _stamp(doc))
    print(f"wrote {path}")
    return 0


def cmd_predict(args):
    cfg = load_config(args)
    relations = load_relations(cfg)
    pool = build_pool(cfg, relations)
    world = load_world(cfg)
    units = load_units(cfg)
    p = load_plan(args.plan)
    oracle = world.cost_oracle(p, relations)
    dist, estimates, fitted, entries = propagate.predict_distribution(
        p, pool, relations, units, oracle=oracle, W=int(cfg["grid_w"]), policy=cfg["policy"]
    )
    plan_id = os.path.splitext(os.path.basename(args.plan))[0]
    record = {
        "plan_id": plan_id,
        "mean_s": dist.mean,
        "var_s2": dist.variance,
        "stddev_s": dist.stddev,
        "breakdown": [
            {"component": comp, "value": val, "kind": kind} for comp, val, kind in dist.breakdown
        ],
        "flags": dist.flags,
        "policy": cfg["policy"],
        "oracle": "simulator-true-cost-model",
        "estimates": {
            str(e.op_id): {"rho_n": e.rho_n, "s2_n": e.s2_n, "n": e.n, "K": e.K}
            for e in estimates.values()
        },
    }
    os.makedirs(cfg["out_dir"], exist_ok=True)
    jsonl = os.path.join(cfg["out_dir"], "predictions.jsonl")
    with open(jsonl, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(_stamp(record), sort_keys=True) + "\n")
    csv_path = os.path.join(cfg["out_dir"], "predictions.csv")
    new = not os.path.exists(csv_path)
    with open(csv_path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(["plan_id", "mean_s", "var_s2", "stddev_s", "flags"])
        writer.writerow([plan_id, repr(dist.mean), repr(dist.variance), repr(dist.stddev), ";".join(dist.flags)])
    print(f"{plan_id}: mean={dist.mean:.6g}s stddev={dist.stddev:.6g}s flags={dist.flags}")
    return 0


def cmd_evaluate(args):
    cfg = load_config(args)
    relations = load_relations(cfg)
    pool = build_pool(cfg, relations)
    world = load_world(cfg)
    units = load_units(cfg)
    manifest_path = getattr(args, "workload", None) or os.path.join(
        cfg["out_dir"], "workload", "manifest.json"
    )
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    plans = [(rec["label"], load_plan(rec["path"])) for rec in manifest["plans"]]
    records, summary = simeval.evaluate_workload(
        plans, relations, pool, units, world,
        policy=cfg["policy"], W=int(cfg["grid_w"]), runs=int(cfg["runs"]),
    )
    os.makedirs(cfg["out_dir"], exist_ok=True)
    csv_path = os.path.join(cfg["out_dir"], "evaluation.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["plan_id", "mean", "stddev", "actual", "error", "norm_error"])
        for r in records:
            writer.writerow([
                r.plan_id, repr(r.predicted_mean), repr(r.predicted_stddev), repr(r.actual),
                repr(r.error), repr(r.norm_error) if r.predicted_stddev > 0 else "",
            ])
    summary["policy"] = cfg["policy"]
    _write_json(os.path.join(cfg["out_dir"], "summary.json"), _stamp(dict(summary)))
    print(
        f"{summary['count']} plans: r_p={summary['r_p']:.3f} r_s={summary['r_s']:.3f} "
        f"d_bar={summary['d_bar']:.3f} (excluded {summary['excluded_zero_sigma']})"
    )
    return 0


def cmd_oracle(args):
    cfg = load_config(args)
    relations = load_relations(cfg)
    p = load_plan(args.plan)
    n = int(args.n or sample_n_for(cfg, relations))
    exact = simeval.var_rho_enumeration(p, relations, n)
    doc = {"plan": args.plan, "n": n, "var_rho_exact": exact}
    pools = int(args.pools or 0)
    if pools:
        rho = simeval.resample_rho(p, relations, n, pools, int(cfg["seed"]))
        doc["var_rho_empirical"] = float(rho.var(ddof=1))
        doc["mean_rho_empirical"] = float(rho.mean())
        doc["pools"] = pools
    _write_json(os.path.join(cfg["out_dir"], "oracle.json"), _stamp(doc))
    print(json.dumps({k: v for k, v in doc.items() if k != "generated_at"}, indent=2))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="runtimedist",
        description="Predict running-time distributions of relational query plans.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key=value configuration file")
        sp.add_argument("--data-dir", dest="data_dir")
        sp.add_argument("--out-dir", dest="out_dir")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--sample-n", dest="sample_n", type=int)
        sp.add_argument("--sample-ratio", dest="sample_ratio", type=float)
        sp.add_argument("--pool-size", dest="pool_size", type=int)
        sp.add_argument("--grid-w", dest="grid_w", type=int)
        sp.add_argument("--world")
        sp.add_argument(
            "--ablation", choices=sorted(ABLATIONS),
            help="covariance policy: all (V1), no-var-c (V2), no-var-x (V3), no-cov (V4)",
        )

    for name, fn in [
        ("gen-world", cmd_gen_world),
        ("gen-workload", cmd_gen_workload),
        ("ingest", cmd_ingest),
        ("sample", cmd_sample),
        ("calibrate", cmd_calibrate),
        ("fitcost", cmd_fitcost),
        ("predict", cmd_predict),
        ("evaluate", cmd_evaluate),
        ("oracle", cmd_oracle),
    ]:
        sp = sub.add_parser(name)
        common(sp)
        if name in ("fitcost", "predict", "oracle"):
            sp.add_argument("--plan", required=True)
        if name == "oracle":
            sp.add_argument("--n", type=int)
            sp.add_argument("--pools", type=int)
        if name == "calibrate":
            sp.add_argument("--records")
        if name == "evaluate":
            sp.add_argument("--workload")
        sp.set_defaults(func=fn)
    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(json.dumps({"error": str(exc)}), file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()

"""Experiment harness: dataset generation, engine runs, and aggregation.

Subcommands:

* ``gen-data --model M --seed S --out DIR`` writes the model's dataset as CSV.
* ``run --model M --engine {dcc,is,rmh} --budget B [--seed S | --seeds N]``
  runs the engine per seed, writing a JSONL iteration log and a summary
  JSON per seed plus an aggregate over seeds.
* ``summarize --out DIR`` re-aggregates existing per-seed summaries.

Engine hyperparameters come from per-model defaults, overridable with a
flat key=value ``--config`` file (keys are DccConfig field names) and the
command line.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from pathlib import Path as FsPath

import numpy as np

from .baselines import run_is, run_rmh
from .dists import NEG_INF
from .engine import DccConfig, path_posterior, run_dcc
from .localinfer import KernelParams
from .models import (
    MODEL_NAMES,
    ModelSpec,
    build_model,
    eval_expr,
    expr_text,
    gen_data,
    two_branch_exact_log_z,
    write_dataset,
)
from .registry import registry_report

ENGINES = ("dcc", "is", "rmh")

# Per-model engine settings; budgets and seeds come from the command line.
MODEL_DEFAULTS = {
    "two-branch": dict(pi_mode="is", n_chains=10, m_per_chain=10, t0=100, t_init=20),
    "gmm-open": dict(pi_mode="mcmc", n_chains=5, m_per_chain=10, t0=200, t_init=150,
                     split_walk_scale=2.0, pimais_scale=2.0),
    "gmm-misspec": dict(pi_mode="mcmc", n_chains=2, m_per_chain=5, t0=300, t_init=250,
                        split_walk_scale=6.0, global_fan_out=2, pimais_scale=2.0),
    "pcfg-fn": dict(pi_mode="is", n_chains=10, m_per_chain=10, t0=400, t_init=60),
}


def load_config_file(path) -> dict:
    """Flat key=value file with DccConfig field names."""
    fields = {f.name: f for f in dataclasses.fields(DccConfig)}
    out = {}
    for lineno, raw in enumerate(FsPath(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in fields:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = _parse_value(fields[key].type, value)
    return out


def _parse_value(type_name: str, text: str):
    if type_name == "bool":
        return text.lower() in ("1", "true", "yes", "on")
    if type_name == "int":
        return int(text)
    if type_name == "float":
        return float(text)
    if type_name.startswith("Optional[int]"):
        return None if text.lower() in ("none", "") else int(text)
    return text


def make_config(model: str, budget: int, seed: int, overrides: dict) -> DccConfig:
    kwargs = dict(MODEL_DEFAULTS.get(model, {}))
    kwargs.update(overrides)
    kwargs["budget"] = budget
    kwargs["seed"] = seed
    return DccConfig(**kwargs)


# --------------------------------------------------------------------------
# metrics


def _tb_is_neg_branch_output(output) -> bool:
    return len(output) == 2


def metrics_two_branch(engine, result, dataset) -> dict:
    log_z1, log_z2 = two_branch_exact_log_z(dataset["y1"])
    log_z_true = float(np.logaddexp(log_z1, log_z2))
    p_neg_true = math.exp(log_z1 - log_z_true)
    out = {"log_z_true": log_z_true, "p_neg_true": p_neg_true}
    if engine == "dcc":
        out["log_z"] = result.log_z
        out["p_neg"] = path_posterior(
            result, lambda path, _o: path is not None and any(a.site == "x2neg" for a in path)
        )
    elif engine == "is":
        out["log_z"] = result.log_z
        out["p_neg"] = sum(
            p.weight for p in result.measure.particles if _tb_is_neg_branch_output(p.output)
        )
    else:
        out["log_z"] = result.log_z
        out["p_neg"] = sum(
            p.weight for p in result.measure.particles if _tb_is_neg_branch_output(p.output)
        )
    if out["log_z"] is not None:
        out["log_z_err"] = out["log_z"] - log_z_true
        out["log_z_sq_err"] = out["log_z_err"] ** 2
    out["p_neg_err"] = out["p_neg"] - p_neg_true
    return out


def metrics_gmm(engine, result, dataset) -> dict:
    k_true = dataset.get("k_true", 5)
    out = {"k_true": k_true}
    if engine == "dcc":
        out["log_z"] = result.log_z
        out["p_k_true"] = path_posterior(
            result,
            lambda path, _o: path is not None and len(path) > 0
            and path[0].split_value == k_true - 1,
        )
        ks = sorted(
            {s.path[0].split_value + 1 for s in result.slps if s.path}
        )
        out["n_slps"] = len(ks)
        out["k_discovered"] = ks
        out["k_map"] = max(
            (s for s in result.slps if s.path),
            key=lambda s: s.log_z,
        ).path[0].split_value + 1
    elif engine == "is":
        out["log_z"] = result.log_z
        out["p_k_true"] = sum(
            p.weight for p in result.measure.particles if p.output[0] == k_true
        )
    else:
        paths = result.diagnostics["paths"]
        ids = result.diagnostics["path_ids"]
        counts = {}
        for idx in ids:
            counts[idx] = counts.get(idx, 0) + 1
        k_of = {i: paths[i][0].split_value + 1 for i in counts}
        total = len(ids)
        out["p_k_true"] = sum(c for i, c in counts.items() if k_of[i] == k_true) / total
        out["distinct_k"] = len(set(k_of.values()))
        out["k_visited"] = sorted(set(k_of.values()))
        out["log_z"] = result.log_z
        out["acceptance_rate"] = result.diagnostics["acceptance_rate"]
    return out


def pcfg_lppd(measure, rows, obs_std: float = 0.5) -> float:
    """Vectorised LPPD over (x, y) rows: per particle, predict the whole test
    set at once from the returned expression."""
    xs = np.asarray([x for x, _ in rows])
    ys = np.asarray([y for _, y in rows])
    acc = np.full(len(rows), NEG_INF)
    const = -0.5 * math.log(2 * math.pi) - math.log(obs_std)
    for p in measure.particles:
        if p.weight <= 0.0:
            continue
        preds = np.asarray(eval_expr(p.output, xs), dtype=float)
        row = const - 0.5 * ((ys - preds) / obs_std) ** 2 + math.log(p.weight)
        acc = np.logaddexp(acc, row)
    return float(acc.sum())


def metrics_pcfg(engine, result, dataset) -> dict:
    measure = result.measure
    out = {"lppd": pcfg_lppd(measure, dataset["test"])}
    if engine == "dcc":
        out["log_z"] = result.log_z
        table = []
        for s in sorted(result.slps, key=lambda s: -s.log_z):
            if s.path is None or s.log_z == NEG_INF:
                continue
            table.append(
                {
                    "slp_id": s.id,
                    "structure": expr_text(s.example_output) if s.example_output else "?",
                    "log_zk": s.log_z,
                    "S": s.S,
                    "status": s.status,
                }
            )
        out["slp_table"] = table
        out["n_slps"] = len(table)
    elif engine == "is":
        out["log_z"] = result.log_z
    return out


def compute_metrics(model, engine, result, dataset) -> dict:
    if model == "two-branch":
        return metrics_two_branch(engine, result, dataset)
    if model in ("gmm-open", "gmm-misspec"):
        return metrics_gmm(engine, result, dataset)
    return metrics_pcfg(engine, result, dataset)


# --------------------------------------------------------------------------
# running


def run_one(model: str, engine: str, budget: int, seed: int, data_seed: int,
            overrides: dict, out_dir, log_utilities: bool = False,
            dump_registry: bool = False, data_dir=None) -> dict:
    spec = ModelSpec(model, data_seed=data_seed, data_dir=data_dir)
    dataset = gen_data(spec)
    program = build_model(spec, dataset)
    out_dir = FsPath(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{model}_{engine}_seed{seed}"

    if engine == "dcc":
        cfg = make_config(model, budget, seed, dict(overrides, log_utilities=log_utilities))
        result = run_dcc(program, cfg)
        with open(out_dir / f"{stem}.jsonl", "w") as fh:
            for entry in result.iterations:
                fh.write(json.dumps(_jsonable(entry)) + "\n")
        if dump_registry:
            (out_dir / f"{stem}_registry.txt").write_text(registry_report(result.slps) + "\n")
        n_exec = result.n_executions
    else:
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        cfg = make_config(model, budget, seed, overrides)
        if engine == "is":
            result = run_is(program, budget, rng)
        else:
            kernel = KernelParams(p_prior=cfg.p_prior, rw_scale=cfg.rw_scale)
            result = run_rmh(program, budget, rng, kernel=kernel)
        with open(out_dir / f"{stem}.jsonl", "w") as fh:
            fh.write(json.dumps({"engine": engine, "budget": budget, "seed": seed,
                                 "log_z": result.log_z}) + "\n")
        n_exec = result.n_executions

    summary = {
        "model": model,
        "engine": engine,
        "budget": budget,
        "seed": seed,
        "data_seed": data_seed,
        "n_executions": n_exec,
        "metrics": compute_metrics(model, engine, result, dataset),
    }
    with open(out_dir / f"{stem}_summary.json", "w") as fh:
        json.dump(_jsonable(summary), fh, indent=2)
    return summary


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float):
        return None if math.isnan(obj) else (obj if math.isfinite(obj) else repr(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return _jsonable(float(obj))
    return obj


def aggregate(summaries: list) -> dict:
    """Median and 25/75% quantiles of each numeric metric across seeds."""
    if not summaries:
        return {}
    keys = set()
    for s in summaries:
        keys |= {k for k, v in s["metrics"].items() if isinstance(v, (int, float)) and v is not None}
    agg = {
        "model": summaries[0]["model"],
        "engine": summaries[0]["engine"],
        "budget": summaries[0]["budget"],
        "n_seeds": len(summaries),
        "seeds": [s["seed"] for s in summaries],
        "metrics": {},
    }
    for key in sorted(keys):
        vals = [s["metrics"][key] for s in summaries
                if isinstance(s["metrics"].get(key), (int, float))]
        if not vals:
            continue
        q25, q50, q75 = np.percentile(vals, [25, 50, 75])
        agg["metrics"][key] = {
            "median": float(q50),
            "q25": float(q25),
            "q75": float(q75),
            "values": [float(v) for v in vals],
        }
    return agg


# --------------------------------------------------------------------------
# entry points


def cmd_gen_data(args) -> int:
    spec = ModelSpec(args.model, data_seed=args.seed)
    dataset = gen_data(spec)
    written = write_dataset(spec, dataset, args.out)
    for path in written:
        print(path)
    return 0


def cmd_run(args) -> int:
    overrides = load_config_file(args.config) if args.config else {}
    seeds = [args.seed + i for i in range(args.seeds)] if args.seeds else [args.seed]
    summaries = []
    for seed in seeds:
        summary = run_one(
            args.model, args.engine, args.budget, seed, args.data_seed,
            overrides, args.out, log_utilities=args.log_utilities,
            dump_registry=args.dump_registry, data_dir=args.data_dir,
        )
        summaries.append(summary)
        print(f"{args.model}/{args.engine} seed={seed}: "
              + json.dumps(_jsonable({k: v for k, v in summary['metrics'].items()
                                      if isinstance(v, (int, float))})))
    agg = aggregate(summaries)
    out = FsPath(args.out) / f"{args.model}_{args.engine}_aggregate.json"
    with open(out, "w") as fh:
        json.dump(_jsonable(agg), fh, indent=2)
    print(f"aggregate -> {out}")
    return 0


def cmd_summarize(args) -> int:
    out_dir = FsPath(args.out)
    groups = {}
    for path in sorted(out_dir.glob("*_summary.json")):
        with open(path) as fh:
            s = json.load(fh)
        if args.model and s["model"] != args.model:
            continue
        if args.engine and s["engine"] != args.engine:
            continue
        groups.setdefault((s["model"], s["engine"]), []).append(s)
    if not groups:
        print("no summaries found", file=sys.stderr)
        return 1
    for (model, engine), summaries in sorted(groups.items()):
        agg = aggregate(summaries)
        path = out_dir / f"{model}_{engine}_aggregate.json"
        with open(path, "w") as fh:
            json.dump(_jsonable(agg), fh, indent=2)
        print(f"{model}/{engine} over {len(summaries)} seeds:")
        for key, stats in agg["metrics"].items():
            print(f"  {key}: median={stats['median']:.6g} "
                  f"[{stats['q25']:.6g}, {stats['q75']:.6g}]")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcc-exp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and persist a model dataset")
    p.add_argument("--model", required=True, choices=MODEL_NAMES)
    p.add_argument("--seed", type=int, default=0, help="data seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("run", help="run an engine on a model")
    p.add_argument("--model", required=True, choices=MODEL_NAMES)
    p.add_argument("--engine", required=True, choices=ENGINES)
    p.add_argument("--budget", type=int, required=True, help="program executions")
    p.add_argument("--seed", type=int, default=0, help="first inference seed")
    p.add_argument("--seeds", type=int, default=0, help="number of consecutive seeds")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--data-dir", default=None, help="load persisted CSVs from here")
    p.add_argument("--config", default=None, help="key=value overrides of DccConfig fields")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--log-utilities", action="store_true")
    p.add_argument("--dump-registry", action="store_true",
                   help="write the per-path registry report")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("summarize", help="aggregate per-seed summaries")
    p.add_argument("--out", required=True, help="directory holding *_summary.json files")
    p.add_argument("--model", default=None)
    p.add_argument("--engine", default=None)
    p.set_defaults(fn=cmd_summarize)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command line interface: ``python -m alam <verb> ...`` (or the ``alam`` script)."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import checks, harness, tabular
from .envs import ENVIRONMENTS
from .errors import AlamError
from .agents import STRATEGIES


def _experiment_from_args(args) -> harness.ExperimentConfig:
    overrides = list(args.set or [])
    if args.steps is not None:
        overrides.append(f"agent.total_steps={args.steps}")
    if args.config:
        doc = harness.tomllib.loads(Path(args.config).read_text())
    else:
        doc = {}
    doc = harness.apply_overrides(doc, overrides)
    exp = doc.setdefault("experiment", {})
    if args.agent:
        exp["agents"] = args.agent
    if args.env:
        exp["envs"] = args.env
    if args.seed:
        exp["seeds"] = args.seed
    if args.out:
        exp["out"] = args.out
    return harness.config_from_document(doc)


def cmd_train(args) -> int:
    cfg = _experiment_from_args(args)
    out = harness.run_experiment(cfg, force=args.force, resume=args.resume)
    print(out / "manifest.json")
    return 0


def cmd_evaluate(args) -> int:
    env = harness.make_env(args.env)
    rec = harness.evaluate_checkpoint(args.checkpoint, env, args.episodes, args.seed)
    print(json.dumps(rec, sort_keys=True, indent=2))
    return 0


def _collect_runs(paths) -> list[Path]:
    runs = []
    for p in map(Path, paths):
        if (p / "config.json").exists():
            runs.append(p)
        else:
            runs.extend(sorted(c.parent for c in p.rglob("config.json") if (c.parent / "metrics.csv").exists()))
    return runs


def cmd_aggregate(args) -> int:
    runs = _collect_runs(args.runs)
    summary = harness.aggregate_normalized(runs, args.fraction)
    per_run = []
    for d in runs:
        info = harness.run_info(d)
        try:
            osc = harness.oscillation_metric(d / "metrics.csv", args.window)
        except AlamError:
            osc = float("nan")
        per_run.append({"dir": str(d), "agent": info["agent"], "env": info["env"],
                        "seed": info["config"]["seed"], "oscillation": osc})
    if args.json:
        print(json.dumps({"agents": summary, "runs": per_run}, indent=2, sort_keys=True))
        return 0
    print(f"{'agent':<14} {'return':>8} {'+-':>7} {'cost':>8} {'+-':>7} seeds")
    for agent, s in summary.items():
        print(f"{agent:<14} {s['return']:8.3f} {s['return_ci']:7.3f} {s['cost']:8.3f} {s['cost_ci']:7.3f} {s['n_seeds']}")
    print()
    for r in per_run:
        print(f"{r['agent']:<14} {r['env']:<18} seed {r['seed']:<3} oscillation {r['oscillation']:.4f}")
    return 0


def _parse_fixed(text: str) -> dict[int, float]:
    out = {}
    for item in filter(None, text.split(",")):
        k, _, v = item.partition("=")
        out[int(k)] = float(v)
    return out


def cmd_heatmap(args) -> int:
    env = harness.make_env(args.env)
    grid = harness.GridSpec(tuple(args.dims), tuple(args.low), tuple(args.high), tuple(args.num))
    fixed = [_parse_fixed(f) for f in (args.fixed or ["2=0,3=0"])]
    for path in harness.export_lambda_heatmap(args.checkpoint, env, grid, fixed, args.out):
        print(path)
    return 0


def cmd_toy_convex(args) -> int:
    rng = np.random.default_rng(args.seed)
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    ok = True
    for i in range(args.problems):
        n = args.n if args.n else int(rng.integers(2, 21))
        pr = tabular.random_problem(rng, n)
        run = tabular.run_alam(pr, max_iter=args.max_iter, dual_tol=args.dual_tol)
        u_star, lam_star = tabular.oracle_solve(pr)
        fin = run.final
        kkt = max(tabular.kkt_residual(pr, fin.u, fin.lam))
        err = max(np.max(np.abs(fin.u - u_star)), np.max(np.abs(fin.lam - lam_star)))
        fejer = float(np.max(np.diff(np.linalg.norm(run.lambdas - lam_star, axis=1)), initial=0.0))
        good = fin.dual_step < 1e-6 and kkt <= 1e-4 and err <= 1e-4 and fejer <= 1e-9
        ok &= good
        print(f"{'PASS' if good else 'FAIL'} problem {i} n={n} iterations={fin.k} "
              f"dual_step={fin.dual_step:.2e} kkt={kkt:.2e} oracle_err={err:.2e} fejer={fejer:.1e}")
        if out is not None:
            run.write_csv(out / f"problem_{i:02d}.csv", pr)
    return 0 if ok else 1


def cmd_selftest(args) -> int:
    results = checks.run_all()
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="alam", description=__doc__)
    sub = p.add_subparsers(dest="verb", required=True)

    t = sub.add_parser("train", help="train agents and write run directories")
    t.add_argument("--agent", action="append", choices=STRATEGIES)
    t.add_argument("--env", action="append", choices=sorted(ENVIRONMENTS))
    t.add_argument("--seed", action="append", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--out")
    t.add_argument("--config", help="TOML experiment file")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override a config entry, e.g. agent.hidden=[64,64]")
    t.add_argument("--force", action="store_true", help="overwrite existing runs")
    t.add_argument("--resume", action="store_true", help="continue partial runs, skip finished ones")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="deterministic rollouts of a checkpointed policy")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--env", required=True, choices=sorted(ENVIRONMENTS))
    e.add_argument("--episodes", type=int, default=20)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("aggregate", help="normalized summary and oscillation per run")
    a.add_argument("runs", nargs="+", help="run or experiment directories")
    a.add_argument("--fraction", type=float, default=0.1)
    a.add_argument("--window", type=int, default=10)
    a.add_argument("--json", action="store_true")
    a.set_defaults(func=cmd_aggregate)

    h = sub.add_parser("heatmap", help="export multiplier values on a state grid")
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--env", required=True, choices=sorted(ENVIRONMENTS))
    h.add_argument("--dims", type=int, nargs="+", default=[0, 1])
    h.add_argument("--low", type=float, nargs="+", default=[-2.0, -2.0])
    h.add_argument("--high", type=float, nargs="+", default=[2.0, 2.0])
    h.add_argument("--num", type=int, nargs="+", default=[41, 41])
    h.add_argument("--fixed", action="append", metavar="DIM=VALUE,...",
                   help="values of the remaining dimensions; repeat for several files")
    h.add_argument("--out", required=True)
    h.set_defaults(func=cmd_heatmap)

    c = sub.add_parser("toy-convex", help="exact ALaM on random convex programs against an oracle")
    c.add_argument("--problems", type=int, default=20)
    c.add_argument("--n", type=int, default=0, help="states per problem (0: random in 2..20)")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--max-iter", type=int, default=500)
    c.add_argument("--dual-tol", type=float, default=1e-10)
    c.add_argument("--out", help="directory for per-iteration CSV files")
    c.set_defaults(func=cmd_toy_convex)

    s = sub.add_parser("selftest", help="gradient, closed-form and convergence checks")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (AlamError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2

"""Command-line entry points: tree building, filter replay, single trials, batches.

Exit codes: 0 success, 2 configuration or input errors, 3 runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys
import typing
from pathlib import Path

import numpy as np
import yaml

from .config import ConfigError, ExperimentConfig, load_config
from .estimator import read_measurement_log, run_filter
from .sim import (
    InfeasibleSpec,
    TrialRunner,
    benchmark_planning,
    filter_config,
    load_or_build_tree,
    run_batch,
    tree_config,
)
from .tree import EmptyTree, build_action_tree

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class InputError(Exception):
    """Malformed input file (reported with exit code 2)."""


def _config_keys(tp, prefix="") -> list[str]:
    lines = []
    hints = typing.get_type_hints(tp)
    for f in dataclasses.fields(tp):
        t = hints[f.name]
        if dataclasses.is_dataclass(t):
            lines += _config_keys(t, f"{prefix}{f.name}.")
            continue
        default = f.default if f.default is not dataclasses.MISSING else (
            f.default_factory() if f.default_factory is not dataclasses.MISSING else "required")
        lines.append(f"  {prefix}{f.name} = {default!r}")
    return lines


CONFIG_HELP = ("configuration keys (YAML, all optional; nested sections shown with dots):\n"
               + "\n".join(_config_keys(ExperimentConfig))
               + "\n  tree.keep_out entries are {lo: [q1, q2, q3], hi: [q1, q2, q3]} joint-space boxes")


def _load(args) -> ExperimentConfig:
    """Config file plus CLI overrides; the file wins ties except for --seed."""
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    explicit = set()
    if args.config:
        raw = yaml.safe_load(Path(args.config).read_text()) or {}
        explicit = set(raw) if isinstance(raw, dict) else set()
    kw = {}
    if getattr(args, "seed", None) is not None:
        kw["seed"] = args.seed
    if getattr(args, "trials", None) is not None and "trials" not in explicit:
        kw["trials"] = args.trials
    if getattr(args, "policy", None) is not None and "policy" not in explicit:
        kw["policy"] = args.policy
    try:
        return cfg.replace(**kw) if kw else cfg
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# -- build-tree --------------------------------------------------------------

def cmd_build_tree(args) -> int:
    cfg = _load(args)
    tree = build_action_tree(tree_config(cfg))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tree.save(out)
    stats = tree.stats.as_dict(timing=True)
    stats["d_max"] = cfg.tree.d_max
    stats["max_depth"] = int(tree.depth.max())
    print(json.dumps(stats, indent=2, sort_keys=True))
    return EXIT_OK


# -- replay-filter -----------------------------------------------------------

def _read_truth(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                vals = [float(x) for x in line.replace(",", " ").split()]
            except ValueError:
                raise InputError(f"{path}:{lineno}: non-numeric field") from None
            if len(vals) not in (4, 7):
                raise InputError(f"{path}:{lineno}: expected 4 or 7 fields, got {len(vals)}")
            rows.append(vals[:4])
    if not rows:
        raise InputError(f"{path}: no truth records")
    return np.array(rows)


def cmd_replay_filter(args) -> int:
    cfg = _load(args)
    fcfg = filter_config(cfg)
    try:
        ms = read_measurement_log(args.log)
    except OSError as exc:
        raise InputError(f"{args.log}: {exc.strerror}") from None
    except ValueError as exc:
        raise InputError(str(exc)) from None
    if not ms:
        raise InputError(f"{args.log}: no measurement records")
    states = []
    beliefs = run_filter(ms, fcfg, states)
    gated = [i for i, s in enumerate(states) if s.kappa is not None and np.any(s.kappa >= fcfg.gate)]
    dump = sys.stdout if args.dump == "-" else (open(args.dump, "w") if args.dump else None)
    if dump is not None:
        w = csv.writer(dump, lineterminator="\n")
        w.writerow(["timestamp", "x", "y", "z", "vx", "vy", "vz",
                    "var_x", "var_y", "var_z", "var_vx", "var_vy", "var_vz", "gated"])
        gset = set(gated)
        for i, b in enumerate(beliefs):
            w.writerow([repr(b.timestamp), *map(repr, b.mean.tolist()),
                        *map(repr, np.diag(b.cov).tolist()), int(i in gset)])
        if dump is not sys.stdout:
            dump.close()
    report = {"records": len(ms), "gating_events": len(gated),
              "gated_indices": gated, "final_trace_P": float(np.trace(beliefs[-1].cov))}
    if args.truth:
        truth = _read_truth(args.truth)
        by_t = {round(r[0], 9): r[1:] for r in truth}
        errs = []
        for b in beliefs:
            ref = by_t.get(round(b.timestamp, 9))
            if ref is not None:
                errs.append(b.mean[:3] - ref)
        if not errs:
            raise InputError(f"{args.truth}: no timestamps in common with {args.log}")
        e = np.array(errs)
        report["matched"] = len(e)
        report["position_rmse"] = float(math.sqrt(np.mean(np.sum(e * e, axis=1))))
        report["position_rmse_per_axis"] = np.sqrt(np.mean(e * e, axis=0)).tolist()
    print(json.dumps(report, indent=2), file=sys.stderr if args.dump == "-" else sys.stdout)
    return EXIT_OK


# -- trial -------------------------------------------------------------------

def cmd_trial(args) -> int:
    cfg = _load(args)
    tree = load_or_build_tree(cfg, args.cache, _log)
    runner = TrialRunner(cfg, tree)
    throw = runner.throw(args.index)
    out = {}
    for policy in cfg.policies:
        res = runner.run(throw, policy, args.index)
        out[policy] = res.record()
        if args.decisions:
            path = Path(args.decisions)
            path.mkdir(parents=True, exist_ok=True)
            runner.planners[policy].write_log(path / f"decisions_{policy}.jsonl")
    print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK


# -- experiment --------------------------------------------------------------

def _paired_rows(res) -> list[dict]:
    by = {}
    for r in res.results:
        by.setdefault(r.trial, {})[r.policy] = r
    rows = []
    for trial in sorted(by):
        q, n = by[trial].get("qmdp"), by[trial].get("naive")
        if q is None or n is None:
            continue
        rows.append({"trial": trial, "seed": q.seed, "qmdp_blocked": int(q.blocked),
                     "naive_blocked": int(n.blocked), "qmdp_failure": q.failure or "",
                     "naive_failure": n.failure or ""})
    return rows


def cmd_experiment(args) -> int:
    cfg = _load(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tree = None
    if cfg.trials > 0 or args.bench:
        tree = load_or_build_tree(cfg, out, _log)
    res = run_batch(cfg, tree, out, log=_log)
    s = res.summary
    print(f"trials: {s['trials']}  seed: {s['seed']}")
    for p, v in s["policies"].items():
        if v["n"]:
            lo, hi = v["wilson_95"]
            print(f"{p:6s} blocked {v['blocked']}/{v['n']} = {v['success_rate']:.3f} "
                  f"(95% CI {lo:.3f}-{hi:.3f})  failures {v['failures']}")
    if "paired" in s:
        pr = s["paired"]
        rows = _paired_rows(res)
        with open(out / "paired.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["trial"], lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        both = sum(r["qmdp_blocked"] and r["naive_blocked"] for r in rows)
        neither = sum(not r["qmdp_blocked"] and not r["naive_blocked"] for r in rows)
        print("paired comparison (rows qmdp, columns naive):")
        print(f"               naive blocked  naive missed")
        print(f"  qmdp blocked {both:13d}  {pr['only_first']:12d}")
        print(f"  qmdp missed  {pr['only_second']:13d}  {neither:12d}")
        print(f"  gap {pr['gap']:+.3f}, one-sided exact sign test p = {pr['p_value']:.4g}")
    if args.bench:
        b = benchmark_planning(cfg, tree, args.bench_cycles)
        (out / "bench.json").write_text(json.dumps(b, indent=2) + "\n")
        verdict = "within" if b["median_ms"] < 10.0 else "over"
        print(f"planning cycle on {b['tree_nodes']} nodes over {b['cycles']} cycles: median "
              f"{b['median_ms']:.2f} ms, p90 {b['p90_ms']:.2f} ms, p99 {b['p99_ms']:.2f} ms "
              f"({verdict} the 10 ms budget)")
    return EXIT_OK


# -- entry point -------------------------------------------------------------

def _common(p: argparse.ArgumentParser, seed=True):
    p.add_argument("--config", help="YAML configuration file (defaults apply to missing keys)")
    if seed:
        p.add_argument("--seed", type=int, help="master seed; overrides the config file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="intercept", description="Belief-space projectile interception simulator.",
        epilog=CONFIG_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-tree", help="build and save the action tree",
                       epilog=CONFIG_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    _common(p, seed=False)
    p.add_argument("--out", required=True, help="output path of the serialized tree (JSON)")
    p.set_defaults(func=cmd_build_tree)

    p = sub.add_parser("replay-filter", help="run the filter over a measurement log")
    _common(p, seed=False)
    p.add_argument("log", help="measurement log: 'timestamp, x, y, z' per line, '#' comments")
    p.add_argument("--truth", help="truth file 'timestamp, x, y, z[, vx, vy, vz]' for RMSE")
    p.add_argument("--dump", help="write per-step state and covariance diagonal CSV here ('-' for stdout)")
    p.set_defaults(func=cmd_replay_filter)

    p = sub.add_parser("trial", help="run one seeded trial and print its records")
    _common(p)
    p.add_argument("--index", type=int, default=0, help="trial index within the seeded batch")
    p.add_argument("--policy", choices=("qmdp", "naive", "both"), help="policy (config wins ties)")
    p.add_argument("--cache", help="directory for the cached action tree")
    p.add_argument("--decisions", help="directory for per-policy decision logs (JSONL)")
    p.set_defaults(func=cmd_trial)

    p = sub.add_parser("experiment", help="run a seeded Monte-Carlo batch",
                       epilog=CONFIG_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    _common(p)
    p.add_argument("--out-dir", default="results", help="directory for records, summary and CSVs")
    p.add_argument("--policy", choices=("qmdp", "naive", "both"), help="policy (config wins ties)")
    p.add_argument("--trials", type=int, help="number of trials (config wins ties)")
    p.add_argument("--bench", action="store_true", help="also time full planning cycles")
    p.add_argument("--bench-cycles", type=int, default=1000, help="planning cycles timed by --bench")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EmptyTree, InfeasibleSpec, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

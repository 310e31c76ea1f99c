"""Command-line experiment runner.

Exit codes: 0 success, 1 configuration error, 2 runtime error, 3 the benchmark
was OOM-killed (its partial report is still written).
"""

from __future__ import annotations

import argparse
import copy
import csv
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import yaml

from .config import RunConfig, dump_config, from_dict, load_config, to_dict
from .errors import ConfigError, SimError
from .topology import PtPolicy, build_topology
from .workloads import ScenarioKind, run_scenario

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_OOM = 0, 1, 2, 3

MATRIX_COLUMNS = ["pt_policy", "pte_migration", "total_cycles", "walk_cycles", "stall_cycles",
                  "total_norm", "walk_norm", "stall_norm", "oom_killed"]


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    data = to_dict(cfg)
    for item in getattr(args, "set", None) or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"--set: no section {p!r} in {key!r}")
            node = node[p]
        node[parts[-1]] = yaml.safe_load(raw)
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        data["output_dir"] = args.out
    return from_dict(RunConfig, data)


def _check(cfg: RunConfig) -> None:
    build_topology(cfg.topology)
    sc = cfg.scenario
    if sc.kind is ScenarioKind.TRACE:
        if not sc.trace_path:
            raise ConfigError("trace scenario needs scenario.trace_path")
    else:
        sc.workload.validate()
    if sc.threads < 1:
        raise ConfigError("scenario.threads must be at least 1")


def _bench_killed(report) -> bool:
    return any(e.get("name") != "filler" for e in report.oom_kills())


def cmd_validate(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    _check(cfg)
    print(f"{args.config}: ok")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    _check(cfg)
    report = run_scenario(cfg.scenario, cfg, cfg.seed)
    out = Path(cfg.output_dir)
    report.write(out)
    (out / "effective_config").write_text(dump_config(cfg))
    acct = report.accounting
    print(f"total={acct['total_cycles']} walk={acct['walk_cycles']} stall={acct['stall_cycles']} "
          f"mpki={acct['mpki']:.3f} -> {out}")
    if _bench_killed(report):
        print("benchmark was OOM-killed", file=sys.stderr)
        return EXIT_OOM
    return EXIT_OK


def _bench_accounting(report) -> dict:
    procs = [p for p in report.per_process.values() if p["name"] != "filler"]
    if not procs:
        return {"total_cycles": 0, "walk_cycles": 0, "stall_cycles": 0}
    return procs[0]


def _matrix_cell(work):
    cfg, pol, mig = work
    c = copy.deepcopy(cfg)
    c.policy.pt_policy = pol
    c.policy.pte_migration.enabled = mig
    return run_scenario(c.scenario, c, c.seed)


def run_matrix(cfg: RunConfig, jobs: int = 1) -> list[dict]:
    """Policy x PTE-migration cross product, normalised to the FollowData/off cell."""
    cells = [(pol, mig) for pol in (PtPolicy.FOLLOW_DATA, PtPolicy.BIND_ALL, PtPolicy.BIND_HIGH)
             for mig in (False, True)]

    work = [(cfg, pol, mig) for pol, mig in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_matrix_cell, work))
    else:
        reports = [_matrix_cell(w) for w in work]
    base = _bench_accounting(reports[0])
    rows = []
    for (pol, mig), rep in zip(cells, reports):
        acct = _bench_accounting(rep)
        row = {"pt_policy": pol.value, "pte_migration": mig}
        for k in ("total_cycles", "walk_cycles", "stall_cycles"):
            row[k] = acct[k]
            row[k.split("_")[0] + "_norm"] = acct[k] / base[k] if base[k] else float("nan")
        row["oom_killed"] = _bench_killed(rep)
        rows.append(row)
    return rows


def cmd_matrix(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    _check(cfg)
    rows = run_matrix(cfg, args.jobs)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "matrix.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MATRIX_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    (out / "effective_config").write_text(dump_config(cfg))
    print(f"{'policy':<12} {'mig':<5} {'total':>8} {'walk':>8} {'stall':>8}  oom")
    for r in rows:
        print(f"{r['pt_policy']:<12} {str(r['pte_migration']):<5} {r['total_norm']:8.4f} "
              f"{r['walk_norm']:8.4f} {r['stall_norm']:8.4f}  {'yes' if r['oom_killed'] else ''}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tierpt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_out=True):
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config value, e.g. policy.pt_policy=bind_high")
        if with_out:
            p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("run", help="run one scenario")
    common(p)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("matrix", help="run the page-table policy x migration matrix")
    common(p)
    p.add_argument("--jobs", type=int, default=1, help="cells to run on parallel threads")
    p.set_defaults(func=cmd_matrix)
    p = sub.add_parser("validate", help="check a configuration without running it")
    common(p, with_out=False)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

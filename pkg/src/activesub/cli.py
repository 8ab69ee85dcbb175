"""Command-line entry point: ``activesub <command> ...``.

Exit codes: 0 success, 1 runtime failure (partial results stay on disk),
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import ExperimentConfig, build_oracle, build_task, load_config, train_oracle
from .errors import UsageError
from .netcore import accuracy, load_params, save_params
from .oracle import make_oracle_server
from .pipeline import read_records_csv, run_schedule

log = logging.getLogger("activesub")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _load(args) -> ExperimentConfig:
    return load_config(args.config) if args.config else ExperimentConfig()


def _seed(args, cfg) -> int:
    return cfg.seed if getattr(args, "seed", None) is None else args.seed


def cmd_train_oracle(args) -> int:
    cfg = _load(args)
    seed = _seed(args, cfg)
    task = build_task(cfg, seed)
    params = train_oracle(cfg.oracle, task, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_params(out, params)
    acc = accuracy(params, task.eval.X, task.eval.y)
    print(f"oracle saved to {out}; held-out accuracy {acc:.4f}")
    return 0


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    run = cfg.run
    if getattr(args, "strategy", None):
        run = dataclasses.replace(run, strategy=args.strategy)
    if getattr(args, "schedule", None):
        run = dataclasses.replace(run, schedule=args.schedule)
    if getattr(args, "rho_max", None) is not None:
        run = dataclasses.replace(run, rho_max=args.rho_max)
    oracle = cfg.oracle
    if getattr(args, "oracle_params", None):
        oracle = dataclasses.replace(oracle, params=args.oracle_params, url=None)
    if getattr(args, "oracle_url", None):
        oracle = dataclasses.replace(oracle, url=args.oracle_url)
    return dataclasses.replace(cfg, run=run, oracle=oracle)


def _summary(records, config) -> dict:
    last = records[-1]
    return {
        "schedule": config.schedule,
        "strategy": config.strategy if config.schedule == "active" else None,
        "attack": config.attack.method,
        "seed": config.seed,
        "iterations": len(records),
        "queries": last.query,
        "final_acc": None if math.isnan(last.acc) else last.acc,
        "final_simi": None if math.isnan(last.simi) else last.simi,
        "eval_queries": last.eval_queries,
    }


def cmd_run(args) -> int:
    cfg = _apply_overrides(_load(args), args)
    seed = _seed(args, cfg)
    out = Path(args.out or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    task = build_task(cfg, seed)
    oracle = build_oracle(cfg, task, seed)
    config = cfg.run_config(seed)
    csv_path = out / "records.csv"
    outcome = run_schedule(config, oracle, task, csv_path=csv_path, wall_time=args.wall_time,
                           audit_path=out / "audit.jsonl" if args.audit else None)
    summary = _summary(outcome.records, config)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"{len(outcome.records)} records -> {csv_path}; queries {summary['queries']}, "
          f"simi {summary['final_simi']}, acc {summary['final_acc']}")
    return 0


def _cell_name(schedule, strategy, attack, seed) -> str:
    label = strategy if schedule == "active" else schedule
    return f"{label.replace('+', '_')}__{attack}__seed{seed}"


def _run_cell(cfg: ExperimentConfig, strategy: str, attack: str, seed: int, path: str):
    task = build_task(cfg, seed)
    oracle = build_oracle(cfg, task, seed)
    config = cfg.run_config(seed, strategy=strategy,
                            attack=dataclasses.replace(cfg.run.attack, method=attack))
    run_schedule(config, oracle, task, csv_path=path)


def cmd_sweep(args) -> int:
    cfg = _apply_overrides(_load(args), args)
    out = Path(args.out or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    sw = cfg.sweep
    seeds = list(range(args.seeds)) if args.seeds is not None else list(sw.seeds)
    strategies = sw.strategies if cfg.run.schedule == "active" else (cfg.run.schedule,)
    cells = []
    for strategy in strategies:
        for attack in sw.attacks or (cfg.run.attack.method,):
            for seed in seeds:
                name = _cell_name(cfg.run.schedule, strategy, attack, seed)
                cells.append({"name": name, "strategy": strategy, "attack": attack,
                              "seed": seed, "csv": str(out / f"{name}.csv")})
    if len({c["csv"] for c in cells}) != len(cells):
        raise UsageError("sweep cells do not have unique output paths")
    (out / "manifest.json").write_text(json.dumps(
        {"schedule": cfg.run.schedule, "cells": cells}, indent=2) + "\n")

    failures = []
    workers = args.workers or sw.workers
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            futs = [(c, pool.submit(_run_cell, cfg, c["strategy"], c["attack"], c["seed"],
                                    c["csv"])) for c in cells]
            for c, fut in futs:
                try:
                    fut.result()
                except Exception as exc:  # noqa: BLE001 - recorded per cell
                    failures.append({**c, "error": f"{type(exc).__name__}: {exc}"})
    else:
        for c in cells:
            try:
                _run_cell(cfg, c["strategy"], c["attack"], c["seed"], c["csv"])
            except Exception as exc:  # noqa: BLE001 - recorded per cell
                log.error("cell %s failed: %s", c["name"], exc)
                failures.append({**c, "error": f"{type(exc).__name__}: {exc}"})
    (out / "failures.json").write_text(json.dumps(failures, indent=2) + "\n")
    print(f"{len(cells) - len(failures)}/{len(cells)} cells completed in {out}")
    return 1 if failures else 0


def cmd_serve_oracle(args) -> int:
    if args.params:
        params = load_params(args.params)
    else:
        cfg = _load(args)
        seed = _seed(args, cfg)
        params = train_oracle(cfg.oracle, build_task(cfg, seed), seed)
    server = make_oracle_server(params, args.host, args.port, args.path)
    host, port = server.server_address[:2]
    print(f"serving oracle on http://{host}:{port}{args.path}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def _mean(values):
    vals = [v for v in values if not math.isnan(v)]
    return sum(vals) / len(vals) if vals else float("nan")


def aggregate(groups: dict[str, list[list[dict]]]) -> dict[str, list[dict]]:
    """Per-group, per-iteration means over seeds."""
    table = {}
    for name, runs in groups.items():
        by_itr = defaultdict(list)
        for rows in runs:
            for r in rows:
                by_itr[r["itr"]].append(r)
        table[name] = [
            {"itr": itr, "query": _mean([r["query"] for r in rs]),
             "acc": _mean([r["acc"] for r in rs]), "simi": _mean([r["simi"] for r in rs]),
             "n": len(rs)}
            for itr, rs in sorted(by_itr.items())
        ]
    return table


def _collect(paths) -> dict[str, list[list[dict]]]:
    groups: dict[str, list[list[dict]]] = defaultdict(list)
    for p in map(Path, paths):
        if p.is_dir():
            manifest = p / "manifest.json"
            if manifest.exists():
                cells = json.loads(manifest.read_text())["cells"]
                for c in cells:
                    if Path(c["csv"]).exists():
                        key = f"{c['strategy']} / {c['attack']}"
                        groups[key].append(read_records_csv(c["csv"]))
                continue
            files = sorted(p.glob("*.csv"))
        else:
            files = [p]
        for f in files:
            key = f.stem.split("__seed")[0].replace("__", " / ").replace("_", "+")
            groups[key].append(read_records_csv(f))
    if not groups:
        raise UsageError("no CSV files found to report on")
    return groups


def cmd_report(args) -> int:
    table = aggregate(_collect(args.inputs))
    lines = []
    if args.format == "csv":
        lines.append("group,itr,query,acc,simi,n")
        for name, rows in table.items():
            for r in rows:
                lines.append(f"{name},{r['itr']},{r['query']:.1f},{r['acc']:.4f},"
                             f"{r['simi']:.4f},{r['n']}")
    else:
        for name, rows in table.items():
            lines.append(f"== {name}")
            lines.append(f"{'itr':>4} {'query':>9} {'Acc':>8} {'Simi':>8} {'n':>4}")
            for r in rows:
                lines.append(f"{r['itr']:>4} {r['query']:>9.0f} {r['acc']:>8.4f} "
                             f"{r['simi']:>8.4f} {r['n']:>4}")
            lines.append("")
    text = "\n".join(lines).rstrip() + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="activesub", description="Query-efficient substitute training.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", help="TOML experiment config")
        if seed:
            sp.add_argument("--seed", type=int)

    t = sub.add_parser("train-oracle", help="fit and save the target model")
    common(t)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_oracle)

    r = sub.add_parser("run", help="execute one run")
    common(r)
    r.add_argument("--out", help="output directory (default: config output)")
    r.add_argument("--strategy")
    r.add_argument("--schedule", choices=["passive", "active", "raw"])
    r.add_argument("--rho-max", type=int)
    r.add_argument("--oracle-params")
    r.add_argument("--oracle-url")
    r.add_argument("--wall-time", action="store_true", help="record real wall_ms")
    r.add_argument("--audit", action="store_true", help="write per-candidate scores")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run the strategy x attack x seed matrix")
    common(s, seed=False)
    s.add_argument("--out")
    s.add_argument("--seeds", type=int, help="use seeds 0..N-1")
    s.add_argument("--workers", type=int)
    s.add_argument("--schedule", choices=["passive", "active", "raw"])
    s.add_argument("--rho-max", type=int)
    s.add_argument("--oracle-params")
    s.add_argument("--oracle-url")
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("serve-oracle", help="expose a model over HTTP")
    common(v)
    v.add_argument("--params", help="saved parameter file (else train from config)")
    v.add_argument("--host", default="127.0.0.1")
    v.add_argument("--port", type=int, default=8000)
    v.add_argument("--path", default="/query")
    v.set_defaults(func=cmd_serve_oracle)

    rep = sub.add_parser("report", help="summarize run CSVs per strategy")
    rep.add_argument("inputs", nargs="+", help="CSV files or sweep directories")
    rep.add_argument("--format", choices=["text", "csv"], default="text")
    rep.add_argument("--out")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

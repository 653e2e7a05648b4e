"""Command line: ``insituflow run|graph|bench``.

Exit status is 0 only when the configuration has no errors and every
task, including the consumers' payload checks, finished cleanly.
"""
from __future__ import annotations

import argparse
import importlib
import json
import logging
import os
import sys

from ..config import load_workflow, validate
from ..errors import ConfigError, DeadlockError, RegistryError, TaskError, WorkflowError
from ..graph import build_graph, export_dot
from ..runtime import run
from . import scenarios
from .synthetic import default_registry


def _setup_logging() -> None:
    level = os.environ.get("WLK_LOG", "WARNING").upper()
    if level.isdigit():
        value = int(level)
    else:
        value = getattr(logging, level, logging.WARNING)
    logging.basicConfig(level=value, format="%(levelname)s %(name)s: %(message)s")


def _load_plugins(names, registry) -> None:
    for name in names or ():
        mod = importlib.import_module(name)
        hook = getattr(mod, "register", None)
        if callable(hook):
            hook(registry)


def _write(path, text) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _load_checked(path):
    """Parse and validate; returns (spec, report) or exits with the diagnostic."""
    try:
        spec = load_workflow(path)
    except ConfigError as exc:
        print(f"{path}: {exc}", file=sys.stderr)
        raise SystemExit(2)
    except OSError as exc:
        print(f"{path}: {exc.strerror}", file=sys.stderr)
        raise SystemExit(2)
    return spec, validate(spec)


def cmd_graph(args) -> int:
    spec, report = _load_checked(args.config)
    graph = build_graph(spec)
    if args.json:
        print(json.dumps({"graph": graph.to_dict(), "validation": json.loads(report.to_json())}, indent=2))
    else:
        sys.stdout.write(export_dot(graph))
        print(report.to_text(), file=sys.stderr)
    return 0 if report.ok else 1


def cmd_run(args) -> int:
    spec, report = _load_checked(args.config)
    for issue in report.warnings + report.errors:
        print(issue, file=sys.stderr)
    if not report.ok:
        return 1
    graph = build_graph(spec)
    if args.emit_dot:
        _write(args.emit_dot, export_dot(graph))
    registry = default_registry()
    _load_plugins(args.plugin, registry)
    try:
        result = run(graph, registry, clock=args.clock, latency=args.latency, per_byte=args.per_byte,
                     storage=args.storage)
    except (TaskError, DeadlockError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.report is not None and args.emit_csv:
            _write(args.emit_csv, exc.report.to_csv())
        return 1
    except (RegistryError, WorkflowError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.emit_csv:
        _write(args.emit_csv, result.to_csv())
    if args.emit_gantt:
        _write(args.emit_gantt, result.gantt_csv())
    if args.emit_report:
        _write(args.emit_report, result.to_json(indent=1))
    summary = {
        "clock": result.clock,
        "completion_time": result.completion_time,
        "channels": {str(k): {**v, "consumed": list(result.consumed[k]), "dropped": result.dropped[k],
                              "bytes": result.bytes_moved[k]}
                     for k, v in result.channels.items()},
        "digest": result.digest(),
    }
    print(json.dumps(summary, indent=2))
    return 0


def cmd_bench(args) -> int:
    name = args.scenario
    try:
        if args.sweep:
            if name == "flow_control":
                out = scenarios.flow_control_table(args.timesteps or 10)
            elif name == "ensembles":
                out = scenarios.ensemble_scaling(args.topology, tuple(args.counts))
            elif name == "lammps":
                out = scenarios.lammps_comparison()
            elif name == "nyx":
                out = scenarios.nyx_table()
            else:
                print(f"error: no sweep for {name}", file=sys.stderr)
                return 2
            print(json.dumps(out, indent=2, sort_keys=True, default=str))
            return 0
        kw = {}
        if name == "flow_control":
            kw = {"slowdown": args.slowdown, "strategy": args.strategy}
        elif name == "ensembles":
            kw = {"topology": args.topology, "instances": args.instances, "per_byte": args.per_byte}
        elif name == "lammps":
            kw = {"task_count": args.task_count}
        elif name == "nyx":
            kw = {"io_freq": args.io_freq}
        elif name == "overhead":
            kw = {"trials": args.trials}
        if args.timesteps and name != "overhead":
            kw["timesteps"] = args.timesteps
        result = scenarios.SCENARIOS[name](**kw)
    except WorkflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(result.to_json())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="insituflow", description="Run and inspect in situ workflows.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("graph", help="print the task graph as DOT plus a validation report")
    g.add_argument("config")
    g.add_argument("--json", action="store_true", help="emit graph and report as JSON instead")
    g.set_defaults(func=cmd_graph)

    r = sub.add_parser("run", help="execute a workflow with the registered tasks")
    r.add_argument("config")
    r.add_argument("--clock", choices=("virtual", "real"), default="virtual")
    r.add_argument("--emit-dot", metavar="F")
    r.add_argument("--emit-csv", metavar="F", help="event log: time,rank,kind,filename,timestep,bytes")
    r.add_argument("--emit-gantt", metavar="F", help="per-rank segments: rank,start,end,kind")
    r.add_argument("--emit-report", metavar="F", help="full run report as JSON")
    r.add_argument("--plugin", action="append", metavar="MODULE",
                   help="import MODULE; its register(registry) adds task bodies")
    r.add_argument("--latency", type=float, default=0.0)
    r.add_argument("--per-byte", type=float, default=0.0)
    r.add_argument("--storage", metavar="DIR", help="mirror file-mode transfers into DIR")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", help="run a named benchmark scenario and print its JSON result")
    b.add_argument("scenario", choices=sorted(scenarios.SCENARIOS))
    b.add_argument("--sweep", action="store_true", help="run the scenario's full parameter sweep")
    b.add_argument("--slowdown", type=int, default=5)
    b.add_argument("--strategy", choices=scenarios.STRATEGIES, default="all")
    b.add_argument("--topology", choices=("fanout", "fanin", "nxn"), default="fanout")
    b.add_argument("--instances", type=int, default=4)
    b.add_argument("--counts", type=int, nargs="+", default=[1, 4, 16])
    b.add_argument("--per-byte", type=float, default=1.0)
    b.add_argument("--task-count", type=int, default=1)
    b.add_argument("--io-freq", type=int, default=0)
    b.add_argument("--timesteps", type=int)
    b.add_argument("--trials", type=int, default=3)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SystemExit as exc:
        return exc.code


if __name__ == "__main__":
    sys.exit(main())

"""Benchmark scenarios reproducing the evaluation workloads at desk scale.

Each scenario builds a workflow document, runs it and returns a
:class:`ScenarioResult`. Consumers verify every received block against the
synthetic formulas, so a scenario that returns normally never moved wrong data.
"""
from __future__ import annotations

import json
import statistics
import time
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from ..config import parse_workflow
from ..datamodel import decompose, intersect
from ..errors import VerificationError
from ..fabric import Message, RealFabric
from ..graph import build_graph, link_instances
from ..runtime import RunReport, run
from .synthetic import SyntheticWorkload, default_registry, grid_values

STRATEGIES = ("all", "some", "latest")


@dataclass
class ScenarioResult:
    scenario: str
    params: dict
    completion_time: float
    consumed: dict = field(default_factory=dict)
    bytes: dict = field(default_factory=dict)
    ratios: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    digest: str = ""

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "params": self.params,
                "completion_time": self.completion_time,
                "consumed": {str(k): list(v) for k, v in self.consumed.items()},
                "bytes": {str(k): v for k, v in self.bytes.items()},
                "ratios": self.ratios, "checks": self.checks, "digest": self.digest}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _yaml_args(d: dict) -> str:
    return "{" + ", ".join(f"{k}: {v}" for k, v in d.items()) + "}"


def _port(filename, dsets, io_freq=None, indent=6):
    pad = " " * indent
    lines = [f"{pad}- filename: {filename}"]
    if io_freq is not None:
        lines.append(f"{pad}  io_freq: {io_freq}")
    lines.append(f"{pad}  dsets:")
    for d in dsets:
        lines += [f"{pad}    - name: {d}", f"{pad}      file: 0", f"{pad}      memory: 1"]
    return "\n".join(lines)


def _task(func, nprocs, args=None, task_count=1, nwriters=None, outport=None, inport=None,
          actions=None):
    lines = [f"  - func: {func}", f"    nprocs: {nprocs}"]
    if task_count != 1:
        lines.append(f"    taskCount: {task_count}")
    if nwriters is not None:
        lines.append(f"    nwriters: {nwriters}")
    if actions:
        lines.append(f"    actions: [\"{actions[0]}\", \"{actions[1]}\"]")
    if args:
        lines.append(f"    args: {_yaml_args(args)}")
    if outport:
        lines += ["    outports:", _port(*outport)]
    if inport:
        lines += ["    inports:", _port(*inport)]
    return "\n".join(lines)


def _doc(*tasks) -> str:
    return "tasks:\n" + "\n".join(tasks) + "\n"


def io_freq_of(strategy: str, n: int) -> int:
    return {"all": 0, "some": n, "latest": -1}[strategy]


# -- flow control ---------------------------------------------------------------


def flow_control_config(slowdown: int, strategy: str, timesteps: int = 10, grid: int = 10_000,
                        particles: int = 10_000, producer_nprocs: int = 3,
                        consumer_nprocs: int = 1) -> str:
    if strategy not in STRATEGIES:
        raise ValueError(f"strategy must be one of {STRATEGIES}")
    wl = SyntheticWorkload(grid, particles, timesteps, 2.0, 2.0 * slowdown)
    dsets = ["/group1/grid", "/group1/particles"]
    return _doc(
        _task("producer", producer_nprocs, wl.to_args(), outport=("outfile.h5", dsets)),
        _task("consumer", consumer_nprocs, wl.to_args(),
              inport=("outfile.h5", dsets, io_freq_of(strategy, slowdown))),
    )


def _result(name, params, report: RunReport, **extra) -> ScenarioResult:
    return ScenarioResult(name, params, report.completion_time, dict(report.consumed),
                          dict(report.bytes_moved), digest=report.digest(), **extra)


def scenario_flow_control(slowdown: int = 5, strategy: str = "all", timesteps: int = 10,
                          grid: int = 10_000, particles: int = 10_000) -> ScenarioResult:
    """Producer compute 2, consumer compute 2 x slowdown; Some uses n = slowdown."""
    text = flow_control_config(slowdown, strategy, timesteps, grid, particles)
    report = run(build_graph(parse_workflow(text)), default_registry())
    params = {"slowdown": slowdown, "strategy": strategy, "timesteps": timesteps,
              "grid_points_per_rank": grid, "particles_per_rank": particles}
    res = _result("flow_control", params, report)
    res.bytes = {"moved": sum(report.bytes_moved.values()), "dropped": sum(report.dropped.values())}
    res.checks["latest_maximal"] = latest_maximal(report)
    return res


def latest_maximal(report: RunReport) -> bool:
    """Each consumed step was the newest closed step when it was served."""
    for ch in report.consumed:
        closes = []
        for e in report.events:
            if e.channel == ch and e.kind.startswith("decision:"):
                closes.append(e)
        lead = min((e.rank for e in closes), default=None)
        newest = 0
        for e in report.events:
            if e.rank != lead or e.channel != ch:
                continue
            if e.kind in ("decision:serve", "decision:skip", "decision:buffer"):
                newest = e.timestep
            if e.kind in ("decision:serve", "decision:serve_buffered", "decision:serve_final"):
                if e.timestep != newest:
                    return False
    return True


def flow_control_table(timesteps: int = 10, grid: int = 1_000, particles: int = 1_000) -> dict:
    """Completion times for every (slowdown, strategy) plus Some/All and Latest/All speedups."""
    table = {}
    for slow in (2, 5, 10):
        row = {s: scenario_flow_control(slow, s, timesteps, grid, particles) for s in STRATEGIES}
        all_t = row["all"].completion_time
        table[slow] = {
            "completion": {s: r.completion_time for s, r in row.items()},
            "consumed": {s: list(r.consumed[0]) for s, r in row.items()},
            "speedup_some": all_t / row["some"].completion_time,
            "speedup_latest": all_t / row["latest"].completion_time,
        }
    return table


# -- ensembles ------------------------------------------------------------------


def ensemble_config(topology: str, instances: int, timesteps: int = 2, grid: int = 100,
                    particles: int = 100, ranks: int = 2) -> str:
    counts = {"fanout": (1, instances), "fanin": (instances, 1), "nxn": (instances, instances)}
    if topology not in counts:
        raise ValueError("topology must be fanout, fanin or nxn")
    p, c = counts[topology]
    wl = SyntheticWorkload(grid, particles, timesteps, 1.0, 1.0)
    dsets = ["/group1/grid", "/group1/particles"]
    return _doc(
        _task("producer", ranks, wl.to_args(), task_count=p, outport=("outfile.h5", dsets)),
        _task("consumer", ranks, wl.to_args(), task_count=c, inport=("outfile.h5", dsets)),
    )


def scenario_ensembles(topology: str = "fanout", instances: int = 4, per_byte: float = 1.0,
                       timesteps: int = 2, grid: int = 100, particles: int = 100) -> ScenarioResult:
    graph = build_graph(parse_workflow(ensemble_config(topology, instances, timesteps, grid, particles)))
    report = run(graph, default_registry(), per_byte=per_byte)
    params = {"topology": topology, "instances": instances, "per_byte": per_byte,
              "timesteps": timesteps, "grid_points_per_rank": grid, "particles_per_rank": particles}
    res = _result("ensembles", params, report)
    first_p = graph.instances[0]
    first_c = next(i for i in graph.instances if i.func == "consumer")
    res.bytes = {
        "producer0_served": sum(report.bytes_moved[l.id] for l in graph.links if l.producer == first_p),
        "consumer0_received": sum(report.bytes_moved[l.id] for l in graph.links if l.consumer == first_c),
        "per_pair": sorted(set(report.bytes_moved.values())),
        "total": sum(report.bytes_moved.values()),
    }
    pairs = [(l.producer.instance_index, l.consumer.instance_index) for l in graph.links]
    p, c = {"fanout": (1, instances), "fanin": (instances, 1), "nxn": (instances, instances)}[topology]
    res.checks["pairing_matches"] = pairs == link_instances(p, c)
    res.checks["all_steps_consumed"] = all(len(v) == timesteps for v in report.consumed.values())
    return res


def ensemble_scaling(topology: str, counts=(1, 4, 16), per_byte: float = 1.0) -> dict:
    rows = {n: scenario_ensembles(topology, n, per_byte) for n in counts}
    key = {"fanout": "producer0_served", "fanin": "consumer0_received", "nxn": "per_pair"}[topology]
    out = {"bytes": {n: r.bytes[key] for n, r in rows.items()},
           "completion": {n: r.completion_time for n, r in rows.items()}}
    if topology != "nxn":
        xs = list(counts)
        out["ratios"] = [rows[b].bytes[key] / rows[a].bytes[key] for a, b in zip(xs, xs[1:])]
    return out


# -- subset writers (molecular dynamics pattern) ----------------------------------


def lammps_config(task_count: int = 1, nprocs: int = 32, nwriters: int = 1, consumer_nprocs: int = 8,
                  timesteps: int = 3, particles: int = 64) -> str:
    wl = SyntheticWorkload(0, particles, timesteps, 2.0, 3.0)
    return _doc(
        _task("freeze", nprocs, wl.to_args(), task_count=task_count, nwriters=nwriters,
              outport=("dump-h5md.h5", ["/particles/*"])),
        _task("detector", consumer_nprocs, wl.to_args(), task_count=task_count,
              inport=("dump-h5md.h5", ["/particles/*"])),
    )


def scenario_lammps(task_count: int = 1, nprocs: int = 32, consumer_nprocs: int = 8,
                    timesteps: int = 3, particles: int = 64) -> ScenarioResult:
    graph = build_graph(parse_workflow(lammps_config(task_count, nprocs, 1, consumer_nprocs,
                                                     timesteps, particles)))
    report = run(graph, default_registry())
    params = {"task_count": task_count, "nprocs": nprocs, "nwriters": 1,
              "consumer_nprocs": consumer_nprocs, "timesteps": timesteps, "particles_per_rank": particles}
    res = _result("lammps", params, report)
    origins = set()
    for e in report.events:
        if e.channel is not None and e.kind in ("send:OWNERSHIP", "send:PIECE", "send:MORE", "send:END",
                                                 "send:ALL_DONE"):
            inst = graph.instance_of_rank(e.rank)
            origins.add(e.rank - inst.start)
    res.checks["origin_local_ranks"] = sorted(origins)
    res.checks["invocations"] = len([e for e in report.events if e.kind == "invoke"])
    res.checks["all_steps_consumed"] = all(len(v) == timesteps for v in report.consumed.values())
    return res


def lammps_comparison(counts=(1, 4), **kw) -> dict:
    rows = {n: scenario_lammps(n, **kw) for n in counts}
    base = rows[counts[0]].completion_time
    return {"completion": {n: r.completion_time for n, r in rows.items()},
            "max_delta": max(abs(r.completion_time - base) / base for r in rows.values()),
            "origins": sorted({x for r in rows.values() for x in r.checks["origin_local_ranks"]})}


# -- double-close pattern (cosmology) ---------------------------------------------


def nyx_config(io_freq: int = 0, timesteps: int = 20, nprocs: int = 16, consumer_nprocs: int = 8,
               cells: int = 1_000, with_action: bool = True) -> str:
    wl = SyntheticWorkload(cells, 0, timesteps, 2.0, 25.0)
    return _doc(
        _task("nyx", nprocs, wl.to_args(), actions=("actions", "nyx") if with_action else None,
              outport=("plt*.h5", ["/level_0/density"])),
        _task("reeber", consumer_nprocs, wl.to_args(),
              inport=("plt*.h5", ["/level_0/density"], io_freq)),
    )


def scenario_nyx(io_freq: int = 0, timesteps: int = 20, nprocs: int = 16, consumer_nprocs: int = 8,
                 cells: int = 1_000) -> ScenarioResult:
    graph = build_graph(parse_workflow(nyx_config(io_freq, timesteps, nprocs, consumer_nprocs, cells)))
    report = run(graph, default_registry())
    params = {"io_freq": io_freq, "timesteps": timesteps, "nprocs": nprocs,
              "consumer_nprocs": consumer_nprocs, "cells_per_rank": cells}
    res = _result("nyx", params, report)
    res.checks.update(nyx_checks(report, nprocs))
    return res


def nyx_checks(report: RunReport, nprocs: int) -> dict:
    """Event-log audit of the double-close pattern (consumer leader is global rank ``nprocs``)."""
    fetched = Counter(e.filename for e in report.events if e.kind == "fetch" and e.rank == nprocs)
    closes0 = Counter(e.filename for e in report.events if e.kind == "close" and e.rank == 0)
    serves0 = Counter(e.filename for e in report.events if e.kind == "serve" and e.rank == 0)
    ordered = True
    for r in range(1, nprocs):
        recvs = closes = 0
        for e in report.events:
            if e.rank != r:
                continue
            if e.kind == "broadcast_recv":
                recvs += 1
            elif e.kind == "close":
                closes += 1
                ordered &= recvs >= closes
    return {
        "trees_per_step": sorted(set(fetched.values())),
        "closes_per_step_rank0": sorted(set(closes0.values())),
        "serves_per_served_step": sorted(set(serves0.values())),
        "broadcast_before_second_close": bool(ordered),
    }


def nyx_table(io_freqs=(0, 2, 5, 10), **kw) -> dict:
    rows = {f: scenario_nyx(f, **kw) for f in io_freqs}
    base = rows[io_freqs[0]].completion_time
    return {"completion": {f: r.completion_time for f, r in rows.items()},
            "speedup": {f: base / r.completion_time for f, r in rows.items()},
            "checks": {f: r.checks for f, r in rows.items()}}


# -- engine overhead ----------------------------------------------------------------


def _direct_run(nprod: int, ncons: int, wl: SyntheticWorkload, unit: float) -> float:
    """One producer-to-consumer channel wired by hand on the real-clock fabric."""
    n = nprod * wl.grid_points_per_rank
    owned = decompose((n,), nprod)
    target = decompose((n,), ncons)
    fabric = RealFabric(nprod + ncons, unit=unit)

    def wait_for(rank, deadline):
        while fabric.time() < deadline:
            fabric.wait(rank, lambda m: False, deadline)

    def producer(r):
        def body():
            for t in range(1, wl.timesteps + 1):
                wait_for(r, fabric.time() + wl.producer_compute)
                for _c in range(ncons):
                    fabric.wait(r, lambda m: m.kind == "READY" and m.tag == t)
                data = grid_values(t, owned[r])
                for c in range(ncons):
                    piece = intersect(owned[r], target[c])
                    if piece is None:
                        continue
                    lo = piece.offsets[0] - owned[r].offsets[0]
                    payload = data[lo:lo + piece.counts[0]].tobytes()
                    fabric.post(Message(r, nprod + c, "PIECE", tag=t, body=(piece, payload),
                                        sent=fabric.time()))
        return body

    def consumer(c):
        me = nprod + c
        sources = [r for r in range(nprod) if intersect(owned[r], target[c]) is not None]

        def body():
            for t in range(1, wl.timesteps + 1):
                for r in range(nprod):
                    fabric.post(Message(me, r, "READY", tag=t, sent=fabric.time()))
                out = np.zeros(target[c].counts, dtype=np.uint64)
                for _ in sources:
                    m = fabric.wait(me, lambda m: m.kind == "PIECE" and m.tag == t)
                    piece, payload = m.body
                    lo = piece.offsets[0] - target[c].offsets[0]
                    out[lo:lo + piece.counts[0]] = np.frombuffer(payload, dtype=np.uint64)
                if not np.array_equal(out, grid_values(t, target[c])):
                    raise VerificationError(f"direct baseline mismatch at step {t}")
                wait_for(me, fabric.time() + wl.consumer_compute)
        return body

    t0 = time.perf_counter()
    fabric.run([producer(r) for r in range(nprod)] + [consumer(c) for c in range(ncons)])
    if fabric.errors:
        raise next(iter(fabric.errors.values()))
    return time.perf_counter() - t0


def scenario_overhead(trials: int = 3, nprod: int = 6, ncons: int = 2, elements: int = 10_000,
                      timesteps: int = 5, compute: float = 20.0, unit: float = 0.001) -> ScenarioResult:
    """Real-clock engine run vs a hand-wired channel; informational."""
    wl = SyntheticWorkload(elements, 0, timesteps, compute, compute)
    text = _doc(
        _task("producer", nprod, {**wl.to_args(), "particles_per_rank": 0},
              outport=("outfile.h5", ["/group1/grid"])),
        _task("consumer", ncons, wl.to_args(), inport=("outfile.h5", ["/group1/grid"])),
    )
    engine_times, direct_times = [], []
    reg = _grid_only_registry()
    for _ in range(trials):
        t0 = time.perf_counter()
        run(build_graph(parse_workflow(text)), reg, clock="real", unit=unit)
        engine_times.append(time.perf_counter() - t0)
        direct_times.append(_direct_run(nprod, ncons, wl, unit))
    e, d = statistics.mean(engine_times), statistics.mean(direct_times)
    params = {"trials": trials, "ranks": nprod + ncons, "elements_per_rank": elements,
              "timesteps": timesteps, "compute": compute, "unit_seconds": unit}
    return ScenarioResult("overhead", params, e, ratios={"engine_over_direct": e / d},
                          checks={"engine_seconds": engine_times, "direct_seconds": direct_times,
                                  "within_15_percent": e / d <= 1.15})


def _grid_only_registry():
    reg = default_registry()

    def producer(ctx):
        wl = SyntheticWorkload.from_args(ctx.args)
        n = ctx.size * wl.grid_points_per_rank
        for t in range(1, wl.timesteps + 1):
            ctx.compute(wl.producer_compute)
            f = ctx.open_file("outfile.h5", "w")
            sel = ctx.io_block((n,))
            f.create_dataset("/group1/grid", "u64", (n,), sel).write(grid_values(t, sel))
            f.close()

    reg.register("producer", producer)
    return reg


SCENARIOS = {
    "flow_control": scenario_flow_control,
    "ensembles": scenario_ensembles,
    "lammps": scenario_lammps,
    "nyx": scenario_nyx,
    "overhead": scenario_overhead,
}

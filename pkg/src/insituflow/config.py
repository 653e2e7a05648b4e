"""Workflow configuration: YAML parsing, defaults, serialization and validation.

A configuration names tasks and the data each one reads (inports) and
writes (outports). Channels between tasks are never declared; they are
derived later by matching file and dataset patterns.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Union

import yaml

from .errors import ConfigError
from .patterns import patterns_intersect

TASK_KEYS = ("func", "taskCount", "nprocs", "nwriters", "actions", "args", "inports", "outports")
INPORT_KEYS = ("filename", "io_freq", "dsets")
OUTPORT_KEYS = ("filename", "dsets")
DSET_KEYS = ("name", "file", "memory")


@dataclass(frozen=True)
class All:
    """Serve every close; the producer waits for a ready consumer."""

    def __str__(self):
        return "all"


@dataclass(frozen=True)
class Some:
    """Serve every ``n``-th serve point."""

    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("Some(n) requires n >= 2")

    def __str__(self):
        return f"some({self.n})"


@dataclass(frozen=True)
class Latest:
    """Serve only when a consumer is waiting; otherwise keep the newest step."""

    def __str__(self):
        return "latest"


FlowControlStrategy = Union[All, Some, Latest]


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    file: int = 0
    memory: int = 1


@dataclass(frozen=True)
class PortSpec:
    filename: str
    dsets: tuple[DatasetSpec, ...]
    io_freq: int = 0


@dataclass(frozen=True)
class TaskSpec:
    func: str
    nprocs: int
    taskCount: int = 1
    nwriters: int | None = None
    inports: tuple[PortSpec, ...] = ()
    outports: tuple[PortSpec, ...] = ()
    actions: tuple[str, str] | None = None
    args: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.nwriters is None:
            object.__setattr__(self, "nwriters", self.nprocs)

    @property
    def total_procs(self) -> int:
        return self.taskCount * self.nprocs


@dataclass(frozen=True)
class WorkflowSpec:
    tasks: tuple[TaskSpec, ...]

    @property
    def total_ranks(self) -> int:
        return sum(t.total_procs for t in self.tasks)

    def task(self, func: str) -> TaskSpec:
        for t in self.tasks:
            if t.func == func:
                return t
        raise KeyError(func)


def strategy_of(port: PortSpec) -> FlowControlStrategy:
    """Map a port's ``io_freq`` to its flow-control strategy.

    >>> strategy_of(PortSpec("a.h5", (DatasetSpec("/x"),), io_freq=2))
    Some(n=2)
    """
    f = port.io_freq
    if f in (0, 1):
        return All()
    if f == -1:
        return Latest()
    if f >= 2:
        return Some(f)
    raise ConfigError(f"io_freq must be -1, 0, 1 or >= 2, got {f}")


# -- parsing -----------------------------------------------------------------

_scalars = yaml.constructor.SafeConstructor()


def _err(msg, node=None, where=None):
    if node is not None:
        mark = node.start_mark
        return ConfigError(msg, mark.line + 1, mark.column + 1, where)
    return ConfigError(msg, where=where)


def _scalar(node, where):
    if not isinstance(node, yaml.ScalarNode):
        raise _err("expected a scalar", node, where)
    return _scalars.construct_object(node)


def _mapping(node, allowed, where):
    if not isinstance(node, yaml.MappingNode):
        raise _err("expected a mapping", node, where)
    out = {}
    for knode, vnode in node.value:
        key = _scalar(knode, where)
        if key not in allowed:
            raise _err(f"unknown key {key!r} (allowed: {', '.join(allowed)})", knode, where)
        if key in out:
            raise _err(f"duplicate key {key!r}", knode, where)
        out[key] = vnode
    return out


def _sequence(node, where):
    if not isinstance(node, yaml.SequenceNode):
        raise _err("expected a sequence", node, where)
    return node.value


def _int(node, where, lo=None, hi=None):
    v = _scalar(node, where)
    if isinstance(v, bool) or not isinstance(v, int):
        raise _err(f"expected an integer, got {v!r}", node, where)
    if lo is not None and v < lo:
        raise _err(f"value {v} below minimum {lo}", node, where)
    if hi is not None and v > hi:
        raise _err(f"value {v} above maximum {hi}", node, where)
    return v


def _str(node, where):
    v = _scalar(node, where)
    if not isinstance(v, str) or not v:
        raise _err(f"expected a nonempty string, got {v!r}", node, where)
    return v


def _required(m, key, parent, where):
    if key not in m:
        raise _err(f"missing required field {key!r}", parent, where)
    return m[key]


def _parse_dset(node, where):
    m = _mapping(node, DSET_KEYS, where)
    name = _str(_required(m, "name", node, where), where)
    file = _int(m["file"], f"{where}.file", 0, 1) if "file" in m else 0
    memory = _int(m["memory"], f"{where}.memory", 0, 1) if "memory" in m else 1
    if file + memory < 1:
        raise _err("at least one of file/memory must be 1", node, where)
    return DatasetSpec(name, file, memory)


def _parse_port(node, where, inport):
    m = _mapping(node, INPORT_KEYS if inport else OUTPORT_KEYS, where)
    filename = _str(_required(m, "filename", node, where), where)
    io_freq = 0
    if "io_freq" in m:
        io_freq = _int(m["io_freq"], f"{where}.io_freq", -1)
    dnodes = _sequence(_required(m, "dsets", node, where), where)
    if not dnodes:
        raise _err("dsets must be nonempty", m["dsets"], where)
    dsets = []
    for k, dn in enumerate(dnodes):
        d = _parse_dset(dn, f"{where}.dsets[{k}]")
        if any(d.name == prev.name for prev in dsets):
            raise _err(f"duplicate dataset pattern {d.name!r}", dn, where)
        dsets.append(d)
    return PortSpec(filename, tuple(dsets), io_freq)


def _parse_task(node, where):
    m = _mapping(node, TASK_KEYS, where)
    func = _str(_required(m, "func", node, where), where)
    nprocs = _int(_required(m, "nprocs", node, where), f"{where}.nprocs", 1)
    task_count = _int(m["taskCount"], f"{where}.taskCount", 1) if "taskCount" in m else 1
    nwriters = _int(m["nwriters"], f"{where}.nwriters", 1) if "nwriters" in m else nprocs
    if nwriters > nprocs:
        raise _err(f"nwriters ({nwriters}) exceeds nprocs ({nprocs})", m["nwriters"], where)
    actions = None
    if "actions" in m:
        parts = _sequence(m["actions"], where)
        if len(parts) != 2:
            raise _err("actions must be [script, function]", m["actions"], where)
        actions = (_str(parts[0], where), _str(parts[1], where))
    args = {}
    if "args" in m:
        amap = m["args"]
        if not isinstance(amap, yaml.MappingNode):
            raise _err("args must be a mapping", amap, where)
        for kn, vn in amap.value:
            key = _str(kn, f"{where}.args")
            val = _scalar(vn, f"{where}.args.{key}")
            if not isinstance(val, (int, float, str, bool)):
                raise _err(f"args value for {key!r} must be a scalar", vn, where)
            args[key] = val
    inports = tuple(
        _parse_port(p, f"{where}.inports[{k}]", True)
        for k, p in enumerate(_sequence(m["inports"], where) if "inports" in m else ())
    )
    outports = tuple(
        _parse_port(p, f"{where}.outports[{k}]", False)
        for k, p in enumerate(_sequence(m["outports"], where) if "outports" in m else ())
    )
    return TaskSpec(func, nprocs, task_count, nwriters, inports, outports, actions, args)


def parse_workflow(text: str) -> WorkflowSpec:
    """Parse a configuration document into a :class:`WorkflowSpec`.

    Defaults are applied (``taskCount=1``, ``nwriters=nprocs``,
    ``io_freq=0``, ``file=0``, ``memory=1``). Raises :class:`ConfigError`
    with a line/column position on syntax or range errors.
    """
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        raise ConfigError(f"syntax error: {exc.problem}", mark.line + 1, mark.column + 1) from None
    if root is None:
        raise ConfigError("empty configuration")
    top = _mapping(root, ("tasks",), "document")
    tnodes = _sequence(_required(top, "tasks", root, "document"), "tasks")
    if not tnodes:
        raise _err("at least one task is required", top["tasks"], "tasks")
    tasks = []
    for k, tn in enumerate(tnodes):
        t = _parse_task(tn, f"tasks[{k}]")
        if any(t.func == prev.func for prev in tasks):
            raise _err(f"duplicate task name {t.func!r}", tn, f"tasks[{k}]")
        tasks.append(t)
    return WorkflowSpec(tuple(tasks))


def load_workflow(path) -> WorkflowSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_workflow(fh.read())


def to_dict(spec: WorkflowSpec) -> dict:
    """Plain-data form with every default stated explicitly."""

    def port(p, inport):
        d = {"filename": p.filename}
        if inport:
            d["io_freq"] = p.io_freq
        d["dsets"] = [{"name": s.name, "file": s.file, "memory": s.memory} for s in p.dsets]
        return d

    tasks = []
    for t in spec.tasks:
        d = {"func": t.func, "taskCount": t.taskCount, "nprocs": t.nprocs, "nwriters": t.nwriters}
        if t.actions is not None:
            d["actions"] = list(t.actions)
        if t.args:
            d["args"] = dict(t.args)
        if t.inports:
            d["inports"] = [port(p, True) for p in t.inports]
        if t.outports:
            d["outports"] = [port(p, False) for p in t.outports]
        tasks.append(d)
    return {"tasks": tasks}


def serialize_workflow(spec: WorkflowSpec) -> str:
    return yaml.safe_dump(to_dict(spec), sort_keys=False, default_flow_style=False)


# -- validation --------------------------------------------------------------


@dataclass(frozen=True)
class Issue:
    level: str  # "error" | "warning"
    where: str
    message: str

    def __str__(self):
        return f"{self.level}: {self.where}: {self.message}"


@dataclass
class ValidationReport:
    errors: list[Issue] = field(default_factory=list)
    warnings: list[Issue] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def to_text(self) -> str:
        lines = [str(i) for i in self.errors + self.warnings]
        lines.append(f"{len(self.errors)} error(s), {len(self.warnings)} warning(s)")
        return "\n".join(lines)

    def to_json(self) -> str:
        as_list = lambda xs: [{"where": i.where, "message": i.message} for i in xs]
        return json.dumps({"errors": as_list(self.errors), "warnings": as_list(self.warnings)}, indent=2)


def _dset_matches(out_port: PortSpec, in_port: PortSpec, dset: DatasetSpec) -> list[DatasetSpec]:
    if not patterns_intersect(out_port.filename, in_port.filename):
        return []
    return [o for o in out_port.dsets if patterns_intersect(o.name, dset.name)]


def validate(spec: WorkflowSpec) -> ValidationReport:
    """Check inport coverage, transport compatibility and cycles."""
    report = ValidationReport()
    edges: dict[int, set[int]] = {i: set() for i in range(len(spec.tasks))}
    for ci, consumer in enumerate(spec.tasks):
        for pk, inport in enumerate(consumer.inports):
            for dk, dset in enumerate(inport.dsets):
                where = f"tasks[{ci}] ({consumer.func}) inport {inport.filename!r} dset {dset.name!r}"
                found = False
                for pi, producer in enumerate(spec.tasks):
                    for outport in producer.outports:
                        for o in _dset_matches(outport, inport, dset):
                            found = True
                            edges[pi].add(ci)
                            if not ((o.memory and dset.memory) or (o.file and dset.file)):
                                report.errors.append(Issue(
                                    "error", where,
                                    f"no common transport with outport dset {o.name!r} of {producer.func}"))
                if found:
                    continue
                if dset.memory:
                    report.errors.append(Issue("error", where, "memory inport matches no outport"))
                else:
                    report.warnings.append(Issue("warning", where, "no producer; reads from filesystem"))
    for cycle in _cycles(edges):
        names = " -> ".join(spec.tasks[i].func for i in cycle + [cycle[0]])
        report.warnings.append(Issue(
            "warning", "graph", f"cycle {names}; flow-control deadlock avoidance is the user's responsibility"))
    return report


def _cycles(edges: dict[int, set[int]]) -> list[list[int]]:
    """One representative cycle per strongly connected component with a cycle."""
    index, low, on, stack, out = {}, {}, set(), [], []
    counter = [0]

    def visit(v):
        index[v] = low[v] = counter[0]
        counter[0] += 1
        stack.append(v)
        on.add(v)
        for w in sorted(edges[v]):
            if w not in index:
                visit(w)
                low[v] = min(low[v], low[w])
            elif w in on:
                low[v] = min(low[v], index[w])
        if low[v] == index[v]:
            comp = []
            while True:
                w = stack.pop()
                on.discard(w)
                comp.append(w)
                if w == v:
                    break
            if len(comp) > 1 or v in edges[v]:
                out.append(sorted(comp))

    for v in sorted(edges):
        if v not in index:
            visit(v)
    return sorted(out)

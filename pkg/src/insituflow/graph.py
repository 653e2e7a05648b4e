"""Task graph construction: ensemble expansion, port matching, rank layout."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

from .config import FlowControlStrategy, PortSpec, TaskSpec, WorkflowSpec, strategy_of
from .patterns import patterns_intersect

__all__ = [
    "TaskInstance", "Link", "TaskGraph", "patterns_intersect", "match_ports",
    "link_instances", "plan_ranks", "build_graph", "export_dot",
]


@dataclass(frozen=True)
class TaskInstance:
    task: TaskSpec = field(compare=False, repr=False)
    task_index: int
    instance_index: int
    start: int
    end: int

    @property
    def func(self) -> str:
        return self.task.func

    @property
    def nprocs(self) -> int:
        return self.end - self.start

    @property
    def nwriters(self) -> int:
        return self.task.nwriters

    @property
    def ranks(self) -> range:
        return range(self.start, self.end)

    @property
    def io_ranks(self) -> range:
        return range(self.start, self.start + self.task.nwriters)

    @property
    def label(self) -> str:
        return f"{self.func}[{self.instance_index}]"


@dataclass(frozen=True)
class Link:
    id: int
    producer: TaskInstance
    consumer: TaskInstance
    outport: PortSpec
    inport: PortSpec
    dset_patterns: tuple[tuple[str, str], ...]  # (outport pattern, inport pattern)
    strategy: FlowControlStrategy

    @property
    def filename_pattern(self) -> str:
        return self.outport.filename

    def transport_of(self, in_pattern: str) -> str:
        """'memory' or 'file' for the dataset pair selected by ``in_pattern``."""
        inp = next(d for d in self.inport.dsets if d.name == in_pattern)
        outs = [d for d in self.outport.dsets
                if (d.name, in_pattern) in self.dset_patterns]
        if inp.memory and any(o.memory for o in outs):
            return "memory"
        return "file"


@dataclass(frozen=True)
class TaskGraph:
    instances: tuple[TaskInstance, ...]
    links: tuple[Link, ...]

    @property
    def total_ranks(self) -> int:
        return self.instances[-1].end if self.instances else 0

    def instance_of_rank(self, rank: int) -> TaskInstance:
        for inst in self.instances:
            if inst.start <= rank < inst.end:
                return inst
        raise IndexError(rank)

    def outgoing(self, inst: TaskInstance) -> list[Link]:
        return [l for l in self.links if l.producer == inst]

    def incoming(self, inst: TaskInstance) -> list[Link]:
        return [l for l in self.links if l.consumer == inst]

    def to_dict(self) -> dict:
        return {
            "instances": [
                {"func": i.func, "instance": i.instance_index, "ranks": [i.start, i.end],
                 "io_ranks": [i.io_ranks.start, i.io_ranks.stop]}
                for i in self.instances
            ],
            "links": [
                {"id": l.id, "producer": l.producer.label, "consumer": l.consumer.label,
                 "filename": l.outport.filename, "consumer_filename": l.inport.filename,
                 "dsets": [list(p) for p in l.dset_patterns], "strategy": str(l.strategy)}
                for l in self.links
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def match_ports(spec: WorkflowSpec) -> list[tuple[TaskSpec, PortSpec, TaskSpec, PortSpec]]:
    """All (producer, outport, consumer, inport) pairs that share data.

    Filenames must intersect and at least one dataset pattern pair must
    intersect. Ordered by producer, outport, consumer, inport declaration.
    """
    out = []
    for producer in spec.tasks:
        for outport in producer.outports:
            for consumer in spec.tasks:
                for inport in consumer.inports:
                    if _dset_pairs(outport, inport):
                        out.append((producer, outport, consumer, inport))
    return out


def _dset_pairs(outport: PortSpec, inport: PortSpec) -> tuple[tuple[str, str], ...]:
    if not patterns_intersect(outport.filename, inport.filename):
        return ()
    return tuple(
        (o.name, i.name)
        for o in outport.dsets
        for i in inport.dsets
        if patterns_intersect(o.name, i.name)
    )


def link_instances(producer_count: int, consumer_count: int) -> list[tuple[int, int]]:
    """Round-robin pairing of ensemble instances: pair k is (k mod P, k mod C)."""
    if producer_count < 1 or consumer_count < 1:
        raise ValueError("instance counts must be >= 1")
    return [(k % producer_count, k % consumer_count)
            for k in range(max(producer_count, consumer_count))]


def plan_ranks(spec: WorkflowSpec) -> list[TaskInstance]:
    """Contiguous global rank ranges in task order, then instance order."""
    out = []
    start = 0
    for ti, task in enumerate(spec.tasks):
        for k in range(task.taskCount):
            out.append(TaskInstance(task, ti, k, start, start + task.nprocs))
            start += task.nprocs
    return out


def build_graph(spec: WorkflowSpec) -> TaskGraph:
    instances = plan_ranks(spec)
    by_task: dict[int, list[TaskInstance]] = {}
    for inst in instances:
        by_task.setdefault(inst.task_index, []).append(inst)
    index = {id(t): k for k, t in enumerate(spec.tasks)}

    links = []
    for producer, outport, consumer, inport in match_ports(spec):
        pinst = by_task[index[id(producer)]]
        cinst = by_task[index[id(consumer)]]
        pairs = _dset_pairs(outport, inport)
        strategy = strategy_of(inport)
        for p, c in link_instances(len(pinst), len(cinst)):
            links.append(Link(len(links), pinst[p], cinst[c], outport, inport, pairs, strategy))
    return TaskGraph(tuple(instances), tuple(links))


def _quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def export_dot(graph: TaskGraph) -> str:
    lines = ["digraph workflow {", "  rankdir=LR;", "  node [shape=box];"]
    ids = {inst: f"n{k}" for k, inst in enumerate(graph.instances)}
    for inst in graph.instances:
        label = f"{inst.label} ({inst.nprocs}, io={inst.nwriters})"
        lines.append(f"  {ids[inst]} [label={_quote(label)}];")
    for link in graph.links:
        dsets = ", ".join(sorted({i for _, i in link.dset_patterns}))
        label = f"{dsets} [{link.strategy}]"
        lines.append(f"  {ids[link.producer]} -> {ids[link.consumer]} [label={_quote(label)}];")
    lines.append("}")
    return "\n".join(lines) + "\n"

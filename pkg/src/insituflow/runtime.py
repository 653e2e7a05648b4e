"""Workflow execution: one worker per global rank over a message fabric.

Each rank sees only its task instance's restricted world through a
:class:`RankContext`. Producer io-ranks serve data on file close (or at
``serve_all`` points when custom actions are installed); consumers fetch
on open. Time spent by every rank is partitioned into compute, idle and
transfer segments so the report doubles as Gantt data.
"""
from __future__ import annotations

import enum
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from . import transport as tp
from .datamodel import DataObjectTree, Selection, decompose, deserialize_file, serialize_file
from .errors import DataModelError, DeadlockError, RegistryError, TaskError, WorkflowError
from .fabric import Message, RealFabric, VirtualFabric
from .graph import TaskGraph, TaskInstance
from .patterns import glob_match, patterns_intersect

log = logging.getLogger("insituflow")

STATEFUL = "stateful"
STATELESS = "stateless"
BCAST_FILES = "BCAST_FILES"
LOCAL = "LOCAL"


def _never(_m) -> bool:
    return False


class HookPoint(enum.Enum):
    BEFORE_FILE_OPEN = "BeforeFileOpen"
    AFTER_FILE_OPEN = "AfterFileOpen"
    BEFORE_FILE_CLOSE = "BeforeFileClose"
    AFTER_FILE_CLOSE = "AfterFileClose"
    AFTER_DATASET_WRITE = "AfterDatasetWrite"


@dataclass(frozen=True)
class HookEvent:
    """Argument passed to every hook callback."""

    point: HookPoint
    filename: str
    dataset: str | None = None


# -- registries ----------------------------------------------------------------


@dataclass(frozen=True)
class TaskDef:
    name: str
    body: Callable[["RankContext"], None]
    kind: str = STATEFUL


class TaskRegistry:
    """Maps a config ``func`` name to a task body and its consumer kind."""

    def __init__(self, defs=()):
        self._defs: dict[str, TaskDef] = {}
        for d in defs:
            self._defs[d.name] = d

    def register(self, name: str, body=None, *, kind: str = STATEFUL):
        if kind not in (STATEFUL, STATELESS):
            raise ValueError(f"kind must be {STATEFUL!r} or {STATELESS!r}")

        def deco(fn):
            self._defs[name] = TaskDef(name, fn, kind)
            return fn

        return deco(body) if body is not None else deco

    def resolve(self, name: str) -> TaskDef:
        try:
            return self._defs[name]
        except KeyError:
            raise RegistryError(f"task {name!r} is not registered "
                                f"(known: {', '.join(sorted(self._defs)) or 'none'})") from None

    def copy(self) -> "TaskRegistry":
        return TaskRegistry(self._defs.values())

    def names(self) -> list[str]:
        return sorted(self._defs)

    def __contains__(self, name):
        return name in self._defs


class ActionRegistry:
    """Two-part names (script id, function id) to hook setup functions."""

    def __init__(self):
        self._setups: dict[tuple[str, str], Callable] = {}

    def register(self, script_id: str, function_id: str, setup: Callable | None = None):
        def deco(fn):
            key = (script_id, function_id)
            if key in self._setups:
                raise RegistryError(f"action {script_id}.{function_id} already registered")
            self._setups[key] = fn
            return fn

        return deco(setup) if setup is not None else deco

    def resolve(self, key) -> Callable:
        key = tuple(key)
        try:
            return self._setups[key]
        except KeyError:
            raise RegistryError(f"action {'.'.join(key)} is not registered") from None

    def __contains__(self, key):
        return tuple(key) in self._setups


ACTIONS = ActionRegistry()


def register_action(script_id: str, function_id: str, setup: Callable | None = None):
    """Register ``setup(vol, local_rank)`` in the process-wide action registry."""
    return ACTIONS.register(script_id, function_id, setup)


# -- report --------------------------------------------------------------------


@dataclass(frozen=True)
class Event:
    time: float
    rank: int
    seq: int
    kind: str
    filename: str | None = None
    timestep: int | None = None
    bytes: int = 0
    channel: int | None = None


@dataclass(frozen=True)
class RunReport:
    clock: str
    events: tuple[Event, ...]
    completion_time: float
    consumed: dict[int, tuple[int, ...]]
    dropped: dict[int, int]
    bytes_moved: dict[int, int]
    segments: dict[int, tuple[tuple[float, float, str], ...]]
    channels: dict[int, dict]
    ranks: dict[int, str]

    @property
    def idle(self) -> dict[int, float]:
        return {r: sum(e - s for s, e, k in segs if k == "idle") for r, segs in self.segments.items()}

    def totals(self, rank: int) -> dict[str, float]:
        out = {"compute": 0.0, "idle": 0.0, "transfer": 0.0}
        for s, e, k in self.segments[rank]:
            out[k] += e - s
        return out

    def events_of(self, kind: str, channel: int | None = None) -> list[Event]:
        return [e for e in self.events if e.kind == kind and (channel is None or e.channel == channel)]

    def to_dict(self) -> dict:
        return {
            "clock": self.clock,
            "completion_time": self.completion_time,
            "channels": {str(k): v for k, v in self.channels.items()},
            "consumed": {str(k): list(v) for k, v in self.consumed.items()},
            "dropped": {str(k): v for k, v in self.dropped.items()},
            "bytes_moved": {str(k): v for k, v in self.bytes_moved.items()},
            "ranks": {str(k): v for k, v in self.ranks.items()},
            "segments": {str(r): [list(s) for s in segs] for r, segs in self.segments.items()},
            "events": [[e.time, e.rank, e.seq, e.kind, e.filename, e.timestep, e.bytes, e.channel]
                       for e in self.events],
        }

    def to_json(self, indent=None) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("time,rank,kind,filename,timestep,bytes\n")
        for e in self.events:
            fn = "" if e.filename is None else e.filename
            ts = "" if e.timestep is None else e.timestep
            buf.write(f"{e.time!r},{e.rank},{e.kind},{fn},{ts},{e.bytes}\n")
        return buf.getvalue()

    def gantt_csv(self) -> str:
        buf = io.StringIO()
        buf.write("rank,start,end,kind\n")
        for r in sorted(self.segments):
            for s, e, k in self.segments[r]:
                buf.write(f"{r},{s!r},{e!r},{k}\n")
        return buf.getvalue()


# -- per-rank engine -----------------------------------------------------------


class _Rank:
    """State owned by one rank's worker: channels, clock accounting, event log."""

    def __init__(self, engine: "_Engine", rank: int, inst: TaskInstance):
        self.engine = engine
        self.fabric = engine.fabric
        self.store = engine.store
        self.rank = rank
        self.inst = inst
        self.local_rank = rank - inst.start
        self.is_io = rank in inst.io_ranks
        self.out_channels: list[tp.ProducerChannel] = []
        self.in_channels: list[tp.ConsumerChannel] = []
        self.events: list[Event] = []
        self.segments: list[list] = []
        self.mark = 0.0
        self._seq = 0
        self.retained: dict[str, DataObjectTree] = {}
        self.dirty: list[str] = []
        self.close_counts: dict[str, int] = {}
        self.serve_on_close = inst.task.actions is None
        self.vol: ControlHandle | None = None

    # clock and accounting

    def now(self) -> float:
        return self.fabric.time()

    def _seg(self, kind: str, until: float) -> None:
        if until <= self.mark:
            return
        if self.segments and self.segments[-1][2] == kind and self.segments[-1][1] == self.mark:
            self.segments[-1][1] = until
        else:
            self.segments.append([self.mark, until, kind])
        self.mark = until

    def log(self, kind, filename=None, timestep=None, nbytes=0, channel=None) -> None:
        t = self.now()
        self.events.append(Event(t, self.rank, self._seq, kind, filename, timestep, int(nbytes), channel))
        self._seq += 1
        if log.isEnabledFor(logging.DEBUG):
            log.debug("t=%s rank=%d %s %s ts=%s bytes=%d ch=%s", t, self.rank, kind, filename,
                      timestep, nbytes, channel)

    # messaging

    def send(self, dst: int, kind: str, channel, tag, body, nbytes: int = 0) -> None:
        t = self.now()
        self._seg("compute", t)
        xfer = self.fabric.cost(nbytes)
        self.fabric.post(Message(self.rank, dst, kind, channel, tag, body, nbytes, sent=t, xfer=xfer))
        self.log("send:" + kind, None, None, nbytes, channel)
        if xfer > 0:
            self.fabric.wait(self.rank, _never, deadline=t + xfer, why="sending")
            self._seg("transfer", self.now())

    def _service_for(self, m) -> tp.ProducerChannel | None:
        for ch in self.out_channels:
            if tp.service_match(ch, m):
                return ch
        return None

    def wait(self, match, service: bool = True, why: str = "", deadline=None, activity: str = "idle"):
        """Block until a message satisfies ``match`` (or ``deadline`` passes).

        With ``service`` set, consumer requests for buffered Latest data are
        answered in the background while waiting.
        """
        def pred(m):
            return match(m) or self._service_for(m) is not None

        while True:
            serviced = service and any(ch.latest_buffer is not None for ch in self.out_channels)
            start = self.now()
            self._seg("compute", start)
            m = self.fabric.wait(self.rank, pred if serviced else match, deadline, why)
            t = self.now()
            if m is None:
                self._seg(activity, t)
                return None
            if m.xfer > 0:
                self._seg(activity, max(self.mark, m.delivered - m.xfer))
            self._seg("transfer" if m.xfer > 0 else activity, t)
            if match(m):
                return m
            tp.service(self, self._service_for(m), m)

    def poll(self, match):
        return self.fabric.wait(self.rank, match, self.now(), "poll")

    def compute(self, duration: float) -> None:
        if duration < 0:
            raise ValueError("compute duration must be >= 0")
        self.log("compute_begin")
        end = self.now() + duration
        while self.now() < end:
            self.wait(_never, why="computing", deadline=end, activity="compute")
        self.log("compute_end")

    # producer side

    def _hook(self, point: HookPoint, filename: str, dataset: str | None = None) -> None:
        fn = self.vol._hooks.get(point) if self.vol is not None else None
        if fn is None:
            return
        self.log("hook:" + point.value, filename)
        fn(HookEvent(point, filename, dataset))

    def _serve_tree(self, tree: DataObjectTree) -> None:
        chans = [ch for ch in self.out_channels if ch.accepts(tree.filename)]
        if chans and tree.is_open:
            tree = tree.copy()
        for ch in chans:
            tp.serve_point(self, ch, tree)

    def _mark_dirty(self, filename: str) -> None:
        if filename not in self.dirty:
            self.dirty.append(filename)

    def open_for_write(self, filename: str, append: bool) -> "File":
        self._hook(HookPoint.BEFORE_FILE_OPEN, filename)
        tree = self.retained.get(filename) if append else None
        if tree is None:
            tree = DataObjectTree(filename)
            self.retained[filename] = tree
        elif not tree.is_open:
            tree.reopen()
        self.log("open", filename)
        self._hook(HookPoint.AFTER_FILE_OPEN, filename)
        return File(self, tree)

    def close_file(self, tree: DataObjectTree) -> None:
        if not tree.is_open:
            raise DataModelError(f"close of {tree.filename!r} which is not open")
        fn = tree.filename
        self._hook(HookPoint.BEFORE_FILE_CLOSE, fn)
        tree.close()
        self.log("close", fn)
        if self.serve_on_close:
            self._serve_tree(tree)
            if fn in self.dirty:
                self.dirty.remove(fn)
            self.retained.pop(fn, None)
        self.close_counts[fn] = self.close_counts.get(fn, 0) + 1
        self.vol._current = fn
        self._hook(HookPoint.AFTER_FILE_CLOSE, fn)

    def serve_all(self) -> None:
        if not self.is_io:
            raise TaskError("serve_all called on a rank that performs no I/O", self.rank)
        for fn in list(self.dirty):
            tree = self.retained.get(fn)
            if tree is not None:
                self._serve_tree(tree)
        self.dirty.clear()

    def broadcast_files(self) -> None:
        io = list(self.inst.io_ranks)
        root = io[0]
        if self.rank == root:
            if not self.retained:
                raise TaskError("broadcast_files: no retained file on local rank 0", self.rank)
            blobs = [serialize_file(t, allow_open=True) for t in self.retained.values()]
            size = sum(len(b) for b in blobs)
            for r in io[1:]:
                self.send(r, BCAST_FILES, None, None, blobs, nbytes=size)
            self.log("broadcast_send", None, None, size)
            return
        if self.rank not in io:
            return
        m = self.wait(lambda m: m.kind == BCAST_FILES and m.src == root, why="broadcast from local rank 0")
        for blob in m.body:
            tree = deserialize_file(blob)
            self.retained[tree.filename] = tree
        self.log("broadcast_recv", None, None, sum(len(b) for b in m.body))

    # task end

    def finish(self) -> None:
        for ch in self.out_channels:
            tp.finish_channel(self, ch)
        for ch in self.in_channels:
            while tp.fetch_file(self, ch, event="drain") is not None:
                pass


# -- user-facing handles ---------------------------------------------------------


class ControlHandle:
    """Per-rank I/O control surface handed to custom actions (``vol``)."""

    def __init__(self, rt: _Rank):
        self._rt = rt
        self._hooks: dict[HookPoint, Callable] = {}
        self._current: str | None = None

    @property
    def file_close_counter(self) -> int:
        """Close count of the file most recently closed on this rank."""
        if self._current is None:
            return 0
        return self._rt.close_counts.get(self._current, 0)

    @property
    def close_counts(self) -> dict[str, int]:
        return dict(self._rt.close_counts)

    def set_hook(self, point: HookPoint | str, fn: Callable[[HookEvent], None]) -> None:
        self._hooks[HookPoint(point)] = fn

    def set_before_file_open(self, fn):
        self.set_hook(HookPoint.BEFORE_FILE_OPEN, fn)

    def set_after_file_open(self, fn):
        self.set_hook(HookPoint.AFTER_FILE_OPEN, fn)

    def set_before_file_close(self, fn):
        self.set_hook(HookPoint.BEFORE_FILE_CLOSE, fn)

    def set_after_file_close(self, fn):
        self.set_hook(HookPoint.AFTER_FILE_CLOSE, fn)

    def set_after_dataset_write(self, fn):
        self.set_hook(HookPoint.AFTER_DATASET_WRITE, fn)

    def serve_all(self, *_flags) -> None:
        """Serve every retained file modified since its last serve."""
        self._rt.serve_all()

    def clear_files(self) -> None:
        self._rt.retained.clear()
        self._rt.dirty.clear()

    def broadcast_files(self) -> None:
        self._rt.broadcast_files()

    @property
    def retained_files(self) -> list[str]:
        return list(self._rt.retained)


class DatasetHandle:
    def __init__(self, rt: _Rank, ds):
        self._rt = rt
        self.dataset = ds

    @property
    def name(self):
        return self.dataset.name

    @property
    def extents(self):
        return self.dataset.extents

    def write(self, values, selection: Selection | None = None) -> None:
        sel = selection if selection is not None else self.dataset.selection
        self.dataset.write_selection(sel, values)
        self._rt._mark_dirty(self.dataset._tree.filename)
        self._rt.log("dataset_write", self.dataset._tree.filename, None, sel.size)
        self._rt._hook(HookPoint.AFTER_DATASET_WRITE, self.dataset._tree.filename, self.dataset.name)

    def read(self, selection: Selection | None = None) -> np.ndarray:
        return self.dataset.read_selection(selection)


class File:
    """Writable handle for one open file on an io-rank."""

    def __init__(self, rt: _Rank, tree: DataObjectTree):
        self._rt = rt
        self.tree = tree

    @property
    def filename(self) -> str:
        return self.tree.filename

    def create_group(self, path: str) -> None:
        self.tree.create_group(path)

    def create_dataset(self, path, dtype, extents, selection: Selection | None = None) -> DatasetHandle:
        return DatasetHandle(self._rt, self.tree.create_dataset(path, dtype, extents, selection))

    def __getitem__(self, path) -> DatasetHandle:
        return DatasetHandle(self._rt, self.tree.get(path))

    def __contains__(self, path) -> bool:
        return path in self.tree

    def close(self) -> None:
        self._rt.close_file(self.tree)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, *_):
        if exc_type is None and self.tree.is_open:
            self.close()


class _NullDataset:
    def __init__(self, name, extents):
        self.name = name
        self.extents = tuple(extents)

    def write(self, values, selection=None) -> None:
        pass


class NullFile:
    """What ranks outside the io subset get: every operation is a no-op."""

    def __init__(self, filename: str):
        self.filename = filename
        self.tree = None
        self._open = True

    def create_group(self, path):
        pass

    def create_dataset(self, path, dtype, extents, selection=None):
        return _NullDataset(path, extents)

    def __contains__(self, path):
        return False

    def close(self):
        if not self._open:
            raise DataModelError(f"close of {self.filename!r} which is not open")
        self._open = False

    def __enter__(self):
        return self

    def __exit__(self, exc_type, *_):
        if exc_type is None and self._open:
            self.close()


class LocalComm:
    """Point-to-point and collectives within one task instance (local ranks only)."""

    def __init__(self, rt: _Rank):
        self._rt = rt
        self.rank = rt.local_rank
        self.size = rt.inst.nprocs

    def _g(self, local: int) -> int:
        if not 0 <= local < self.size:
            raise ValueError(f"local rank {local} outside [0, {self.size})")
        return self._rt.inst.start + local

    def send(self, obj, dest: int, tag=0) -> None:
        nbytes = obj.nbytes if isinstance(obj, np.ndarray) else 0
        self._rt.send(self._g(dest), LOCAL, None, ("p2p", tag), obj, nbytes)

    def recv(self, source: int, tag=0):
        src = self._g(source)
        m = self._rt.wait(lambda m: m.kind == LOCAL and m.src == src and m.tag == ("p2p", tag),
                          why=f"local recv from {source}")
        return m.body

    def bcast(self, obj, root: int = 0):
        if self.rank == root:
            nbytes = obj.nbytes if isinstance(obj, np.ndarray) else 0
            for r in range(self.size):
                if r != root:
                    self._rt.send(self._g(r), LOCAL, None, ("bcast",), obj, nbytes)
            return obj
        src = self._g(root)
        return self._rt.wait(lambda m: m.kind == LOCAL and m.src == src and m.tag == ("bcast",),
                             why="local bcast").body

    def gather(self, obj, root: int = 0):
        if self.rank != root:
            nbytes = obj.nbytes if isinstance(obj, np.ndarray) else 0
            self._rt.send(self._g(root), LOCAL, None, ("gather",), obj, nbytes)
            return None
        out = []
        for r in range(self.size):
            if r == root:
                out.append(obj)
                continue
            src = self._g(r)
            out.append(self._rt.wait(lambda m, s=src: m.kind == LOCAL and m.src == s and m.tag == ("gather",),
                                     why="local gather").body)
        return out

    def barrier(self) -> None:
        self.gather(None)
        self.bcast(None)


class RankContext:
    """Everything a task body may observe: its restricted world and I/O entry points."""

    def __init__(self, rt: _Rank, vol: ControlHandle, designated=None):
        self._rt = rt
        self.rank = rt.local_rank
        self.size = rt.inst.nprocs
        self.func = rt.inst.func
        self.instance = rt.inst.instance_index
        self.nwriters = rt.inst.nwriters
        self.is_io_rank = rt.is_io
        self.args: dict[str, Any] = dict(rt.inst.task.args)
        self.outports = tuple(p.filename for p in rt.inst.task.outports)
        self.vol = vol
        self.comm = LocalComm(rt)
        self._designated = designated  # (channel, filename) for stateless invocations
        self._fetched = False

    @property
    def filename(self) -> str | None:
        return None if self._designated is None else self._designated[1]

    def view(self) -> dict:
        """The observable identity of this context (used for restricted-world checks)."""
        return {"rank": self.rank, "size": self.size, "func": self.func, "instance": self.instance,
                "nwriters": self.nwriters, "is_io_rank": self.is_io_rank, "args": dict(self.args),
                "outports": self.outports}

    def now(self) -> float:
        return self._rt.now()

    def compute(self, duration: float) -> None:
        self._rt.compute(duration)

    def io_block(self, extents) -> Selection:
        """This io-rank's block of a dataset with the given extents."""
        if not self.is_io_rank:
            raise TaskError("io_block on a rank outside the io subset", self._rt.rank)
        return decompose(tuple(extents), self.nwriters)[self.rank]

    def open_file(self, name: str | None = None, mode: str = "r"):
        """Open a file.

        ``"w"`` creates (truncates) and ``"a"`` reopens this rank's retained
        copy; both return :class:`NullFile` on ranks outside the io subset.
        ``"r"`` fetches the next file from an incoming channel and returns a
        closed :class:`DataObjectTree` holding this rank's blocks, or None
        once every producer has finished.
        """
        if mode in ("w", "a"):
            if name is None:
                raise ValueError("a filename is required for writing")
            if not self.is_io_rank:
                return NullFile(name)
            return self._rt.open_for_write(name, mode == "a")
        if mode != "r":
            raise ValueError(f"unknown mode {mode!r}")
        rt = self._rt
        if self._designated is not None:
            if self._fetched:
                raise TaskError("a stateless body may fetch only one file per invocation", rt.rank)
            ch, fn = self._designated
            if name is not None and not glob_match(name, fn) and name != fn:
                raise TaskError(f"stateless invocation for {fn!r} cannot open {name!r}", rt.rank)
            self._fetched = True
            rt._hook(HookPoint.BEFORE_FILE_OPEN, fn)
            tree = tp.fetch_file(rt, ch)
            rt._hook(HookPoint.AFTER_FILE_OPEN, fn)
            return tree
        chans = [ch for ch in rt.in_channels
                 if name is None or patterns_intersect(name, ch.link.inport.filename)]
        if not chans:
            if name is None:
                return None
            rt._hook(HookPoint.BEFORE_FILE_OPEN, name)
            tree = rt.store.read(name)
            rt.log("file_read", name, tree.timestep, tree.nbytes)
            rt._hook(HookPoint.AFTER_FILE_OPEN, name)
            return tree
        rt._hook(HookPoint.BEFORE_FILE_OPEN, name or "")
        tree = None
        n = len(chans)
        for _ in range(n):
            k = rt.engine.rr.get(rt.rank, 0) % n
            rt.engine.rr[rt.rank] = k + 1
            ch = chans[k]
            if ch.ended:
                continue
            tree = tp.fetch_file(rt, ch)
            if tree is not None:
                break
        if tree is None:
            # a channel may have ended during the sweep; make sure all are done
            for ch in chans:
                if not ch.ended:
                    tree = tp.fetch_file(rt, ch)
                    if tree is not None:
                        break
        rt._hook(HookPoint.AFTER_FILE_OPEN, tree.filename if tree is not None else (name or ""))
        return tree


# -- driver --------------------------------------------------------------------


class _Engine:
    def __init__(self, graph, fabric, store):
        self.graph = graph
        self.fabric = fabric
        self.store = store
        self.rr: dict[int, int] = {}


def _make_vol(rt: _Rank, setup) -> ControlHandle:
    vol = ControlHandle(rt)
    rt.vol = vol
    if setup is not None:
        setup(vol, rt.local_rank)
    return vol


def _rank_main(rt: _Rank, tdef: TaskDef, setup) -> None:
    rt.log("task_start")
    if tdef.kind == STATEFUL or not rt.in_channels:
        vol = _make_vol(rt, setup)
        tdef.body(RankContext(rt, vol))
    else:
        k = 0
        chans = rt.in_channels
        while not all(ch.ended for ch in chans):
            ch = chans[k % len(chans)]
            k += 1
            if ch.ended:
                continue
            names = tp.query_more_files(rt, ch)
            if names is tp.ALL_DONE_RESULT:
                continue
            for fn in names:
                vol = _make_vol(rt, setup)
                ctx = RankContext(rt, vol, (ch, fn))
                rt.log("invoke", fn)
                tdef.body(ctx)
                if not ctx._fetched:
                    tp.fetch_file(rt, ch, event="drain")
        if rt.vol is None:
            _make_vol(rt, setup)
    rt.finish()
    rt.log("task_end")


def run(graph: TaskGraph, tasks: TaskRegistry, actions: ActionRegistry | None = None,
        clock: str = "virtual", latency: float = 0.0, per_byte: float = 0.0,
        storage: str | None = None, unit: float = 0.001, timeout: float | None = 60.0) -> RunReport:
    """Execute ``graph`` with one worker per global rank and return the run report.

    Raises :class:`RegistryError` before launch for unknown task or action
    names, :class:`TaskError` when a body fails and :class:`DeadlockError`
    when every live rank blocks (virtual clock only). Both carry the partial
    report.
    """
    actions = ACTIONS if actions is None else actions
    defs = {}
    setups = {}
    for inst in graph.instances:
        defs[inst] = tasks.resolve(inst.func)
        setups[inst] = actions.resolve(inst.task.actions) if inst.task.actions else None

    n = graph.total_ranks
    if clock == "virtual":
        fabric = VirtualFabric(n, latency=latency, per_byte=per_byte)
    elif clock == "real":
        fabric = RealFabric(n, unit=unit, timeout=timeout)
    else:
        raise ValueError(f"clock must be 'virtual' or 'real', got {clock!r}")
    engine = _Engine(graph, fabric, tp.FileStore(storage))

    ranks: list[_Rank] = []
    for inst in graph.instances:
        for r in inst.ranks:
            ranks.append(_Rank(engine, r, inst))
    for link in graph.links:
        io = list(link.producer.io_ranks)
        cons = list(link.consumer.ranks)
        for r in io:
            ranks[r].out_channels.append(tp.ProducerChannel(link, io, cons, r))
        for r in cons:
            ranks[r].in_channels.append(tp.ConsumerChannel(link, io, cons, r))

    bodies = [(lambda rt=rt: _rank_main(rt, defs[rt.inst], setups[rt.inst])) for rt in ranks]
    try:
        fabric.run(bodies)
    except DeadlockError as exc:
        exc.report = _report(graph, ranks, clock)
        raise
    except WorkflowError as exc:
        raise TaskError(str(exc), None, _report(graph, ranks, clock)) from exc
    if fabric.errors:
        r = min(fabric.errors)
        err = fabric.errors[r]
        label = ranks[r].inst.label
        raise TaskError(f"rank {r} ({label}, local rank {ranks[r].local_rank}): "
                        f"{type(err).__name__}: {err}", r, _report(graph, ranks, clock)) from err
    return _report(graph, ranks, clock)


def _report(graph: TaskGraph, ranks: list[_Rank], clock: str) -> RunReport:
    events = sorted((e for rt in ranks for e in rt.events), key=lambda e: (e.time, e.rank, e.seq))
    completion = max((e.time for e in events), default=0.0)
    segments = {}
    for rt in ranks:
        rt._seg("idle", completion)
        segments[rt.rank] = tuple((s, e, k) for s, e, k in rt.segments)
    consumed, dropped, moved, channels = {}, {}, {}, {}
    for link in graph.links:
        lead_c = link.consumer.start
        lead_p = link.producer.io_ranks.start
        consumed[link.id] = tuple(e.timestep for e in ranks[lead_c].events
                                  if e.kind == "fetch" and e.channel == link.id)
        pch = next(ch for ch in ranks[lead_p].out_channels if ch.id == link.id)
        dropped[link.id] = pch.dropped
        moved[link.id] = sum(e.bytes for e in events if e.kind == "send:PIECE" and e.channel == link.id)
        channels[link.id] = {"producer": link.producer.label, "consumer": link.consumer.label,
                             "filename": link.outport.filename, "strategy": str(link.strategy)}
    labels = {rt.rank: rt.inst.label for rt in ranks}
    return RunReport(clock, tuple(events), completion, consumed, dropped, moved, segments, channels, labels)

"""M:N dataset redistribution between rank groups and flow control.

A channel joins the io-ranks of one producer instance to all ranks of one
consumer instance. The lowest io-rank (the *leader*) owns the channel's
flow-control state: it collects consumer requests, makes every serve
decision, and relays each decision to the other io-ranks, so all io-ranks
of a producer always agree.

Serving one file (``serial`` s) is the following exchange:

1. every producer io-rank sends OWNERSHIP (path -> owned block) to every
   consumer rank;
2. each consumer rank computes its target block and sends one PIECE_REQ
   per (path, producer) whose owned block intersects it;
3. producers answer each request with a PIECE carrying the payload;
4. consumers assemble their local blocks.

Producers know how many requests to expect because the decomposition on
both sides is a pure function of the extents and the group sizes.
"""
from __future__ import annotations

import enum
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .config import All, FlowControlStrategy, Latest, Some
from .datamodel import DTYPES, DataObjectTree, Dataset, Selection, decompose, deserialize_file, intersect, serialize_file
from .errors import TransportError
from .patterns import glob_match

if TYPE_CHECKING:
    from .graph import Link

WIRE_VERSION = 1

READY = "READY"
OWNERSHIP = "OWNERSHIP"
PIECE_REQ = "PIECE_REQ"
PIECE = "PIECE"
QUERY_MORE = "QUERY_MORE"
MORE = "MORE"
ALL_DONE = "ALL_DONE"
END = "END"
DECISION = "DECISION"  # leader -> other io-ranks of the same producer

REQUESTS = (READY, QUERY_MORE)
TERMINAL = (END, ALL_DONE)


class Decision(enum.Enum):
    SERVE = "serve"
    SKIP = "skip"
    BUFFER = "buffer"


class AllDone:
    """Sentinel returned by :func:`query_more_files` once a producer is finished."""

    def __repr__(self):
        return "AllDone"


ALL_DONE_RESULT = AllDone()


def apply_flow_control(strategy: FlowControlStrategy, serve_counter: int,
                       has_pending_request: bool, is_final_timestep: bool) -> Decision:
    """Decide what happens to the data at one serve point.

    ``serve_counter`` counts serve points on the channel including this one.
    """
    if serve_counter < 1:
        raise ValueError("serve_counter counts the current serve point and must be >= 1")
    if isinstance(strategy, All):
        return Decision.SERVE
    if isinstance(strategy, Some):
        if serve_counter % strategy.n == 0 or is_final_timestep:
            return Decision.SERVE
        return Decision.SKIP
    if isinstance(strategy, Latest):
        if has_pending_request or is_final_timestep:
            return Decision.SERVE
        return Decision.BUFFER
    raise TypeError(f"unknown strategy {strategy!r}")


# -- channel state -------------------------------------------------------------


@dataclass
class ProducerChannel:
    """Per-io-rank view of one outgoing link."""

    link: Link
    io_ranks: list[int]
    consumer_ranks: list[int]
    rank: int
    serve_counter: int = 0
    serial: int = 0
    pending_requests: deque = field(default_factory=deque)
    latest_buffer: tuple[int, DataObjectTree] | None = None
    retained: tuple[int, DataObjectTree] | None = None
    dropped: int = 0
    byte_counter: int = 0
    last_timestep: int = 0

    @property
    def id(self) -> int:
        return self.link.id

    @property
    def leader(self) -> bool:
        return self.rank == self.io_ranks[0]

    @property
    def io_index(self) -> int:
        return self.io_ranks.index(self.rank)

    def accepts(self, filename: str) -> bool:
        return glob_match(self.link.outport.filename, filename) and glob_match(
            self.link.inport.filename, filename)


@dataclass
class ConsumerChannel:
    """Per-consumer-rank view of one incoming link."""

    link: Link
    io_ranks: list[int]
    consumer_ranks: list[int]
    rank: int
    serial: int = 0
    ended: bool = False
    end_seen: bool = False  # terminal arrived while the last file was still being collected

    @property
    def id(self) -> int:
        return self.link.id

    @property
    def leader(self) -> bool:
        return self.rank == self.consumer_ranks[0]

    @property
    def index(self) -> int:
        return self.consumer_ranks.index(self.rank)


@dataclass
class TransferSummary:
    channel: int
    filename: str
    timestep: int
    bytes: int = 0
    pieces: dict[int, int] = field(default_factory=dict)  # peer rank -> piece count


class FileStore:
    """Files written in file-transport mode, shared by all ranks of a run.

    Each io-rank contributes the blocks it owns; the container is encoded
    once every io-rank has contributed. Optionally mirrored to ``directory``.
    """

    def __init__(self, directory=None):
        self.directory = directory
        self.files: dict[str, bytes] = {}
        self._partial: dict[tuple, tuple[DataObjectTree, int]] = {}
        self._cache: dict[str, tuple[bytes, DataObjectTree]] = {}
        self._lock = threading.Lock()

    def contribute(self, key, filename, timestep, nwriters, blocks) -> None:
        with self._lock:
            tree, count = self._partial.get(key, (None, 0))
            if tree is None:
                tree = DataObjectTree(filename)
                tree.timestep = timestep
            for ds, sel in blocks:
                if ds.name not in tree:
                    tree.create_dataset(ds.name, ds.dtype, ds.extents)
                tree.get(ds.name).write_selection(sel, ds.read_selection(sel))
            count += 1
            if count < nwriters:
                self._partial[key] = (tree, count)
                return
            self._partial.pop(key, None)
            tree.close()
            self.write(filename, serialize_file(tree))

    def write(self, filename: str, data: bytes) -> None:
        self.files[filename] = data
        if self.directory is not None:
            import os

            path = os.path.join(self.directory, filename)
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
            with open(path, "wb") as fh:
                fh.write(data)

    def read(self, filename: str) -> DataObjectTree:
        with self._lock:
            data = self.files.get(filename)
            if data is None:
                import os

                path = filename if self.directory is None else os.path.join(self.directory, filename)
                try:
                    with open(path, "rb") as fh:
                        data = fh.read()
                except OSError as exc:
                    raise TransportError(f"file {filename!r} not found: {exc}") from None
            cached = self._cache.get(filename)
            if cached is not None and cached[0] is data:
                return cached[1]
            tree = deserialize_file(data)
            self._cache[filename] = (data, tree)
            return tree


# -- helpers -------------------------------------------------------------------


def _served(link: Link, tree: DataObjectTree):
    """(dataset, transport) pairs of ``tree`` this link carries, plus in-patterns with no match."""
    served = []
    hit = set()
    for ds in tree.datasets():
        for out_pat, in_pat in link.dset_patterns:
            if glob_match(out_pat, ds.name) and glob_match(in_pat, ds.name):
                served.append((ds, link.transport_of(in_pat)))
                hit.add(in_pat)
                break
    missing = [d.name for d in link.inport.dsets if d.name not in hit]
    return served, missing


def _is(kind, chan_id, tag=None):
    if tag is None:
        return lambda m: m.kind == kind and m.channel == chan_id
    return lambda m: m.kind == kind and m.channel == chan_id and m.tag == tag


# -- producer side -------------------------------------------------------------


def serve_file(ep, ch: ProducerChannel, tree: DataObjectTree, timestep: int) -> TransferSummary:
    """Run the serve exchange for one file on one io-rank.

    The leader first turns its oldest pending request into a go-ahead: a
    QUERY_MORE is answered with MORE and followed by the consumer's READY.
    """
    ch.serial += 1
    serial = ch.serial
    if ch.leader:
        req = ch.pending_requests.popleft()
        if req.kind == QUERY_MORE:
            for c in ch.consumer_ranks:
                ep.send(c, MORE, ch.id, serial, {"filenames": [tree.filename]})
            ep.wait(_is(READY, ch.id), service=False, why=f"READY on channel {ch.id}")

    ep.log("serve_begin", tree.filename, timestep, 0, ch.id)
    served, missing = _served(ch.link, tree)
    w = len(ch.io_ranks)
    n = len(ch.consumer_ranks)
    me = ch.io_index
    owned = {}
    for ds, mode in served:
        owned[ds.name] = (ds, decompose(ds.extents, w)[me], mode)
    if any(mode == "file" for _, mode in served):
        # the stored file holds everything written, as a real file would
        blocks = [(ds, decompose(ds.extents, w)[me]) for ds in tree.datasets()]
        ep.store.contribute((ch.id, serial), tree.filename, timestep, w, blocks)

    omap = {path: {"dtype": ds.dtype, "extents": list(ds.extents), "owned": sel.to_list(), "mode": mode}
            for path, (ds, sel, mode) in owned.items()}
    body = {"version": WIRE_VERSION, "filename": tree.filename, "timestep": timestep,
            "datasets": omap, "missing": missing}
    for c in ch.consumer_ranks:
        ep.send(c, OWNERSHIP, ch.id, serial, body)

    expected = 0
    for path, (ds, sel, mode) in owned.items():
        if mode != "memory" or sel.empty:
            continue
        for target in decompose(ds.extents, n):
            if not target.empty and intersect(sel, target) is not None:
                expected += 1

    summary = TransferSummary(ch.id, tree.filename, timestep)
    for _ in range(expected):
        req = ep.wait(_is(PIECE_REQ, ch.id, serial), service=False, why=f"PIECE_REQ on channel {ch.id}")
        path, sel = req.body["path"], Selection.from_list(req.body["selection"])
        ds, own, _mode = owned[path]
        if not own.contains(sel):
            raise TransportError(f"piece request {sel.to_list()} for {path} outside owned block")
        payload = ds.payload(sel)
        ep.send(req.src, PIECE, ch.id, serial,
                {"path": path, "selection": sel.to_list(), "payload": payload}, nbytes=len(payload))
        summary.bytes += len(payload)
        summary.pieces[req.src] = summary.pieces.get(req.src, 0) + 1
    ch.byte_counter += summary.bytes
    ep.log("serve", tree.filename, timestep, summary.bytes, ch.id)
    return summary


def poll_requests(ep, ch: ProducerChannel) -> bool:
    """Move delivered READY/QUERY_MORE messages into the pending queue (leader only)."""
    while True:
        m = ep.poll(lambda m: m.kind in REQUESTS and m.channel == ch.id)
        if m is None:
            return bool(ch.pending_requests)
        ch.pending_requests.append(m)


def _relay(ep, ch, what, **fields):
    for r in ch.io_ranks[1:]:
        ep.send(r, DECISION, ch.id, None, dict(what=what, **fields))


def _await_request(ep, ch):
    if not ch.pending_requests:
        m = ep.wait(lambda m: m.kind in REQUESTS and m.channel == ch.id,
                    why=f"consumer request on channel {ch.id}")
        ch.pending_requests.append(m)


def serve_point(ep, ch: ProducerChannel, tree: DataObjectTree) -> Decision:
    """Flow-control decision plus (when serving) the exchange, on every io-rank."""
    ch.serve_counter += 1
    timestep = ch.serve_counter
    if ch.leader:
        pending = poll_requests(ep, ch)
        decision = apply_flow_control(ch.link.strategy, timestep, pending, False)
        if decision is Decision.SERVE:
            _await_request(ep, ch)
        _relay(ep, ch, decision.value, counter=timestep)
    else:
        m = ep.wait(lambda m: (m.kind == DECISION and m.channel == ch.id
                               and m.body.get("counter") == timestep),
                    why=f"decision on channel {ch.id}")
        decision = Decision(m.body["what"])
    ep.log(f"decision:{decision.value}", tree.filename, timestep, 0, ch.id)
    ch.last_timestep = timestep
    if decision is Decision.SERVE:
        ch.retained = None
        if ch.latest_buffer is not None:
            ch.latest_buffer = None
        serve_file(ep, ch, tree, timestep)
    elif decision is Decision.SKIP:
        ch.retained = (timestep, tree)
    else:
        if ch.latest_buffer is not None:
            ch.dropped += 1
            ep.log("drop", ch.latest_buffer[1].filename, ch.latest_buffer[0], 0, ch.id)
        ch.latest_buffer = (timestep, tree)
    return decision


def serve_buffered(ep, ch: ProducerChannel) -> None:
    """Hand the newest buffered step to a consumer that became ready."""
    timestep, tree = ch.latest_buffer
    ch.latest_buffer = None
    if ch.leader:
        _relay(ep, ch, "serve_buffered", timestep=timestep)
    ep.log("decision:serve_buffered", tree.filename, timestep, 0, ch.id)
    serve_file(ep, ch, tree, timestep)


def service_match(ch: ProducerChannel, m) -> bool:
    """Does ``m`` ask this io-rank to serve its Latest buffer right now?"""
    if m.channel != ch.id or ch.latest_buffer is None:
        return False
    if ch.leader:
        return m.kind in REQUESTS
    return (m.kind == DECISION and m.body["what"] == "serve_buffered"
            and m.body["timestep"] == ch.latest_buffer[0])


def service(ep, ch: ProducerChannel, m) -> None:
    if ch.leader:
        ch.pending_requests.append(m)
    serve_buffered(ep, ch)


def finish_channel(ep, ch: ProducerChannel) -> None:
    """Producer termination: serve the final unserved step, then signal end."""
    if ch.leader:
        final = ch.latest_buffer or ch.retained
        if final is not None:
            timestep, tree = final
            _await_request(ep, ch)
            _relay(ep, ch, "serve_final", timestep=timestep)
            ep.log("decision:serve_final", tree.filename, timestep, 0, ch.id)
            ch.latest_buffer = ch.retained = None
            serve_file(ep, ch, tree, timestep)
        _relay(ep, ch, "finish")
        poll_requests(ep, ch)
        query = bool(ch.pending_requests) and ch.pending_requests[0].kind == QUERY_MORE
        for c in ch.consumer_ranks:
            ep.send(c, ALL_DONE if query else END, ch.id, None, None)
        ep.log("end", None, ch.last_timestep, 0, ch.id)
        return
    while True:
        m = ep.wait(lambda m: (m.kind == DECISION and m.channel == ch.id
                               and m.body["what"] in ("serve_final", "finish")),
                    why=f"final decision on channel {ch.id}")
        if m.body["what"] == "finish":
            return
        final = ch.latest_buffer or ch.retained
        if final is None or final[0] != m.body["timestep"]:
            raise TransportError(f"channel {ch.id}: no retained step {m.body['timestep']} on rank {ep.rank}")
        timestep, tree = final
        ch.latest_buffer = ch.retained = None
        ep.log("decision:serve_final", tree.filename, timestep, 0, ch.id)
        serve_file(ep, ch, tree, timestep)


# -- consumer side -------------------------------------------------------------


def fetch_file(ep, ch: ConsumerChannel, send_ready: bool = True, event: str = "fetch") -> DataObjectTree | None:
    """Block until the producer serves the next file; None at end of stream.

    The returned tree is closed; each dataset holds this rank's block of the
    global extents.
    """
    if ch.end_seen and not ch.ended:
        ch.ended = True
        ep.log("end_of_stream", None, None, 0, ch.id)
    if ch.ended:
        return None
    serial = ch.serial + 1
    if send_ready and ch.leader:
        ep.send(ch.io_ranks[0], READY, ch.id, serial, {"version": WIRE_VERSION,
                                                        "pattern": ch.link.inport.filename})
    maps = {}
    while len(maps) < len(ch.io_ranks):
        m = ep.wait(lambda m: m.channel == ch.id and (
            (m.kind == OWNERSHIP and m.tag == serial) or m.kind in TERMINAL),
            why=f"data on channel {ch.id}")
        if m.kind in TERMINAL:
            if maps:
                # the leader finished before the other io-ranks' ownership maps arrived
                ch.end_seen = True
                continue
            ch.ended = True
            ep.log("end_of_stream", None, None, 0, ch.id)
            return None
        maps[m.src] = m.body
    ch.serial = serial

    first = maps[ch.io_ranks[0]]
    filename, timestep = first["filename"], first["timestep"]
    if first["missing"]:
        raise TransportError(f"channel {ch.id}: {filename} has no dataset matching "
                             f"inport pattern(s) {first['missing']}")
    n = len(ch.consumer_ranks)
    me = ch.index
    tree = DataObjectTree(filename)
    tree.timestep = timestep
    requests = 0
    for path, info in first["datasets"].items():
        for src, body in maps.items():
            other = body["datasets"].get(path)
            if other is None or other["dtype"] != info["dtype"] or other["extents"] != info["extents"]:
                raise TransportError(f"channel {ch.id}: io-ranks disagree on {path} "
                                     f"({info['dtype']}{info['extents']} vs rank {src}: {other})")
        extents = tuple(info["extents"])
        target = decompose(extents, n)[me]
        local = Dataset(path, info["dtype"], extents, target)
        tree.add(local)
        if target.empty:
            continue
        if info["mode"] == "file":
            full = ep.store.read(filename).get(path)
            if full.dtype != info["dtype"]:
                raise TransportError(f"{path}: dtype mismatch in file {filename}")
            local.data[...] = full.read_selection(target)
            ep.log("file_read", filename, timestep, local.nbytes, ch.id)
            continue
        for src in ch.io_ranks:
            owned = Selection.from_list(maps[src]["datasets"][path]["owned"])
            piece = intersect(owned, target)
            if piece is None:
                continue
            ep.send(src, PIECE_REQ, ch.id, serial, {"path": path, "selection": piece.to_list()})
            requests += 1

    received = 0
    for _ in range(requests):
        m = ep.wait(_is(PIECE, ch.id, serial), service=False, why=f"PIECE on channel {ch.id}")
        path, sel = m.body["path"], Selection.from_list(m.body["selection"])
        local = tree.get(path)
        arr = np.frombuffer(m.body["payload"], dtype=DTYPES[local.dtype]).reshape(sel.counts)
        local.data[sel.relative_to(local.selection)] = arr
        received += len(m.body["payload"])
    tree.close()
    ep.log(event, filename, timestep, received, ch.id)
    return tree


def query_more_files(ep, ch: ConsumerChannel) -> list[str] | AllDone:
    """Ask the producer which file comes next; blocks until it knows."""
    if ch.ended or ch.end_seen:
        ch.ended = True
        return ALL_DONE_RESULT
    if ch.leader:
        ep.send(ch.io_ranks[0], QUERY_MORE, ch.id, ch.serial + 1, None)
    m = ep.wait(lambda m: m.channel == ch.id and (m.kind == MORE or m.kind in TERMINAL),
                why=f"query answer on channel {ch.id}")
    if m.kind in TERMINAL:
        ch.ended = True
        ep.log("all_done", None, None, 0, ch.id)
        return ALL_DONE_RESULT
    return list(m.body["filenames"])

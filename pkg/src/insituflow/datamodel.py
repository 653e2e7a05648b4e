"""Hierarchical files of typed n-d datasets, hyperslab selections and the
``WLK1`` container format used for file transport."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ContainerFormatError, DataModelError, SelectionError

DTYPES = {
    "u8": np.dtype("<u1"),
    "i32": np.dtype("<i4"),
    "i64": np.dtype("<i8"),
    "u64": np.dtype("<u8"),
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
}
MAGIC = b"WLK1"
FORMAT_VERSION = 1
ALIGN = 8


def itemsize(dtype: str) -> int:
    return DTYPES[dtype].itemsize


def _check_dtype(dtype):
    if dtype not in DTYPES:
        raise DataModelError(f"unsupported dtype {dtype!r}; expected one of {sorted(DTYPES)}")


# -- selections --------------------------------------------------------------


@dataclass(frozen=True)
class Selection:
    """Dense hyperslab: one (offset, count) per dimension.

    A count of zero in any dimension makes the selection empty; empty
    selections come out of :func:`decompose` when there are more parts than
    rows.
    """

    offsets: tuple[int, ...]
    counts: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "offsets", tuple(int(o) for o in self.offsets))
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if len(self.offsets) != len(self.counts):
            raise SelectionError("offsets and counts differ in rank")
        if any(o < 0 for o in self.offsets) or any(c < 0 for c in self.counts):
            raise SelectionError(f"negative offset or count in {self}")

    @classmethod
    def full(cls, extents) -> "Selection":
        return cls((0,) * len(extents), tuple(extents))

    @property
    def rank(self) -> int:
        return len(self.counts)

    @property
    def empty(self) -> bool:
        return any(c == 0 for c in self.counts)

    @property
    def size(self) -> int:
        return int(np.prod(self.counts, dtype=np.int64))

    def within(self, extents) -> bool:
        return len(extents) == self.rank and all(
            o + c <= e for o, c, e in zip(self.offsets, self.counts, extents)
        )

    def contains(self, other: "Selection") -> bool:
        return other.rank == self.rank and all(
            so <= oo and oo + oc <= so + sc
            for so, sc, oo, oc in zip(self.offsets, self.counts, other.offsets, other.counts)
        )

    def relative_to(self, outer: "Selection") -> tuple[slice, ...]:
        """Index expression of this selection inside an array holding ``outer``."""
        return tuple(slice(o - oo, o - oo + c)
                     for o, c, oo in zip(self.offsets, self.counts, outer.offsets))

    def to_list(self) -> list[list[int]]:
        return [[o, c] for o, c in zip(self.offsets, self.counts)]

    @classmethod
    def from_list(cls, pairs) -> "Selection":
        return cls(tuple(p[0] for p in pairs), tuple(p[1] for p in pairs))


def decompose(extents, nparts: int) -> list[Selection]:
    """Block decomposition along dimension 0.

    The first ``extents[0] % nparts`` parts get one extra row. Parts beyond
    the row count are empty (count 0, offset at the end).
    """
    if nparts < 1:
        raise ValueError("nparts must be >= 1")
    extents = tuple(int(e) for e in extents)
    rows = extents[0]
    base, extra = divmod(rows, nparts)
    out = []
    offset = 0
    for k in range(nparts):
        n = base + (1 if k < extra else 0)
        out.append(Selection((offset,) + (0,) * (len(extents) - 1), (n,) + extents[1:]))
        offset += n
    return out


def intersect(a: Selection, b: Selection) -> Selection | None:
    """Per-dimension interval intersection; None when empty."""
    if a.rank != b.rank:
        raise SelectionError(f"rank mismatch: {a.rank} vs {b.rank}")
    offs, counts = [], []
    for ao, ac, bo, bc in zip(a.offsets, a.counts, b.offsets, b.counts):
        lo, hi = max(ao, bo), min(ao + ac, bo + bc)
        if hi <= lo:
            return None
        offs.append(lo)
        counts.append(hi - lo)
    return Selection(tuple(offs), tuple(counts))


# -- tree --------------------------------------------------------------------


class Dataset:
    """A typed n-d array; may hold only one block (``selection``) of its extents."""

    def __init__(self, name, dtype, extents, selection=None, data=None):
        _check_dtype(dtype)
        extents = tuple(int(e) for e in extents)
        if not 1 <= len(extents) <= 4 or any(e < 1 for e in extents):
            raise DataModelError(f"extents must be 1-4 positive sizes, got {extents}")
        self.name = name
        self.dtype = dtype
        self.extents = extents
        self.selection = selection if selection is not None else Selection.full(extents)
        if not self.selection.within(extents):
            raise SelectionError(f"held block {self.selection} outside extents {extents}")
        np_dtype = DTYPES[dtype]
        if data is None:
            data = np.zeros(self.selection.counts, dtype=np_dtype)
        else:
            data = np.asarray(data)
            if data.dtype != np_dtype or data.shape != self.selection.counts:
                raise DataModelError(f"{name}: payload {data.dtype}{data.shape} does not fit "
                                     f"{dtype}{self.selection.counts}")
        self.data = data
        self._tree: DataObjectTree | None = None

    @property
    def path(self) -> str:
        return self.name

    @property
    def nbytes(self) -> int:
        return int(self.data.nbytes)

    @property
    def partial(self) -> bool:
        return self.selection.counts != self.extents

    def _check(self, sel: Selection):
        if sel.rank != len(self.extents):
            raise SelectionError(f"{self.name}: selection rank {sel.rank} != dataset rank {len(self.extents)}")
        if not sel.within(self.extents):
            raise SelectionError(f"{self.name}: selection {sel.to_list()} outside extents {self.extents}")
        if not self.selection.contains(sel) and not sel.empty:
            raise SelectionError(f"{self.name}: selection {sel.to_list()} outside held block "
                                 f"{self.selection.to_list()}")

    def write_selection(self, sel: Selection, values) -> None:
        if self._tree is not None and not self._tree.is_open:
            raise DataModelError(f"{self.name}: write to closed file {self._tree.filename!r}")
        self._check(sel)
        np_dtype = DTYPES[self.dtype]
        if isinstance(values, np.ndarray):
            if values.dtype != np_dtype:
                raise DataModelError(f"{self.name}: dtype mismatch, got {values.dtype}, dataset is {self.dtype}")
            arr = values
        else:
            arr = np.asarray(values, dtype=np_dtype)
        if arr.size != sel.size:
            raise DataModelError(f"{self.name}: {arr.size} values for a selection of {sel.size}")
        if sel.empty:
            return
        self.data[sel.relative_to(self.selection)] = arr.reshape(sel.counts)

    def read_selection(self, sel: Selection | None = None) -> np.ndarray:
        sel = sel or self.selection
        self._check(sel)
        if sel.empty:
            return np.zeros(sel.counts, dtype=DTYPES[self.dtype])
        return self.data[sel.relative_to(self.selection)].copy()

    def payload(self, sel: Selection | None = None) -> bytes:
        """Little-endian row-major bytes of ``sel`` (default: held block)."""
        return np.ascontiguousarray(self.read_selection(sel)).tobytes()

    def copy(self) -> "Dataset":
        return Dataset(self.name, self.dtype, self.extents, self.selection, self.data.copy())

    def __eq__(self, other):
        return (isinstance(other, Dataset) and self.name == other.name and self.dtype == other.dtype
                and self.extents == other.extents and self.selection == other.selection
                and self.data.tobytes() == other.data.tobytes())

    def __repr__(self):
        return f"Dataset({self.name!r}, {self.dtype}, {list(self.extents)}, held={self.selection.to_list()})"


class Group:
    def __init__(self, name: str = ""):
        self.name = name
        self.children: dict[str, Group | Dataset] = {}

    def __eq__(self, other):
        if not isinstance(other, Group) or self.name != other.name:
            return False
        return list(self.children) == list(other.children) and all(
            self.children[k] == other.children[k] for k in self.children
        )

    def __repr__(self):
        return f"Group({self.name!r}, {list(self.children)})"


def _split(path: str) -> list[str]:
    if not path.startswith("/"):
        raise DataModelError(f"path must be absolute: {path!r}")
    parts = [p for p in path.split("/") if p]
    if not parts:
        raise DataModelError("empty path")
    return parts


class DataObjectTree:
    """One file: a root group of groups and datasets.

    The tree is writable while open. ``close()`` bumps ``close_generation``
    and freezes the contents until ``reopen()``.
    """

    def __init__(self, filename: str):
        self.filename = filename
        self.root = Group("")
        self.close_generation = 0
        self.is_open = True
        self.timestep: int | None = None

    def _parent(self, parts, create):
        g = self.root
        for p in parts[:-1]:
            child = g.children.get(p)
            if child is None:
                if not create:
                    raise KeyError("/" + "/".join(parts))
                child = g.children[p] = Group(p)
            elif isinstance(child, Dataset):
                raise DataModelError(f"{p!r} is a dataset, not a group")
            g = child
        return g

    def _require_open(self):
        if not self.is_open:
            raise DataModelError(f"file {self.filename!r} is closed")

    def create_group(self, path: str) -> Group:
        self._require_open()
        parts = _split(path)
        g = self._parent(parts, True)
        child = g.children.get(parts[-1])
        if isinstance(child, Dataset):
            raise DataModelError(f"{path} already exists as a dataset")
        if child is None:
            child = g.children[parts[-1]] = Group(parts[-1])
        return child

    def create_dataset(self, path, dtype, extents, selection=None, data=None) -> Dataset:
        self._require_open()
        parts = _split(path)
        g = self._parent(parts, True)
        if parts[-1] in g.children:
            raise DataModelError(f"duplicate path {path}")
        ds = Dataset("/" + "/".join(parts), dtype, extents, selection, data)
        ds._tree = self
        g.children[parts[-1]] = ds
        return ds

    def add(self, ds: Dataset) -> Dataset:
        """Insert an existing dataset object (used when assembling received data)."""
        parts = _split(ds.name)
        g = self._parent(parts, True)
        if parts[-1] in g.children:
            raise DataModelError(f"duplicate path {ds.name}")
        ds._tree = self
        g.children[parts[-1]] = ds
        return ds

    def get(self, path: str) -> Dataset:
        parts = _split(path)
        try:
            node = self._parent(parts, False).children[parts[-1]]
        except KeyError:
            raise KeyError(path) from None
        if not isinstance(node, Dataset):
            raise KeyError(f"{path} is a group")
        return node

    __getitem__ = get

    def __contains__(self, path):
        try:
            self.get(path)
            return True
        except (KeyError, DataModelError):
            return False

    def walk(self) -> Iterator[tuple[str, Group | Dataset]]:
        """Preorder (path, node) pairs in insertion order, root excluded."""
        def rec(g, prefix):
            for name, child in g.children.items():
                path = prefix + "/" + name
                yield path, child
                if isinstance(child, Group):
                    yield from rec(child, path)
        yield from rec(self.root, "")

    def datasets(self) -> Iterator[Dataset]:
        return (n for _, n in self.walk() if isinstance(n, Dataset))

    @property
    def nbytes(self) -> int:
        return sum(d.nbytes for d in self.datasets())

    def close(self):
        self._require_open()
        self.is_open = False
        self.close_generation += 1

    def reopen(self):
        if self.is_open:
            raise DataModelError(f"file {self.filename!r} already open")
        self.is_open = True

    def copy(self) -> "DataObjectTree":
        return deserialize_file(serialize_file(self, allow_open=True))

    def __eq__(self, other):
        return (isinstance(other, DataObjectTree) and self.filename == other.filename
                and self.close_generation == other.close_generation and self.root == other.root)

    def __repr__(self):
        state = "open" if self.is_open else "closed"
        return f"DataObjectTree({self.filename!r}, {state}, datasets={[d.name for d in self.datasets()]})"


# -- container ---------------------------------------------------------------


def _pad(n: int) -> int:
    return (-n) % ALIGN


def serialize_file(tree: DataObjectTree, allow_open: bool = False) -> bytes:
    """Encode a closed tree: magic, u32 manifest length, JSON manifest, payloads.

    The payload section starts at the next 8-byte boundary after the
    manifest; each payload starts 8-byte aligned (offsets are relative to the
    payload section) and gaps are zero bytes.
    """
    if tree.is_open and not allow_open:
        raise DataModelError(f"file {tree.filename!r} must be closed before serialization")
    entries = []
    blobs = []
    offset = 0
    for path, node in tree.walk():
        if isinstance(node, Group):
            entries.append({"path": path, "kind": "group"})
            continue
        ds = node
        blob = ds.payload()
        offset += _pad(offset)
        entry = {"path": ds.name, "kind": "dataset", "dtype": ds.dtype, "extents": list(ds.extents),
                 "offset": offset, "length": len(blob)}
        if ds.partial:
            entry["selection"] = ds.selection.to_list()
        entries.append(entry)
        blobs.append((offset, blob))
        offset += len(blob)
    manifest = {
        "version": FORMAT_VERSION,
        "filename": tree.filename,
        "close_generation": tree.close_generation,
        "timestep": tree.timestep,
        "nodes": entries,
    }
    mbytes = json.dumps(manifest, separators=(",", ":"), sort_keys=True).encode("utf-8")
    head = MAGIC + struct.pack("<I", len(mbytes)) + mbytes
    out = bytearray(head)
    out += b"\0" * _pad(len(out))
    base = len(out)
    for off, blob in blobs:
        out += b"\0" * (base + off - len(out))
        out += blob
    return bytes(out)


def deserialize_file(data: bytes) -> DataObjectTree:
    if len(data) < 8 or data[:4] != MAGIC:
        raise ContainerFormatError("bad magic")
    (mlen,) = struct.unpack("<I", data[4:8])
    if 8 + mlen > len(data):
        raise ContainerFormatError("truncated manifest")
    try:
        manifest = json.loads(data[8:8 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerFormatError(f"unreadable manifest: {exc}") from None
    if manifest.get("version") != FORMAT_VERSION:
        raise ContainerFormatError(f"unsupported version {manifest.get('version')}")
    base = 8 + mlen
    base += _pad(base)
    tree = DataObjectTree(manifest["filename"])
    tree.timestep = manifest.get("timestep")
    for e in manifest["nodes"]:
        if e["kind"] == "group":
            tree.create_group(e["path"])
            continue
        dtype = e["dtype"]
        _check_dtype(dtype)
        extents = tuple(e["extents"])
        sel = Selection.from_list(e["selection"]) if "selection" in e else Selection.full(extents)
        expected = sel.size * itemsize(dtype)
        if e["length"] != expected:
            raise ContainerFormatError(f"{e['path']}: manifest length {e['length']} != {expected}")
        start = base + e["offset"]
        if start + e["length"] > len(data):
            raise ContainerFormatError(f"{e['path']}: truncated payload")
        arr = np.frombuffer(data, dtype=DTYPES[dtype], count=sel.size, offset=start)
        tree.create_dataset(e["path"], dtype, extents, sel, arr.reshape(sel.counts).copy())
    tree.is_open = False
    tree.close_generation = manifest["close_generation"]
    return tree

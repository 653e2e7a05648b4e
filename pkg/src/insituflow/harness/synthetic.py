"""Synthetic task bodies with deterministic payloads.

Every value a producer writes is a pure function of (timestep, global
index), so a consumer can check its block without a reference copy:

* u64 vectors (grid, ids): ``t * 10**9 + i``
* f32 ``[n, 3]`` arrays (particles, positions): ``f32(i)``, ``+0.25``, ``+0.5``
* f64 vectors (density): ``t * 1000 + i``
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from ..datamodel import Selection
from ..errors import VerificationError
from ..runtime import STATELESS, TaskRegistry, register_action, ACTIONS

GRID_PATH = "/group1/grid"
PARTICLES_PATH = "/group1/particles"
DENSITY_PATH = "/level_0/density"
META_PATH = "/level_0/meta"


@dataclass(frozen=True)
class SyntheticWorkload:
    grid_points_per_rank: int = 10_000
    particles_per_rank: int = 10_000
    timesteps: int = 10
    producer_compute: float = 2.0
    consumer_compute: float = 2.0

    @classmethod
    def from_args(cls, args: dict) -> "SyntheticWorkload":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in args.items() if k in known})

    def to_args(self) -> dict:
        return asdict(self)

    def bytes_per_rank(self) -> int:
        return 8 * self.grid_points_per_rank + 12 * self.particles_per_rank


# -- payload formulas -----------------------------------------------------------


def _rows(sel: Selection) -> np.ndarray:
    return np.arange(sel.offsets[0], sel.offsets[0] + sel.counts[0], dtype=np.int64)


def grid_values(t: int, sel: Selection) -> np.ndarray:
    return np.uint64(t) * np.uint64(10**9) + _rows(sel).astype(np.uint64)


def particle_values(t: int, sel: Selection) -> np.ndarray:
    base = _rows(sel).astype(np.float32)[:, None]
    return (base + np.array([0.0, 0.25, 0.5], dtype=np.float32)).astype(np.float32)


def density_values(t: int, sel: Selection) -> np.ndarray:
    return float(t) * 1000.0 + _rows(sel).astype(np.float64)


def expected_values(dtype: str, extents, t: int, sel: Selection) -> np.ndarray:
    if dtype == "u64" and len(extents) == 1:
        return grid_values(t, sel)
    if dtype == "f32" and len(extents) == 2 and extents[1] == 3:
        return particle_values(t, sel)
    if dtype == "f64" and len(extents) == 1:
        return density_values(t, sel)
    raise VerificationError(f"no synthetic formula for {dtype}{list(extents)}")


def verify_tree(tree, timestep: int | None = None) -> int:
    """Check every dataset block against the formulas; returns elements checked."""
    t = tree.timestep if timestep is None else timestep
    checked = 0
    for ds in tree.datasets():
        if ds.selection.empty:
            continue
        want = expected_values(ds.dtype, ds.extents, t, ds.selection)
        got = ds.data
        if got.shape != want.shape or not np.array_equal(got, want):
            bad = np.argwhere(got != want) if got.shape == want.shape else np.zeros((1, got.ndim), int)
            local = tuple(int(x) for x in bad[0])
            index = (local[0] + ds.selection.offsets[0],) + local[1:]
            raise VerificationError(
                f"{tree.filename}:{ds.name} timestep {t}: first difference at index {list(index)}: "
                f"got {got[local]!r}, expected {want[local]!r}")
        checked += ds.selection.size
    return checked


# -- task bodies -----------------------------------------------------------------


def step_filename(pattern: str, t: int) -> str:
    return pattern.replace("*", str(t))


def synthetic_producer(ctx) -> None:
    wl = SyntheticWorkload.from_args(ctx.args)
    corrupt = ctx.args.get("corrupt_step")
    patterns = ctx.outports or ("outfile.h5",)
    ngrid = ctx.size * wl.grid_points_per_rank
    npart = ctx.size * wl.particles_per_rank
    for t in range(1, wl.timesteps + 1):
        ctx.compute(wl.producer_compute)
        for pattern in patterns:
            f = ctx.open_file(step_filename(pattern, t), "w")
            if ctx.is_io_rank:
                f.create_group("/group1")
                gsel = ctx.io_block((ngrid,))
                grid = grid_values(t, gsel)
                if corrupt == t and ctx.rank == 0 and grid.size:
                    grid[0] += np.uint64(1)
                f.create_dataset(GRID_PATH, "u64", (ngrid,), gsel).write(grid)
                psel = ctx.io_block((npart, 3))
                f.create_dataset(PARTICLES_PATH, "f32", (npart, 3), psel).write(particle_values(t, psel))
            f.close()


def synthetic_consumer(ctx) -> None:
    wl = SyntheticWorkload.from_args(ctx.args)
    while True:
        tree = ctx.open_file()
        if tree is None:
            return
        verify_tree(tree)
        ctx.compute(wl.consumer_compute)


def synthetic_consumer_once(ctx) -> None:
    """Stateless variant: handles exactly the one file it was launched for."""
    wl = SyntheticWorkload.from_args(ctx.args)
    tree = ctx.open_file()
    verify_tree(tree)
    ctx.compute(wl.consumer_compute)


def freeze(ctx) -> None:
    """Molecular-dynamics stand-in: every rank computes, rank 0 gathers and writes."""
    wl = SyntheticWorkload.from_args(ctx.args)
    p = wl.particles_per_rank
    n = ctx.size * p
    mine = Selection((ctx.rank * p, 0), (p, 3))
    pattern = (ctx.outports or ("dump-h5md.h5",))[0]
    for t in range(1, wl.timesteps + 1):
        ctx.compute(wl.producer_compute)
        parts = ctx.comm.gather(particle_values(t, mine), root=0)
        f = ctx.open_file(step_filename(pattern, t), "w")
        if ctx.rank == 0:
            full = Selection((0, 0), (n, 3))
            f.create_dataset("/particles/position", "f32", (n, 3), full).write(np.concatenate(parts))
            ids = Selection((0,), (n,))
            f.create_dataset("/particles/id", "u64", (n,), ids).write(grid_values(t, ids))
        f.close()


def nyx(ctx) -> None:
    """Cosmology stand-in with the double open/close I/O pattern.

    Rank 0 alone writes a small metadata dataset and closes the file; then
    every rank reopens it, writes its density block and closes again.
    """
    wl = SyntheticWorkload.from_args(ctx.args)
    n = ctx.size * wl.grid_points_per_rank
    for t in range(1, wl.timesteps + 1):
        ctx.compute(wl.producer_compute)
        name = f"plt{t:05d}.h5"
        if ctx.rank == 0:
            f = ctx.open_file(name, "w")
            f.create_dataset(META_PATH, "i64", (3,)).write([t, ctx.size, n])
            f.close()
        f = ctx.open_file(name, "a")
        if ctx.is_io_rank:
            sel = ctx.io_block((n,))
            f.create_dataset(DENSITY_PATH, "f64", (n,), sel).write(density_values(t, sel))
        f.close()


def nyx_action(vol, rank) -> None:
    """Serve only after the second close on rank 0; share its first close with the others."""
    def afc_callback(_event):
        if rank != 0:
            vol.serve_all(True, True)
            vol.clear_files()
        elif vol.file_close_counter % 2 == 0:
            vol.serve_all(True, True)
            vol.clear_files()
        else:
            vol.broadcast_files()

    def bfo_cb(_event):
        if rank != 0:
            vol.broadcast_files()

    vol.set_after_file_close(afc_callback)
    vol.set_before_file_open(bfo_cb)


if ("actions", "nyx") not in ACTIONS:
    register_action("actions", "nyx", nyx_action)


def default_registry() -> TaskRegistry:
    reg = TaskRegistry()
    reg.register("producer", synthetic_producer)
    for name in ("consumer", "consumer1", "consumer2", "reeber"):
        reg.register(name, synthetic_consumer)
    reg.register("consumer_stateless", synthetic_consumer_once, kind=STATELESS)
    reg.register("freeze", freeze)
    reg.register("detector", synthetic_consumer_once, kind=STATELESS)
    reg.register("nyx", nyx)
    return reg

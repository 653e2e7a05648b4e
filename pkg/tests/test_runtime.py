import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import config_text
from insituflow.config import parse_workflow
from insituflow.errors import DeadlockError, RegistryError, TaskError
from insituflow.graph import build_graph
from insituflow.harness.scenarios import flow_control_config, io_freq_of, nyx_config
from insituflow.harness.synthetic import SyntheticWorkload, default_registry
from insituflow.runtime import STATELESS, ActionRegistry, HookPoint, TaskRegistry, run
from oracles import schedule_oracle


def _graph(text):
    return build_graph(parse_workflow(text))


def _pair(strategy, n, pc, cc, T, pprocs=1, cprocs=1, consumer="consumer"):
    args = SyntheticWorkload(8, 4, T, pc, cc).to_args()
    freq = io_freq_of(strategy, n)
    return _graph(f"""tasks:
  - func: producer
    nprocs: {pprocs}
    args: {args}
    outports: [{{filename: outfile.h5, dsets: [{{name: /group1/grid}}, {{name: /group1/particles}}]}}]
  - func: {consumer}
    nprocs: {cprocs}
    args: {args}
    inports: [{{filename: outfile.h5, io_freq: {freq}, dsets: [{{name: /group1/grid}}]}}]
""")


# -- schedules -------------------------------------------------------------------


@pytest.mark.parametrize("strategy,completion,consumed", [
    ("all", 102, list(range(1, 11))),
    ("some", 30, [5, 10]),
    ("latest", 32, [1, 6, 10]),
])
def test_five_times_slower_consumer(strategy, completion, consumed):
    report = run(_graph(flow_control_config(5, strategy, grid=10, particles=10)), default_registry())
    assert report.completion_time == completion
    assert list(report.consumed[0]) == consumed


def test_some2_consumes_even_steps():
    report = run(_graph(flow_control_config(2, "some", grid=10, particles=10)), default_registry())
    assert list(report.consumed[0]) == [2, 4, 6, 8, 10]


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(["all", "some", "latest"]), st.integers(2, 5), st.integers(1, 6), st.integers(0, 12),
       st.integers(1, 8), st.integers(1, 3), st.integers(1, 3))
def test_schedule_matches_oracle(strategy, n, pc, cc, T, pprocs, cprocs):
    report = run(_pair(strategy, n, pc, cc, T, pprocs, cprocs), default_registry())
    completion, consumed = schedule_oracle(strategy, n, pc, cc, T)
    assert report.completion_time == completion
    assert list(report.consumed[0]) == consumed


def test_latest_drops_are_counted():
    report = run(_graph(flow_control_config(5, "latest", grid=10, particles=10)), default_registry())
    assert report.dropped[0] == 10 - 3


def test_all_moves_every_byte_once():
    report = run(_pair("all", 2, 2, 1, 4, pprocs=3, cprocs=2), default_registry())
    assert report.bytes_moved[0] == 4 * 3 * 8 * 8


def test_two_channels_consume_everything():
    text = config_text("one_producer_two_consumers").replace("nprocs: 3", "nprocs: 3\n    args: {grid_points_per_rank: 20, particles_per_rank: 20}")
    report = run(_graph(text), default_registry())
    assert sorted(report.consumed) == [0, 1]
    assert all(list(v) == list(range(1, 11)) for v in report.consumed.values())


# -- determinism and accounting -----------------------------------------------------


def test_virtual_runs_are_bit_identical():
    g = _graph(flow_control_config(5, "latest", grid=50, particles=50))
    a, b = run(g, default_registry()), run(g, default_registry())
    assert a.to_json() == b.to_json() and a.digest() == b.digest()


@pytest.mark.parametrize("strategy", ["all", "some", "latest"])
def test_segments_cover_completion(strategy):
    report = run(_pair(strategy, 3, 2, 5, 6, pprocs=2, cprocs=2), default_registry())
    for rank, segs in report.segments.items():
        assert sum(e - s for s, e, _ in segs) == pytest.approx(report.completion_time)
        assert all(k in ("compute", "idle", "transfer") for _, _, k in segs)
        starts = [s for s, _, _ in segs]
        assert starts == sorted(starts)


def test_transfer_cost_shows_in_segments():
    report = run(_pair("all", 2, 2, 1, 2), default_registry(), per_byte=0.01)
    assert any(k == "transfer" for segs in report.segments.values() for _, _, k in segs)


def test_event_order_and_csv():
    report = run(_pair("all", 2, 2, 1, 2), default_registry())
    keys = [(e.time, e.rank, e.seq) for e in report.events]
    assert keys == sorted(keys)
    assert report.completion_time == report.events[-1].time
    lines = report.to_csv().splitlines()
    assert lines[0] == "time,rank,kind,filename,timestep,bytes" and len(lines) == len(report.events) + 1
    assert report.gantt_csv().startswith("rank,start,end,kind\n")


def test_noop_task():
    reg = TaskRegistry()
    reg.register("idle", lambda ctx: None)
    report = run(_graph("tasks:\n  - func: idle\n    nprocs: 2\n"), reg)
    assert report.completion_time == 0
    assert sorted(report.ranks) == [0, 1] and report.channels == {}
    assert not [e for e in report.events if e.channel is not None]


def test_deadlock_names_blocked_ranks():
    reg = TaskRegistry()
    reg.register("reader", lambda ctx: ctx.comm.recv(source=1 - ctx.rank))
    with pytest.raises(DeadlockError) as info:
        run(_graph("tasks:\n  - func: reader\n    nprocs: 2\n"), reg)
    assert "0" in str(info.value) and "1" in str(info.value)
    assert info.value.report is not None


def test_cyclic_readers_deadlock():
    reg = TaskRegistry()

    def body(ctx):
        ctx.open_file()

    reg.register("a", body)
    reg.register("b", body)
    g = _graph("""tasks:
  - func: a
    nprocs: 1
    inports: [{filename: x.h5, dsets: [{name: /d}]}]
    outports: [{filename: y.h5, dsets: [{name: /d}]}]
  - func: b
    nprocs: 1
    inports: [{filename: y.h5, dsets: [{name: /d}]}]
    outports: [{filename: x.h5, dsets: [{name: /d}]}]
""")
    with pytest.raises(DeadlockError):
        run(g, reg)


def test_task_error_names_rank():
    reg = TaskRegistry()

    def body(ctx):
        if ctx.rank == 1:
            raise RuntimeError("boom")

    reg.register("t", body)
    with pytest.raises(TaskError) as info:
        run(_graph("tasks:\n  - func: t\n    nprocs: 3\n"), reg)
    assert "rank 1" in str(info.value) and "boom" in str(info.value)


def test_unresolved_names():
    with pytest.raises(RegistryError):
        run(_graph("tasks:\n  - func: nobody\n    nprocs: 1\n"), TaskRegistry())
    reg = TaskRegistry()
    reg.register("t", lambda ctx: None)
    with pytest.raises(RegistryError):
        run(_graph("tasks:\n  - func: t\n    nprocs: 1\n    actions: [nope, nothing]\n"), reg, ActionRegistry())


def test_corrupt_step_is_reported():
    g = _graph(flow_control_config(2, "all", grid=10, particles=10).replace(
        "timesteps: 10", "timesteps: 10, corrupt_step: 3", 1))
    with pytest.raises(TaskError) as info:
        run(g, default_registry())
    msg = str(info.value)
    assert "/group1/grid" in msg and "timestep 3" in msg and "index [0]" in msg


# -- restricted world ------------------------------------------------------------------


def _capture_views():
    seen = {}
    reg = default_registry()

    def body(ctx):
        seen[ctx.rank] = ctx.view()

    reg.register("solver", body)
    return reg, seen


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 4))
def test_restricted_world_is_position_independent(nprocs, nwriters_hint, before):
    nwriters = min(nprocs, nwriters_hint)
    solver = f"  - func: solver\n    nprocs: {nprocs}\n    nwriters: {nwriters}\n    args: {{label: 7}}\n"
    reg, alone = _capture_views()
    run(_graph("tasks:\n" + solver), reg)
    reg2, embedded = _capture_views()
    reg2.register("idle", lambda ctx: None)
    head = f"  - func: idle\n    nprocs: {before}\n" if before else ""
    tail = "  - func: tail\n    nprocs: 2\n"
    reg2.register("tail", lambda ctx: None)
    run(_graph("tasks:\n" + head + solver + tail), reg2)
    assert alone == embedded
    assert sorted(alone) == list(range(nprocs))
    assert [alone[r]["is_io_rank"] for r in range(nprocs)] == [r < nwriters for r in range(nprocs)]


# -- consumers ----------------------------------------------------------------------------


@pytest.mark.parametrize("strategy,invocations", [("all", 10), ("some", 2), ("latest", 3)])
def test_stateless_invocation_counts(strategy, invocations):
    report = run(_pair(strategy, 5, 2, 10, 10, consumer="consumer_stateless"), default_registry())
    assert len(report.events_of("invoke")) == invocations
    assert len(report.consumed[0]) == invocations


def test_stateful_invoked_once():
    report = run(_pair("all", 2, 2, 1, 10), default_registry())
    starts = [e for e in report.events if e.kind == "task_start" and e.rank == 1]
    assert len(starts) == 1 and len(report.events_of("fetch")) == 10


def test_stateless_second_fetch_fails():
    reg = default_registry()

    def greedy(ctx):
        ctx.open_file()
        ctx.open_file()

    reg.register("greedy", greedy, kind=STATELESS)
    with pytest.raises(TaskError) as info:
        run(_pair("all", 2, 1, 1, 3, consumer="greedy"), reg)
    assert "one file per invocation" in str(info.value)


def test_stateless_body_that_ignores_its_file():
    reg = default_registry()
    reg.register("lazy", lambda ctx: None, kind=STATELESS)
    report = run(_pair("all", 2, 1, 1, 4, consumer="lazy"), reg)
    assert len(report.events_of("invoke")) == 4 and len(report.events_of("drain")) == 4


def test_stateful_consumer_stopping_early_drains():
    reg = default_registry()
    reg.register("quitter", lambda ctx: ctx.open_file())
    report = run(_pair("all", 2, 1, 1, 4, consumer="quitter"), reg)
    assert len(report.events_of("fetch")) == 1 and len(report.events_of("drain")) == 3


# -- producer side: hooks, subset writers, actions ----------------------------------------


def test_hook_ordering_around_close():
    reg = default_registry()
    base = reg.resolve("producer").body

    def hooked(ctx):
        ctx.vol.set_before_file_close(lambda ev: None)
        ctx.vol.set_after_file_close(lambda ev: None)
        base(ctx)

    reg.register("producer", hooked)
    report = run(_pair("all", 2, 1, 1, 3, pprocs=2), reg)
    for rank in (0, 1):
        kinds = [e.kind for e in report.events if e.rank == rank and
                 e.kind in ("hook:BeforeFileClose", "serve", "hook:AfterFileClose")]
        assert kinds == ["hook:BeforeFileClose", "serve", "hook:AfterFileClose"] * 3


def test_close_counter_visible_in_after_close_hook():
    reg = default_registry()
    base = reg.resolve("producer").body
    seen = []

    def hooked(ctx):
        if ctx.rank == 0:
            ctx.vol.set_after_file_close(lambda ev: seen.append((ev.filename, ctx.vol.file_close_counter)))
        base(ctx)

    reg.register("producer", hooked)
    run(_pair("all", 2, 1, 1, 3), reg)
    assert seen == [("outfile.h5", 1), ("outfile.h5", 2), ("outfile.h5", 3)]


def test_subset_writers_only_io_ranks_talk():
    text = flow_control_config(2, "all", timesteps=3, grid=10, particles=10, producer_nprocs=6)
    report = run(_graph(text.replace("nprocs: 6", "nprocs: 6\n    nwriters: 2", 1)), default_registry())
    senders = {e.rank for e in report.events if e.kind.startswith("send:") and e.rank < 6}
    assert senders == {0, 1}
    assert list(report.consumed[0]) == [1, 2, 3]


def test_io_block_on_non_io_rank_fails():
    reg = TaskRegistry()
    reg.register("t", lambda ctx: ctx.io_block((4,)))
    with pytest.raises(TaskError):
        run(_graph("tasks:\n  - func: t\n    nprocs: 2\n    nwriters: 1\n"), reg)


def test_serve_all_on_non_io_rank_fails():
    reg = TaskRegistry()
    reg.register("t", lambda ctx: ctx.vol.serve_all())
    with pytest.raises(TaskError) as info:
        run(_graph("tasks:\n  - func: t\n    nprocs: 2\n    nwriters: 1\n"), reg)
    assert "rank 1" in str(info.value)


def _every_second_write(vol, rank):
    count = {"writes": 0}

    def after_write(_event):
        count["writes"] += 1
        if count["writes"] % 2 == 0:
            vol.serve_all(True, True)

    vol.set_after_dataset_write(after_write)


def test_serve_every_second_dataset_write():
    actions = ActionRegistry()
    actions.register("actions", "every_second_write", _every_second_write)
    g = _graph(flow_control_config(1 + 1, "all", timesteps=10, grid=10, particles=10).replace(
        "  - func: consumer", '    actions: ["actions", "every_second_write"]\n  - func: consumer', 1))
    report = run(g, default_registry(), actions)
    assert list(report.consumed[0]) == list(range(1, 11))
    assert len([e for e in report.events_of("dataset_write") if e.rank == 0]) == 20
    assert len([e for e in report.events_of("serve") if e.rank == 0]) == 10


def test_nyx_double_close():
    report = run(_graph(nyx_config(0, timesteps=3, nprocs=4, consumer_nprocs=2, cells=10)), default_registry())
    fetched = [e.filename for e in report.events if e.kind == "fetch" and e.rank == 4]
    assert fetched == ["plt00001.h5", "plt00002.h5", "plt00003.h5"]
    assert len([e for e in report.events if e.kind == "close" and e.rank == 0]) == 6
    recvs = [e for e in report.events if e.kind == "broadcast_recv"]
    assert sorted({e.rank for e in recvs}) == [1, 2, 3] and len(recvs) == 9


def test_broadcast_payload_matches_rank0():
    trees = {}
    reg = TaskRegistry()

    def body(ctx):
        if ctx.rank == 0:
            f = ctx.open_file("b.h5", "w")
            f.create_dataset("/x", "f64", (5,)).write(np.arange(5.0) / 3)
            f.close()
        ctx.vol.broadcast_files()
        trees[ctx.rank] = ctx.vol._rt.retained["b.h5"].copy()

    reg.register("t", body)
    actions = ActionRegistry()
    actions.register("keep", "files", lambda vol, rank: None)
    report = run(_graph("tasks:\n  - func: t\n    nprocs: 4\n    actions: [keep, files]\n"), reg, actions)
    assert len(report.events_of("broadcast_recv")) == 3
    assert all(trees[r] == trees[0] for r in range(1, 4))


def test_broadcast_without_retained_file_fails():
    reg = TaskRegistry()
    reg.register("t", lambda ctx: ctx.vol.broadcast_files())
    with pytest.raises(TaskError):
        run(_graph("tasks:\n  - func: t\n    nprocs: 2\n"), reg)


def test_clear_files_leaves_nothing_to_serve():
    reg = TaskRegistry()

    def body(ctx):
        f = ctx.open_file("c.h5", "w")
        f.create_dataset("/x", "u8", (2,)).write([1, 2])
        ctx.vol.clear_files()
        assert ctx.vol.retained_files == []

    reg.register("t", body)
    run(_graph("tasks:\n  - func: t\n    nprocs: 1\n    actions: [actions, nyx]\n"), reg)


def test_hook_point_names():
    assert HookPoint("AfterFileClose") is HookPoint.AFTER_FILE_CLOSE


# -- file transport -------------------------------------------------------------------------


def test_file_mode_channel(tmp_path):
    args = SyntheticWorkload(6, 4, 3, 1, 1).to_args()
    g = _graph(f"""tasks:
  - func: producer
    nprocs: 2
    args: {args}
    outports: [{{filename: outfile.h5, dsets: [{{name: /group1/grid, file: 1, memory: 0}}, {{name: /group1/particles}}]}}]
  - func: consumer
    nprocs: 3
    args: {args}
    inports: [{{filename: outfile.h5, dsets: [{{name: /group1/grid, file: 1, memory: 0}}, {{name: /group1/particles}}]}}]
""")
    report = run(g, default_registry(), storage=str(tmp_path))
    assert list(report.consumed[0]) == [1, 2, 3]
    assert report.events_of("file_read")
    assert (tmp_path / "outfile.h5").exists()

import pytest
from hypothesis import given, settings, strategies as st

from conftest import config_text
from insituflow.config import (All, DatasetSpec, Latest, PortSpec, Some, TaskSpec, WorkflowSpec,
                               parse_workflow, serialize_workflow, strategy_of, validate)
from insituflow.errors import ConfigError


def test_one_producer_two_consumers():
    spec = parse_workflow(config_text("one_producer_two_consumers"))
    assert [t.func for t in spec.tasks] == ["producer", "consumer1", "consumer2"]
    prod = spec.tasks[0]
    assert prod.nprocs == 3 and prod.nwriters == 3 and prod.taskCount == 1
    (out,) = prod.outports
    assert out.filename == "outfile.h5"
    assert [d.name for d in out.dsets] == ["/group1/grid", "/group1/particles"]
    assert all(d.memory == 1 and d.file == 0 for d in out.dsets)
    assert spec.tasks[1].nprocs == 5 and spec.tasks[2].nprocs == 2
    assert spec.tasks[1].inports[0].dsets[0].name == "/group1/grid"
    assert spec.tasks[2].inports[0].dsets[0].name == "/group1/particles"
    assert spec.total_ranks == 10


def test_ensemble_fan_in():
    spec = parse_workflow(config_text("ensemble_fan_in"))
    assert [(t.func, t.taskCount, t.nprocs) for t in spec.tasks] == [("producer", 4, 3), ("consumer", 2, 5)]
    assert spec.total_ranks == 22


def test_single_writer_ensemble():
    freeze = parse_workflow(config_text("single_writer_ensemble")).task("freeze")
    assert (freeze.taskCount, freeze.nprocs, freeze.nwriters) == (64, 32, 1)
    assert freeze.outports[0].filename == "dump-h5md.h5"
    assert freeze.outports[0].dsets[0].name == "/particles/*"


def test_actions_and_io_freq():
    spec = parse_workflow(config_text("double_close_some2"))
    nyx = spec.task("nyx")
    assert nyx.actions == ("actions", "nyx") and nyx.nprocs == 1024
    port = spec.task("reeber").inports[0]
    assert port.filename == "plt*.h5" and port.io_freq == 2
    assert strategy_of(port) == Some(2)


def test_minimal_document():
    spec = parse_workflow("tasks:\n  - func: solo\n    nprocs: 1\n")
    assert spec.tasks == (TaskSpec("solo", 1),)
    assert validate(spec).ok


@pytest.mark.parametrize("freq,expected", [(0, All()), (1, All()), (2, Some(2)), (7, Some(7)), (-1, Latest())])
def test_strategy_of(freq, expected):
    assert strategy_of(PortSpec("a.h5", (DatasetSpec("/x"),), freq)) == expected


def test_strategy_names():
    assert [str(s) for s in (All(), Some(3), Latest())] == ["all", "some(3)", "latest"]
    with pytest.raises(ValueError):
        Some(1)


@pytest.mark.parametrize("text,fragment", [
    ("tasks:\n  - nprocs: 1\n", "func"),
    ("tasks:\n  - func: a\n", "nprocs"),
    ("tasks:\n  - func: a\n    nprocs: 2\n    nwriters: 3\n", "nwriters"),
    ("tasks:\n  - func: a\n    nprocs: 1\n    inports:\n      - filename: f\n        io_freq: -2\n"
     "        dsets: [{name: /x}]\n", "io_freq"),
    ("tasks:\n  - func: a\n    nprocs: 1\n    colour: red\n", "colour"),
    ("tasks:\n  - func: a\n    nprocs: 1\n  - func: a\n    nprocs: 1\n", "duplicate task"),
    ("tasks:\n  - func: a\n    nprocs: 1\n    outports:\n      - filename: f\n"
     "        dsets: [{name: /x}, {name: /x}]\n", "duplicate dataset"),
    ("tasks:\n  - func: a\n    nprocs: 1\n    outports:\n      - filename: f\n"
     "        dsets: [{name: /x, file: 0, memory: 0}]\n", "file/memory"),
    ("tasks:\n  - func: a\n    nprocs: 0\n", "nprocs"),
    ("tasks:\n  - func: a\n    nprocs: 1\n    actions: [only]\n", "actions"),
])
def test_rejections_carry_position(text, fragment):
    with pytest.raises(ConfigError) as info:
        parse_workflow(text)
    assert fragment in str(info.value)
    assert info.value.line is not None


def test_syntax_error_position():
    with pytest.raises(ConfigError) as info:
        parse_workflow("tasks:\n  - func: [a\n")
    assert info.value.line is not None and "syntax" in str(info.value)


def test_range_error_points_at_value():
    with pytest.raises(ConfigError) as info:
        parse_workflow("tasks:\n  - func: a\n    nprocs: 2\n    nwriters: 3\n")
    assert info.value.line == 4


def test_defaults_equal_explicit():
    implicit = parse_workflow(
        "tasks:\n  - func: a\n    nprocs: 4\n    inports:\n      - filename: f.h5\n        dsets: [{name: /x}]\n")
    explicit = parse_workflow(
        "tasks:\n  - func: a\n    nprocs: 4\n    taskCount: 1\n    nwriters: 4\n    inports:\n"
        "      - filename: f.h5\n        io_freq: 0\n        dsets: [{name: /x, file: 0, memory: 1}]\n")
    assert implicit == explicit


def test_validate_clean_config():
    r = validate(parse_workflow(config_text("one_producer_two_consumers")))
    assert (len(r.errors), len(r.warnings)) == (0, 0)


def test_validate_unmatched_memory_inport_is_error():
    text = config_text("one_producer_two_consumers").replace("/group1/grid\n            file: 0\n            memory: 1\n  - func: consumer2",
                              "/group1/mesh\n            file: 0\n            memory: 1\n  - func: consumer2")
    text = text.replace("""  - func: consumer1
    nprocs: 5
    inports:
      - filename: outfile.h5
        dsets:
          - name: /group1/grid""", """  - func: consumer1
    nprocs: 5
    inports:
      - filename: outfile.h5
        dsets:
          - name: /group1/mesh""")
    r = validate(parse_workflow(text))
    assert len(r.errors) == 1 and "/group1/mesh" in str(r.errors[0])
    assert "consumer1" in str(r.errors[0])


def test_validate_file_only_inport_is_warning():
    spec = parse_workflow("tasks:\n  - func: reader\n    nprocs: 1\n    inports:\n"
                          "      - filename: checkpoint.h5\n        dsets: [{name: /x, file: 1, memory: 0}]\n")
    r = validate(spec)
    assert r.ok and len(r.warnings) == 1 and "reads from filesystem" in r.warnings[0].message


def test_validate_cycle_is_warning():
    spec = parse_workflow("""tasks:
  - func: a
    nprocs: 1
    inports: [{filename: x.h5, dsets: [{name: /d}]}]
    outports: [{filename: y.h5, dsets: [{name: /d}]}]
  - func: b
    nprocs: 1
    inports: [{filename: y.h5, dsets: [{name: /d}]}]
    outports: [{filename: x.h5, dsets: [{name: /d}]}]
""")
    r = validate(spec)
    assert r.ok and any("cycle" in w.message for w in r.warnings)


def test_validate_no_common_transport():
    spec = parse_workflow("""tasks:
  - func: a
    nprocs: 1
    outports: [{filename: x.h5, dsets: [{name: /d, file: 1, memory: 0}]}]
  - func: b
    nprocs: 1
    inports: [{filename: x.h5, dsets: [{name: /d, file: 0, memory: 1}]}]
""")
    assert not validate(spec).ok


def test_report_renderings():
    r = validate(parse_workflow(config_text("one_producer_two_consumers")))
    assert "0 error(s), 0 warning(s)" in r.to_text()
    assert r.to_json().startswith("{")


# -- round trip ----------------------------------------------------------------

names = st.text("abcxyz_", min_size=1, max_size=6)
paths = st.lists(st.sampled_from(["grid", "p", "*", "x?"]), min_size=1, max_size=3).map(lambda xs: "/" + "/".join(xs))
dsets = st.builds(lambda n, f, m: DatasetSpec(n, f, 1 if f == 0 else m), paths, st.integers(0, 1), st.integers(0, 1))


def _ports(inport):
    freqs = st.sampled_from([-1, 0, 1, 2, 5]) if inport else st.just(0)
    return st.builds(lambda fn, ds, q: PortSpec(fn, tuple({d.name: d for d in ds}.values()), q),
                     st.sampled_from(["out.h5", "*.h5", "plt*.h5"]), st.lists(dsets, min_size=1, max_size=3), freqs)


@st.composite
def workflows(draw):
    funcs = draw(st.lists(names, min_size=1, max_size=4, unique=True))
    tasks = []
    for f in funcs:
        nprocs = draw(st.integers(1, 8))
        tasks.append(TaskSpec(
            f, nprocs, draw(st.integers(1, 3)), draw(st.integers(1, nprocs)),
            tuple(draw(st.lists(_ports(True), max_size=2))), tuple(draw(st.lists(_ports(False), max_size=2))),
            draw(st.one_of(st.none(), st.just(("actions", "nyx")))),
            draw(st.dictionaries(st.sampled_from(["timesteps", "label"]), st.integers(0, 9), max_size=2)),
        ))
    return WorkflowSpec(tuple(tasks))


@settings(max_examples=150, deadline=None)
@given(workflows())
def test_round_trip(spec):
    assert parse_workflow(serialize_workflow(spec)) == spec

from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from conftest import config_text
from insituflow.config import parse_workflow
from insituflow.graph import build_graph, export_dot, link_instances, match_ports, plan_ranks
from insituflow.patterns import glob_match, patterns_intersect
from oracles import brute_intersect


@pytest.mark.parametrize("a,b,expected", [
    ("outfile.h5", "*.h5", True),
    ("/group1/grid", "/group1/grid", True),
    ("/particles/*", "/group2/x", False),
    ("/particles/*", "/particles/position", True),
    ("*", "a/b", False),
    ("a?c", "abc", True),
    ("plt*.h5", "plt00001.h5", True),
    ("*.h5", "*.nc", False),
])
def test_patterns_intersect_examples(a, b, expected):
    assert patterns_intersect(a, b) is expected
    assert patterns_intersect(b, a) is expected


def test_glob_does_not_cross_separator():
    assert glob_match("/a/*", "/a/b")
    assert not glob_match("/a/*", "/a/b/c")
    assert not glob_match("?", "/")


glob_patterns = st.text("a/c*?", min_size=1, max_size=3)


@settings(max_examples=300, deadline=None)
@given(glob_patterns, glob_patterns)
def test_patterns_intersect_matches_brute_force(a, b):
    assert patterns_intersect(a, b) == brute_intersect(a, b)


def test_match_ports_two_consumers():
    pairs = [(p.func, c.func, o.filename) for p, o, c, _ in match_ports(parse_workflow(config_text("one_producer_two_consumers")))]
    assert pairs == [("producer", "consumer1", "outfile.h5"), ("producer", "consumer2", "outfile.h5")]


def test_match_ports_single_writer():
    ((p, o, c, i),) = match_ports(parse_workflow(config_text("single_writer_ensemble")))
    assert (p.func, c.func, o.dsets[0].name, i.dsets[0].name) == ("freeze", "detector", "/particles/*", "/particles/*")


def test_match_ports_no_inports():
    assert match_ports(parse_workflow("tasks:\n  - func: a\n    nprocs: 1\n")) == []


@pytest.mark.parametrize("p,c,expected", [
    (4, 2, [(0, 0), (1, 1), (2, 0), (3, 1)]),
    (1, 4, [(0, 0), (0, 1), (0, 2), (0, 3)]),
    (3, 3, [(0, 0), (1, 1), (2, 2)]),
])
def test_link_instances_examples(p, c, expected):
    assert link_instances(p, c) == expected


@given(st.integers(1, 16), st.integers(1, 16))
def test_link_instances_appearance_counts(p, c):
    pairs = link_instances(p, c)
    assert len(pairs) == max(p, c)
    pc, cc = Counter(a for a, _ in pairs), Counter(b for _, b in pairs)
    assert set(pc) == set(range(p)) and set(cc) == set(range(c))
    big, small = (pc, cc) if p >= c else (cc, pc)
    assert set(big.values()) == {1}
    assert max(small.values()) - min(small.values()) <= 1


def test_plan_ranks_two_consumers():
    inst = plan_ranks(parse_workflow(config_text("one_producer_two_consumers")))
    assert [(i.func, i.start, i.end) for i in inst] == [("producer", 0, 3), ("consumer1", 3, 8), ("consumer2", 8, 10)]


def test_plan_ranks_total():
    spec = parse_workflow("tasks:\n  - func: p\n    nprocs: 3\n  - func: c\n    nprocs: 1\n")
    assert plan_ranks(spec)[-1].end == 4


def test_plan_ranks_io_subset():
    a, b = plan_ranks(parse_workflow("tasks:\n  - func: t\n    nprocs: 3\n    taskCount: 2\n    nwriters: 1\n"))
    assert (a.ranks, a.io_ranks, b.ranks, b.io_ranks) == (range(0, 3), range(0, 1), range(3, 6), range(3, 4))


def test_build_graph_sizes():
    g1 = build_graph(parse_workflow(config_text("one_producer_two_consumers")))
    assert (len(g1.instances), len(g1.links)) == (3, 2)
    g2 = build_graph(parse_workflow(config_text("ensemble_fan_in")))
    assert (len(g2.instances), len(g2.links)) == (6, 4)
    assert [(l.producer.instance_index, l.consumer.instance_index) for l in g2.links] == link_instances(4, 2)


def test_self_coupled_task_gives_self_link():
    g = build_graph(parse_workflow("tasks:\n  - func: loop\n    nprocs: 1\n"
                                   "    inports: [{filename: s.h5, dsets: [{name: /d}]}]\n"
                                   "    outports: [{filename: s.h5, dsets: [{name: /d}]}]\n"))
    (link,) = g.links
    assert link.producer == link.consumer


def _dot_counts(dot):
    lines = dot.splitlines()
    return sum("[label=" in l and "->" not in l for l in lines), sum("->" in l for l in lines)


def test_export_dot():
    assert _dot_counts(export_dot(build_graph(parse_workflow(config_text("one_producer_two_consumers"))))) == (3, 2)
    assert _dot_counts(export_dot(build_graph(parse_workflow(config_text("ensemble_fan_in"))))) == (6, 4)
    assert _dot_counts(export_dot(build_graph(parse_workflow("tasks:\n  - func: a\n    nprocs: 2\n"))))[1] == 0


def test_dot_labels_strategy():
    dot = export_dot(build_graph(parse_workflow(config_text("double_close_some2"))))
    assert "some(2)" in dot and "nyx[0] (1024, io=1024)" in dot


def test_graph_json():
    g = build_graph(parse_workflow(config_text("one_producer_two_consumers")))
    assert '"consumer1[0]"' in g.to_json()
    assert g.instance_of_rank(9).func == "consumer2"

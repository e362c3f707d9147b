from __future__ import annotations

import importlib
import subprocess
import sys

import networkx as nx
import pytest
from hypothesis import given, settings, strategies as st

from envsynth.errors import BudgetExceeded, UnsatisfiableTopology
from envsynth.toolgraph import Edge, ToolGraph, Trajectory, enumerate_trajectories, validate_tool_graph
from envsynth.toolgraph import _pykernels

BACKENDS = [pytest.param(_pykernels, id="python")]
try:
    BACKENDS.append(pytest.param(importlib.import_module("envsynth.toolgraph._ckernels"), id="cython"))
except ImportError:
    BACKENDS.append(pytest.param(None, id="cython", marks=pytest.mark.skip(reason="extension not built")))


@st.composite
def digraphs(draw, max_nodes=9):
    n = draw(st.integers(1, max_nodes))
    pairs = [(u, v) for u in range(n) for v in range(n) if u != v]
    edges = draw(st.lists(st.sampled_from(pairs), unique=True, max_size=min(len(pairs), 3 * n))) if pairs else []
    return n, edges


def nx_graph(n, edges):
    g = nx.DiGraph()
    g.add_nodes_from(range(n))
    g.add_edges_from(edges)
    return g


@pytest.mark.parametrize("k", BACKENDS)
@settings(max_examples=200, deadline=None)
@given(digraphs())
def test_topology_matches_networkx(k, graph):
    n, edges = graph
    g = nx_graph(n, edges)
    sources, unreachable, cycle = k.validate_topology(n, edges)
    assert sorted(sources) == sorted(v for v in g if g.in_degree(v) == 0)
    reach = set(sources).union(*(nx.descendants(g, s) for s in sources)) if sources else set()
    assert sorted(unreachable) == sorted(set(range(n)) - reach)
    assert bool(cycle) == (not nx.is_directed_acyclic_graph(g))
    if cycle:
        assert cycle[0] == cycle[-1] and len(set(cycle[:-1])) == len(cycle) - 1
        assert all(g.has_edge(a, b) for a, b in zip(cycle, cycle[1:]))


@pytest.mark.parametrize("k", BACKENDS)
@settings(max_examples=200, deadline=None)
@given(digraphs(7), st.integers(1, 5), st.integers(1, 5))
def test_paths_match_networkx(k, graph, lmin, lmax):
    n, edges = graph
    g = nx_graph(n, edges)
    paths, overflow = k.enumerate_paths(n, edges, 0, lmin, lmax, 10**6)
    assert not overflow
    want = {(0,)} | {tuple(p) for t in g if t != 0 for p in nx.all_simple_paths(g, 0, t)}
    want = {p for p in want if lmin <= len(p) <= lmax and (len(p) == lmax or g.out_degree(p[-1]) == 0)}
    assert [tuple(p) for p in paths] == sorted(want)


@pytest.mark.parametrize("k", BACKENDS)
def test_path_cap_overflow(k):
    n = 6
    edges = [(u, v) for u in range(n) for v in range(u + 1, n)]
    paths, overflow = k.enumerate_paths(n, edges, 0, 1, 6, 4)
    assert overflow and len(paths) == 5


def test_backends_agree_on_dense_graph():
    if len(BACKENDS) < 2 or BACKENDS[1].values[0] is None:
        pytest.skip("extension not built")
    c = BACKENDS[1].values[0]
    n = 9
    edges = [(u, v) for u in range(n) for v in range(n) if u != v and (u * 7 + v) % 3]
    assert c.enumerate_paths(n, edges, 0, 2, 6, 10**6) == _pykernels.enumerate_paths(n, edges, 0, 2, 6, 10**6)
    assert c.validate_topology(n, edges) == _pykernels.validate_topology(n, edges)


def test_pure_env_var_forces_fallback():
    code = "from envsynth.toolgraph import BACKEND; print(BACKEND)"
    out = subprocess.run([sys.executable, "-c", code], env={"ENVSYNTH_PURE": "1", "PATH": ""}, capture_output=True, text=True)
    assert out.stdout.strip() == "python"


def chain(*names, extra=()):
    edges = [Edge(a, b, "state_dependency") for a, b in zip(names, names[1:])]
    return ToolGraph(list(names), edges + [Edge(a, b, "state_dependency") for a, b in extra])


def test_validate_reports_named_violations():
    assert validate_tool_graph(chain("auth", "get", "put")) == []
    kinds = {v.kind for v in validate_tool_graph(chain("auth", "get", "put", extra=[("put", "get")]))}
    assert "CycleDetected" in kinds
    g = ToolGraph(["a", "b", "c"], [Edge("a", "b", "state_dependency"), Edge("a", "zz", "made_up")])
    kinds = {v.kind for v in validate_tool_graph(g, tools=["a", "b", "c", "d"])}
    assert {"DanglingEdge", "UnknownEdgeType", "MissingTool", "MultipleSources"} <= kinds


def test_enumerate_trajectories():
    g = chain("auth", "get", "put", extra=[("auth", "put")])
    got = [t.tools for t in enumerate_trajectories(g, 2, 3)]
    assert got == [("auth", "get", "put"), ("auth", "put")]
    assert Trajectory.of(got[0]) == Trajectory.from_dict(Trajectory.of(got[0]).to_dict())
    with pytest.raises(ValueError):
        enumerate_trajectories(g, 0, 3)
    with pytest.raises(UnsatisfiableTopology):
        enumerate_trajectories(ToolGraph(["a", "b"], []), 1, 2)
    with pytest.raises(BudgetExceeded):
        enumerate_trajectories(g, 1, 3, cap=1)


def test_node_link_roundtrip():
    g = chain("auth", "get", "put")
    again = ToolGraph.from_node_link(g.to_node_link())
    assert again.nodes == g.nodes and again.edges == g.edges
    assert g.source() == "auth" and g.sinks() == ["put"]
    assert g.reachability()["auth"] >= {"get", "put"}

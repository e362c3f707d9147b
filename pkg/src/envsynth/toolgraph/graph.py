"""Typed tool-dependency DAGs: inference, validation and trajectory enumeration."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from ..errors import BudgetExceeded, UnsatisfiableTopology
from ..policy import PolicyDoc, ToolContract
from ..policy.dsl import Compare, Literal, Lookup, Ref, compare_values, walk
from ..util import Violation, content_hash
from . import kernels

EDGE_TYPES = ("state_dependency", "information_flow", "storyline_flow")
_WIRE = {t: t.replace("_", " ") for t in EDGE_TYPES}
_FROM_WIRE = {**{v: k for k, v in _WIRE.items()}, **{t: t for t in EDGE_TYPES}}
DEFAULT_PATH_CAP = 200_000


@dataclass(frozen=True, order=True)
class Edge:
    source: str
    target: str
    type: str


@dataclass
class ToolGraph:
    nodes: list[str] = field(default_factory=list)
    edges: list[Edge] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.nodes = list(dict.fromkeys(self.nodes))

    def has_edge(self, u: str, v: str) -> bool:
        return any(e.source == u and e.target == v for e in self.edges)

    def successors(self, u: str) -> list[str]:
        return sorted({e.target for e in self.edges if e.source == u})

    def in_degree(self) -> dict[str, int]:
        deg = {n: 0 for n in self.nodes}
        for e in self.edges:
            if e.target in deg:
                deg[e.target] += 1
        return deg

    def source(self) -> str | None:
        roots = [n for n, d in self.in_degree().items() if d == 0]
        return roots[0] if len(roots) == 1 else None

    def sinks(self) -> list[str]:
        outs = {e.source for e in self.edges}
        return sorted(n for n in self.nodes if n not in outs)

    def reachability(self) -> dict[str, set[str]]:
        """Node -> every node reachable through one or more edges."""
        succ = {n: self.successors(n) for n in self.nodes}
        out: dict[str, set[str]] = {}
        for start in self.nodes:
            seen: set[str] = set()
            stack = list(succ.get(start, ()))
            while stack:
                v = stack.pop()
                if v not in seen:
                    seen.add(v)
                    stack.extend(succ.get(v, ()))
            out[start] = seen
        return out

    def _indexed(self) -> tuple[list[str], dict[str, int], list[tuple[int, int]]]:
        names = sorted(self.nodes)
        idx = {n: i for i, n in enumerate(names)}
        pairs = sorted({(idx[e.source], idx[e.target]) for e in self.edges if e.source in idx and e.target in idx})
        return names, idx, pairs

    def to_node_link(self) -> dict[str, Any]:
        return {
            "directed": True,
            "multigraph": False,
            "graph": {},
            "nodes": [{"id": n} for n in self.nodes],
            "links": [{"source": e.source, "target": e.target, "type": _WIRE.get(e.type, e.type)} for e in self.edges],
        }

    @classmethod
    def from_node_link(cls, data: Mapping[str, Any]) -> "ToolGraph":
        nodes = [n["id"] for n in data.get("nodes", [])]
        links = data.get("links", data.get("edges", []))
        edges = [Edge(l["source"], l["target"], _FROM_WIRE.get(l.get("type", ""), l.get("type", ""))) for l in links]
        return cls(nodes, edges)


@dataclass(frozen=True)
class Trajectory:
    tools: tuple[str, ...]
    hash: str

    @classmethod
    def of(cls, tools: Iterable[str]) -> "Trajectory":
        t = tuple(tools)
        return cls(t, trajectory_hash(t))

    def __len__(self) -> int:
        return len(self.tools)

    def to_dict(self) -> dict[str, Any]:
        return {"tools": list(self.tools), "hash": self.hash}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Trajectory":
        return cls.of(data["tools"])


def trajectory_hash(tools: Iterable[str]) -> str:
    return content_hash({"trajectory": list(tools)})[:24]


# --------------------------------------------------------------------------- validation


def validate_tool_graph(g: ToolGraph, tools: Iterable[str] | None = None) -> list[Violation]:
    """Report every way ``g`` fails to be a single-source, fully reachable DAG."""
    out: list[Violation] = []
    known = set(g.nodes)
    for e in g.edges:
        if e.source not in known or e.target not in known:
            out.append(Violation("DanglingEdge", f"{e.source}->{e.target}"))
        if e.type not in EDGE_TYPES:
            out.append(Violation("UnknownEdgeType", f"{e.source}->{e.target}: {e.type}"))
    for t in sorted(set(tools or ()) - known):
        out.append(Violation("MissingTool", t))
    names, _, pairs = g._indexed()
    sources, unreachable, cycle = kernels.validate_topology(len(names), pairs)
    if not sources:
        out.append(Violation("NoSource", "every node has an incoming edge"))
    elif len(sources) > 1:
        out.append(Violation("MultipleSources", ", ".join(names[i] for i in sources), [names[i] for i in sources]))
    if unreachable:
        out.append(Violation("Unreachable", ", ".join(names[i] for i in unreachable), [names[i] for i in unreachable]))
    if cycle:
        path = [names[i] for i in cycle]
        out.append(Violation("CycleDetected", " -> ".join(path), path))
    return out


# --------------------------------------------------------------------------- enumeration


def enumerate_trajectories(g: ToolGraph, l_min: int, l_max: int, cap: int = DEFAULT_PATH_CAP) -> list[Trajectory]:
    """Simple paths from the source with ``l_min <= len <= l_max`` tools.

    A path shorter than ``l_max`` must end at a sink. Output is sorted
    lexicographically by tool names.
    """
    if l_min < 1 or l_max < 1:
        raise ValueError("path length bounds must be positive")
    src = g.source()
    if src is None:
        raise UnsatisfiableTopology("graph has no unique source", sources=[n for n, d in g.in_degree().items() if d == 0])
    names, idx, pairs = g._indexed()
    paths, overflow = kernels.enumerate_paths(len(names), pairs, idx[src], l_min, l_max, cap)
    if overflow:
        raise BudgetExceeded(f"more than {cap} trajectories", partial=len(paths), cap=cap)
    return [Trajectory.of(names[i] for i in p) for p in paths]


# --------------------------------------------------------------------------- inference


def output_fields(contract: ToolContract, schema: Mapping[str, Iterable[str]], table_map: Mapping[str, str] | None = None) -> set[str]:
    tmap = table_map or {}
    r = contract.returns
    tables: list[str] = []
    if r.kind in ("row", "rows") and r.table:
        tables.append(r.table)
    elif r.kind == "effect":
        tables.extend(m.table for m in contract.side_effects)
    fields: set[str] = set()
    for t in tables:
        fields.update(schema.get(tmap.get(t, t), ()))
    return fields


def _uses_session(contract: ToolContract) -> bool:
    for pre in contract.preconditions:
        for n in walk(pre):
            if isinstance(n, Ref) and n.path[0] == "session":
                return True
    return False


def _mutation_rank(contract: ToolContract) -> int:
    if not contract.side_effects:
        return 0
    return 1 if all(m.kind == "insert" for m in contract.side_effects) else 2


def _blocks(a: ToolContract, b: ToolContract) -> bool:
    """Does a literal written by ``a`` always trip one of ``b``'s REJECT rules?"""
    written = {}
    for m in a.side_effects:
        for col, term in m.assignments:
            if isinstance(term, Literal):
                written[(m.table, col)] = term.value
    if not written:
        return False
    for rule in b.permission_rules:
        if rule.decision != "REJECT" or rule.condition is None:
            continue
        c = rule.condition
        if isinstance(c, Compare) and isinstance(c.left, Lookup) and isinstance(c.right, Literal):
            key = (c.left.table, c.left.field)
            if key in written and compare_values(c.op, written[key], c.right.value):
                return True
    return False


def _creates_cycle(succ: dict[str, set[str]], u: str, v: str) -> bool:
    stack, seen = [v], set()
    while stack:
        x = stack.pop()
        if x == u:
            return True
        if x not in seen:
            seen.add(x)
            stack.extend(succ[x])
    return False


def infer_dependencies(
    policy: PolicyDoc,
    tool_params: Mapping[str, Iterable[str]],
    schema: Mapping[str, Iterable[str]],
    auth_tool: str,
    graph_hint: Mapping[str, Any] | None = None,
    exclude_params: Iterable[str] = (),
    table_map: Mapping[str, str] | None = None,
) -> ToolGraph:
    """Derive a tool DAG from contracts and parameter names.

    State edges run from ``auth_tool`` to every tool whose preconditions read
    the session. Information edges link a tool whose output carries an
    identifier field to every tool requiring a parameter of that name; they
    are added greedily, read-only producers first, and any edge that would
    close a cycle is skipped, as is any edge whose producer writes a value the
    consumer's permission rules reject outright. Storyline edges are added only for tools left
    without a predecessor.
    """
    tools = sorted(policy.contracts)
    missing = [t for t in tools if t not in tool_params]
    if auth_tool not in policy.contracts:
        raise UnsatisfiableTopology(f"authorization tool {auth_tool!r} has no contract")
    if missing:
        raise UnsatisfiableTopology(f"no parameter list for {', '.join(missing)}", tools=missing)
    skip = set(exclude_params)
    edges: list[Edge] = []
    succ: dict[str, set[str]] = {t: set() for t in tools}

    def add(u: str, v: str, kind: str) -> bool:
        if u == v or v in succ[u] or _creates_cycle(succ, u, v):
            return False
        succ[u].add(v)
        edges.append(Edge(u, v, kind))
        return True

    for t in tools:
        if t != auth_tool and _uses_session(policy.contracts[t]):
            add(auth_tool, t, "state_dependency")

    candidates = []
    for a in tools:
        if a == auth_tool:
            continue
        ca = policy.contracts[a]
        produced = {f for f in output_fields(ca, schema, table_map) if f.endswith("_id") and f not in skip}
        for b in tools:
            if b in (a, auth_tool):
                continue
            needed = {p for p in tool_params[b] if p not in skip}
            if produced & needed and not _blocks(ca, policy.contracts[b]):
                candidates.append((_mutation_rank(ca), a, b))
    for _, a, b in sorted(candidates):
        add(a, b, "information_flow")

    indeg = {t: 0 for t in tools}
    for e in edges:
        indeg[e.target] += 1
    orphans = [t for t in tools if t != auth_tool and indeg[t] == 0]
    if graph_hint:
        for link in graph_hint.get("links", []):
            kind = _FROM_WIRE.get(link.get("type", ""), "")
            u, v = link.get("source"), link.get("target")
            if kind == "storyline_flow" and v in orphans and u in succ and add(u, v, kind):
                orphans.remove(v)
    for t in orphans:
        add(auth_tool, t, "storyline_flow")

    g = ToolGraph([auth_tool, *[t for t in tools if t != auth_tool]], edges)
    problems = validate_tool_graph(g, tools)
    if problems:
        raise UnsatisfiableTopology("inferred graph is invalid", violations=[p.to_dict() for p in problems])
    return g

"""Independent reference implementations the library is checked against."""

from __future__ import annotations

import random
import re
from collections import deque
from typing import Any, Iterable

import networkx as nx


def naive_topology(nodes: Iterable[str], edges: Iterable[tuple[str, str]]) -> dict[str, Any]:
    """Sources, unreachable set and cyclicity by one BFS per node."""
    nodes = list(nodes)
    succ: dict[str, set[str]] = {n: set() for n in nodes}
    for u, v in edges:
        succ[u].add(v)
    reach: dict[str, set[str]] = {}
    for n in nodes:
        seen: set[str] = set()
        queue = deque(succ[n])
        while queue:
            v = queue.popleft()
            if v not in seen:
                seen.add(v)
                queue.extend(succ[v])
        reach[n] = seen
    has_pred = {v for n in nodes for v in succ[n]}
    sources = {n for n in nodes if n not in has_pred}
    covered = set(sources).union(*(reach[s] for s in sources)) if sources else set()
    return {
        "sources": sources,
        "unreachable": set(nodes) - covered,
        "cyclic": any(n in reach[n] for n in nodes),
    }


def expected_kinds(truth: dict[str, Any]) -> set[str]:
    kinds = set()
    if not truth["sources"]:
        kinds.add("NoSource")
    elif len(truth["sources"]) > 1:
        kinds.add("MultipleSources")
    if truth["unreachable"]:
        kinds.add("Unreachable")
    if truth["cyclic"]:
        kinds.add("CycleDetected")
    return kinds


def random_violating_graph(rng: random.Random, max_nodes: int = 30) -> tuple[list[str], list[tuple[str, str]]]:
    """A single-source DAG, then zero or more injected defects."""
    n = rng.randint(1, max_nodes)
    names = [f"t{i:02d}" for i in range(n)]
    order = names[:]
    rng.shuffle(order)
    edges = set()
    for i in range(1, n):
        edges.add((order[rng.randrange(i)], order[i]))  # spanning tree from order[0]
        for j in range(i):
            if rng.random() < 0.08:
                edges.add((order[j], order[i]))
    defects = [d for d in ("source", "cycle", "unreachable") if rng.random() < 0.4]
    for d in defects:
        if d == "source":
            extra = f"x{len(names):02d}"
            names.append(extra)
            if n and rng.random() < 0.7:
                edges.add((extra, rng.choice(order)))
        elif d == "cycle" and n >= 2:
            a, b = sorted(rng.sample(range(n), 2))
            edges.add((order[b], order[a]))  # back edge along the topological order
        elif d == "unreachable":
            # a detached loop: nobody reaches it and it has no source of its own
            k = rng.randint(1, 3)
            ring = [f"u{len(names) + i:02d}" for i in range(k)]
            names.extend(ring)
            for i in range(k):
                edges.add((ring[i], ring[(i + 1) % k]))
            if n and rng.random() < 0.5:
                edges.add((ring[0], rng.choice(order)))
    return names, sorted(edges)


def random_rooted_digraph(rng: random.Random, max_nodes: int = 12, density: float = 0.25) -> tuple[list[str], list[tuple[str, str]]]:
    """Random digraph (cycles allowed) with exactly one in-degree-0 node, ``t00``."""
    n = rng.randint(1, max_nodes)
    names = [f"t{i:02d}" for i in range(n)]
    edges = {(u, v) for u in names for v in names if u != v and v != "t00" and rng.random() < density}
    targets = {v for _, v in edges}
    edges |= {("t00", v) for v in names[1:] if v not in targets}
    return names, sorted(edges)


def brute_simple_paths(nodes: list[str], edges: list[tuple[str, str]], source: str, longest: int) -> set[tuple[str, ...]]:
    """Every simple path from ``source`` with at most ``longest`` nodes."""
    g = nx.DiGraph()
    g.add_nodes_from(nodes)
    g.add_edges_from(edges)
    out = {(source,)}
    for target in nodes:
        if target != source:
            out |= {tuple(p) for p in nx.all_simple_paths(g, source, target, cutoff=longest - 1)}
    return out


def trajectories_oracle(paths: set[tuple[str, ...]], sinks: set[str], l_min: int, l_max: int) -> set[tuple[str, ...]]:
    return {p for p in paths if l_min <= len(p) <= l_max and (len(p) == l_max or p[-1] in sinks)}


class IdPermutation:
    """A bijection on identifier strings, applied through arbitrary JSON and free text."""

    def __init__(self, ids: Iterable[str], seed: int) -> None:
        rng = random.Random(seed)
        ids = sorted(set(ids))
        fresh: set[str] = set()
        self.map: dict[str, str] = {}
        for old in ids:
            prefix = old.split("_")[0]
            while True:
                new = f"{prefix}_{rng.getrandbits(40):010x}"
                if new not in fresh and new not in ids:
                    break
            fresh.add(new)
            self.map[old] = new
        assert len(set(self.map.values())) == len(self.map)
        alternation = "|".join(re.escape(k) for k in sorted(self.map, key=len, reverse=True))
        self._re = re.compile(rf"(?<![A-Za-z0-9_])(?:{alternation})(?![A-Za-z0-9_])") if self.map else None

    def text(self, s: str) -> str:
        if self._re is None:
            return s
        return self._re.sub(lambda m: self.map[m.group(0)], s)

    def __call__(self, obj: Any) -> Any:
        if isinstance(obj, str):
            return self.map.get(obj, self.text(obj))
        if isinstance(obj, list):
            return [self(x) for x in obj]
        if isinstance(obj, tuple):
            return tuple(self(x) for x in obj)
        if isinstance(obj, dict):
            return {self(k) if isinstance(k, str) else k: self(v) for k, v in obj.items()}
        return obj


def identifier_values(db_dict: dict[str, Any]) -> set[str]:
    out = set()
    for table in db_dict["tables"].values() if "tables" in db_dict else db_dict.values():
        idcols = [c for c, t in table["columns"].items() if t == "identifier"]
        for row in table["rows"]:
            out |= {row[c] for c in idcols if isinstance(row.get(c), str)}
    return out

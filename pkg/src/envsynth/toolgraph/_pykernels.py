"""Reference implementations of the graph kernels.

Nodes are ``0..n-1`` and adjacency lists must be sorted ascending; callers
number nodes in name order so index order is lexicographic order.
"""

from __future__ import annotations


def adjacency(n, edges):
    adj = [[] for _ in range(n)]
    for u, v in edges:
        adj[u].append(v)
    for row in adj:
        row.sort()
    return adj


def validate_topology(n, edges):
    """Return ``(sources, unreachable, cycle)`` for the graph.

    ``unreachable`` lists nodes no in-degree-0 node reaches; ``cycle`` is one
    closed cycle ``[v0, ..., v0]`` or empty.
    """
    adj = adjacency(n, edges)
    indeg = [0] * n
    for u, v in edges:
        indeg[v] += 1
    sources = [i for i in range(n) if indeg[i] == 0]

    seen = [False] * n
    stack = list(sources)
    for s in sources:
        seen[s] = True
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if not seen[v]:
                seen[v] = True
                stack.append(v)
    unreachable = [i for i in range(n) if not seen[i]]

    color = [0] * n  # 0 white, 1 on stack, 2 done
    cycle = []
    for root in range(n):
        if color[root] or cycle:
            continue
        path = [root]
        iters = [0]
        color[root] = 1
        while path:
            u = path[-1]
            i = iters[-1]
            if i < len(adj[u]):
                iters[-1] = i + 1
                v = adj[u][i]
                if color[v] == 1:
                    cycle = path[path.index(v):] + [v]
                    break
                if color[v] == 0:
                    color[v] = 1
                    path.append(v)
                    iters.append(0)
            else:
                color[u] = 2
                path.pop()
                iters.pop()
    return sources, unreachable, cycle


def enumerate_paths(n, edges, source, lmin, lmax, cap):
    """Simple paths from ``source`` with ``lmin <= len <= lmax`` nodes.

    A path shorter than ``lmax`` is kept only if it ends at a sink. Paths come
    out in lexicographic order of their index sequences. Returns
    ``(paths, overflow)``; on overflow, ``paths`` holds the first ``cap + 1``.
    """
    adj = adjacency(n, edges)
    out = []
    if lmax < 1 or lmin > lmax:
        return out, False
    on_path = [False] * n
    path = [source]
    iters = [0]
    on_path[source] = True
    while path:
        u = path[-1]
        if iters[-1] == 0:
            k = len(path)
            if k >= lmin and (k == lmax or not adj[u]):
                out.append(list(path))
                if len(out) > cap:
                    return out, True
        i = iters[-1]
        if len(path) < lmax and i < len(adj[u]):
            iters[-1] = i + 1
            v = adj[u][i]
            if not on_path[v]:
                on_path[v] = True
                path.append(v)
                iters.append(0)
        else:
            on_path[u] = False
            path.pop()
            iters.pop()
    return out, False

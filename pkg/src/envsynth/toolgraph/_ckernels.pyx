# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled graph kernels; same contracts as ``_pykernels``."""

from libc.stdlib cimport free, malloc


cdef int* _csr(int n, list edges, int** offsets_out) except NULL:
    cdef int m = len(edges)
    cdef int* offsets = <int*>malloc((n + 1) * sizeof(int))
    cdef int* targets = <int*>malloc((m if m > 0 else 1) * sizeof(int))
    cdef int* fill = <int*>malloc((n if n > 0 else 1) * sizeof(int))
    cdef int i, u, v, a, b, tmp
    if offsets == NULL or targets == NULL or fill == NULL:
        free(offsets); free(targets); free(fill)
        raise MemoryError()
    for i in range(n + 1):
        offsets[i] = 0
    for u, v in edges:
        offsets[u + 1] += 1
    for i in range(n):
        offsets[i + 1] += offsets[i]
        fill[i] = offsets[i]
    for u, v in edges:
        targets[fill[u]] = v
        fill[u] += 1
    free(fill)
    # insertion sort per row keeps neighbours ascending
    for i in range(n):
        for a in range(offsets[i] + 1, offsets[i + 1]):
            tmp = targets[a]
            b = a - 1
            while b >= offsets[i] and targets[b] > tmp:
                targets[b + 1] = targets[b]
                b -= 1
            targets[b + 1] = tmp
    offsets_out[0] = offsets
    return targets


def validate_topology(int n, edges):
    cdef list e = list(edges)
    cdef int* off
    cdef int* tg = _csr(n, e, &off)
    cdef int* indeg = <int*>malloc((n if n > 0 else 1) * sizeof(int))
    cdef int* mark = <int*>malloc((n if n > 0 else 1) * sizeof(int))
    cdef int* stack = <int*>malloc((n if n > 0 else 1) * sizeof(int))
    cdef int* iters = <int*>malloc((n if n > 0 else 1) * sizeof(int))
    cdef int i, u, v, top, root, k
    cdef list sources = [], unreachable = [], cycle = []
    try:
        for i in range(n):
            indeg[i] = 0
            mark[i] = 0
        for i in range(off[n]):
            indeg[tg[i]] += 1
        top = 0
        for i in range(n):
            if indeg[i] == 0:
                sources.append(i)
                mark[i] = 1
                stack[top] = i
                top += 1
        while top > 0:
            top -= 1
            u = stack[top]
            for i in range(off[u], off[u + 1]):
                v = tg[i]
                if not mark[v]:
                    mark[v] = 1
                    stack[top] = v
                    top += 1
        for i in range(n):
            if not mark[i]:
                unreachable.append(i)
            mark[i] = 0
        for root in range(n):
            if mark[root] or cycle:
                continue
            top = 1
            stack[0] = root
            iters[0] = off[root]
            mark[root] = 1
            while top > 0:
                u = stack[top - 1]
                if iters[top - 1] < off[u + 1]:
                    v = tg[iters[top - 1]]
                    iters[top - 1] += 1
                    if mark[v] == 1:
                        k = top - 1
                        while stack[k] != v:
                            k -= 1
                        cycle = [stack[i] for i in range(k, top)] + [v]
                        break
                    if mark[v] == 0:
                        mark[v] = 1
                        stack[top] = v
                        iters[top] = off[v]
                        top += 1
                else:
                    mark[u] = 2
                    top -= 1
        return sources, unreachable, cycle
    finally:
        free(off); free(tg); free(indeg); free(mark); free(stack); free(iters)


def enumerate_paths(int n, edges, int source, int lmin, int lmax, long cap):
    cdef list e = list(edges)
    cdef list out = []
    if lmax < 1 or lmin > lmax:
        return out, False
    cdef int* off
    cdef int* tg = _csr(n, e, &off)
    cdef int depth = lmax if lmax < n else n
    cdef int* path = <int*>malloc((depth + 1) * sizeof(int))
    cdef int* iters = <int*>malloc((depth + 1) * sizeof(int))
    cdef char* on_path = <char*>malloc((n if n > 0 else 1) * sizeof(char))
    cdef int i, u, v, top
    cdef bint fresh
    try:
        for i in range(n):
            on_path[i] = 0
        path[0] = source
        iters[0] = off[source]
        on_path[source] = 1
        top = 1
        fresh = True
        while top > 0:
            u = path[top - 1]
            if fresh:
                if top >= lmin and (top == lmax or off[u] == off[u + 1]):
                    out.append([path[i] for i in range(top)])
                    if len(out) > cap:
                        return out, True
                fresh = False
            if top < lmax and iters[top - 1] < off[u + 1]:
                v = tg[iters[top - 1]]
                iters[top - 1] += 1
                if not on_path[v]:
                    on_path[v] = 1
                    path[top] = v
                    iters[top] = off[v]
                    top += 1
                    fresh = True
            else:
                on_path[u] = 0
                top -= 1
        return out, False
    finally:
        free(off); free(tg); free(path); free(iters); free(on_path)

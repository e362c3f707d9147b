"""Compare the compiled and pure-Python tool-graph kernels.

    python benchmarks/bench_kernels.py [--graphs 300] [--nodes 14] [--repeat 3]

Both backends are imported directly, so ``ENVSYNTH_PURE`` has no effect here.
"""

from __future__ import annotations

import argparse
import random
import sys
import time

from envsynth.toolgraph import _pykernels

try:
    from envsynth.toolgraph import _ckernels
except ImportError:
    _ckernels = None


def corpus(count: int, nodes: int, seed: int) -> list[tuple[int, list[tuple[int, int]]]]:
    rng = random.Random(seed)
    out = []
    for _ in range(count):
        n = rng.randint(nodes // 2, nodes)
        # forward edges keep it acyclic; node 0 feeds everyone so it is the source
        edges = {(0, v) for v in range(1, n) if rng.random() < 0.3}
        edges |= {(u, v) for u in range(1, n) for v in range(u + 1, n) if rng.random() < 0.35}
        out.append((n, sorted(edges)))
    return out


def timed(fn, graphs, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(graphs)
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--graphs", type=int, default=300)
    ap.add_argument("--nodes", type=int, default=14)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args(argv)
    graphs = corpus(args.graphs, args.nodes, args.seed)

    backends = {"python": _pykernels}
    if _ckernels is not None:
        backends["cython"] = _ckernels
    else:
        print("compiled kernels not built; timing the fallback only", file=sys.stderr)

    results: dict[str, dict[str, float]] = {}
    for name, mod in backends.items():
        def validate(gs, mod=mod):
            for n, e in gs:
                mod.validate_topology(n, e)

        def enumerate_(gs, mod=mod):
            for n, e in gs:
                mod.enumerate_paths(n, e, 0, 1, 8, 10**7)

        results[name] = {"validate": timed(validate, graphs, args.repeat), "enumerate": timed(enumerate_, graphs, args.repeat)}

    if "cython" in results:
        for n, e in graphs:
            assert _ckernels.enumerate_paths(n, e, 0, 1, 8, 10**7) == _pykernels.enumerate_paths(n, e, 0, 1, 8, 10**7)

    print(f"{args.graphs} graphs, up to {args.nodes} nodes, best of {args.repeat}")
    print(f"{'kernel':<10}" + "".join(f"{b:>12}" for b in results) + ("     speedup" if len(results) > 1 else ""))
    for kernel in ("validate", "enumerate"):
        row = f"{kernel:<10}" + "".join(f"{results[b][kernel] * 1e3:>10.1f}ms" for b in results)
        if len(results) > 1:
            row += f"{results['python'][kernel] / results['cython'][kernel]:>11.1f}x"
        print(row)
    return 0


if __name__ == "__main__":
    sys.exit(main())

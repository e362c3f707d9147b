"""``envsynth`` command line.

Human-readable output goes to stdout. Failures print one JSON object to
stderr (``{"error": code, "message": ..., "details": ...}``) and exit
nonzero: 2 for configuration problems, 1 for everything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from .config import PipelineConfig, load_config
from .errors import ConfigError, EnvSynthError, GraphInvalid, LedgerMissing
from .pipeline import LEDGER, Ledger, resume_pipeline, run_pipeline, tree_hashes
from .util import read_json, write_json

# command -> inclusive step range
RANGES = {"synth": (1, 10), "fuse": (11, 13), "tasks": (14, 17), "rollout": (18, 18)}
CONFIG_COPY = "config.json"
LAST_RUN = "last_run.json"


def parse_steps(text: str) -> tuple[int, int]:
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            lo, hi = int(a), int(b)
        else:
            lo = hi = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected a..b, got {text!r}") from exc
    if not 1 <= lo <= hi <= 18:
        raise argparse.ArgumentTypeError("step range must satisfy 1 <= a <= b <= 18")
    return lo, hi


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="envsynth", description="Synthesize, roll out and score tool-use environments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, steps: bool = True) -> None:
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", type=Path, default=Path("artifacts"), help="artifact directory (default: ./artifacts)")
        p.add_argument("--jobs", type=int, default=1, help="worker threads")
        if steps:
            p.add_argument("--steps", type=parse_steps, help="explicit step range a..b")
            p.add_argument("--stop-after", type=int, help="halt after this step, as an interruption would")

    for name, (lo, hi) in RANGES.items():
        common(sub.add_parser(name, help=f"run steps {lo}-{hi}" if lo != hi else f"run step {lo}"))
    common(sub.add_parser("resume", help="finish an interrupted run from its checkpoint ledger"))
    p = sub.add_parser("eval", help="re-score the rollout logs of a finished run")
    p.add_argument("--out", type=Path, default=Path("artifacts"))
    p.add_argument("--json", action="store_true", help="print the bundle as JSON")
    p = sub.add_parser("report", help="corpus statistics recomputed from raw artifacts")
    p.add_argument("--out", type=Path, default=Path("artifacts"))
    p.add_argument("--json", action="store_true", help="print the bundle as JSON")
    p = sub.add_parser("validate", help="check a tool graph file, or the checkpoint hashes of a run")
    p.add_argument("--graph", type=Path, help="node-link JSON tool graph")
    p.add_argument("--out", type=Path, default=Path("artifacts"))
    return parser


def _config(args: argparse.Namespace, out: Path, required_copy: bool = False) -> PipelineConfig:
    copy = out / CONFIG_COPY
    if args.config is None and copy.exists():
        cfg = load_config(copy, seed=args.seed)
    elif args.config is None and required_copy:
        raise ConfigError(f"no --config given and {copy} does not exist", out=str(out))
    else:
        cfg = load_config(args.config, seed=args.seed)
    if copy.exists() and read_json(copy) != cfg.to_dict():
        raise ConfigError(f"{copy} was written with a different configuration; use a fresh --out", out=str(out))
    return cfg


def _summary(result: Any) -> str:
    parts = [f"executed steps {result.executed or 'none'}", f"skipped {result.skipped or 'none'}"]
    if result.stopped_after is not None:
        parts.append(f"stopped after step {result.stopped_after}")
    return "; ".join(parts)


def cmd_pipeline(args: argparse.Namespace) -> int:
    out: Path = args.out
    cfg = _config(args, out)
    write_json(out / CONFIG_COPY, cfg.to_dict())
    rng = args.steps or RANGES[args.command]
    write_json(out / LAST_RUN, {"command": args.command, "steps": list(rng)})
    result = run_pipeline(cfg, out, step_range=rng, stop_after=args.stop_after, jobs=args.jobs)
    print(_summary(result))
    return 0


def cmd_resume(args: argparse.Namespace) -> int:
    out: Path = args.out
    if not (out / LEDGER).exists():
        raise LedgerMissing(f"no checkpoint ledger under {out}", out=str(out))
    cfg = _config(args, out, required_copy=True)
    # by default finish whatever range the interrupted command was asked to cover
    rng = args.steps
    if rng is None and (out / LAST_RUN).exists():
        rng = tuple(read_json(out / LAST_RUN)["steps"])
    result = resume_pipeline(cfg, out, step_range=rng, stop_after=args.stop_after, jobs=args.jobs)
    print(_summary(result))
    return 0


def _bundle(args: argparse.Namespace) -> Any:
    from .report import build_report

    if not (args.out / LEDGER).exists():
        raise LedgerMissing(f"no checkpoint ledger under {args.out}", out=str(args.out))
    return build_report(args.out)


def cmd_eval(args: argparse.Namespace) -> int:
    bundle = _bundle(args)
    if args.json:
        print(json.dumps({"rollouts": bundle.rollouts, "pass_rate": bundle.pass_rate, "taxonomy": bundle.taxonomy}, indent=2, sort_keys=True))
    else:
        for agent, rate in sorted(bundle.pass_rate.items()):
            tags = ", ".join(f"{t}:{n}" for t, n in sorted(bundle.taxonomy[agent].items()) if n) or "none"
            print(f"{agent}: pass rate {rate:.3f}; tags {tags}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    bundle = _bundle(args)
    problems = bundle.check()
    print(json.dumps(bundle.to_dict(), indent=2, sort_keys=True) if args.json else bundle.render())
    if problems:
        raise EnvSynthError("report counts are inconsistent", problems=problems)
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    if args.graph is not None:
        from .toolgraph import ToolGraph, validate_tool_graph

        try:
            graph = ToolGraph.from_node_link(read_json(args.graph))
        except (OSError, ValueError, KeyError) as exc:
            raise GraphInvalid(f"cannot read graph {args.graph}: {exc}", path=str(args.graph)) from exc
        problems = validate_tool_graph(graph)
        if problems:
            raise GraphInvalid(
                f"{len(problems)} topology violation(s)",
                violations=[v.to_dict() for v in problems],
                kinds=sorted({v.kind for v in problems}),
            )
        print(f"{args.graph}: valid ({len(graph.nodes)} tools, {len(graph.edges)} edges)")
        return 0
    ledger = Ledger(args.out / LEDGER)
    if not ledger.exists():
        raise LedgerMissing(f"no checkpoint ledger under {args.out}", out=str(args.out))
    stale = []
    for step, rec in sorted(ledger.latest().items()):
        if rec["status"] != "done":
            stale.append({"step": step, "status": rec["status"]})
        elif tree_hashes(args.out / f"{step:02d}_{rec['name']}") != rec["outputs"]:
            stale.append({"step": step, "status": "hash mismatch"})
    if stale:
        raise EnvSynthError("checkpointed outputs do not match the ledger", steps=stale)
    print(f"{args.out}: {len(ledger.latest())} checkpointed steps, all hashes match")
    return 0


COMMANDS = {"resume": cmd_resume, "eval": cmd_eval, "report": cmd_report, "validate": cmd_validate}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = COMMANDS.get(args.command, cmd_pipeline)
    try:
        return handler(args)
    except EnvSynthError as exc:
        print(json.dumps(exc.to_json(), sort_keys=True, default=str), file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

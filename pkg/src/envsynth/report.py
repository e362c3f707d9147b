"""Corpus statistics rebuilt from raw artifacts.

Nothing is read from step 18's ``reports.jsonl``: verdicts are recomputed
from the rollout logs and snapshots so a stale aggregate cannot leak in.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .config import PipelineConfig, load_config
from .evaluator import evaluate
from .rollout import RolloutLog
from .steps import Workspace, golden_context
from .tasks import GroundedTask
from .util import read_json, read_jsonl

TAXONOMY = ("H1", "H2", "H3", "H4", "H5", "R1", "R2", "R4", "S1", "S2")


@dataclass
class ReportBundle:
    tasks: int = 0
    domains: dict[str, int] = field(default_factory=dict)
    single_domain: int = 0
    cross_domain: int = 0
    rollouts: int = 0
    turn_depth: dict[int, int] = field(default_factory=dict)
    tool_calls: dict[int, int] = field(default_factory=dict)
    taxonomy: dict[str, dict[str, int]] = field(default_factory=dict)  # agent -> tag -> count
    pass_rate: dict[str, float] = field(default_factory=dict)
    exclusions: dict[str, int] = field(default_factory=dict)

    def check(self) -> list[str]:
        """Internal consistency of the counts; empty when everything adds up."""
        problems = []
        if sum(self.domains.values()) != self.tasks:
            problems.append("domain distribution does not sum to the task count")
        if self.single_domain + self.cross_domain != self.tasks:
            problems.append("single + cross differs from the task count")
        if sum(self.turn_depth.values()) != self.rollouts:
            problems.append("turn-depth histogram does not sum to the rollout count")
        if sum(self.tool_calls.values()) != self.rollouts:
            problems.append("tool-call histogram does not sum to the rollout count")
        return problems

    def to_dict(self) -> dict[str, Any]:
        return {
            "tasks": self.tasks,
            "domains": dict(sorted(self.domains.items())),
            "single_domain": self.single_domain,
            "cross_domain": self.cross_domain,
            "rollouts": self.rollouts,
            "turn_depth": {str(k): v for k, v in sorted(self.turn_depth.items())},
            "tool_calls": {str(k): v for k, v in sorted(self.tool_calls.items())},
            "taxonomy": {a: dict(sorted(t.items())) for a, t in sorted(self.taxonomy.items())},
            "pass_rate": dict(sorted(self.pass_rate.items())),
            "exclusions": dict(sorted(self.exclusions.items())),
        }

    def render(self) -> str:
        lines = [f"tasks: {self.tasks} ({self.single_domain} single-domain, {self.cross_domain} cross-domain)"]
        lines.append("domains:")
        lines += [f"  {d}: {n}" for d, n in sorted(self.domains.items())]
        lines.append(f"rollouts: {self.rollouts}")
        lines.append("turn depth: " + ", ".join(f"{k}:{v}" for k, v in sorted(self.turn_depth.items())))
        lines.append("tool calls: " + ", ".join(f"{k}:{v}" for k, v in sorted(self.tool_calls.items())))
        for agent, tags in sorted(self.taxonomy.items()):
            shown = ", ".join(f"{t}:{n}" for t, n in sorted(tags.items()) if n) or "none"
            lines.append(f"agent {agent}: pass rate {self.pass_rate.get(agent, 0.0):.2f}; tags {shown}")
        lines.append("exclusions: " + ", ".join(f"{k}:{v}" for k, v in sorted(self.exclusions.items())))
        return "\n".join(lines)


def _exclusions(ws: Workspace) -> dict[str, int]:
    out: Counter[str] = Counter()
    single = ws.path(10, "report.json")
    if single.exists():
        for rep in read_json(single).values():
            for e in rep["excluded"]:
                out["sampling:" + e.get("category", e.get("error", "unknown"))] += 1
    tmpl = ws.path(14, "templates.jsonl")
    if tmpl.exists():
        out["template_rejected"] += sum(1 for r in read_jsonl(tmpl) if not r["accepted"])
    grounding = ws.path(15, "report.json")
    if grounding.exists():
        out["creation_failed"] += sum(len(r["excluded"]) for r in read_json(grounding).values())
    filtering = ws.path(16, "exclusions.json")
    if filtering.exists():
        out["replay_failed"] += len(read_json(filtering)["excluded"])
    inst = ws.path(17, "report.json")
    if inst.exists():
        out["instantiation_failed"] += len(read_json(inst)["skipped"])
    return dict(out)


def build_report(root: str | Path, judge: Any = None, config: PipelineConfig | None = None) -> ReportBundle:
    """Rebuild statistics for the run under ``root``.

    ``config`` defaults to the ``config.json`` copy the CLI keeps, and to the
    defaults when there is none.
    """
    root = Path(root)
    if config is None:
        copy = root / "config.json"
        config = load_config(copy) if copy.exists() else PipelineConfig()
    ws = Workspace(root)
    bundle = ReportBundle(exclusions=_exclusions(ws))
    tasks_path = ws.path(17, "tasks.jsonl")
    if not tasks_path.exists():
        return bundle
    items = list(read_jsonl(tasks_path))
    records = {r["id"]: r for r in read_jsonl(ws.path(16, "registry.jsonl"))}
    domains: Counter[str] = Counter()
    depth: Counter[int] = Counter()
    calls: Counter[int] = Counter()
    tags: dict[str, Counter[str]] = {}
    passed: Counter[str] = Counter()
    runs: Counter[str] = Counter()
    logs_dir = ws.path(18, "logs")
    for item in items:
        task = GroundedTask.from_dict(item["task"])
        bundle.tasks += 1
        domains[task.domain] += 1
        if task.cross_domain:
            bundle.cross_domain += 1
        else:
            bundle.single_domain += 1
        if not logs_dir.is_dir():
            continue
        ctx = None
        for path in sorted(logs_dir.glob(f"{task.task_id}.*.jsonl")):
            agent = path.name[len(task.task_id) + 1 : -len(".jsonl")]
            raw = list(read_jsonl(path))
            head = raw[0]
            snaps = {
                addr: ws.snapshot(ws.rel(ws.path(18, "snapshots", f"{addr}.json")))
                for addr in (head["final_snapshot"],)
            }
            if ctx is None:
                ctx, initial, _ = golden_context(ws, task, records[item["record"]], config.epsilon)
            snaps[initial.address] = initial
            log = RolloutLog.from_records(raw, snaps)
            report = evaluate(log, ctx, judge, r_tags_fail=config.r_tags_fail)
            bundle.rollouts += 1
            runs[agent] += 1
            depth[log.rounds] += 1
            calls[len(log.tool_calls())] += 1
            bucket = tags.setdefault(agent, Counter({t: 0 for t in TAXONOMY}))
            bucket.update(report.tags)
            passed[agent] += report.final == 1.0
    bundle.domains = dict(domains)
    bundle.turn_depth = dict(depth)
    bundle.tool_calls = dict(calls)
    bundle.taxonomy = {a: dict(c) for a, c in tags.items()}
    bundle.pass_rate = {a: passed[a] / runs[a] for a in runs}
    return bundle

"""Cross-domain composition: domain pairing, trajectory fusion and policy merging."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from .blueprint import Blueprint
from .errors import EmptyRegistry, PolicyParseError, UnparseableBridgeRule, UnresolvedConflict
from .policy import PolicyDoc, parse_policy, parse_predicate, to_source
from .policy.document import BridgeRule
from .policy.dsl import Compare, Literal, check_references, referenced_tables
from .ports import SynthesisPort
from .tasks import ValidatedRegistry
from .toolgraph import Trajectory
from .util import read_jsonl, write_jsonl

log = logging.getLogger(__name__)

SEP = "__"
DEFAULT_PAIRS = 6


# --------------------------------------------------------------------------- pairing


def shared_people(a: Blueprint, b: Blueprint) -> set[str]:
    people_a = {n for n, e in a.entities.items() if e.is_person}
    people_b = {n for n, e in b.entities.items() if e.is_person}
    return people_a & people_b


def pair_domains(blueprints: Mapping[str, Blueprint], provider: SynthesisPort | None = None) -> list[tuple[str, str]]:
    """Domain combinations to fuse.

    The provider may name viable pairs; when it declines (returns nothing),
    every pair of servers sharing a person entity qualifies.
    """
    names = sorted(blueprints)
    if provider is not None:
        proposed = provider.generate("domain_pairs", {"domains": {n: blueprints[n].to_dict() for n in names}})
        if proposed:
            out = []
            for a, b in proposed:
                if a in blueprints and b in blueprints and a != b and (a, b) not in out:
                    out.append((a, b))
            return out
    return [(a, b) for a, b in itertools.combinations(names, 2) if shared_people(blueprints[a], blueprints[b])]


def combo_name(a: str, b: str) -> str:
    return f"{a}_{b}"


# --------------------------------------------------------------------------- trajectories


@dataclass(frozen=True)
class CrossTrajectory:
    tau_a: Trajectory
    domain_a: str
    tau_b: Trajectory
    domain_b: str
    motivation: str = ""

    def tools(self, sep: str = SEP) -> list[str]:
        return [f"{self.domain_a}{sep}{t}" for t in self.tau_a.tools] + [f"{self.domain_b}{sep}{t}" for t in self.tau_b.tools]

    def trajectory(self, sep: str = SEP) -> Trajectory:
        return Trajectory.of(self.tools(sep))

    @property
    def key(self) -> tuple[str, str]:
        return (self.tau_a.hash, self.tau_b.hash)

    def to_dict(self) -> dict[str, Any]:
        return {
            "domain_a": self.domain_a,
            "tau_a": list(self.tau_a.tools),
            "domain_b": self.domain_b,
            "tau_b": list(self.tau_b.tools),
            "motivation": self.motivation,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CrossTrajectory":
        return cls(Trajectory.of(d["tau_a"]), d["domain_a"], Trajectory.of(d["tau_b"]), d["domain_b"], d.get("motivation", ""))


def fuse_trajectories(
    domain_a: str,
    domain_b: str,
    registry_a: ValidatedRegistry,
    registry_b: ValidatedRegistry,
    provider: SynthesisPort,
    out_path: Path | None = None,
    count: int = DEFAULT_PAIRS,
) -> list[CrossTrajectory]:
    """Ask the provider for pairings and keep only those whose segments both validated.

    Pruning is a registry lookup, so nothing here touches a runtime. When
    ``out_path`` already holds this combo's pairings they are returned as is
    and the provider is not consulted again.
    """
    if out_path is not None and Path(out_path).exists():
        return [CrossTrajectory.from_dict(r) for r in read_jsonl(Path(out_path))]
    ha, hb = registry_a.hashes(), registry_b.hashes()
    if not ha or not hb:
        raise EmptyRegistry(f"no validated trajectories for {domain_a if not ha else domain_b}", domain_a=domain_a, domain_b=domain_b)
    proposals = provider.generate(
        "cross_pairs",
        {"domain_a": domain_a, "domain_b": domain_b, "trajectories_a": ha, "trajectories_b": hb, "count": count},
    )
    out: list[CrossTrajectory] = []
    seen: set[tuple[str, str]] = set()
    for p in proposals or []:
        a, b = p.get("tau_a"), p.get("tau_b")
        if a not in registry_a or b not in registry_b:
            log.info("pruned unvalidated pairing %s + %s", a, b)
            continue
        if (a, b) in seen:
            continue
        seen.add((a, b))
        ta = Trajectory.of(registry_a.entries[a]["tools"])
        tb = Trajectory.of(registry_b.entries[b]["tools"])
        out.append(CrossTrajectory(ta, domain_a, tb, domain_b, p.get("motivation", "")))
    if out_path is not None:
        write_jsonl(Path(out_path), [c.to_dict() for c in out])
    return out


# --------------------------------------------------------------------------- policies


@dataclass
class Conflict:
    rule_a: str
    rule_b: str
    resolution: str = ""

    def to_dict(self) -> dict[str, str]:
        return {"rule_a": self.rule_a, "rule_b": self.rule_b, "resolution": self.resolution}


@dataclass
class MergedPolicy:
    doc: PolicyDoc
    text: str
    sources: dict[str, str]  # merged tool name -> (domain, original tool)
    conflicts: list[Conflict] = field(default_factory=list)
    dropped_bridges: list[dict[str, Any]] = field(default_factory=list)

    @property
    def bridge_rules(self) -> tuple[BridgeRule, ...]:
        return self.doc.bridge_rules

    def report(self) -> dict[str, Any]:
        return {
            "domain": self.doc.domain,
            "tools": len(self.doc.contracts),
            "bridge_rules": [b.source() for b in self.doc.bridge_rules],
            "conflicts": [c.to_dict() for c in self.conflicts],
            "dropped_bridge_rules": self.dropped_bridges,
        }


def _contradict(x: Any, y: Any) -> bool:
    if not (isinstance(x, Compare) and isinstance(y, Compare)):
        return False
    if x.left != y.left or not isinstance(x.right, Literal) or not isinstance(y.right, Literal):
        return False
    ops = {x.op, y.op}
    same = x.right == y.right
    if ops == {"="}:
        return not same
    return ops == {"=", "!="} and same


def _global_rules(
    a: PolicyDoc, b: PolicyDoc, resolutions: Mapping[str, str]
) -> tuple[list[Any], list[Conflict]]:
    rules = list(a.global_rules)
    conflicts: list[Conflict] = []
    for r in b.global_rules:
        if r in rules:
            continue  # identical rule, keep one copy
        clash = next((x for x in a.global_rules if _contradict(x, r)), None)
        if clash is None:
            rules.append(r)
            continue
        ra, rb = to_source(clash), to_source(r)
        choice = resolutions.get(f"{ra} | {rb}", "")
        if choice not in ("keep_a", "keep_b"):
            conflicts.append(Conflict(ra, rb))
            continue
        conflicts.append(Conflict(ra, rb, choice))
        if choice == "keep_b":
            rules[rules.index(clash)] = r
    unresolved = [c for c in conflicts if not c.resolution]
    if unresolved:
        raise UnresolvedConflict(
            f"{len(unresolved)} conflicting global rule(s) need a resolution",
            conflicts=[c.to_dict() for c in unresolved],
        )
    return rules, conflicts


def _open_tag(name: str, requires_confirmation: bool, source: str) -> str:
    attrs = f' name="{name}"'
    if requires_confirmation:
        attrs += ' confirmation="required"'
    return f"  <tool{attrs} source=\"{source}\">"


def _body_lines(block: str) -> list[str]:
    lines = block.split("\n")
    return lines[1:] if lines and lines[0].lstrip().startswith("<tool") else lines


def creating_tools(bp: Blueprint, policy: PolicyDoc) -> list[dict[str, str]]:
    """Tools that insert a relationship row, with the non-core entity they book."""
    out = []
    for f in bp.functions:
        c = policy.contracts.get(f.name)
        if c is None or not any(m.kind == "insert" for m in c.side_effects):
            continue
        for p, spec in f.parameters.items():
            table = spec.source.partition(".")[0]
            ent = bp.entities.get(table)
            if ent is not None and table != bp.core_entity and ent.primary_key == p:
                out.append({"name": f.name, "peripheral": table, "peripheral_key": p})
                break
    return out


def merge_policies(
    p_a: PolicyDoc,
    p_b: PolicyDoc,
    provider: SynthesisPort,
    bp_a: Blueprint,
    bp_b: Blueprint,
    fused_schema: Mapping[str, Iterable[str]],
    resolutions: Mapping[str, str] | None = None,
    sep: str = SEP,
) -> MergedPolicy:
    """Merge two single-domain policies under ``<server><sep>`` tool prefixes.

    Tool blocks are copied line for line; only the opening tag changes, gaining
    a ``source`` attribute. Bridge rules come from the provider and are parsed
    and checked against ``fused_schema``: a rule that names an unknown tool
    raises, one that fails the reference check or does not span both domains
    is dropped and listed in the report.
    """
    a, b = bp_a.server_name, bp_b.server_name
    overlap = {f"{a}{sep}{t}" for t in p_a.contracts} & {f"{b}{sep}{t}" for t in p_b.contracts}
    if a == b or overlap:
        raise ValueError("tool namespaces must be disjoint after prefixing")
    rules, conflicts = _global_rules(p_a, p_b, resolutions or {})

    core = bp_b.entities.get(bp_b.core_entity)
    proposals = provider.generate(
        "bridge_rules",
        {
            "domain_a": a,
            "domain_b": b,
            "core_key": core.primary_key if core else bp_b.core_entity.lower() + "_id",
            "relationships_a": [r.name for r in bp_a.relationships],
            "creating_tools_b": creating_tools(bp_b, p_b),
        },
    )
    tools = {f"{a}{sep}{t}" for t in p_a.contracts} | {f"{b}{sep}{t}" for t in p_b.contracts}
    owned_a = set(bp_a.entities) | {f"{a}_{r.name}" for r in bp_a.relationships}
    owned_b = set(bp_b.entities) | {f"{b}_{r.name}" for r in bp_b.relationships}
    schema = {t: list(c) for t, c in fused_schema.items()}
    bridges: list[str] = []
    dropped: list[dict[str, Any]] = []
    for raw in proposals or []:
        tool, sep_, body = str(raw).partition(":")
        tool = tool.strip()
        if not sep_ or not tool:
            raise UnparseableBridgeRule(f"bridge rule without a tool prefix: {raw!r}", rule=raw)
        try:
            pred = parse_predicate(body.strip())
        except PolicyParseError as exc:
            raise UnparseableBridgeRule(f"cannot parse bridge rule {raw!r}: {exc}", rule=raw) from exc
        if tool not in tools:
            raise UnparseableBridgeRule(f"bridge rule for unknown tool {tool!r}", rule=raw)
        issues = [i for i in check_references(pred, schema) if i.kind in ("table", "column")]
        tables = referenced_tables(pred)
        if issues:
            dropped.append({"rule": raw, "reason": "; ".join(f"unknown {i.kind} {i.name}" for i in issues)})
        elif not (tables & owned_a and tables & owned_b):
            dropped.append({"rule": raw, "reason": "does not reference both domains"})
        else:
            bridges.append(f"{tool}: {to_source(pred)}")

    lines = [f'<policy domain="{combo_name(a, b)}">']
    lines.append(f"  <description>Merged policy for {a} and {b}.</description>")
    if rules:
        lines += ["  <global_rules>", *[f"    {to_source(r)}" for r in rules], "  </global_rules>"]
    if bridges:
        lines += ["  <bridge_rules>", *[f"    {r}" for r in bridges], "  </bridge_rules>"]
    sources: dict[str, str] = {}
    for ns, doc in ((a, p_a), (b, p_b)):
        for name, c in doc.contracts.items():
            merged = f"{ns}{sep}{name}"
            sources[merged] = f"{ns}:{name}"
            lines.append(_open_tag(merged, c.requires_confirmation, ns))
            lines.extend(_body_lines(c.block_text))
            lines.append("  </tool>")
    lines.append("</policy>")
    text = "\n".join(lines) + "\n"
    return MergedPolicy(parse_policy(text), text, sources, conflicts, dropped)

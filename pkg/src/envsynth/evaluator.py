"""Rollout scoring: golden pruning, action matching, state diffs, rule tags, composition."""

from __future__ import annotations

import hashlib
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

from .catalog import Catalog
from .datastore import Database, Snapshot
from .errors import JudgePortFailure, MissingEvaluator, SchemaMismatch
from .policy import PolicyDoc
from .policy.dsl import referenced_tables
from .ports import JudgePort
from .rollout import RolloutLog, asked_slots, is_confirmation_request
from .runtime import Runtime
from .tasks import GroundedTask, StepRecord
from .toolgraph import ToolGraph
from .util import canonical_json

EPSILON = 1e-4
EVALUATORS = ("action", "environment", "rules")
S_TAGS = ("S1", "S2")
R_TAGS = ("R1", "R2", "R4")
H_TAGS = ("H1", "H2", "H3", "H4", "H5")
_CLAIM = re.compile(r"\b(all done|completed|done|success|successfully)\b", re.I)


# --------------------------------------------------------------------------- fuzzy matching


def fuzzy_equal(a: Any, b: Any, eps: float = EPSILON) -> bool:
    """Numbers within ``eps``, strings case-insensitively, containers elementwise."""
    num = (int, float)
    if isinstance(a, bool) or isinstance(b, bool):
        return type(a) is type(b) and a == b
    if isinstance(a, num) and isinstance(b, num):
        if math.isnan(a) or math.isnan(b):
            return False
        # the slack absorbs binary rounding of decimal inputs right at the bound
        return abs(a - b) <= eps * (1 + 1e-9)
    if isinstance(a, str) and isinstance(b, str):
        return a.casefold() == b.casefold()
    if isinstance(a, (list, tuple)) and isinstance(b, (list, tuple)):
        return len(a) == len(b) and all(fuzzy_equal(x, y, eps) for x, y in zip(a, b))
    if isinstance(a, dict) and isinstance(b, dict):
        return a.keys() == b.keys() and all(fuzzy_equal(a[k], b[k], eps) for k in a)
    return a == b and type(a) is type(b)


# --------------------------------------------------------------------------- facts and pruning


Fact = tuple[str, str, str]


def _fact_value(v: Any) -> str:
    return canonical_json(v)


def _row_facts(row: Mapping[str, Any], scope: str) -> set[Fact]:
    return {(scope, k, _fact_value(v)) for k, v in row.items()}


def facts(payload: Any, table: str = "", key: str | None = None) -> set[Fact]:
    """(scope, field, value) triples carried by one tool output.

    Rows are scoped by table and primary key, so equal values on different
    rows stay distinct facts.
    """
    out: set[Fact] = set()
    if not isinstance(payload, Mapping):
        if payload is not None:
            out.add((table, "", _fact_value(payload)))
        return out
    if "effects" in payload:
        for e in payload["effects"]:
            if isinstance(e.get("row"), Mapping):
                out |= _row_facts(e["row"], f"{e.get('table', '')}:{e.get('key')}")
        return out
    if "rows" in payload and isinstance(payload["rows"], list):
        for r in payload["rows"]:
            if isinstance(r, Mapping):
                out |= _row_facts(r, f"{table}:{r.get(key)}" if key else table)
        return out
    scope = f"{table}:{payload.get(key)}" if key and key in payload else table
    return _row_facts(payload, scope)


@dataclass
class GoldenStep:
    tool: str
    args: dict[str, Any]
    output: Any
    mutating: bool  # changes database or session state: never pruned
    confirm: bool = False
    table: str = ""
    key: str | None = None

    def facts(self) -> set[Fact]:
        return facts(self.output, self.table, self.key)

    def to_dict(self) -> dict[str, Any]:
        return {
            "tool": self.tool, "args": self.args, "output": self.output, "mutating": self.mutating,
            "confirm": self.confirm, "table": self.table, "key": self.key,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "GoldenStep":
        return cls(d["tool"], dict(d["args"]), d.get("output"), d["mutating"], d.get("confirm", False), d.get("table", ""), d.get("key"))


def golden_steps(records: Iterable[StepRecord | Mapping[str, Any]], policy: PolicyDoc, catalog: Catalog) -> list[GoldenStep]:
    """Golden calls from a registry execution record (commits only)."""
    out = []
    for rec in records:
        r = rec if isinstance(rec, StepRecord) else StepRecord.from_dict(rec)
        c = policy.contracts[r.tool]
        table = catalog.resolve(r.tool, c.returns.table) if c.returns.table else ""
        out.append(
            GoldenStep(
                r.tool,
                {k: v for k, v in r.args.items() if k != "confirm"},
                r.result.get("payload"),
                c.mutating or catalog.is_auth(r.tool),
                bool(c.mutating and c.requires_confirmation),
                table,
                catalog.primary_key(table) if table else None,
            )
        )
    return out


def prune_golden(golden: Sequence[GoldenStep]) -> list[GoldenStep]:
    """Drop read-only calls whose facts were all exposed by earlier retained outputs."""
    kept: list[GoldenStep] = []
    seen: set[Fact] = set()
    for g in golden:
        f = g.facts()
        if g.mutating or not f <= seen:
            kept.append(g)
            seen |= f
    return kept


def replay(golden: Sequence[GoldenStep], runtime: Runtime) -> tuple[list[dict[str, Any]], Database]:
    """Re-run golden calls in a fresh session; returns results and the final database."""
    sid = runtime.create_session()
    results = []
    for g in golden:
        args = {**g.args, "confirm": True} if g.confirm else dict(g.args)
        results.append(runtime.invoke(sid, g.tool, args).to_dict())
    return results, runtime.session(sid).db


# --------------------------------------------------------------------------- actions


@dataclass
class DependencyModel:
    """Which pairs of calls must keep their relative order."""

    reach: dict[str, set[str]] = field(default_factory=dict)
    reads: dict[str, set[str]] = field(default_factory=dict)
    writes: dict[str, set[str]] = field(default_factory=dict)

    def dependent(self, a: str, b: str) -> bool:
        if b in self.reach.get(a, ()) or a in self.reach.get(b, ()):
            return True
        wa, wb = self.writes.get(a, set()), self.writes.get(b, set())
        ta, tb = wa | self.reads.get(a, set()), wb | self.reads.get(b, set())
        return bool(wa & tb or wb & ta)

    @classmethod
    def build(cls, policy: PolicyDoc, catalog: Catalog, graphs: Mapping[str, ToolGraph], sep: str = "__") -> "DependencyModel":
        reach: dict[str, set[str]] = {}
        for ns, g in graphs.items():
            pre = f"{ns}{sep}" if ns else ""
            for u, vs in g.reachability().items():
                reach[pre + u] = {pre + v for v in vs}
        reads: dict[str, set[str]] = {}
        writes: dict[str, set[str]] = {}
        for name, c in policy.contracts.items():
            if name not in catalog.tools:
                continue
            r = {catalog.resolve(name, t) for p in (*c.preconditions, *(x.condition for x in c.permission_rules if x.condition)) for t in referenced_tables(p)}
            if c.returns.table:
                r.add(catalog.resolve(name, c.returns.table))
            reads[name] = r
            writes[name] = {catalog.resolve(name, m.table) for m in c.side_effects}
        return cls(reach, reads, writes)


@dataclass
class ActionCall:
    tool: str
    args: dict[str, Any]
    status: str


def rollout_calls(log: RolloutLog) -> list[ActionCall]:
    out = []
    for call, result in log.tool_calls():
        args = {k: v for k, v in (call.content.get("args") or {}).items() if k != "confirm"} if isinstance(call.content.get("args"), Mapping) else {}
        out.append(ActionCall(str(call.content.get("tool_name")), args, result.content.get("status", "error")))
    return out


def _matches(g: GoldenStep, c: ActionCall, ignore: set[str], eps: float = EPSILON) -> bool:
    if c.tool != g.tool or c.status != "ok":
        return False
    return all(p in c.args and fuzzy_equal(v, c.args[p], eps) for p, v in g.args.items() if p not in ignore)


def eval_actions(
    calls: Sequence[ActionCall],
    golden: Sequence[GoldenStep],
    deps: DependencyModel,
    nondeterministic: Mapping[str, set[str]] | None = None,
    destructive: Callable[[str], bool] | None = None,
    eps: float = EPSILON,
) -> dict[str, Any]:
    """Score 1 iff every golden call is matched in a dependency-respecting order
    and no unmatched call changed state."""
    nondet = nondeterministic or {}
    is_destructive = destructive or (lambda tool: tool in deps.writes and bool(deps.writes[tool]))
    cands = [[i for i, c in enumerate(calls) if _matches(g, c, nondet.get(g.tool, set()), eps)] for g in golden]
    dep = [[deps.dependent(golden[i].tool, golden[j].tool) for j in range(len(golden))] for i in range(len(golden))]
    missing = [golden[k].tool for k, cs in enumerate(cands) if not cs]
    assign: list[int] = []
    used: set[int] = set()

    def search(k: int) -> bool:
        if k == len(golden):
            return True
        for i in cands[k]:
            if i in used:
                continue
            if any(dep[j][k] and assign[j] > i for j in range(k)):
                continue
            assign.append(i)
            used.add(i)
            if search(k + 1):
                return True
            assign.pop()
            used.discard(i)
        return False

    details: dict[str, Any] = {}
    if missing:
        details["missing"] = missing
        return {"score": 0.0, "details": details}
    if not search(0):
        details["order_violation"] = True
        return {"score": 0.0, "details": details}
    extras = [c.tool for i, c in enumerate(calls) if i not in used and c.status == "ok" and is_destructive(c.tool)]
    if extras:
        details["destructive_extras"] = extras
        return {"score": 0.0, "details": details}
    details["matched"] = list(assign)
    return {"score": 1.0, "details": details}


# --------------------------------------------------------------------------- diffs


@dataclass
class Diff:
    tables: dict[str, dict[str, list[Any]]] = field(default_factory=dict)

    @property
    def empty(self) -> bool:
        return not any(any(v for v in t.values()) for t in self.tables.values())

    def to_dict(self) -> dict[str, Any]:
        return self.tables

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Diff) and canonical_json(self.tables) == canonical_json(other.tables)


def _db(x: Snapshot | Database) -> Database:
    return x.database() if isinstance(x, Snapshot) else x


def _entity_tokens(*dbs: Database) -> dict[Any, str]:
    """Identifier value -> token naming the referenced entity by its content."""
    out: dict[Any, str] = {}
    for db in dbs:
        for t in db.tables.values():
            if t.kind != "entity" or not t.primary_key:
                continue
            idcols = {c for c, ty in t.columns.items() if ty == "identifier"}
            for r in t.rows:
                key = r.get(t.primary_key)
                if key in out or not isinstance(key, (str, int)):
                    continue
                content = canonical_json({t.name: {c: v for c, v in sorted(r.items()) if c not in idcols}})
                out[key] = "@" + hashlib.sha256(content.encode()).hexdigest()[:16]
    return out


def _canon(row: Mapping[str, Any], columns: Mapping[str, str], tokens: Mapping[Any, str], skip: set[str]) -> str:
    out = {}
    for c in sorted(columns):
        if c in skip:
            continue
        v = row.get(c)
        if columns[c] == "identifier" and v is not None:
            v = tokens.get(v, "<id>") if isinstance(v, (str, int)) else "<id>"
        out[c] = v
    return canonical_json(out)


def compute_diff(initial: Snapshot | Database, final: Snapshot | Database, ignore: Mapping[str, Iterable[str]] | None = None) -> Diff:
    """Row-level delta with identifiers replaced by content tokens."""
    a, b = _db(initial), _db(final)
    if a.tables.keys() != b.tables.keys() or any(a.tables[t].columns != b.tables[t].columns for t in a.tables):
        raise SchemaMismatch("snapshots have different schemas")
    tokens = _entity_tokens(a, b)
    skips = {t: set(c) for t, c in (ignore or {}).items()}
    out: dict[str, dict[str, list[Any]]] = {}
    for name in sorted(a.tables):
        ta, tb = a.tables[name], b.tables[name]
        skip = skips.get(name, set())
        pk = ta.primary_key
        if pk is None:
            before = Counter(_canon(r, ta.columns, tokens, skip) for r in ta.rows)
            after = Counter(_canon(r, tb.columns, tokens, skip) for r in tb.rows)
            added, removed, modified = sorted((after - before).elements()), sorted((before - after).elements()), []
        else:
            ia = {r.get(pk): r for r in ta.rows}
            ib = {r.get(pk): r for r in tb.rows}
            added = sorted(_canon(ib[k], tb.columns, tokens, skip) for k in ib if k not in ia)
            removed = sorted(_canon(ia[k], ta.columns, tokens, skip) for k in ia if k not in ib)
            modified = []
            for k in ia:
                if k in ib and ia[k] != ib[k]:
                    x, y = _canon(ia[k], ta.columns, tokens, skip), _canon(ib[k], tb.columns, tokens, skip)
                    if x != y:
                        modified.append([x, y])
            modified.sort()
        if added or removed or modified:
            out[name] = {"added": added, "removed": removed, "modified": modified}
    return Diff(out)


def eval_environment(agent: Diff, gold: Diff) -> dict[str, Any]:
    """1 iff the gold delta is contained in the agent delta, row by row."""
    missing: dict[str, dict[str, int]] = {}
    for table, parts in gold.tables.items():
        mine = agent.tables.get(table, {})
        for kind, rows in parts.items():
            have = Counter(canonical_json(r) for r in mine.get(kind, []))
            need = Counter(canonical_json(r) for r in rows)
            short = need - have
            if short:
                missing.setdefault(table, {})[kind] = sum(short.values())
    return {"score": 0.0 if missing else 1.0, "details": {"missing": missing} if missing else {}}


# --------------------------------------------------------------------------- rules


def eval_rules(
    log: RolloutLog,
    task: GroundedTask,
    policy: PolicyDoc,
    catalog: Catalog | None = None,
    rescore: Callable[[int], float] | None = None,
    r_tags_fail: bool = False,
) -> dict[str, Any]:
    """Deterministic taxonomy checks. S tags fail the score; R tags are reported.

    ``rescore(i)`` returns the action score with the i-th tool call removed; it
    enables the unnecessary-call (R4) check.
    """
    tags: list[str] = []
    details: dict[str, list[Any]] = {}

    def tag(name: str, info: Any) -> None:
        if name not in tags:
            tags.append(name)
        details.setdefault(name, []).append(info)

    previews: dict[str, int] = {}  # pairing key -> turn index of the preview result
    affirmed_after: set[str] = set()
    user_text = ""
    seen: set[Fact] = set()
    call_index = -1
    base = None if rescore is None else rescore(-1)
    for i, t in enumerate(log.turns):
        if t.actor == "user":
            if t.meta.get("affirm"):
                affirmed_after |= set(previews)
            user_text += " " + str(t.content)
            continue
        if t.actor == "assistant" and not t.is_tool_call:
            text = str(t.content)
            if is_confirmation_request(text):
                continue
            for slot in asked_slots(text, task.synonyms):
                value = task.hidden_user_knowledge.get(slot)
                if value is not None and str(value).lower() in user_text.lower():
                    tag("R1", {"turn": i, "slot": slot})
                elif value is not None and any(f[2] == canonical_json(value) for f in seen):
                    tag("R2", {"turn": i, "slot": slot})
            continue
        if t.actor != "tool":
            continue
        call_index += 1
        res = t.content
        meta = res.get("meta", {})
        tool = meta.get("tool", "")
        status = res.get("status")
        key = meta.get("pairing_key")
        if status == "rejected":
            tag("S2", {"turn": i, "tool": tool, "reason": res.get("reason")})
        contract = policy.contracts.get(tool)
        if status == "needs_confirmation" and key:
            previews[key] = i
            affirmed_after.discard(key)
            continue
        if status == "ok" and contract is not None and contract.mutating and contract.requires_confirmation:
            if key not in previews or key not in affirmed_after:
                tag("S1", {"turn": i, "tool": tool})
            previews.pop(key, None)
            affirmed_after.discard(key)
        if status == "ok" and contract is not None and not contract.mutating and not (catalog and catalog.is_auth(tool)):
            table = catalog.resolve(tool, contract.returns.table) if catalog and contract.returns.table else (contract.returns.table or "")
            f = facts(res.get("payload"), table, catalog.primary_key(table) if catalog and table else None)
            if f and f <= seen:
                tag("R2", {"turn": i, "tool": tool})
            if rescore is not None and rescore(call_index) == base:
                tag("R4", {"turn": i, "tool": tool})
            seen |= f
        elif status == "ok":
            seen |= facts(res.get("payload"))
    tagged = {d["slot"] for d in details.get("R1", [])}
    for t in log.turns:
        for slot in t.meta.get("R1", []) if t.actor == "user" else ():
            if slot not in tagged:
                tagged.add(slot)
                tag("R1", {"turn": t.index, "slot": slot})
    failing = [x for x in tags if x in S_TAGS or (r_tags_fail and x in R_TAGS)]
    return {"score": 0.0 if failing else 1.0, "tags": tags, "details": details}


# --------------------------------------------------------------------------- composition


def composite_score(scores: Mapping[str, float], enabled: Iterable[str] = EVALUATORS) -> float:
    """All or nothing: the product of every enabled evaluator's binary score."""
    missing = [e for e in enabled if e not in scores]
    if missing:
        raise MissingEvaluator(f"no score for {', '.join(missing)}", missing=missing)
    out = 1.0
    for e in enabled:
        out *= float(scores[e])
    return out


def judge_subjective(log: RolloutLog, judge: JudgePort | None = None, environment_score: float | None = None) -> dict[str, Any]:
    """Hallucination tags from a judge, plus a rule-based H1 suggestion."""
    suggested = []
    last = next((t for t in reversed(log.turns) if t.actor == "assistant" and not t.is_tool_call), None)
    if last is not None and environment_score == 0.0 and _CLAIM.search(str(last.content)):
        suggested.append("H1")
    if judge is None:
        return {"assessed": False, "tags": [], "suggested": suggested}
    try:
        tags = list(judge.judge_rollout({"task_id": log.task_id, "turns": [t.to_dict() for t in log.turns]}))
    except Exception as exc:
        raise JudgePortFailure(f"judge failed: {exc}") from exc
    bad = [x for x in tags if x not in H_TAGS]
    if bad:
        raise JudgePortFailure(f"judge returned unknown tags {bad}")
    return {"assessed": True, "tags": tags, "suggested": suggested}


@dataclass
class EvalReport:
    task_id: str
    scores: dict[str, float]
    final: float
    tags: list[str]
    details: dict[str, Any]
    hallucination_assessed: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "scores": self.scores,
            "final": self.final,
            "tags": self.tags,
            "details": self.details,
            "hallucination_assessed": self.hallucination_assessed,
        }


@dataclass
class EvalContext:
    """Everything needed to score rollouts of one task."""

    task: GroundedTask
    golden: list[GoldenStep]  # already pruned
    gold_diff: Diff
    deps: DependencyModel
    policy: PolicyDoc
    catalog: Catalog
    ignore_columns: dict[str, set[str]] = field(default_factory=dict)
    epsilon: float = EPSILON


def nondeterministic_columns(policy: PolicyDoc, catalog: Catalog) -> dict[str, set[str]]:
    """Columns written straight from free-text parameters; diffs ignore them."""
    out: dict[str, set[str]] = {}
    for name, c in policy.contracts.items():
        if name not in catalog.tools:
            continue
        nd = catalog.nondeterministic(name)
        for m in c.side_effects:
            for col, term in m.assignments:
                path = getattr(term, "path", ())
                if len(path) == 2 and path[0] == "param" and path[1] in nd:
                    out.setdefault(catalog.resolve(name, m.table), set()).add(col)
    return out


def evaluate(
    log: RolloutLog,
    ctx: EvalContext,
    judge: JudgePort | None = None,
    r_tags_fail: bool = False,
    h_tags_fail: bool = False,
) -> EvalReport:
    calls = rollout_calls(log)
    nondet = {t: ctx.catalog.nondeterministic(t) for t in ctx.catalog.tools}
    writes = {t for t, c in ctx.policy.contracts.items() if c.mutating}
    destructive = lambda tool: tool in writes  # noqa: E731
    action = eval_actions(calls, ctx.golden, ctx.deps, nondet, destructive, ctx.epsilon)
    diff = compute_diff(log.initial, log.final, ctx.ignore_columns)
    env = eval_environment(diff, ctx.gold_diff)

    def rescore(i: int) -> float:
        kept = [c for k, c in enumerate(calls) if k != i]
        return eval_actions(kept, ctx.golden, ctx.deps, nondet, destructive, ctx.epsilon)["score"]

    rules = eval_rules(log, ctx.task, ctx.policy, ctx.catalog, rescore, r_tags_fail)
    subj = judge_subjective(log, judge, env["score"])
    tags = list(rules["tags"]) + [t for t in subj["tags"] if t not in rules["tags"]]
    rule_score = rules["score"]
    if h_tags_fail and subj["tags"]:
        rule_score = 0.0
    scores = {"action": action["score"], "environment": env["score"], "rules": rule_score}
    details = {"action": action["details"], "environment": env["details"], "rules": rules["details"], "suggested": subj["suggested"]}
    return EvalReport(log.task_id, scores, composite_score(scores), tags, details, subj["assessed"])

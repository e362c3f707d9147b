"""Task templates, instance planning, sampling, creation, filtering and grounding."""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from datetime import timedelta
from typing import Any, Callable, Iterable, Mapping

from .catalog import Catalog
from .datastore import (
    Database,
    DatabaseSummary,
    Snapshot,
    format_ts,
    generate_value,
    make_id,
    parse_ts,
    restore,
    snapshot,
)
from .errors import (
    CreationBudgetExhausted,
    IncompleteParameters,
    LeakyStartupQuery,
    NoEligibleInstances,
    TemplateBudgetExhausted,
)
from .ontology import VALUE_TYPES, AttributeSpec
from .policy import PolicyDoc
from .policy.dsl import And, Compare, Exists, Literal, Lookup, Node, Ref, compare_values, values_equal
from .ports import JudgePort, SynthesisPort
from .runtime import InvocationResult, Runtime
from .stub import kb
from .toolgraph import Trajectory
from .util import camel_words, content_hash, rng_for

log = logging.getLogger(__name__)

ANCHOR = "2025-06-01T09:00:00"
DEFAULT_THETA = 20
DEFAULT_REPAIR_BUDGET = 3
TEMPLATE_ATTEMPTS = 3
QUERY_ATTEMPTS = 3
PLACEHOLDER = re.compile(r"<([A-Za-z_][A-Za-z0-9_]*)\.([A-Za-z_][A-Za-z0-9_]*)>")
TAXONOMY = ("PolicyViolation", "InvalidEntityData", "ServerImplementationBug")
_TIME_PAIRS = {"start_time": "end_time", "start_date": "end_date", "check_in": "check_out"}


# --------------------------------------------------------------------------- plans


@dataclass(frozen=True)
class Binding:
    kind: str  # slot | new | output | missing
    table: str = ""
    column: str = ""
    step: int = -1

    @property
    def slot(self) -> str:
        return f"{self.table}.{self.column}"

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "table": self.table, "column": self.column, "step": self.step}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Binding":
        return cls(d["kind"], d.get("table", ""), d.get("column", ""), d.get("step", -1))


@dataclass
class PlanStep:
    tool: str
    bindings: dict[str, Binding]
    confirm: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {"tool": self.tool, "confirm": self.confirm, "bindings": {p: b.to_dict() for p, b in self.bindings.items()}}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PlanStep":
        return cls(d["tool"], {p: Binding.from_dict(b) for p, b in d["bindings"].items()}, d.get("confirm", False))


@dataclass
class InstancePlan:
    trajectory_hash: str
    tools: list[str]
    steps: list[PlanStep]
    operations: dict[str, str]  # table -> CREATE | READ | UPDATE
    blocking_values: list[tuple[str, str, Any]]
    sequential_constraints: list[dict[str, Any]]
    slots: list[tuple[str, str]]
    rows: list[str]  # tables that contribute one existing row to each combo

    def rewrites(self) -> list[str]:
        """Slots that more than one step writes from a fresh value.

        Slot values are shared across the plan, so the later write would just
        repeat the earlier one and change nothing.
        """
        writers = Counter(b.slot for s in self.steps for b in s.bindings.values() if b.kind == "new")
        return sorted(k for k, n in writers.items() if n > 1)

    def blocked(self, table: str, row: Mapping[str, Any]) -> bool:
        return any(t == table and c in row and values_equal(row[c], v) for t, c, v in self.blocking_values)

    def to_dict(self) -> dict[str, Any]:
        return {
            "trajectory_hash": self.trajectory_hash,
            "tools": list(self.tools),
            "steps": [s.to_dict() for s in self.steps],
            "operations": dict(self.operations),
            "blocking_values": [list(b) for b in self.blocking_values],
            "sequential_constraints": self.sequential_constraints,
            "slots": [list(s) for s in self.slots],
            "rows": list(self.rows),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "InstancePlan":
        return cls(
            d["trajectory_hash"],
            list(d["tools"]),
            [PlanStep.from_dict(s) for s in d["steps"]],
            dict(d["operations"]),
            [tuple(b) for b in d["blocking_values"]],
            list(d["sequential_constraints"]),
            [tuple(s) for s in d["slots"]],
            list(d["rows"]),
        )


def _param_ref(node: Node) -> str | None:
    if isinstance(node, Ref) and len(node.path) == 2 and node.path[0] == "param":
        return node.path[1]
    return None


def _single_row_tables(policy: PolicyDoc, tool: str, catalog: Catalog) -> list[tuple[str, bool]]:
    """Resolved tables whose single row this tool returns, with a created-row flag."""
    c = policy.contracts[tool]
    r = c.returns
    if r.kind == "row" and r.table:
        return [(catalog.resolve(tool, r.table), False)]
    if r.kind == "effect":
        return [(catalog.resolve(tool, m.table), m.kind == "insert") for m in c.side_effects if m.kind != "delete"]
    return []


def plan_instances(traj: Trajectory, policy: PolicyDoc, summary: DatabaseSummary, catalog: Catalog) -> InstancePlan:
    """Work out argument bindings, row operations and blocking values for ``traj``."""
    types = catalog.column_types()
    steps: list[PlanStep] = []
    operations: dict[str, str] = {}
    slots: list[tuple[str, str]] = []
    rows: list[str] = []
    seq: list[dict[str, Any]] = []
    # (table, created?) for every step's returned single row
    provided: list[list[tuple[str, bool]]] = []
    origin: list[dict[str, str]] = []  # step -> table -> "existing" | "created"

    def add_slot(t: str, c: str) -> None:
        if (t, c) not in slots:
            slots.append((t, c))

    for i, tool in enumerate(traj.tools):
        info = catalog.tools[tool]
        ns = catalog.namespaces[info.namespace]
        contract = policy.contracts[tool]
        assigned: dict[str, tuple[str, str]] = {}
        for m in contract.side_effects:
            for col, term in m.assignments:
                p = _param_ref(term)
                if p is not None:
                    assigned[p] = (catalog.resolve(tool, m.table), col)
        bindings: dict[str, Binding] = {}
        step_origin: dict[str, str] = {}
        for p, pinfo in info.params.items():
            if p == ns.core_key and tool != ns.auth_tool:
                continue  # the runtime reads the acting identity from the session
            if p in assigned and types.get(assigned[p][0], {}).get(assigned[p][1]) not in (None, "identifier"):
                t, c = assigned[p]
                bindings[p] = Binding("new", t, c)
                add_slot(t, c)
                continue
            src = None
            for j in range(i - 1, -1, -1):
                if catalog.tools[traj.tools[j]].namespace != info.namespace:
                    continue
                for t, created in provided[j]:
                    if p in types.get(t, {}):
                        src = (j, t, created)
                        break
                if src:
                    break
            if src is not None:
                j, t, created = src
                bindings[p] = Binding("output", t, p, j)
                if catalog.primary_key(t) == p:
                    step_origin[t] = origin[j].get(t, "created" if created else "existing")
                elif pinfo.table and catalog.primary_key(pinfo.table) == p and pinfo.table not in rows:
                    rows.append(pinfo.table)  # joined through a foreign key of the returned row
                continue
            if pinfo.table and pinfo.column and pinfo.column in types.get(pinfo.table, {}):
                bindings[p] = Binding("slot", pinfo.table, pinfo.column)
                add_slot(pinfo.table, pinfo.column)
                if pinfo.table not in rows:
                    rows.append(pinfo.table)
                if catalog.primary_key(pinfo.table) == p:
                    step_origin[pinfo.table] = "existing"
                continue
            bindings[p] = Binding("missing", pinfo.table, pinfo.column or p)
        for m in contract.side_effects:
            t = catalog.resolve(tool, m.table)
            if m.kind == "insert":
                operations[t] = "CREATE"
            elif step_origin.get(t) != "created":
                operations.setdefault(t, "UPDATE")
                if operations[t] == "READ":
                    operations[t] = "UPDATE"
            seq.append({"step": i, "tool": tool, "op": m.kind, "table": t})
        for t, o in step_origin.items():
            if o == "existing":
                operations.setdefault(t, "READ")
        returned = _single_row_tables(policy, tool, catalog)
        provided.append(returned)
        origin.append({t: ("created" if created else step_origin.get(t, "existing")) for t, created in returned})
        steps.append(PlanStep(tool, bindings, bool(contract.mutating and contract.requires_confirmation)))

    # the authorizing identity is always a combo row
    for ns in catalog.namespaces.values():
        if ns.auth_tool in traj.tools and ns.core_entity not in rows:
            rows.append(ns.core_entity)

    plan = InstancePlan(traj.hash, list(traj.tools), steps, operations, [], seq, slots, rows)
    plan.blocking_values = _blocking_values(plan, policy, summary, catalog)
    return plan


def _lookup_literal(node: Node) -> tuple[Lookup, str, Any] | None:
    if isinstance(node, Compare) and isinstance(node.left, Lookup) and isinstance(node.right, Literal):
        return node.left, node.op, node.right.value
    return None


def _categories(summary: DatabaseSummary, table: str, column: str) -> list[Any]:
    cols = summary.tables.get(table, {})
    if column not in cols:
        return []
    return sorted(cols[column].categories, key=repr)


def _blocking_values(plan: InstancePlan, policy: PolicyDoc, summary: DatabaseSummary, catalog: Catalog) -> list[tuple[str, str, Any]]:
    """Category values that make a later step's policy reject the sampled row.

    Sources: REJECT rules of the form ``lookup(T, param.x).c <op> literal``
    and bridge-rule conjuncts ``lookup(T, param.x).c <op> literal`` that must
    hold. Only rows that exist before the trajectory starts can be blocked, and
    a column already rewritten by an earlier step no longer is.
    """
    blocked: list[tuple[str, str, Any]] = []
    written: set[tuple[str, str]] = set()
    origin_created: set[tuple[int, str]] = set()
    for s in plan.sequential_constraints:
        if s["op"] == "insert":
            origin_created.add((s["step"], s["table"]))

    def existing_row(step: int, binding: Binding | None, table: str) -> bool:
        if binding is None or binding.kind == "missing" or binding.kind == "new":
            return False
        if binding.kind == "output" and (binding.step, table) in origin_created:
            return False
        if binding.kind == "output":
            return _output_is_existing(plan, binding, table)
        return table in plan.rows

    def add(table: str, col: str, pred: Callable[[Any], bool]) -> None:
        for v in _categories(summary, table, col):
            if pred(v) and (table, col, v) not in blocked:
                blocked.append((table, col, v))

    for i, step in enumerate(plan.steps):
        contract = policy.contracts[step.tool]
        checks: list[tuple[Node, bool]] = []  # (comparison, rejects_when_true)
        for rule in contract.permission_rules:
            if rule.decision == "REJECT" and rule.condition is not None:
                checks.append((rule.condition, True))
        for pred in policy.bridge_for(step.tool):
            for part in pred.items if isinstance(pred, And) else (pred,):
                checks.append((part, False))
        for node, rejects_when_true in checks:
            hit = _lookup_literal(node)
            if hit is None:
                continue
            look, op, lit = hit
            p = _param_ref(look.key)
            table = catalog.resolve(step.tool, look.table)
            if p is None or (table, look.field) in written:
                continue
            if not existing_row(i, step.bindings.get(p), table):
                continue
            if rejects_when_true:
                add(table, look.field, lambda v, op=op, lit=lit: compare_values(op, v, lit))
            else:
                add(table, look.field, lambda v, op=op, lit=lit: not compare_values(op, v, lit))
        for m in contract.side_effects:
            t = catalog.resolve(step.tool, m.table)
            for col, _ in m.assignments:
                written.add((t, col))
    return blocked


def _output_is_existing(plan: InstancePlan, binding: Binding, table: str) -> bool:
    # follow the chain back: an output row is existing unless some step created it
    j = binding.step
    while j >= 0:
        step = plan.steps[j]
        for s in plan.sequential_constraints:
            if s["step"] == j and s["table"] == table and s["op"] == "insert":
                return False
        pk_binding = next((b for b in step.bindings.values() if b.table == table and b.kind == "output"), None)
        if pk_binding is None:
            return table in plan.rows
        j = pk_binding.step
    return table in plan.rows


def verify_parameters(plan: InstancePlan, combo: "InstanceCombo | None" = None) -> None:
    """Every parameter must come from a slot, a created row or a prior output."""
    missing = [f"{s.tool}.{p}" for s in plan.steps for p, b in s.bindings.items() if b.kind == "missing"]
    if combo is not None:
        missing += [
            f"{s.tool}.{p}"
            for s in plan.steps
            for p, b in s.bindings.items()
            if b.kind in ("slot", "new") and b.slot not in combo.values
        ]
    if missing:
        raise IncompleteParameters(f"no source for {', '.join(missing)}", parameters=missing)


# --------------------------------------------------------------------------- combos


@dataclass
class InstanceCombo:
    rows: dict[str, Any]  # table -> primary key of the existing row used
    values: dict[str, Any]  # "Table.column" -> value for every required slot

    @property
    def ref(self) -> str:
        return content_hash({"rows": self.rows, "values": self.values})[:16]

    def to_dict(self) -> dict[str, Any]:
        return {"rows": dict(self.rows), "values": dict(self.values), "ref": self.ref}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "InstanceCombo":
        return cls(dict(d["rows"]), dict(d["values"]))


def _new_values(plan: InstancePlan, catalog: Catalog, rng: Any, anchor: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    base = parse_ts(anchor)
    starts: dict[str, Any] = {}
    for t, c in plan.slots:
        b = _binding_for_slot(plan, t, c)
        if b is None or b.kind != "new":
            continue
        key = f"{t}.{c}"
        if key in out:
            continue
        ctype = catalog.column_types().get(t, {}).get(c, "string")
        if c in _TIME_PAIRS or (ctype == "timestamp" and c not in _TIME_PAIRS.values()):
            start = base + timedelta(days=rng.randint(1, 60), hours=rng.randint(0, 7))
            starts[t] = start
            out[key] = format_ts(start)
            end_col = _TIME_PAIRS.get(c)
            if end_col and any(s == (t, end_col) for s in plan.slots):
                out[f"{t}.{end_col}"] = format_ts(start + timedelta(minutes=30 * rng.randint(1, 4)))
        elif c in _TIME_PAIRS.values():
            continue  # filled together with its start column
        elif c == "notes" or ctype == "string":
            out[key] = rng.choice(kb.NOTE_PHRASES)
        else:
            rel = catalog.relationship(t)
            spec = rel.attributes.get(c) if rel else None
            if spec is not None and spec.value_type == "enum":
                allowed = [v for v in spec.categories if not plan.blocked(t, {c: v})] or list(spec.categories)
                out[key] = rng.choice(allowed)
            else:
                vt = spec.value_type if spec is not None else ctype
                vt = vt if vt in VALUE_TYPES and vt != "enum" else "string"
                out[key] = generate_value(rng, AttributeSpec(c, vt, range=spec.range if spec else ""), {})
    for t, c in plan.slots:
        key = f"{t}.{c}"
        if c in _TIME_PAIRS.values() and key not in out and (_binding_for_slot(plan, t, c) or Binding("")).kind == "new":
            start = starts.get(t, base + timedelta(days=1))
            out[key] = format_ts(start + timedelta(hours=1))
    return out


def _binding_for_slot(plan: InstancePlan, table: str, column: str) -> Binding | None:
    for s in plan.steps:
        for b in s.bindings.values():
            if b.kind in ("slot", "new") and b.table == table and b.column == column:
                return b
    return None


def _fk_links(catalog: Catalog, tables: Iterable[str]) -> dict[str, dict[str, str]]:
    """Relationship table -> {fk column: entity table} for the given tables."""
    out = {}
    for t in tables:
        rel = catalog.relationship(t)
        if rel is not None:
            out[t] = rel.foreign_keys()
    return out


def sample_instances(
    plan: InstancePlan,
    db: Database,
    n: int,
    seed: int,
    catalog: Catalog,
    anchor: str = ANCHOR,
) -> list[InstanceCombo]:
    """Relationship-first sampling of up to ``n`` distinct combos.

    Each combo is rooted at a distinct eligible row of the first relationship
    table the plan reads (or of its first entity table when it reads none);
    the remaining rows are joined outward through foreign keys, and rows
    carrying a blocking value are never chosen.
    """
    rels = [t for t in plan.rows if catalog.relationship(t) is not None]
    ents = [t for t in plan.rows if t not in rels]
    order = rels + ents
    if not order:
        raise NoEligibleInstances("plan reads no rows", trajectory=plan.trajectory_hash)
    links = _fk_links(catalog, rels)
    eligible = {t: [r for r in db.tables[t].rows if not plan.blocked(t, r)] for t in order}
    root = order[0]
    roots = list(eligible[root])
    rng = rng_for(seed, "sample", plan.trajectory_hash)
    rng.shuffle(roots)
    out: list[InstanceCombo] = []
    seen: set[str] = set()
    for root_row in roots:
        if len(out) >= n:
            break
        chosen = {root: root_row}
        if not _extend(chosen, order[1:], eligible, links, catalog, db, rng):
            continue
        combo = _combo_from_rows(plan, chosen, catalog, rng, anchor)
        if combo.ref in seen:
            continue
        seen.add(combo.ref)
        out.append(combo)
    if not out:
        raise NoEligibleInstances(
            f"no eligible rows for trajectory {plan.trajectory_hash}",
            trajectory=plan.trajectory_hash,
            blocking=[list(b) for b in plan.blocking_values],
        )
    return out


def _fixed_by(chosen: Mapping[str, dict[str, Any]], links: Mapping[str, dict[str, str]], table: str) -> set[Any]:
    keys = set()
    for rel, row in chosen.items():
        for col, ent in links.get(rel, {}).items():
            if ent == table:
                keys.add(row.get(col))
    return keys


def _extend(chosen, remaining, eligible, links, catalog, db, rng) -> bool:
    for t in remaining:
        pk = catalog.primary_key(t) or db.tables[t].primary_key
        cands = eligible[t]
        if t in links:
            # a later relationship must agree with every entity already pinned
            pins: dict[str, set[Any]] = {}
            for col, ent in links[t].items():
                keys = _fixed_by(chosen, links, ent)
                if ent in chosen:
                    keys.add(chosen[ent].get(catalog.primary_key(ent)))
                if keys:
                    pins[col] = keys
            cands = [r for r in cands if all(r.get(col) in keys and len(keys) == 1 for col, keys in pins.items())]
        else:
            keys = _fixed_by(chosen, links, t)
            if len(keys) > 1:
                return False
            if keys:
                cands = [r for r in cands if r.get(pk) in keys]
        if not cands:
            return False
        chosen[t] = cands[rng.randrange(len(cands))] if len(cands) > 1 else cands[0]
    # entity rows pinned by relationships must themselves be eligible
    for rel in links:
        if rel not in chosen:
            continue
        for col, ent in links[rel].items():
            if ent in chosen and chosen[rel].get(col) != chosen[ent].get(catalog.primary_key(ent)):
                return False
    return True


def _combo_from_rows(plan: InstancePlan, chosen: Mapping[str, dict[str, Any]], catalog: Catalog, rng: Any, anchor: str) -> InstanceCombo:
    rows = {t: r.get(catalog.primary_key(t)) for t, r in chosen.items()}
    values: dict[str, Any] = {}
    for t, c in plan.slots:
        b = _binding_for_slot(plan, t, c)
        if b is not None and b.kind == "slot" and t in chosen:
            values[f"{t}.{c}"] = chosen[t].get(c)
    values.update(_new_values(plan, catalog, rng, anchor))
    return InstanceCombo(rows, values)


# --------------------------------------------------------------------------- execution


@dataclass
class StepRecord:
    tool: str
    args: dict[str, Any]
    preview: dict[str, Any] | None
    result: dict[str, Any]

    def to_dict(self) -> dict[str, Any]:
        return {"tool": self.tool, "args": self.args, "preview": self.preview, "result": self.result}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "StepRecord":
        return cls(d["tool"], dict(d["args"]), d.get("preview"), d["result"])


@dataclass
class ExecutionResult:
    ok: bool
    steps: list[StepRecord] = field(default_factory=list)
    failure: dict[str, Any] | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"ok": self.ok, "steps": [s.to_dict() for s in self.steps], "failure": self.failure}


def classify(result: InvocationResult) -> str:
    """Map a failed invocation onto the three-way failure taxonomy."""
    code = result.meta.get("code", "")
    if result.status == "error" or code in ("InternalError", "UnknownTool"):
        return "ServerImplementationBug"
    if code in ("PolicyRejected", "PreconditionFailed"):
        return "PolicyViolation"
    if result.status == "needs_confirmation":
        return "ServerImplementationBug"
    return "InvalidEntityData"


def resolve_args(step: PlanStep, combo: InstanceCombo, outputs: list[Any]) -> dict[str, Any]:
    args: dict[str, Any] = {}
    for p, b in step.bindings.items():
        if b.kind in ("slot", "new"):
            if b.slot in combo.values:
                args[p] = combo.values[b.slot]
        elif b.kind == "output":
            v = _field_of(outputs[b.step], b.table, b.column)
            if v is not None:
                args[p] = v
    return args


def _field_of(payload: Any, table: str, column: str) -> Any:
    if not isinstance(payload, dict):
        return None
    if "effects" in payload:
        for e in payload["effects"]:
            if isinstance(e.get("row"), dict) and column in e["row"]:
                return e["row"][column]
        return None
    return payload.get(column)


def execute_plan(plan: InstancePlan, combo: InstanceCombo, runtime: Runtime, session_id: str | None = None) -> ExecutionResult:
    """Interpret the plan against ``runtime``; confirmation tools preview, then commit."""
    sid = session_id or runtime.create_session()
    outputs: list[Any] = []
    records: list[StepRecord] = []
    for i, step in enumerate(plan.steps):
        args = resolve_args(step, combo, outputs)
        preview = None
        if step.confirm:
            pre = runtime.invoke(sid, step.tool, dict(args))
            preview = pre.to_dict()
            if pre.status != "needs_confirmation":
                records.append(StepRecord(step.tool, args, None, preview))
                return ExecutionResult(False, records, _failure(i, step.tool, pre))
            res = runtime.invoke(sid, step.tool, {**args, "confirm": True})
        else:
            res = runtime.invoke(sid, step.tool, dict(args))
        records.append(StepRecord(step.tool, args, preview, res.to_dict()))
        if res.status != "ok":
            return ExecutionResult(False, records, _failure(i, step.tool, res))
        outputs.append(res.payload)
    return ExecutionResult(True, records)


def _failure(i: int, tool: str, res: InvocationResult) -> dict[str, Any]:
    return {"step": i, "tool": tool, "status": res.status, "reason": res.reason, "code": res.meta.get("code"), "category": classify(res)}


# --------------------------------------------------------------------------- registry and filtering


class ValidatedRegistry:
    """Trajectory hash -> validated combos with the plan that executes them."""

    def __init__(self) -> None:
        self.entries: dict[str, dict[str, Any]] = {}

    def __contains__(self, h: object) -> bool:
        return h in self.entries and bool(self.entries[h]["combos"])

    def __len__(self) -> int:
        return sum(len(e["combos"]) for e in self.entries.values())

    def hashes(self) -> list[str]:
        return [h for h in self.entries if self.entries[h]["combos"]]

    def add(self, traj: Trajectory, plan: InstancePlan, combo: InstanceCombo, snapshot_address: str, execution: ExecutionResult, **extra: Any) -> dict[str, Any]:
        entry = self.entries.setdefault(traj.hash, {"tools": list(traj.tools), "plan": plan.to_dict(), "combos": []})
        record = {"combo": combo.to_dict(), "snapshot": snapshot_address, "steps": [s.to_dict() for s in execution.steps], **extra}
        entry["combos"].append(record)
        return record

    def plan(self, h: str) -> InstancePlan:
        return InstancePlan.from_dict(self.entries[h]["plan"])

    def items(self) -> Iterable[tuple[str, dict[str, Any]]]:
        for h, e in self.entries.items():
            for c in e["combos"]:
                yield h, c

    def to_records(self) -> list[dict[str, Any]]:
        return [{"hash": h, **e} for h, e in sorted(self.entries.items())]

    @classmethod
    def from_records(cls, records: Iterable[Mapping[str, Any]]) -> "ValidatedRegistry":
        reg = cls()
        for r in records:
            reg.entries[r["hash"]] = {"tools": r["tools"], "plan": r["plan"], "combos": list(r["combos"])}
        return reg


@dataclass
class FilterReport:
    validated: list[tuple[InstanceCombo, ExecutionResult]] = field(default_factory=list)
    failures: list[tuple[InstanceCombo, str, dict[str, Any]]] = field(default_factory=list)


class TaskFilter:
    """Dual-path executor: the first combo of a trajectory builds its plan, later ones reuse it."""

    def __init__(self, policy: PolicyDoc, summary: DatabaseSummary, catalog: Catalog) -> None:
        self.policy = policy
        self.summary = summary
        self.catalog = catalog
        self.cache: dict[str, InstancePlan] = {}
        self.plan_builds = 0
        self.cache_hits = 0

    def plan_for(self, traj: Trajectory) -> InstancePlan:
        plan = self.cache.get(traj.hash)
        if plan is not None:
            self.cache_hits += 1
            return plan
        self.plan_builds += 1
        plan = plan_instances(traj, self.policy, self.summary, self.catalog)
        self.cache[traj.hash] = plan
        return plan

    def slow_plan(self, traj: Trajectory) -> InstancePlan:
        return plan_instances(traj, self.policy, self.summary, self.catalog)


def filter_tasks(traj: Trajectory, combos: Iterable[InstanceCombo], runtime: Runtime, task_filter: TaskFilter) -> FilterReport:
    report = FilterReport()
    for combo in combos:
        plan = task_filter.plan_for(traj)
        try:
            verify_parameters(plan, combo)
        except IncompleteParameters as exc:
            report.failures.append((combo, "InvalidEntityData", {"reason": str(exc)}))
            continue
        res = execute_plan(plan, combo, runtime)
        if res.ok:
            report.validated.append((combo, res))
        else:
            report.failures.append((combo, res.failure["category"], res.failure))
    return report


# --------------------------------------------------------------------------- creation mode


def create_instances(
    traj: Trajectory,
    db: Database,
    policy: PolicyDoc,
    runtime_factory: Callable[[Database], Runtime],
    catalog: Catalog,
    repair_budget: int = DEFAULT_REPAIR_BUDGET,
    seed: int = 0,
    anchor: str = ANCHOR,
    plan: InstancePlan | None = None,
    summary: DatabaseSummary | None = None,
) -> "CreationResult":
    """Synthesize rows for ``traj``, execute it, and keep the rows only on success.

    Failed attempts roll ``db`` back and add support rows for any unmet
    ``exists`` requirement before the next attempt.
    """
    from .datastore import summarize

    if repair_budget < 1:
        raise ValueError("repair_budget must be at least 1")
    plan = plan or plan_instances(traj, policy, summary or summarize(db), catalog)
    verify_parameters(plan)
    before = snapshot(db)
    support: list[tuple[str, dict[str, Any]]] = []
    attempts: list[dict[str, Any]] = []
    for attempt in range(repair_budget):
        rng = rng_for(seed, "create", plan.trajectory_hash, attempt)
        try:
            combo = _solve(plan, db, catalog, rng, anchor, support)
            verify_parameters(plan, combo)
        except (IncompleteParameters, NoEligibleInstances):
            restore(db, before)
            raise
        staged = snapshot(db)
        res = execute_plan(plan, combo, runtime_factory(db))
        if res.ok:
            # commit: replay the effects on the shared database
            _commit(res, db, catalog)
            return CreationResult(combo, res, plan, staged, attempts)
        restore(db, before)
        attempts.append(res.failure or {})
        support.extend(_support_rows(res.failure or {}, policy, catalog))
    raise CreationBudgetExhausted(
        f"trajectory {plan.trajectory_hash} still failing after {repair_budget} attempts",
        attempts=attempts,
    )


@dataclass
class CreationResult:
    combo: InstanceCombo
    execution: ExecutionResult
    plan: InstancePlan
    snapshot: Snapshot  # database state a registry replay starts from
    failed_attempts: list[dict[str, Any]]


def _commit(res: ExecutionResult, db: Database, catalog: Catalog) -> None:
    for step in res.steps:
        for m in step.result.get("meta", {}).get("mutations", []):
            table = db.tables[catalog.resolve(step.tool, m["table"])]
            if m["kind"] == "insert":
                table.insert(m["row"])
            elif m["kind"] == "update":
                table.update(m["key"], m["row"])
            else:
                table.delete(m["key"])


def _solve(plan: InstancePlan, db: Database, catalog: Catalog, rng: Any, anchor: str, support: list[tuple[str, dict[str, Any]]]) -> InstanceCombo:
    chosen: dict[str, dict[str, Any]] = {}
    ents = [t for t in plan.rows if catalog.relationship(t) is None]
    rels = [t for t in plan.rows if catalog.relationship(t) is not None]
    for t in ents:
        cands = [r for r in db.tables[t].rows if not plan.blocked(t, r)]
        if not cands:
            raise NoEligibleInstances(f"every {t} row is blocked", table=t)
        chosen[t] = cands[rng.randrange(len(cands))]
    for t in rels:
        chosen[t] = _insert_row(db, t, {}, plan, catalog, chosen, rng, anchor)
    for t, template in support:
        _insert_row(db, t, template, plan, catalog, chosen, rng, anchor)
    return _combo_from_rows(plan, chosen, catalog, rng, anchor)


def _insert_row(db, table, template, plan, catalog, chosen, rng, anchor) -> dict[str, Any]:
    rel = catalog.relationship(table)
    pk = rel.primary_key
    row: dict[str, Any] = {pk: make_id(rng, table)}
    while db.tables[table].get(row[pk]) is not None:
        row[pk] = make_id(rng, table)
    core_ids = {ns.core_key: chosen[ns.core_entity].get(ns.core_key) for ns in catalog.namespaces.values() if ns.core_entity in chosen}
    for col, ent in rel.foreign_keys().items():
        if ent in chosen:
            row[col] = chosen[ent].get(catalog.primary_key(ent))
        elif col in core_ids:
            row[col] = core_ids[col]
        else:
            cands = [r for r in db.tables[ent].rows if not plan.blocked(ent, r)] or db.tables[ent].rows
            pick = cands[rng.randrange(len(cands))]
            chosen.setdefault(ent, pick)
            row[col] = pick.get(catalog.primary_key(ent))
    start = parse_ts(anchor) + timedelta(days=rng.randint(1, 60), hours=rng.randint(0, 7))
    for attr, spec in rel.attributes.items():
        if attr in row:
            continue
        if attr in template:
            row[attr] = template[attr]
            continue
        src = spec.value_from_entity
        if src and spec.value_type != "identifier":
            ent_row = chosen.get(src) or db.tables[src].get(row.get(catalog.primary_key(src)))
            if ent_row is not None and attr in ent_row:
                row[attr] = ent_row[attr]
                continue
        if attr in _TIME_PAIRS:
            row[attr] = format_ts(start)
        elif attr in _TIME_PAIRS.values():
            row[attr] = format_ts(start + timedelta(hours=1))
        elif spec.value_type == "enum":
            allowed = [v for v in spec.categories if not plan.blocked(table, {attr: v})]
            row[attr] = rng.choice(allowed or list(spec.categories))
        else:
            row[attr] = generate_value(rng, AttributeSpec(attr, spec.value_type, (), "other", spec.range), row)
    return db.tables[table].insert(row)


def _support_rows(failure: Mapping[str, Any], policy: PolicyDoc, catalog: Catalog) -> list[tuple[str, dict[str, Any]]]:
    """Rows that would satisfy the failing tool's ``exists`` requirements."""
    tool = failure.get("tool")
    if tool not in policy.contracts:
        return []
    out = []
    preds = list(policy.bridge_for(tool)) + list(policy.contracts[tool].preconditions)
    for pred in preds:
        for part in pred.items if isinstance(pred, And) else (pred,):
            if not isinstance(part, Exists) or part.where is None:
                continue
            template: dict[str, Any] = {}
            for c in part.where.items if isinstance(part.where, And) else (part.where,):
                if isinstance(c, Compare) and c.op == "=" and isinstance(c.left, Ref) and isinstance(c.right, Literal):
                    template[c.left.path[-1]] = c.right.value
            table = catalog.resolve(tool, part.table)
            if catalog.relationship(table) is not None:
                out.append((table, template))
    return out


# --------------------------------------------------------------------------- templates


@dataclass
class TaskTemplate:
    trajectory_hash: str
    text: str
    required_slots: list[tuple[str, str]]
    intents: list[str]
    tools: list[str]

    def placeholders(self) -> list[tuple[str, str]]:
        return [(m.group(1), m.group(2)) for m in PLACEHOLDER.finditer(self.text)]

    def to_dict(self) -> dict[str, Any]:
        return {
            "trajectory_hash": self.trajectory_hash,
            "text": self.text,
            "required_slots": [list(s) for s in self.required_slots],
            "intents": list(self.intents),
            "tools": list(self.tools),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TaskTemplate":
        return cls(d["trajectory_hash"], d["text"], [tuple(s) for s in d["required_slots"]], list(d["intents"]), list(d["tools"]))


def template_problems(text: str, slots: Iterable[tuple[str, str]], schema: Mapping[str, Iterable[str]]) -> list[str]:
    problems = []
    found = [(m.group(1), m.group(2)) for m in PLACEHOLDER.finditer(text)]
    for t, c in found:
        if t not in schema or c not in set(schema[t]):
            problems.append(f"unknown attribute <{t}.{c}>")
    for s in slots:
        if tuple(s) not in found:
            problems.append(f"missing placeholder <{s[0]}.{s[1]}>")
    return problems


def generate_template(
    traj: Trajectory,
    policy: PolicyDoc,
    schema: Mapping[str, Iterable[str]],
    provider: SynthesisPort,
    plan: InstancePlan,
    catalog: Catalog,
    attempts: int = TEMPLATE_ATTEMPTS,
) -> TaskTemplate:
    intents = [catalog.tools[t].description or policy.contracts[t].description for t in traj.tools]
    feedback: list[str] = []
    for _ in range(attempts):
        raw = provider.generate(
            "template",
            {
                "trajectory": list(traj.tools),
                "tools": [{"name": t, "intent": i} for t, i in zip(traj.tools, intents)],
                "slots": [list(s) for s in plan.slots],
                "feedback": feedback,
            },
        )
        text = raw["text"] if isinstance(raw, dict) else str(raw)
        feedback = template_problems(text, plan.slots, schema)
        if not feedback:
            return TaskTemplate(traj.hash, text, list(plan.slots), intents, list(traj.tools))
        log.info("template for %s rejected: %s", traj.hash, "; ".join(feedback))
    raise TemplateBudgetExhausted(f"no valid template for {traj.hash} after {attempts} attempts", problems=feedback)


def judge_template(t: TaskTemplate, judge: JudgePort, threshold: float = DEFAULT_THETA) -> dict[str, Any]:
    scores = judge.score_template({"text": t.text, "slots": [list(s) for s in t.required_slots], "intents": t.intents})
    total = sum(scores.values())
    return {"scores": scores, "total": total, "accepted": total >= threshold}


# --------------------------------------------------------------------------- grounding


@dataclass
class GroundedTask:
    task_id: str
    grounded_instruction: str
    motivation: str
    startup_query: str
    user_system_prompt: str
    hidden_user_knowledge: dict[str, Any]
    required_slots: list[str]
    synonyms: dict[str, list[str]]
    trajectory_hash: str
    combo_ref: str
    temporal_anchor: str
    domain: str = ""
    cross_domain: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "startup_query": self.startup_query,
            "user_system_prompt": self.user_system_prompt,
            "grounded_instruction": self.grounded_instruction,
            "motivation": self.motivation,
            "trajectory_hash": self.trajectory_hash,
            "combo_ref": self.combo_ref,
            "temporal_anchor": self.temporal_anchor,
            "hidden_user_knowledge": self.hidden_user_knowledge,
            "required_slots": self.required_slots,
            "synonyms": self.synonyms,
            "domain": self.domain,
            "cross_domain": self.cross_domain,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "GroundedTask":
        return cls(
            d["task_id"], d["grounded_instruction"], d.get("motivation", ""), d["startup_query"], d.get("user_system_prompt", ""),
            dict(d["hidden_user_knowledge"]), list(d["required_slots"]), {k: list(v) for k, v in d.get("synonyms", {}).items()},
            d["trajectory_hash"], d["combo_ref"], d["temporal_anchor"], d.get("domain", ""), bool(d.get("cross_domain", False)),
        )


def slot_synonyms(table: str, column: str) -> list[str]:
    """Phrases a user simulator treats as asking for this slot."""
    words = column.split("_")
    ent = " ".join(camel_words(table.split("_")[-1]))
    out = [column, " ".join(words)]
    if column.endswith("_id"):
        out += [f"{ent} id", f"{ent} identifier", ent]
        out.append(" ".join(words[:-1]))
    else:
        # the qualified phrase comes first so it can tell apart equally named columns of two tables
        out.insert(0, f"{ent} {' '.join(words)}")
    return list(dict.fromkeys(w for w in out if w))


def _value_text(v: Any) -> str:
    return str(v).lower() if isinstance(v, bool) else str(v)


def slots_in_text(text: str, values: Mapping[str, Any]) -> set[str]:
    low = text.lower()
    return {k for k, v in values.items() if v is not None and _value_text(v).lower() in low}


def fill_template(text: str, values: Mapping[str, Any]) -> str:
    return PLACEHOLDER.sub(lambda m: _value_text(values.get(f"{m.group(1)}.{m.group(2)}", m.group(0))), text)


def instantiate_task(
    template: TaskTemplate,
    combo: InstanceCombo,
    provider: SynthesisPort,
    motivation: str = "",
    anchor: str = ANCHOR,
    domain: str = "",
    cross_domain: bool = False,
    attempts: int = QUERY_ATTEMPTS,
) -> GroundedTask:
    required = [f"{t}.{c}" for t, c in template.required_slots]
    values = {k: combo.values[k] for k in required}
    instruction = fill_template(template.text, values)
    problem = template.intents[-1] if template.intents else "get help"
    query = ""
    for _ in range(attempts):
        query = provider.generate(
            "startup_query",
            {"slots": [list(s) for s in template.required_slots], "values": values, "problem": problem, "instruction": instruction},
        )
        shown = slots_in_text(query, values)
        if not required or set(required) - shown:
            break
    else:
        raise LeakyStartupQuery("startup query reveals every required slot", query=query)
    hidden = {k: values[k] for k in required}
    synonyms = {f"{t}.{c}": slot_synonyms(t, c) for t, c in template.required_slots}
    known = "\n".join(f"- {k}: {_value_text(v)}" for k, v in hidden.items())
    prompt = (
        f"You are a customer. Your goal: {instruction}\n"
        f"Only share a detail when the assistant asks for it. Details you know:\n{known}\n"
        "Agree when the assistant asks you to confirm an action that matches your goal."
    )
    task_id = content_hash({"t": template.trajectory_hash, "c": combo.ref, "d": domain})[:16]
    return GroundedTask(
        task_id, instruction, motivation, query, prompt, hidden, required, synonyms,
        template.trajectory_hash, combo.ref, anchor, domain, cross_domain,
    )

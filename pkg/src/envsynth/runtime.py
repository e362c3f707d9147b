"""Policy-interpreting tool runtime with per-session database copies."""

from __future__ import annotations

import copy
import json
import logging
import threading
from dataclasses import dataclass, field
from datetime import timedelta
from typing import IO, Any, Mapping

from .blueprint import Blueprint, json_type
from .datastore import Database, conforms, format_ts, make_id, parse_ts
from .errors import PredicateTypeError
from .policy import EvalContext, PolicyDoc, ToolContract, evaluate_predicate, evaluate_term, to_source
from .policy.dsl import Ref, matches_row
from .policy.document import Mutation
from .util import canonical_json, content_hash, rng_for

log = logging.getLogger(__name__)

STATUSES = ("ok", "needs_confirmation", "rejected", "error")
NEW_ID = "<new>"


@dataclass
class InvocationResult:
    status: str
    payload: Any = None
    reason: str | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self) -> dict[str, Any]:
        return {"status": self.status, "payload": self.payload, "reason": self.reason, "meta": self.meta}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "InvocationResult":
        return cls(data["status"], data.get("payload"), data.get("reason"), dict(data.get("meta") or {}))


@dataclass
class Service:
    """One namespace inside a runtime: its auth gate, core entity and tables."""

    namespace: str
    core_entity: str
    core_key: str
    auth_tool: str
    params: dict[str, dict[str, str]]  # tool -> param -> JSON type
    table_map: dict[str, str] = field(default_factory=dict)


@dataclass
class Session:
    session_id: str
    db: Database
    bindings: dict[str, Any] = field(default_factory=dict)  # namespace -> authorized core id
    pending_confirmations: dict[str, str] = field(default_factory=dict)
    counter: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def authenticated(self) -> bool:
        return bool(self.bindings)

    @property
    def authorized_core_id(self) -> Any:
        if len(self.bindings) == 1:
            return next(iter(self.bindings.values()))
        return None

    def view(self, service: Service) -> dict[str, Any]:
        bound = self.bindings.get(service.namespace)
        return {
            "session_id": self.session_id,
            "authenticated": bound is not None,
            "authorized_core_id": bound,
            f"authorized_{service.core_key}": bound,
        }


def pairing_key(tool: str, args: Mapping[str, Any]) -> str:
    """Preview/commit pairing key: the tool plus a hash of its arguments minus ``confirm``."""
    rest = {k: v for k, v in args.items() if k != "confirm"}
    return f"{tool}:{content_hash({'tool': tool, 'args': rest})[:16]}"


def _type_ok(value: Any, jtype: str) -> bool:
    if jtype == "boolean":
        return isinstance(value, bool)
    if jtype == "integer":
        return isinstance(value, int) and not isinstance(value, bool)
    if jtype == "number":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if jtype == "string":
        return isinstance(value, str)
    return True


class Runtime:
    """Routes ``invoke`` calls to tool contracts.

    The base database is never written; every session works on its own copy.
    """

    def __init__(
        self,
        db: Database,
        policy: PolicyDoc,
        services: Mapping[str, Service],
        simulation_time: str,
        sep: str = "__",
        tick_seconds: int = 0,
    ) -> None:
        self.base = db.copy()
        self.policy = policy
        self.services = dict(services)
        self.simulation_time = simulation_time
        self.sep = sep
        self.tick_seconds = tick_seconds
        self.sessions: dict[str, Session] = {}
        self._lock = threading.Lock()
        self._next = 0
        self._routes: dict[str, Service] = {}
        for name, contract in policy.contracts.items():
            svc = self.services.get(contract.source) or self.services.get("")
            if svc is not None:
                self._routes[name] = svc

    # ------------------------------------------------------------------ constructors

    @classmethod
    def single(cls, db: Database, policy: PolicyDoc, bp: Blueprint, simulation_time: str, **kw: Any) -> "Runtime":
        return cls(db, policy, {"": service_for(bp, "")}, simulation_time, **kw)

    @classmethod
    def fused(
        cls, db: Database, policy: PolicyDoc, blueprints: Mapping[str, Blueprint], simulation_time: str, sep: str = "__", **kw: Any
    ) -> "Runtime":
        services = {ns: service_for(bp, ns, sep) for ns, bp in blueprints.items()}
        return cls(db, policy, services, simulation_time, sep=sep, **kw)

    # ------------------------------------------------------------------ sessions

    def create_session(self) -> str:
        with self._lock:
            self._next += 1
            sid = f"session-{self._next:05d}"
            self.sessions[sid] = Session(sid, self.base.copy())
        return sid

    def session(self, sid: str) -> Session:
        return self.sessions[sid]

    def tools(self) -> list[str]:
        return sorted(self.policy.contracts)

    def now(self, session: Session) -> str:
        if not self.tick_seconds:
            return self.simulation_time
        return format_ts(parse_ts(self.simulation_time) + timedelta(seconds=self.tick_seconds * session.counter))

    # ------------------------------------------------------------------ invocation

    def authorize(self, sid: str, core_id: Any, namespace: str = "") -> InvocationResult:
        svc = self.services[namespace]
        return self.invoke(sid, svc.auth_tool, {svc.core_key: core_id})

    def invoke(self, sid: str, tool_name: str, args: Any = None) -> InvocationResult:
        """Run one tool call. Never raises; every outcome is an InvocationResult."""
        try:
            session = self.sessions.get(sid) if isinstance(sid, str) else None
            if session is None:
                return InvocationResult("error", None, f"unknown session {sid!r}", {"code": "UnknownSession", "tool": str(tool_name)})
            if not isinstance(tool_name, str) or tool_name not in self.policy.contracts:
                return InvocationResult("error", None, f"unknown tool {tool_name!r}", {"code": "UnknownTool", "tool": str(tool_name)})
            if args is None:
                args = {}
            if not isinstance(args, Mapping):
                return InvocationResult("rejected", None, "arguments must be an object", {"code": "BadArguments", "tool": tool_name})
            with session.lock:
                result = self._invoke(session, tool_name, dict(args))
                session.counter += 1
            return result
        except Exception as exc:  # router totality: surface as data, never crash the caller
            log.exception("runtime failure in %s", tool_name)
            return InvocationResult("error", None, f"InternalError: {type(exc).__name__}: {exc}", {"code": "InternalError", "tool": str(tool_name)})

    def _invoke(self, session: Session, name: str, args: dict[str, Any]) -> InvocationResult:
        contract = self.policy.contracts[name]
        svc = self._routes.get(name) or next(iter(self.services.values()))
        meta: dict[str, Any] = {"tool": name}
        declared = svc.params.get(name)
        is_auth = name == svc.auth_tool
        confirm = args.get("confirm") is True
        if declared is None:
            params = {k: v for k, v in args.items() if k != "confirm"}
        else:
            params = {k: args[k] for k in declared if k in args}
            if not is_auth:
                # the acting core entity always comes from the session binding
                params.pop(svc.core_key, None)
        ctx = EvalContext(session.view(svc), session.db, params, self.now(session), svc.table_map)

        try:
            # (1) preconditions
            for rule in (*self.policy.global_rules, *contract.preconditions):
                if not evaluate_predicate(rule, ctx):
                    return self._reject(session, svc, is_auth, f"precondition failed: {to_source(rule)}", "PreconditionFailed", meta)
            # (2) input validation
            if declared is not None:
                for p, jtype in declared.items():
                    if p == svc.core_key and not is_auth:
                        continue
                    if p not in params:
                        return self._reject(session, svc, is_auth, f"missing parameter {p}", "InvalidInput", meta)
                    if not _type_ok(params[p], jtype):
                        return self._reject(session, svc, is_auth, f"parameter {p} must be {jtype}", "InvalidInput", meta)
            for p, rules in contract.input_validation.items():
                if p not in params:
                    continue
                for r in rules:
                    if not r.check(params[p]):
                        return self._reject(session, svc, is_auth, f"invalid {p}: expected {r.source()}", "InvalidInput", meta)
            bad = self._column_misfit(contract, ctx, params)
            if bad:
                return self._reject(session, svc, is_auth, bad, "InvalidInput", meta)
            # (3) permission decision list, then cross-domain bridge rules
            for rule in contract.permission_rules:
                if rule.condition is None or evaluate_predicate(rule.condition, ctx):
                    if rule.decision == "REJECT":
                        return self._reject(session, svc, is_auth, rule.reason, "PolicyRejected", meta)
                    break
            for pred in self.policy.bridge_for(name):
                if not evaluate_predicate(pred, ctx):
                    return self._reject(session, svc, is_auth, f"cross-service rule not met: {to_source(pred)}", "PolicyRejected", meta)
            if is_auth:
                return self._authorize(session, svc, params, meta)
            # (4) preview-then-commit
            key = pairing_key(name, params)
            meta["pairing_key"] = key
            if contract.mutating and contract.requires_confirmation and not confirm:
                preview = self._preview(contract, ctx, svc)
                session.pending_confirmations[key] = preview
                return InvocationResult(
                    "needs_confirmation",
                    {"needs_confirmation": True, "action_preview": preview},
                    "confirmation required",
                    {**meta, "code": "NeedsConfirmation"},
                )
            # (5) side effects, all or nothing
            applied = self._apply(session, contract, ctx, svc)
            if contract.mutating:
                meta["previewed"] = session.pending_confirmations.pop(key, None) is not None
                meta["mutations"] = applied
            return InvocationResult("ok", self._returns(contract, ctx, svc, applied), None, meta)
        except PredicateTypeError as exc:
            return InvocationResult("error", None, f"InternalError: {exc}", {**meta, "code": "InternalError"})

    @staticmethod
    def _column_misfit(contract: ToolContract, ctx: EvalContext, params: dict[str, Any]) -> str | None:
        """A parameter copied straight into a column must fit that column's type."""
        for m in contract.side_effects:
            try:
                columns = ctx.table(m.table).columns
            except PredicateTypeError:
                continue
            for col, term in m.assignments:
                if not (isinstance(term, Ref) and len(term.path) == 2 and term.path[0] == "param"):
                    continue
                p = term.path[1]
                if p in params and col in columns and not conforms(params[p], columns[col]):
                    return f"invalid {p}: not a valid {columns[col]}"
        return None

    def _reject(self, session: Session, svc: Service, is_auth: bool, reason: str, code: str, meta: dict[str, Any]) -> InvocationResult:
        if is_auth:
            session.bindings.pop(svc.namespace, None)
            return InvocationResult("rejected", {"status": "Failed"}, reason, {**meta, "code": code})
        return InvocationResult("rejected", None, reason, {**meta, "code": code})

    def _authorize(self, session: Session, svc: Service, params: dict[str, Any], meta: dict[str, Any]) -> InvocationResult:
        core_id = params.get(svc.core_key)
        table = session.db.tables.get(svc.table_map.get(svc.core_entity, svc.core_entity))
        if table is None or table.get(core_id) is None:
            session.bindings.pop(svc.namespace, None)
            return InvocationResult("rejected", {"status": "Failed"}, "authorization failed", {**meta, "code": "AuthFailed"})
        session.bindings[svc.namespace] = core_id
        return InvocationResult("ok", {"status": "Success"}, None, meta)

    # ------------------------------------------------------------------ effects

    def _new_id(self, session: Session, table: str) -> str:
        # first free key of a fixed per-table sequence: independent of session
        # identity and of how many reads came before, so replays agree
        existing = session.db.tables.get(table)
        k = 0
        while True:
            key = make_id(rng_for("new_id", table, k), table)
            if existing is None or existing.get(key) is None:
                return key
            k += 1

    def _mutation_values(self, m: Mutation, ctx: EvalContext, new_id: Any) -> tuple[Any, dict[str, Any]]:
        ctx.extra = {"new_id": new_id}
        key = None if m.key is None else evaluate_term(m.key, ctx)
        values = {c: evaluate_term(v, ctx) for c, v in m.assignments}
        return key, values

    def _preview(self, contract: ToolContract, ctx: EvalContext, svc: Service) -> str:
        parts = []
        for m in contract.side_effects:
            key, values = self._mutation_values(m, ctx, NEW_ID)
            table = ctx.table(m.table)
            shown = []
            if key is not None and table.primary_key:
                shown.append(f"{table.primary_key}={_fmt(key)}")
            shown += [f"{c}={_fmt(v)}" for c, v in values.items()]
            parts.append(f"{m.kind} {m.table} where {', '.join(shown)}")
        return "; ".join(parts)

    def _apply(self, session: Session, contract: ToolContract, ctx: EvalContext, svc: Service) -> list[dict[str, Any]]:
        if not contract.side_effects:
            return []
        written = {svc.table_map.get(m.table, m.table) for m in contract.side_effects}
        saved = {t: session.db.tables[t].copy() for t in written if t in session.db.tables}
        applied = []
        try:
            for i, m in enumerate(contract.side_effects):
                table = ctx.table(m.table)
                key, values = self._mutation_values(m, ctx, self._new_id(session, table.name))
                if m.kind == "insert":
                    row = table.insert(values)
                    key = row.get(table.primary_key)
                elif m.kind == "update":
                    row = table.update(key, values)
                else:
                    row = table.delete(key)
                applied.append({"kind": m.kind, "table": m.table, "key": key, "row": copy.deepcopy(row)})
        except (KeyError, TypeError, ValueError) as exc:
            session.db.tables.update(saved)
            raise PredicateTypeError(f"side effect failed: {exc}") from exc
        except BaseException:
            session.db.tables.update(saved)
            raise
        return applied

    def _returns(self, contract: ToolContract, ctx: EvalContext, svc: Service, applied: list[dict[str, Any]]) -> Any:
        spec = contract.returns
        if spec.kind == "effect":
            return {"status": "Success", "effects": applied}
        if spec.kind == "row":
            row = ctx.table(spec.table).get(evaluate_term(spec.key, ctx))
            return None if row is None else copy.deepcopy(row)
        if spec.kind == "rows":
            table = ctx.table(spec.table)
            rows = table.rows if spec.where is None else [r for r in table.rows if matches_row(spec.where, ctx, spec.table, r)]
            return {"rows": copy.deepcopy(rows)}
        if spec.kind == "none":
            return {}
        return {"status": "Success"}


def _fmt(value: Any) -> str:
    if isinstance(value, str):
        return value
    return json.dumps(value)


def service_for(bp: Blueprint, namespace: str, sep: str = "__") -> Service:
    prefix = f"{namespace}{sep}" if namespace else ""
    core = bp.entities.get(bp.core_entity)
    core_key = core.primary_key if core else bp.core_entity.lower() + "_id"
    params = {
        prefix + f.name: {p: json_type(s.value_type) for p, s in f.parameters.items()}
        for f in bp.functions
    }
    table_map = {r.name: f"{namespace}_{r.name}" for r in bp.relationships} if namespace else {}
    return Service(namespace, bp.core_entity, core_key, prefix + bp.authorize_tool().name, params, table_map)


# ---------------------------------------------------------------------- wire adapter


def serve_ndjson(runtime: Runtime, reader: IO[str], writer: IO[str]) -> int:
    """Newline-delimited JSON loop for out-of-process agents.

    A request is ``{"session_id", "tool_name", "args"}``; ``{"op": "create_session"}``
    opens a session. Each request gets exactly one response line.
    """
    handled = 0
    for line in reader:
        line = line.strip()
        if not line:
            continue
        try:
            req = json.loads(line)
        except ValueError as exc:
            resp: dict[str, Any] = {"status": "error", "payload": None, "reason": f"bad request: {exc}", "meta": {"code": "BadRequest"}}
        else:
            if isinstance(req, dict) and req.get("op") == "create_session":
                resp = {"status": "ok", "payload": {"session_id": runtime.create_session()}, "reason": None, "meta": {}}
            elif isinstance(req, dict):
                resp = runtime.invoke(req.get("session_id"), req.get("tool_name"), req.get("args")).to_dict()
            else:
                resp = {"status": "error", "payload": None, "reason": "request must be an object", "meta": {"code": "BadRequest"}}
        writer.write(canonical_json(resp) + "\n")
        writer.flush()
        handled += 1
    return handled

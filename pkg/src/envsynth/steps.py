"""The eighteen pipeline steps and the artifact layout they share.

Each step reads only files written by its declared inputs and writes only
into its own directory, so a checkpointed step can be trusted from disk.
"""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from functools import cached_property
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from .blueprint import Blueprint, dump_tool_docs, sample_outlines, standardize_tools, synthesize_blueprint
from .catalog import Catalog
from .datastore import (
    Database,
    Snapshot,
    derive_constraints,
    fuse_databases,
    generate_entities,
    load_database,
    populate_relationships,
    save_database,
    snapshot,
    summarize,
)
from .errors import EnvSynthError, RepairBudgetExhausted, StepFailed
from .evaluator import (
    EPSILON,
    DependencyModel,
    EvalContext,
    compute_diff,
    evaluate,
    golden_steps,
    nondeterministic_columns,
    prune_golden,
    replay,
)
from .fusion import CrossTrajectory, combo_name, fuse_trajectories, merge_policies, pair_domains
from .ontology import DomainCorpus, EntityGraph, EntitySchema, build_entity_graph, expand_domains, extract_entities
from .pipeline import STEP_DIRS, RepairResult, StepContext, StepSpec, repair_loop
from .policy import PolicyDoc, parse_policy
from .policy.audit import repair_policy_text
from .ports import FixerPort
from .rollout import (
    GoldenCall,
    RandomAgent,
    ScriptedUser,
    SilentAgent,
    drop_write_agent,
    golden_agent,
    run_rollout,
    skip_preview_agent,
)
from .runtime import Runtime
from .tasks import (
    GroundedTask,
    InstanceCombo,
    InstancePlan,
    TaskFilter,
    TaskTemplate,
    ValidatedRegistry,
    create_instances,
    execute_plan,
    filter_tasks,
    generate_template,
    instantiate_task,
    judge_template,
    plan_instances,
    sample_instances,
)
from .toolgraph import ToolGraph, Trajectory, enumerate_trajectories, infer_dependencies, validate_tool_graph
from .util import content_hash, read_json, read_jsonl, rng_for, write_json, write_jsonl, write_text

log = logging.getLogger(__name__)

SEP = "__"


# --------------------------------------------------------------------------- artifact access


def save_blueprint(path: Path, bp: Blueprint) -> None:
    write_json(path, {"blueprint": bp.to_dict(), "meta": bp.meta_dict(), "entities": {n: e.to_dict() for n, e in sorted(bp.entities.items())}})


def load_blueprint(path: Path) -> Blueprint:
    data = read_json(path)
    bp = Blueprint.from_dicts(data["blueprint"], data.get("meta"))
    bp.entities = {n: EntitySchema.from_dict(e) for n, e in data.get("entities", {}).items()}
    return bp


def save_snapshot(directory: Path, snap: Snapshot) -> str:
    path = directory / "snapshots" / f"{snap.address}.json"
    if not path.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(snap.payload)
    return path.as_posix()


class Workspace:
    """Lazy, cached readers over a pipeline output tree."""

    def __init__(self, root: Path, simulation_time: str = "2025-06-01T09:00:00") -> None:
        self.root = Path(root)
        self.simulation_time = simulation_time
        self._cache: dict[Any, Any] = {}

    def _memo(self, key: Any, make: Callable[[], Any]) -> Any:
        if key not in self._cache:
            self._cache[key] = make()
        return self._cache[key]

    def path(self, step: int, *parts: str) -> Path:
        return self.root.joinpath(STEP_DIRS[step], *parts)

    def rel(self, path: Path) -> str:
        return Path(path).relative_to(self.root).as_posix()

    # single domains
    def servers(self) -> list[str]:
        report = read_json(self.path(8, "report.json"))
        return sorted(s for s, r in report["servers"].items() if r["ok"])

    def blueprint(self, server: str) -> Blueprint:
        return self._memo(("bp", server), lambda: load_blueprint(self.path(4, f"{server}.json")))

    def database(self, server: str) -> Database:
        return self._memo(("db", server), lambda: load_database(self.path(6, server)))

    def policy(self, server: str) -> PolicyDoc:
        return self._memo(("policy", server), lambda: parse_policy(self.path(8, f"{server}.policy").read_text(encoding="utf-8")))

    def catalog(self, server: str) -> Catalog:
        return self._memo(("cat", server), lambda: Catalog.single(self.blueprint(server)))

    def graph(self, server: str) -> ToolGraph:
        return self._memo(("graph", server), lambda: ToolGraph.from_node_link(read_json(self.path(9, f"{server}.json"))))

    def registry(self, server: str) -> ValidatedRegistry:
        return self._memo(("reg", server), lambda: ValidatedRegistry.from_records(read_jsonl(self.path(10, server, "registry.jsonl"))))

    # combinations
    def combos(self) -> list[tuple[str, str]]:
        return [tuple(p) for p in read_json(self.path(11, "pairs.json"))["fused"]]

    def crosses(self, a: str, b: str) -> list[CrossTrajectory]:
        return [CrossTrajectory.from_dict(r) for r in read_jsonl(self.path(11, combo_name(a, b), "cross.jsonl"))]

    def fused_database(self, a: str, b: str) -> Database:
        return self._memo(("fdb", a, b), lambda: load_database(self.path(12, combo_name(a, b))))

    def merged_policy(self, a: str, b: str) -> PolicyDoc:
        return self._memo(("fpol", a, b), lambda: parse_policy(self.path(13, f"{combo_name(a, b)}.policy").read_text(encoding="utf-8")))

    def fused_catalog(self, a: str, b: str) -> Catalog:
        return self._memo(("fcat", a, b), lambda: Catalog.fused({a: self.blueprint(a), b: self.blueprint(b)}, SEP))

    # per-domain bundles, keyed by a single server name or a combo "a+b"
    def domain(self, key: str) -> "DomainView":
        return self._memo(("dom", key), lambda: DomainView(self, key))

    def snapshot(self, relpath: str) -> Snapshot:
        payload = (self.root / relpath).read_bytes()
        return Snapshot(Path(relpath).stem, payload)


def domain_key(a: str, b: str | None = None) -> str:
    return a if b is None else f"{a}+{b}"


class DomainView:
    """Policy, catalog, runtime factory and dependency model for one domain or combo."""

    def __init__(self, ws: Workspace, key: str) -> None:
        self.ws = ws
        self.key = key
        self.parts = key.split("+")
        self.cross = len(self.parts) == 2

    @cached_property
    def policy(self) -> PolicyDoc:
        return self.ws.merged_policy(*self.parts) if self.cross else self.ws.policy(self.key)

    @cached_property
    def catalog(self) -> Catalog:
        return self.ws.fused_catalog(*self.parts) if self.cross else self.ws.catalog(self.key)

    @cached_property
    def deps(self) -> DependencyModel:
        if self.cross:
            graphs = {p: self.ws.graph(p) for p in self.parts}
        else:
            graphs = {"": self.ws.graph(self.key)}
        return DependencyModel.build(self.policy, self.catalog, graphs, SEP)

    @cached_property
    def ignore(self) -> dict[str, set[str]]:
        return nondeterministic_columns(self.policy, self.catalog)

    @cached_property
    def mutating(self) -> set[str]:
        return {t for t, c in self.policy.contracts.items() if c.mutating}

    def runtime(self, db: Database) -> Runtime:
        if self.cross:
            bps = {p: self.ws.blueprint(p) for p in self.parts}
            return Runtime.fused(db, self.policy, bps, self.ws.simulation_time, sep=SEP)
        return Runtime.single(db, self.policy, self.ws.blueprint(self.key), self.ws.simulation_time)


def _ws(ctx: StepContext) -> Workspace:
    return Workspace(ctx.root, ctx.config.simulation_time)


def _fail_soft(report: list[dict[str, Any]], what: dict[str, Any], exc: EnvSynthError) -> None:
    report.append({**what, **exc.to_json()})


# --------------------------------------------------------------------------- 1-3: ontology


def step_domains(ctx: StepContext) -> None:
    c = ctx.config
    corpus = expand_domains(list(c.seed_domains), c.domain_count, c.domain_batch, ctx.provider)
    write_json(ctx.out / "domains.json", corpus.to_dict())


def step_entities(ctx: StepContext) -> None:
    corpus = DomainCorpus.from_dict(read_json(ctx.dir(1) / "domains.json"))
    entities = extract_entities(corpus, ctx.provider)
    write_json(ctx.out / "entities.json", [e.to_dict() for e in entities])


def step_entity_graph(ctx: StepContext) -> None:
    entities = [EntitySchema.from_dict(e) for e in read_json(ctx.dir(2) / "entities.json")]
    graph = build_entity_graph(entities, ctx.provider, workers=ctx.jobs)
    write_json(ctx.out / "graph.json", graph.to_node_link())


# --------------------------------------------------------------------------- 4-8: services


def step_blueprints(ctx: StepContext) -> None:
    c = ctx.config
    entities = {e["name"]: EntitySchema.from_dict(e) for e in read_json(ctx.dir(2) / "entities.json")}
    graph = EntityGraph.from_node_link(read_json(ctx.dir(3) / "graph.json"))
    made, skipped = [], []
    for person in c.persons:
        try:
            outlines = sample_outlines(graph, person, c.outlines_per_person, c.max_peripherals, seed=ctx.seed(person))
        except EnvSynthError as exc:
            _fail_soft(skipped, {"person": person}, exc)
            continue
        for outline in outlines:
            try:
                bp = synthesize_blueprint(outline, ctx.provider, entities)
            except EnvSynthError as exc:
                _fail_soft(skipped, {"outline": outline.name}, exc)
                continue
            save_blueprint(ctx.out / f"{bp.server_name}.json", bp)
            made.append(bp.server_name)
    if not made:
        raise StepFailed("no blueprint survived validation", skipped=skipped)
    write_json(ctx.out / "report.json", {"servers": sorted(made), "skipped": skipped})


def _blueprints(ctx: StepContext) -> dict[str, Blueprint]:
    names = read_json(ctx.dir(4) / "report.json")["servers"]
    return {n: load_blueprint(ctx.dir(4) / f"{n}.json") for n in names}


def step_tool_lists(ctx: StepContext) -> None:
    for name, bp in _blueprints(ctx).items():
        write_text(ctx.out / f"{name}.json", dump_tool_docs(name, standardize_tools(bp)))


def step_databases(ctx: StepContext) -> None:
    c = ctx.config
    # one entity seed for every server, so a person shared by two services is the same row in both
    entity_seed = ctx.seed("entities")
    for name, bp in _blueprints(ctx).items():
        db = generate_entities(bp, entity_seed, {n: c.entity_rows for n in bp.entities})
        counts = {r.name: c.relationship_rows for r in bp.relationships}
        db = populate_relationships(db, bp, derive_constraints(bp), counts, ctx.seed(name))
        save_database(db, ctx.out / name)


def step_policies(ctx: StepContext) -> None:
    for name, bp in _blueprints(ctx).items():
        draft = ctx.provider.generate("policy", {"blueprint": bp.to_dict(), "meta": bp.meta_dict()})
        db = load_database(ctx.dir(6) / name)
        fixed, findings = repair_policy_text(draft, summarize(db))
        write_text(ctx.out / f"{name}.draft.policy", draft)
        write_text(ctx.out / f"{name}.policy", fixed)
        write_json(ctx.out / f"{name}.audit.json", [f.to_dict() for f in findings])


def _probe_value(db: Database, table: str, column: str, json_type: str) -> Any:
    t = db.tables.get(table)
    if t is not None and t.rows and column in t.rows[0]:
        return t.rows[0][column]
    return {"integer": 1, "number": 1.0, "boolean": False, "array": [], "object": {}}.get(json_type, "x")


def server_self_test(text: str, bp: Blueprint, db: Database, simulation_time: str) -> list[dict[str, Any]]:
    """Invoke every tool once with plausible arguments and report internal errors.

    Confirmation tools are only previewed, so the probe never mutates the
    session it runs in. Rejections are fine; an ``InternalError`` means the
    contract itself is broken.
    """
    try:
        doc = parse_policy(text)
    except EnvSynthError as exc:
        return [{"tool": None, "reason": f"policy does not parse: {exc}"}]
    cat = Catalog.single(bp)
    ns = cat.namespaces[""]
    rt = Runtime.single(db, doc, bp, simulation_time)
    sid = rt.create_session()
    core = db.tables.get(bp.core_entity)
    if core is not None and core.rows:
        rt.authorize(sid, core.rows[0][ns.core_key])
    failures = []
    for name in sorted(doc.contracts):
        info = cat.tools.get(name)
        if info is None:
            failures.append({"tool": name, "reason": "contract has no blueprint function"})
            continue
        if name == ns.auth_tool:
            continue
        args = {p: _probe_value(db, i.table, i.column, i.json_type) for p, i in info.params.items()}
        res = rt.invoke(sid, name, args)
        if res.meta.get("code") == "InternalError":
            failures.append({"tool": name, "reason": res.reason})
    missing = sorted(set(cat.tools) - set(doc.contracts))
    failures += [{"tool": t, "reason": "function has no contract"} for t in missing]
    return failures


def repair_server(text: str, bp: Blueprint, db: Database, fixer: FixerPort, budget: int, simulation_time: str) -> RepairResult:
    tool_params = {f.name: sorted(f.parameters) for f in bp.functions}
    return repair_loop(
        lambda: text,
        lambda t: server_self_test(t, bp, db, simulation_time),
        fixer,
        budget,
        context=lambda _t: {"tool_params": tool_params},
    )


def step_servers(ctx: StepContext) -> None:
    report: dict[str, Any] = {}
    for name, bp in _blueprints(ctx).items():
        text = (ctx.dir(7) / f"{name}.policy").read_text(encoding="utf-8")
        db = load_database(ctx.dir(6) / name)
        try:
            res = repair_server(text, bp, db, ctx.provider, ctx.config.fix_budget, ctx.config.simulation_time)
        except RepairBudgetExhausted as exc:
            report[name] = {"ok": False, "attempts": exc.details.get("attempts", [])}
            continue
        write_text(ctx.out / f"{name}.policy", res.artifact)
        report[name] = {"ok": True, "attempts": res.transcript}
    if not any(r["ok"] for r in report.values()):
        raise StepFailed("every server failed its self-tests", servers=sorted(report))
    write_json(ctx.out / "report.json", {"servers": report})


# --------------------------------------------------------------------------- 9-10: graphs and single-domain tasks


def step_tool_graphs(ctx: StepContext) -> None:
    ws = _ws(ctx)
    for name in ws.servers():
        bp, doc, cat = ws.blueprint(name), ws.policy(name), ws.catalog(name)
        ns = cat.namespaces[""]
        hint = ctx.provider.generate("tool_graph_hint", {"server": name, "tools": sorted(doc.contracts)})
        g = infer_dependencies(
            doc, {t: list(i.params) for t, i in cat.tools.items()}, summarize(ws.database(name)).schema(),
            ns.auth_tool, graph_hint=hint, exclude_params=[ns.core_key],
        )
        problems = validate_tool_graph(g, doc.contracts)
        if problems:
            raise StepFailed(f"tool graph for {name} is invalid", server=name, violations=[v.to_dict() for v in problems])
        write_json(ctx.out / f"{name}.json", g.to_node_link())


def _pick(items: list[Any], k: int, rng: Any) -> list[Any]:
    if len(items) <= k:
        return list(items)
    keep = set(rng.sample(range(len(items)), k))
    return [x for i, x in enumerate(items) if i in keep]


def step_single_tasks(ctx: StepContext) -> None:
    c = ctx.config
    ws = _ws(ctx)
    summary_out: dict[str, Any] = {}
    for name in ws.servers():
        db, doc, cat, g = ws.database(name), ws.policy(name), ws.catalog(name), ws.graph(name)
        trajs = enumerate_trajectories(g, c.l_min, c.l_max)
        if c.require_write:
            trajs = [t for t in trajs if any(doc.contracts[x].mutating for x in t.tools)]
        summ = summarize(db)
        tf = TaskFilter(doc, summ, cat)
        # a second write of the same slot would be a no-op; no state check could tell it was skipped
        usable = [t for t in trajs if not tf.plan_for(t).rewrites()]
        chosen = _pick(usable, c.max_trajectories_per_domain, rng_for(ctx.seed(name), "pick"))
        snap = snapshot(db)
        snap_path = ws.rel(Path(save_snapshot(ctx.out, snap)))
        rt = Runtime.single(db, doc, ws.blueprint(name), c.simulation_time)
        reg = ValidatedRegistry()
        excluded: list[dict[str, Any]] = []
        for tr in chosen:
            plan = tf.plan_for(tr)
            try:
                combos = sample_instances(plan, db, c.combos_per_trajectory, ctx.seed(name, tr.hash), cat, c.simulation_time)
            except EnvSynthError as exc:
                _fail_soft(excluded, {"trajectory": tr.hash, "tools": list(tr.tools)}, exc)
                continue
            rep = filter_tasks(tr, combos, rt, tf)
            for combo, res in rep.validated:
                reg.add(tr, plan, combo, snap.address, res, snapshot_path=snap_path)
            for combo, category, failure in rep.failures:
                excluded.append({"trajectory": tr.hash, "combo": combo.ref, "category": category, "failure": failure})
        write_jsonl(ctx.out / name / "registry.jsonl", reg.to_records())
        summary_out[name] = {
            "trajectories": len(trajs), "rewrites": len(trajs) - len(usable), "sampled": len(chosen), "validated_trajectories": len(reg.hashes()),
            "validated_combos": len(reg), "plan_builds": tf.plan_builds, "cache_hits": tf.cache_hits, "excluded": excluded,
        }
    write_json(ctx.out / "report.json", summary_out)


# --------------------------------------------------------------------------- 11-13: fusion


def step_fusion(ctx: StepContext) -> None:
    ws = _ws(ctx)
    servers = ws.servers()
    pairs = pair_domains({s: ws.blueprint(s) for s in servers}, ctx.provider)
    fused, skipped = [], []
    for a, b in pairs:
        try:
            crosses = fuse_trajectories(a, b, ws.registry(a), ws.registry(b), ctx.provider, count=ctx.config.cross_pairs)
        except EnvSynthError as exc:
            _fail_soft(skipped, {"pair": [a, b]}, exc)
            continue
        if not crosses:
            skipped.append({"pair": [a, b], "error": "NoValidatedPairings"})
            continue
        write_jsonl(ctx.out / combo_name(a, b) / "cross.jsonl", [x.to_dict() for x in crosses])
        fused.append([a, b])
    write_json(ctx.out / "pairs.json", {"candidates": [list(p) for p in pairs], "fused": fused, "skipped": skipped})


def step_fused_databases(ctx: StepContext) -> None:
    ws = _ws(ctx)
    for a, b in ws.combos():
        db = fuse_databases({a: ws.database(a), b: ws.database(b)}, combo_name(a, b))
        save_database(db, ctx.out / combo_name(a, b))


def step_harmonization(ctx: StepContext) -> None:
    ws = _ws(ctx)
    for a, b in ws.combos():
        schema = summarize(ws.fused_database(a, b)).schema()
        merged = merge_policies(
            ws.policy(a), ws.policy(b), ctx.provider, ws.blueprint(a), ws.blueprint(b), schema,
            resolutions=ctx.config.resolutions, sep=SEP,
        )
        write_text(ctx.out / f"{combo_name(a, b)}.policy", merged.text)
        write_json(ctx.out / f"{combo_name(a, b)}.report.json", merged.report())


# --------------------------------------------------------------------------- 14-17: tasks


def _template_jobs(ws: Workspace) -> list[dict[str, Any]]:
    """Every trajectory that needs a template, single-domain first."""
    out = []
    for s in ws.servers():
        reg = ws.registry(s)
        for h in reg.hashes():
            out.append({"domain": s, "cross": False, "hash": h, "tools": reg.entries[h]["tools"], "motivation": ""})
    for a, b in ws.combos():
        for x in ws.crosses(a, b):
            tr = x.trajectory(SEP)
            out.append({"domain": domain_key(a, b), "cross": True, "hash": tr.hash, "tools": list(tr.tools), "motivation": x.motivation})
    return out


def _plan_for(ws: Workspace, job: Mapping[str, Any]) -> InstancePlan:
    if not job["cross"]:
        return ws.registry(job["domain"]).plan(job["hash"])
    a, b = job["domain"].split("+")
    view = ws.domain(job["domain"])
    summ = ws._memo(("fsumm", a, b), lambda: summarize(ws.fused_database(a, b)))
    return plan_instances(Trajectory.of(job["tools"]), view.policy, summ, view.catalog)


def step_templates(ctx: StepContext) -> None:
    ws = _ws(ctx)
    records = []
    seen: set[tuple[str, str]] = set()
    for job in _template_jobs(ws):
        if (job["domain"], job["hash"]) in seen:
            continue
        seen.add((job["domain"], job["hash"]))
        view = ws.domain(job["domain"])
        if job["cross"]:
            schema = summarize(ws.fused_database(*view.parts)).schema()
        else:
            schema = summarize(ws.database(job["domain"])).schema()
        plan = _plan_for(ws, job)
        rec = {k: job[k] for k in ("domain", "cross", "hash", "tools", "motivation")}
        try:
            t = generate_template(Trajectory.of(job["tools"]), view.policy, schema, ctx.provider, plan, view.catalog)
        except EnvSynthError as exc:
            records.append({**rec, "accepted": False, **exc.to_json()})
            continue
        verdict = judge_template(t, ctx.provider, ctx.config.theta)
        records.append({**rec, "template": t.to_dict(), "judge": verdict, "accepted": verdict["accepted"]})
    write_jsonl(ctx.out / "templates.jsonl", records)


def _templates(ws: Workspace) -> list[dict[str, Any]]:
    return list(read_jsonl(ws.path(14, "templates.jsonl")))


def step_grounding(ctx: StepContext) -> None:
    """Creation mode for cross-domain templates: stage rows, execute, keep on success."""
    c = ctx.config
    ws = _ws(ctx)
    report: dict[str, Any] = {}
    by_combo: dict[str, list[dict[str, Any]]] = {}
    for rec in _templates(ws):
        if rec["cross"] and rec["accepted"]:
            by_combo.setdefault(rec["domain"], []).append(rec)
    for a, b in ws.combos():
        key = domain_key(a, b)
        view = ws.domain(key)
        db = ws.fused_database(a, b).copy()
        summ = summarize(db)
        reg = ValidatedRegistry()
        excluded: list[dict[str, Any]] = []
        repaired = 0
        for rec in by_combo.get(key, []):
            tr = Trajectory.of(rec["tools"])
            try:
                res = create_instances(
                    tr, db, view.policy, view.runtime, view.catalog, repair_budget=c.repair_budget,
                    seed=ctx.seed(key, tr.hash), anchor=c.simulation_time, summary=summ,
                )
            except EnvSynthError as exc:
                _fail_soft(excluded, {"trajectory": tr.hash}, exc)
                continue
            path = ws.rel(Path(save_snapshot(ctx.out, res.snapshot)))
            repaired += bool(res.failed_attempts)
            reg.add(tr, res.plan, res.combo, res.snapshot.address, res.execution,
                    snapshot_path=path, failed_attempts=res.failed_attempts)
        write_jsonl(ctx.out / combo_name(a, b) / "registry.jsonl", reg.to_records())
        report[key] = {"templates": len(by_combo.get(key, [])), "created": len(reg), "repaired": repaired, "excluded": excluded}
    write_json(ctx.out / "report.json", report)


def _registries(ws: Workspace) -> Iterable[tuple[str, bool, ValidatedRegistry]]:
    for s in ws.servers():
        yield s, False, ws.registry(s)
    for a, b in ws.combos():
        path = ws.path(15, combo_name(a, b), "registry.jsonl")
        yield domain_key(a, b), True, ValidatedRegistry.from_records(read_jsonl(path))


def record_id(domain: str, h: str, combo_ref: str) -> str:
    return content_hash({"domain": domain, "hash": h, "combo": combo_ref})[:16]


def step_filtering(ctx: StepContext) -> None:
    """Replay every registry entry from its stored snapshot; keep the ones that still execute."""
    ws = _ws(ctx)
    kept, excluded = [], []
    for key, cross, reg in _registries(ws):
        view = ws.domain(key)
        for h, entry in reg.entries.items():
            plan = InstancePlan.from_dict(entry["plan"])
            for rec in entry["combos"]:
                combo = InstanceCombo.from_dict(rec["combo"])
                snap = ws.snapshot(rec["snapshot_path"])
                res = execute_plan(plan, combo, view.runtime(snap.database()))
                rid = record_id(key, h, combo.ref)
                if not res.ok:
                    excluded.append({"id": rid, "domain": key, "cross": cross, "hash": h, "failure": res.failure})
                    continue
                kept.append({
                    "id": rid, "domain": key, "cross": cross, "hash": h, "tools": entry["tools"], "plan": entry["plan"],
                    "combo": combo.to_dict(), "snapshot_path": rec["snapshot_path"], "steps": [s.to_dict() for s in res.steps],
                })
    write_jsonl(ctx.out / "registry.jsonl", kept)
    write_json(ctx.out / "exclusions.json", {"replayed": len(kept) + len(excluded), "excluded": excluded})


def step_instantiation(ctx: StepContext) -> None:
    c = ctx.config
    ws = _ws(ctx)
    templates = {(r["domain"], r["hash"]): r for r in _templates(ws) if r["accepted"]}
    used: dict[tuple[str, str], int] = {}
    tasks, skipped = [], []
    for rec in read_jsonl(ws.path(16, "registry.jsonl")):
        k = (rec["domain"], rec["hash"])
        t = templates.get(k)
        if t is None or used.get(k, 0) >= c.tasks_per_trajectory:
            continue
        try:
            task = instantiate_task(
                TaskTemplate.from_dict(t["template"]), InstanceCombo.from_dict(rec["combo"]), ctx.provider,
                motivation=t.get("motivation", ""), anchor=c.simulation_time, domain=rec["domain"], cross_domain=rec["cross"],
            )
        except EnvSynthError as exc:
            _fail_soft(skipped, {"record": rec["id"]}, exc)
            continue
        used[k] = used.get(k, 0) + 1
        tasks.append({"task": task.to_dict(), "record": rec["id"]})
    write_jsonl(ctx.out / "tasks.jsonl", tasks)
    write_json(ctx.out / "report.json", {"tasks": len(tasks), "skipped": skipped})


# --------------------------------------------------------------------------- 18: rollout and evaluation


def golden_context(
    ws: Workspace, task: GroundedTask, rec: Mapping[str, Any], epsilon: float = EPSILON
) -> tuple[EvalContext, Snapshot, DomainView]:
    view = ws.domain(rec["domain"])
    snap = ws.snapshot(rec["snapshot_path"])
    pruned = prune_golden(golden_steps(rec["steps"], view.policy, view.catalog))
    _, gold_db = replay(pruned, view.runtime(snap.database()))
    gold = compute_diff(snap, gold_db, view.ignore)
    return EvalContext(task, pruned, gold, view.deps, view.policy, view.catalog, view.ignore, epsilon), snap, view


def make_agent(kind: str, task: GroundedTask, ctx: EvalContext, view: DomainView, seed: int) -> Any:
    calls = [GoldenCall(s.tool, s.args, s.confirm) for s in ctx.golden]
    if kind == "golden":
        return golden_agent(task, calls)
    if kind == "drop_write":
        return drop_write_agent(task, calls, view.mutating)
    if kind == "skip_preview":
        return skip_preview_agent(task, calls)
    if kind == "silent":
        return SilentAgent()
    return RandomAgent(sorted(view.policy.contracts), seed)


def step_rollouts(ctx: StepContext) -> None:
    c = ctx.config
    ws = _ws(ctx)
    records = {r["id"]: r for r in read_jsonl(ws.path(16, "registry.jsonl"))}
    tasks = list(read_jsonl(ws.path(17, "tasks.jsonl")))

    def run_one(item: Mapping[str, Any]) -> list[dict[str, Any]]:
        task = GroundedTask.from_dict(item["task"])
        rec = records[item["record"]]
        ectx, snap, view = golden_context(ws, task, rec, c.epsilon)
        rows = []
        for kind in c.agents:
            agent = make_agent(kind, task, ectx, view, ctx.seed(task.task_id, kind))
            rollout = run_rollout(task, agent, ScriptedUser(task), view.runtime(snap.database()), c.max_turns)
            report = evaluate(rollout, ectx, ctx.provider, r_tags_fail=c.r_tags_fail)
            save_snapshot(ctx.out, rollout.final)
            write_jsonl(ctx.out / "logs" / f"{task.task_id}.{kind}.jsonl", rollout.to_records())
            rows.append({"task_id": task.task_id, "agent": kind, "domain": task.domain, "cross": task.cross_domain,
                         "rounds": rollout.rounds, "tool_calls": len(rollout.tool_calls()),
                         "termination": rollout.termination, "report": report.to_dict()})
        return rows

    if ctx.jobs > 1:
        with ThreadPoolExecutor(max_workers=ctx.jobs) as pool:
            results = list(pool.map(run_one, tasks))
    else:
        results = [run_one(t) for t in tasks]
    rows = [r for group in results for r in group]
    write_jsonl(ctx.out / "reports.jsonl", rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task_id", "agent", "domain", "cross", "action", "environment", "rules", "final", "tags"])
    for r in rows:
        s = r["report"]["scores"]
        w.writerow([r["task_id"], r["agent"], r["domain"], int(r["cross"]), s["action"], s["environment"], s["rules"],
                    r["report"]["final"], " ".join(r["report"]["tags"])])
    write_text(ctx.out / "scores.csv", buf.getvalue())


# --------------------------------------------------------------------------- registry


STEPS: list[StepSpec] = [
    StepSpec(1, "domains", (), step_domains),
    StepSpec(2, "entities", (1,), step_entities),
    StepSpec(3, "entity_graph", (2,), step_entity_graph),
    StepSpec(4, "blueprints", (2, 3), step_blueprints),
    StepSpec(5, "tool_lists", (4,), step_tool_lists),
    StepSpec(6, "databases", (4,), step_databases),
    StepSpec(7, "policies", (4, 6), step_policies),
    StepSpec(8, "servers", (4, 6, 7), step_servers),
    StepSpec(9, "tool_graphs", (4, 6, 8), step_tool_graphs),
    StepSpec(10, "single_tasks", (4, 6, 8, 9), step_single_tasks),
    StepSpec(11, "fusion", (4, 8, 10), step_fusion),
    StepSpec(12, "fused_databases", (6, 11), step_fused_databases),
    StepSpec(13, "harmonization", (4, 8, 11, 12), step_harmonization),
    StepSpec(14, "templates", (4, 6, 8, 10, 11, 12, 13), step_templates),
    StepSpec(15, "grounding", (4, 8, 11, 12, 13, 14), step_grounding),
    StepSpec(16, "filtering", (4, 8, 10, 11, 13, 15), step_filtering),
    StepSpec(17, "instantiation", (14, 16), step_instantiation),
    StepSpec(18, "rollouts", (4, 8, 9, 11, 13, 16, 17), step_rollouts),
]
STEP_DIRS.update({s.id: s.dirname for s in STEPS})
STEP_NAMES = {s.name: s.id for s in STEPS}

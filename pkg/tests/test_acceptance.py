"""Acceptance criteria 1-10.

Each test carries a ``criterion`` marker; the conftest prints one PASS/FAIL
line per criterion at the end of the session.
"""

from __future__ import annotations

import itertools
import random
import shutil
import time
from collections import Counter
from typing import Any

import pytest
from oracles import (
    IdPermutation,
    brute_simple_paths,
    expected_kinds,
    identifier_values,
    naive_topology,
    random_rooted_digraph,
    random_violating_graph,
    trajectories_oracle,
)

from envsynth.config import PipelineConfig
from envsynth.datastore import Database, Snapshot
from envsynth.errors import RepairBudgetExhausted
from envsynth.evaluator import (
    EvalContext,
    GoldenStep,
    compute_diff,
    composite_score,
    eval_actions,
    eval_environment,
    evaluate,
    facts,
    fuzzy_equal,
    golden_steps,
    prune_golden,
    replay,
    ActionCall,
    DependencyModel,
)
from envsynth.pipeline import artifact_hashes, resume_pipeline, run_pipeline
from envsynth.rollout import RolloutLog, Turn
from envsynth.runtime import STATUSES, InvocationResult
from envsynth.steps import golden_context, repair_server
from envsynth.stub import StubProvider
from envsynth.tasks import GroundedTask
from envsynth.toolgraph import Edge, ToolGraph, enumerate_trajectories, validate_tool_graph
from envsynth.util import read_jsonl

TOPOLOGY_KINDS = {"NoSource", "MultipleSources", "Unreachable", "CycleDetected"}


def graph_of(nodes: list[str], edges: list[tuple[str, str]]) -> ToolGraph:
    return ToolGraph(nodes, [Edge(u, v, "state_dependency") for u, v in edges])


# --------------------------------------------------------------------------- shared desk data


class Rollout:
    def __init__(self, task: GroundedTask, agent: str, log: RolloutLog, ctx: EvalContext, gold_final: Database) -> None:
        self.task = task
        self.agent = agent
        self.log = log
        self.ctx = ctx
        self.gold_final = gold_final


@pytest.fixture(scope="module")
def records(desk) -> dict[str, dict[str, Any]]:
    return {r["id"]: r for r in read_jsonl(desk.ws.path(16, "registry.jsonl"))}


@pytest.fixture(scope="module")
def rollouts(desk, records) -> list[Rollout]:
    ws = desk.ws
    out = []
    for item in read_jsonl(ws.path(17, "tasks.jsonl")):
        task = GroundedTask.from_dict(item["task"])
        ctx, initial, view = golden_context(ws, task, records[item["record"]])
        _, gold_final = replay(ctx.golden, view.runtime(initial.database()))
        for agent in desk.config.agents:
            raw = list(read_jsonl(ws.path(18, "logs", f"{task.task_id}.{agent}.jsonl")))
            final = ws.snapshot(ws.rel(ws.path(18, "snapshots", raw[0]["final_snapshot"] + ".json")))
            log = RolloutLog.from_records(raw, {initial.address: initial, final.address: final})
            out.append(Rollout(task, agent, log, ctx, gold_final))
    return out


def verdict(report: Any) -> tuple:
    return (tuple(sorted(report.scores.items())), report.final, tuple(sorted(report.tags)))


# --------------------------------------------------------------------------- 1


@pytest.mark.criterion(1, "tool-graph validation agrees with a naive checker on 1000 graphs in < 5 s")
def test_criterion_01_graph_validation():
    rng = random.Random(20240601)
    corpus = [random_violating_graph(rng, 30) for _ in range(1000)]
    assert max(len(n) for n, _ in corpus) <= 36  # 30 base nodes plus injected ones
    injected = Counter()
    disagreements = []
    elapsed = 0.0
    for nodes, edges in corpus:
        g = graph_of(nodes, edges)
        t0 = time.perf_counter()
        found = validate_tool_graph(g)
        elapsed += time.perf_counter() - t0
        truth = naive_topology(nodes, edges)
        kinds = {v.kind for v in found} & TOPOLOGY_KINDS
        injected.update(expected_kinds(truth))
        by_kind = {v.kind: v for v in found}
        ok = kinds == expected_kinds(truth)
        if ok and "MultipleSources" in by_kind:
            ok = set(by_kind["MultipleSources"].path) == truth["sources"]
        if ok and "Unreachable" in by_kind:
            ok = set(by_kind["Unreachable"].path) == truth["unreachable"]
        if ok and "CycleDetected" in by_kind:
            cyc = by_kind["CycleDetected"].path
            ok = cyc[0] == cyc[-1] and len(cyc) >= 2 and all((a, b) in set(edges) for a, b in zip(cyc, cyc[1:]))
        if not ok:
            disagreements.append((nodes, edges, found))
    assert not disagreements, disagreements[:3]
    # every defect class actually occurred in the corpus
    assert all(injected[k] >= 50 for k in ("MultipleSources", "Unreachable", "CycleDetected")), injected
    assert sum(1 for n, e in corpus if not expected_kinds(naive_topology(n, e))) >= 50
    assert elapsed < 5.0, elapsed


# --------------------------------------------------------------------------- 2


@pytest.mark.criterion(2, "trajectory enumeration equals brute-force DFS on 200 graphs for all (L_min, L_max) in {1..6}^2")
def test_criterion_02_enumeration():
    rng = random.Random(7)
    mismatches = []
    nonempty = 0
    for _ in range(200):
        nodes, edges = random_rooted_digraph(rng, 12)
        g = graph_of(nodes, edges)
        assert g.source() == "t00"
        paths = brute_simple_paths(nodes, edges, "t00", 6)
        sinks = set(g.sinks())
        for l_min, l_max in itertools.product(range(1, 7), repeat=2):
            got = [t.tools for t in enumerate_trajectories(g, l_min, l_max)]
            want = trajectories_oracle(paths, sinks, l_min, l_max)
            nonempty += bool(want)
            if len(got) != len(set(got)) or set(got) != want or got != sorted(got):
                mismatches.append((nodes, edges, l_min, l_max))
    assert not mismatches, mismatches[:3]
    assert nonempty > 2000


# --------------------------------------------------------------------------- 3


@pytest.mark.criterion(3, "pruned golden replays to the same snapshot and fact union; writes kept")
def test_criterion_03_pruner_oracle(desk):
    ws = desk.ws
    checked = pruned_any = 0
    for rec in read_jsonl(ws.path(16, "registry.jsonl")):
        view = ws.domain(rec["domain"])
        snap = ws.snapshot(rec["snapshot_path"])
        full = golden_steps(rec["steps"], view.policy, view.catalog)
        pruned = prune_golden(full)

        res_full, db_full = replay(full, view.runtime(snap.database()))
        res_pruned, db_pruned = replay(pruned, view.runtime(snap.database()))
        assert all(r["status"] == "ok" for r in res_full + res_pruned)
        assert db_full.content_hash() == db_pruned.content_hash()

        def union(steps: list[GoldenStep], results: list[dict[str, Any]]) -> set:
            out = set()
            for s, r in zip(steps, results):
                out |= facts(r["payload"], s.table, s.key)
            return out

        assert union(full, res_full) == union(pruned, res_pruned)
        # every mutating call survives, in its original relative order
        writes = [(s.tool, s.args) for s in full if s.mutating]
        assert [(s.tool, s.args) for s in pruned if s.mutating] == writes
        checked += 1
        pruned_any += len(pruned) < len(full)
    assert checked >= 30
    assert pruned_any > 0


# --------------------------------------------------------------------------- 4


def _permuted(r: Rollout, perm: IdPermutation) -> tuple[RolloutLog, EvalContext]:
    def pdb(db: Database) -> Database:
        return Database.from_dict(perm(db.to_dict()))

    init = pdb(r.log.initial.database())
    final = pdb(r.log.final.database())
    log = RolloutLog(
        r.log.task_id,
        [Turn.from_dict(perm(t.to_dict())) for t in r.log.turns],
        Snapshot.of(init),
        Snapshot.of(final),
        r.log.termination,
        dict(r.log.meta),
    )
    ctx = r.ctx
    golden = [GoldenStep.from_dict(perm(g.to_dict())) for g in ctx.golden]
    gold = compute_diff(init, pdb(r.gold_final), ctx.ignore_columns)
    task = GroundedTask.from_dict(perm(r.task.to_dict()))
    return log, EvalContext(task, golden, gold, ctx.deps, ctx.policy, ctx.catalog, ctx.ignore_columns, ctx.epsilon)


@pytest.mark.criterion(4, "bijective identifier permutation changes no verdict on 100 rollouts")
def test_criterion_04_diff_metamorphic(rollouts):
    sample = rollouts[:100]
    assert len(sample) == 100
    changed = []
    for k, r in enumerate(sample):
        ids = identifier_values(r.log.initial.database().to_dict()) | identifier_values(r.log.final.database().to_dict())
        ids |= identifier_values(r.gold_final.to_dict())
        perm = IdPermutation(ids, seed=k)
        assert perm.map and all(a != b for a, b in perm.map.items())
        before = evaluate(r.log, r.ctx)
        log, ctx = _permuted(r, perm)
        after = evaluate(log, ctx)
        # the permuted rollout really does carry different identifiers
        assert log.final.address != r.log.final.address
        if verdict(before) != verdict(after):
            changed.append((r.task.task_id, r.agent, before.to_dict(), after.to_dict()))
    assert not changed, changed[:2]
    assert {verdict(evaluate(r.log, r.ctx))[1] for r in sample} == {0.0, 1.0}


# --------------------------------------------------------------------------- 5


@pytest.mark.criterion(5, "numeric arguments match within 1e-4 and not beyond; strings match case-insensitively")
def test_criterion_05_fuzzy_constants():
    from envsynth import evaluator

    assert evaluator.EPSILON == 1e-4
    rng = random.Random(5)
    for _ in range(2000):
        base = rng.uniform(-1e4, 1e4) if rng.random() < 0.5 else float(rng.randint(-500, 500))
        inside = rng.uniform(0, 0.999e-4) * rng.choice((-1, 1))
        outside = rng.uniform(1.001e-4, 1.0) * rng.choice((-1, 1))
        assert fuzzy_equal(base, base + inside)
        assert not fuzzy_equal(base, base + outside)
    # exactly at the tolerance, with decimal inputs
    for a, b in [(1.0, 1.0001), (2.5, 2.4999), (0, 0.0001), (100, 100.0001)]:
        assert fuzzy_equal(a, b)
    for a, b in [(1.0, 1.000101), (0, 0.000101), (100, 99.9998)]:
        assert not fuzzy_equal(a, b)
    # the same tolerance applies inside the action evaluator
    golden = [GoldenStep("set_price", {"amount": 19.99, "label": "Gold Plan"}, None, True)]
    deps = DependencyModel()
    for amount, label, want in [
        (19.99 + 0.9e-4, "gold plan", 1.0),
        (19.99 - 0.9e-4, "GOLD PLAN", 1.0),
        (19.99 + 1.1e-4, "Gold Plan", 0.0),
        (19.99, "Gold  Plan", 0.0),
    ]:
        got = eval_actions([ActionCall("set_price", {"amount": amount, "label": label}, "ok")], golden, deps)["score"]
        assert got == want, (amount, label)
    for s in ["Lisbon", "ÅRHUS", "straße", "Juniper Birch"]:
        assert fuzzy_equal(s, s.upper()) and fuzzy_equal(s.lower(), s.swapcase())
    assert not fuzzy_equal("Lisbon", "Lisbon ")


# --------------------------------------------------------------------------- 6


@pytest.mark.criterion(6, "composite score equals AND over all 2^n evaluator outcomes, n <= 10")
def test_criterion_06_all_or_nothing():
    total = 0
    for n in range(1, 11):
        names = [f"e{i}" for i in range(n)]
        for bits in itertools.product((0.0, 1.0), repeat=n):
            scores = dict(zip(names, bits))
            assert composite_score(scores, names) == (1.0 if all(bits) else 0.0)
            total += 1
    assert total == sum(2**n for n in range(1, 11))


# --------------------------------------------------------------------------- 7


@pytest.mark.criterion(7, "desk run: task counts, replay cleanliness and agent verdicts")
def test_criterion_07_end_to_end(desk, rollouts):
    assert desk.seconds < 600
    assert len(desk.config.seed_domains) == 2
    tasks = [GroundedTask.from_dict(i["task"]) for i in read_jsonl(desk.ws.path(17, "tasks.jsonl"))]
    single = sum(not t.cross_domain for t in tasks)
    cross = sum(t.cross_domain for t in tasks)
    assert single >= 20 and cross >= 10, (single, cross)

    # every registry entry replays with no runtime error
    ws = desk.ws
    entries = 0
    for rec in read_jsonl(ws.path(16, "registry.jsonl")):
        view = ws.domain(rec["domain"])
        results, _ = replay(golden_steps(rec["steps"], view.policy, view.catalog), view.runtime(ws.snapshot(rec["snapshot_path"]).database()))
        assert [r["status"] for r in results] == ["ok"] * len(results), rec["id"]
        entries += 1
    assert entries >= single + cross

    by_agent: dict[str, list] = {}
    for r in rollouts:
        by_agent.setdefault(r.agent, []).append(evaluate(r.log, r.ctx))
    assert {a: len(v) for a, v in by_agent.items()} == {a: len(tasks) for a in desk.config.agents}
    assert all(rep.final == 1.0 for rep in by_agent["golden"])
    assert all(rep.scores["environment"] == 0.0 for rep in by_agent["drop_write"])
    assert all("S1" in rep.tags for rep in by_agent["skip_preview"])


# --------------------------------------------------------------------------- 8


RESUME_CONFIG = PipelineConfig(max_trajectories_per_domain=3, combos_per_trajectory=2, cross_pairs=3, entity_rows=12, relationship_rows=16)


@pytest.mark.criterion(8, "interrupt after each of 18 steps, resume, and match the uninterrupted tree")
def test_criterion_08_resume(tmp_path):
    ref = tmp_path / "ref"
    run_pipeline(RESUME_CONFIG, ref)
    want = artifact_hashes(ref)
    assert any(k.startswith("18_rollouts/logs/") for k in want)

    chain = tmp_path / "chain"
    identical = 0
    for k in range(1, 19):
        step = run_pipeline(RESUME_CONFIG, chain, stop_after=k)
        assert step.executed == [k] and step.stopped_after == k
        cut = tmp_path / f"cut{k:02d}"
        shutil.copytree(chain, cut)
        res = resume_pipeline(RESUME_CONFIG, cut)
        assert res.skipped == list(range(1, k + 1))
        assert res.executed == list(range(k + 1, 19))
        identical += artifact_hashes(cut) == want
        shutil.rmtree(cut)
    assert identical == 18


# --------------------------------------------------------------------------- 9


def _fuzz_value(rng: random.Random, pool: list[Any]) -> Any:
    pick = rng.random()
    if pick < 0.45 and pool:
        return rng.choice(pool)
    return rng.choice([
        None, True, False, 0, -1, 2**63, 3.5, float("inf"), float("nan"), "", "x" * 300, "'; drop table",
        "\x00", "ñ", [], [1, "a"], {}, {"nested": {"k": [None]}}, "2025-13-45T99:99:99", "clin_ffffffffff",
    ])


@pytest.mark.criterion(9, "10k fuzzed invocations never crash, previews never write, sessions stay isolated")
def test_criterion_09_runtime_safety(desk, records):
    ws = desk.ws
    keys = ws.servers() + [f"{a}+{b}" for a, b in ws.combos()]
    views = {k: ws.domain(k) for k in keys}
    bases = {}
    for k in keys:
        bases[k] = ws.database(k) if "+" not in k else ws.fused_database(*k.split("+"))
    runtimes = {k: views[k].runtime(bases[k]) for k in keys}
    pools = {}
    for k, db in bases.items():
        pools[k] = sorted({v for t in db.tables.values() for r in t.rows[:10] for v in r.values() if isinstance(v, (str, int, float, bool))}, key=repr)

    golden: dict[str, list[GoldenStep]] = {k: [] for k in keys}
    for rec in records.values():
        golden[rec["domain"]] += golden_steps(rec["steps"], views[rec["domain"]].policy, views[rec["domain"]].catalog)

    rng = random.Random(99)

    def new_session(k: str) -> str:
        rt = runtimes[k]
        sid = rt.create_session()
        for ns, svc in rt.services.items():
            core = bases[k].tables[svc.table_map.get(svc.core_entity, svc.core_entity)]
            if rng.random() < 0.85:
                rt.authorize(sid, rng.choice(core.rows)[svc.core_key] if rng.random() < 0.9 else "ghost", ns)
        return sid

    sessions: dict[str, list[str]] = {k: [new_session(k)] for k in keys}
    statuses = Counter()
    previews = 0
    for i in range(10_000):
        k = rng.choice(keys)
        rt = runtimes[k]
        if rng.random() < 0.05:
            sessions[k].append(new_session(k))
        sid = rng.choice(sessions[k]) if rng.random() > 0.02 else rng.choice(["nope", None, 7])
        names = sorted(rt.policy.contracts)
        tool = rng.choice(names) if rng.random() > 0.03 else rng.choice(["", "drop", None, 3])
        if rng.random() < 0.03:
            args: Any = rng.choice([None, [], "args", 5])
        elif rng.random() < 0.5:
            # a real golden call, sometimes with one argument scrambled
            g = rng.choice(golden[k])
            tool, args = g.tool, dict(g.args)
            if args and rng.random() < 0.4:
                args[rng.choice(sorted(args))] = _fuzz_value(rng, pools[k])
            args["confirm"] = rng.random() < 0.5
        else:
            info = views[k].catalog.tools.get(tool) if isinstance(tool, str) else None
            params = list(info.params) if info else []
            args = {p: _fuzz_value(rng, pools[k]) for p in params if rng.random() < 0.9}
            if rng.random() < 0.2:
                args["unexpected"] = _fuzz_value(rng, pools[k])
            if rng.random() < 0.5:
                args["confirm"] = rng.choice([True, False, "yes", 1])
        session = rt.sessions.get(sid) if isinstance(sid, str) else None
        before = session.db.content_hash() if session else None
        res = rt.invoke(sid, tool, args)
        assert isinstance(res, InvocationResult) and res.status in STATUSES
        assert res.meta.get("code") != "InternalError", (tool, args, res.reason)
        statuses[res.status] += 1
        if res.status == "needs_confirmation":
            previews += 1
            assert session.db.content_hash() == before
        if res.status != "ok" and session is not None:
            assert session.db.content_hash() == before
    assert sum(statuses.values()) == 10_000
    assert statuses["ok"] > 500 and previews > 50, statuses

    # isolation: two sessions replay different golden traces step by step
    by_domain: dict[str, list] = {}
    for rec in records.values():
        view = views[rec["domain"]]
        steps = golden_steps(rec["steps"], view.policy, view.catalog)
        if any(s.mutating and not view.catalog.is_auth(s.tool) for s in steps):
            by_domain.setdefault(rec["domain"], []).append((rec, steps))
    pairs = 0
    rounds = 0
    while pairs < 1000:
        k = sorted(by_domain)[rounds % len(by_domain)]
        (rec_a, a_steps), (rec_b, b_steps) = rng.sample(by_domain[k], 2) if len(by_domain[k]) > 1 else by_domain[k] * 2
        assert rec_a["snapshot_path"] and rec_b["snapshot_path"]
        rounds += 1
        rt = views[k].runtime(ws.snapshot(rec_a["snapshot_path"]).database())
        a, b = rt.create_session(), rt.create_session()
        hashes = {a: rt.session(a).db.content_hash(), b: rt.session(b).db.content_hash()}
        for sa, sb in itertools.zip_longest(a_steps, b_steps):
            for sid, other, st in ((a, b, sa), (b, a, sb)):
                if st is None:
                    continue
                args = {**st.args, "confirm": True} if st.confirm else dict(st.args)
                res = rt.invoke(sid, st.tool, args)
                after = rt.session(sid).db.content_hash()
                wrote = res.ok and st.mutating and not views[k].catalog.is_auth(st.tool)
                # the other session saw nothing of this call
                assert rt.session(other).db.content_hash() == hashes[other]
                if wrote:
                    assert after != hashes[sid]
                    pairs += 1
                hashes[sid] = after
    assert pairs >= 1000


# --------------------------------------------------------------------------- 10


class CountingFixer:
    def __init__(self, inner: Any) -> None:
        self.inner = inner
        self.calls = 0

    def diagnose(self, failure: dict[str, Any]) -> dict[str, Any]:
        self.calls += 1
        return self.inner.diagnose(failure)


@pytest.mark.criterion(10, "unfixable fault exhausts exactly 5 attempts; single typos converge within 2")
def test_criterion_10_repair_budget(desk):
    ws = desk.ws
    sim = desk.config.simulation_time
    converged = exhausted = 0
    for server in ws.servers():
        bp, db = ws.blueprint(server), ws.database(server)
        for seed in range(5):
            provider = StubProvider(seed, faults={"unfixable_param": 1})
            text = provider.generate("policy", {"blueprint": bp.to_dict(), "meta": bp.meta_dict()})
            fixer = CountingFixer(provider)
            with pytest.raises(RepairBudgetExhausted) as info:
                repair_server(text, bp, db, fixer, 5, sim)
            attempts = info.value.details["attempts"]
            assert len(attempts) == 5 and [a["index"] for a in attempts] == [1, 2, 3, 4, 5]
            assert all(a["failures"] for a in attempts)
            assert fixer.calls == 4
            exhausted += 1

            provider = StubProvider(seed, faults={"typo_param": 1})
            text = provider.generate("policy", {"blueprint": bp.to_dict(), "meta": bp.meta_dict()})
            res = repair_server(text, bp, db, provider, 5, sim)
            assert res.ok
            assert res.attempts[0].failures, "the injected typo must be caught"
            assert len(res.attempts) <= 2
            converged += 1
    assert exhausted >= 20 and converged >= 20

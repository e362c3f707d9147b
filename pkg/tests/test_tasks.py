from __future__ import annotations

import pytest

from envsynth.runtime import InvocationResult
from envsynth.tasks import Binding, InstanceCombo, InstancePlan, PlanStep, ValidatedRegistry, classify, execute_plan


def plan(*steps):
    return InstancePlan("h", [s.tool for s in steps], list(steps), {}, [], [], [], [])


def test_rewrites_flags_slots_written_twice():
    new = Binding("new", "Visit", "notes")
    p = plan(PlanStep("book", {"notes": new}), PlanStep("edit", {"notes": new}), PlanStep("get", {"visit_id": Binding("output", "Visit", "visit_id", 0)}))
    assert p.rewrites() == ["Visit.notes"]
    assert plan(PlanStep("book", {"notes": new})).rewrites() == []


def test_plan_roundtrip():
    p = plan(PlanStep("book", {"notes": Binding("new", "Visit", "notes")}, confirm=True))
    p.blocking_values.append(("Visit", "status", "cancelled"))
    again = InstancePlan.from_dict(p.to_dict())
    assert again == p
    assert again.blocked("Visit", {"status": "cancelled"})
    assert not again.blocked("Visit", {"status": "booked"})


@pytest.mark.parametrize(
    "status, code, label",
    [
        ("error", "InternalError", "ServerImplementationBug"),
        ("rejected", "PolicyRejected", "PolicyViolation"),
        ("rejected", "PreconditionFailed", "PolicyViolation"),
        ("rejected", "InvalidInput", "InvalidEntityData"),
        ("needs_confirmation", "NeedsConfirmation", "ServerImplementationBug"),
    ],
)
def test_classify(status, code, label):
    assert classify(InvocationResult(status, None, "x", {"code": code})) == label


def test_registry_replays_cleanly(desk):
    """Validated combos re-execute against their snapshots without a failure."""
    checked = 0
    for server in desk.ws.servers():
        reg = desk.ws.registry(server)
        again = ValidatedRegistry.from_records(reg.to_records())
        assert len(again) == len(reg) and again.hashes() == reg.hashes()
        view = desk.ws.domain(server)
        for h, rec in list(reg.items())[:3]:
            db = desk.ws.snapshot(desk.ws.rel(desk.ws.path(10, "snapshots", rec["snapshot"] + ".json"))).database()
            res = execute_plan(reg.plan(h), InstanceCombo.from_dict(rec["combo"]), view.runtime(db))
            assert res.ok, res.failure
            checked += 1
    assert checked

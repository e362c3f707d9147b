from __future__ import annotations

import pytest
from hypothesis import given, strategies as st

from envsynth.datastore import Database, Table, snapshot
from envsynth.errors import MissingEvaluator, SchemaMismatch
from envsynth.evaluator import compute_diff, composite_score, eval_environment, eval_rules, facts, fuzzy_equal
from envsynth.policy import parse_policy
from envsynth.rollout import RolloutLog, Turn
from envsynth.tasks import GroundedTask

floats = st.floats(-1e6, 1e6, allow_nan=False)


@given(floats, floats)
def test_fuzzy_equal_symmetric(a, b):
    assert fuzzy_equal(a, b) == fuzzy_equal(b, a)


@given(st.integers(-10**6, 10**6), st.floats(0, 1e-4))
def test_fuzzy_within_tolerance(k, d):
    a = k / 1000
    assert fuzzy_equal(a, a + d) == (abs((a + d) - a) <= 1e-4 * (1 + 1e-9))


@given(st.floats(0, 1e-4), st.floats(1.000001e-4, 1.0))
def test_fuzzy_bound_at_zero(inside, outside):
    assert fuzzy_equal(0.0, inside)
    assert not fuzzy_equal(0.0, outside)


@pytest.mark.parametrize(
    "a, b, eq",
    [
        (1, 1.0, True),
        (True, 1, False),
        (float("nan"), float("nan"), False),
        ("Berlin", "BERLIN", True),
        ("straße", "STRASSE", True),
        ([1, "a"], [1.00001, "A"], True),
        ([1], [1, 2], False),
        ({"x": 1}, {"x": 1.00009}, True),
        ({"x": 1}, {"y": 1}, False),
        (None, None, True),
        (None, 0, False),
    ],
)
def test_fuzzy_cases(a, b, eq):
    assert fuzzy_equal(a, b) is eq


def test_fuzzy_custom_epsilon():
    assert fuzzy_equal(1.0, 1.01, eps=0.05)
    assert not fuzzy_equal(1.0, 1.01)


def test_facts_are_scoped_by_row():
    a = facts({"rows": [{"id": "r1", "v": 1}, {"id": "r2", "v": 1}]}, "T", "id")
    assert ("T:r1", "v", "1") in a and ("T:r2", "v", "1") in a
    effect = facts({"status": "Success", "effects": [{"table": "T", "key": "r1", "row": {"id": "r1", "v": 2}}]})
    assert ("T:r1", "v", "2") in effect
    assert facts(None) == set()
    assert facts(7, "T") == {("T", "", "7")}


def db_with(visits):
    db = Database()
    db.add(Table("Patient", {"patient_id": "identifier", "name": "string"}, [{"patient_id": "p1", "name": "Ada"}], primary_key="patient_id"))
    db.add(Table("Visit", {"visit_id": "identifier", "patient_id": "identifier", "day": "string"}, visits, primary_key="visit_id", kind="relationship"))
    return db


def test_diff_tokens_hide_generated_ids():
    start = db_with([])
    a = db_with([{"visit_id": "v_one", "patient_id": "p1", "day": "mon"}])
    b = db_with([{"visit_id": "v_two", "patient_id": "p1", "day": "mon"}])
    da, db_ = compute_diff(start, a), compute_diff(snapshot(start), snapshot(b))
    assert da == db_ and not da.empty
    assert compute_diff(start, start).empty


def test_diff_ignores_listed_columns():
    start = db_with([{"visit_id": "v", "patient_id": "p1", "day": "mon"}])
    end = db_with([{"visit_id": "v", "patient_id": "p1", "day": "tue"}])
    assert not compute_diff(start, end).empty
    assert compute_diff(start, end, {"Visit": ["day"]}).empty


def test_diff_schema_mismatch():
    with pytest.raises(SchemaMismatch):
        compute_diff(db_with([]), Database())


def test_environment_containment():
    start = db_with([])
    gold = compute_diff(start, db_with([{"visit_id": "a", "patient_id": "p1", "day": "mon"}]))
    more = compute_diff(start, db_with([{"visit_id": "a", "patient_id": "p1", "day": "mon"}, {"visit_id": "b", "patient_id": "p1", "day": "fri"}]))
    assert eval_environment(more, gold)["score"] == 1.0
    miss = eval_environment(compute_diff(start, start), gold)
    assert miss["score"] == 0.0 and miss["details"]["missing"] == {"Visit": {"added": 1}}


def test_composite_requires_every_enabled_score():
    assert composite_score({"action": 1, "environment": 1, "rules": 1}) == 1.0
    assert composite_score({"action": 1, "environment": 0, "rules": 1}) == 0.0
    assert composite_score({"action": 0}, enabled=[]) == 1.0
    with pytest.raises(MissingEvaluator):
        composite_score({"action": 1})


POLICY = parse_policy("""\
<policy domain="Clinic">
  <tool name="book" confirmation="required">
    <permissions>
      otherwise => PERMIT
    </permissions>
    <effects>
      insert Visit set visit_id = new_id
    </effects>
  </tool>
</policy>
""")

TASK = GroundedTask("t1", "book a visit", "", "hi", "", {"Patient.name": "Ada"}, ["Patient.name"], {"Patient.name": ["name"]}, "h", "c", "2025-06-01T09:00:00")


def log_of(*turns):
    snap = snapshot(Database())
    return RolloutLog("t1", [Turn(i, a, c, m) for i, (a, c, m) in enumerate(turns)], snap, snap, "user_stop")


def tool(status, key="book:1"):
    return ("tool", {"status": status, "payload": None, "reason": None, "meta": {"tool": "book", "pairing_key": key}}, {})


CALL = ("assistant", {"tool_name": "book", "args": {}}, {})


def test_rules_preview_then_affirmed_commit_is_clean():
    log = log_of(CALL, tool("needs_confirmation"), ("user", "yes please", {"affirm": True}), CALL, tool("ok"))
    assert eval_rules(log, TASK, POLICY)["score"] == 1.0


@pytest.mark.parametrize(
    "turns",
    [
        # committed without any preview
        (CALL, tool("ok")),
        # previewed but never affirmed
        (CALL, tool("needs_confirmation"), CALL, tool("ok")),
        # affirmation belongs to a different call
        (CALL, tool("needs_confirmation", "book:2"), ("user", "ok", {"affirm": True}), CALL, tool("ok")),
    ],
)
def test_rules_s1(turns):
    out = eval_rules(log_of(*turns), TASK, POLICY)
    assert out["score"] == 0.0 and "S1" in out["tags"]


def test_rules_s2_on_rejection():
    out = eval_rules(log_of(CALL, tool("rejected")), TASK, POLICY)
    assert "S2" in out["tags"] and out["score"] == 0.0


def test_r1_reported_but_not_failing_by_default():
    log = log_of(("user", "I am Ada", {}), ("assistant", "What is your name?", {}))
    out = eval_rules(log, TASK, POLICY)
    assert out["tags"] == ["R1"] and out["score"] == 1.0
    assert eval_rules(log, TASK, POLICY, r_tags_fail=True)["score"] == 0.0


def test_log_rounds_and_roundtrip():
    log = log_of(("user", "hi", {}), CALL, tool("ok"), ("assistant", "done", {}))
    assert log.rounds == 3
    assert len(log.tool_calls()) == 1
    again = RolloutLog.from_records(log.to_records(), {log.initial.address: log.initial})
    assert [t.to_dict() for t in again.turns] == [t.to_dict() for t in log.turns]

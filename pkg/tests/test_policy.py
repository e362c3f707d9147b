from __future__ import annotations

import pytest
from hypothesis import given, settings, strategies as st

from envsynth.datastore import Database, Table
from envsynth.errors import DuplicateToolBlock, MalformedDelimiter, PolicyParseError, PredicateTypeError, UnknownPredicateSyntax
from envsynth.policy import (
    EvalContext,
    apply_patches,
    audit_policy,
    evaluate_predicate,
    evaluate_term,
    parse_policy,
    parse_predicate,
    repair_policy_text,
    serialize_policy,
    to_source,
)
from envsynth.policy.audit import SearchReplace

DOC = """\
<policy domain="ClinicService">
  <description>clinic visits</description>
  <global_rules>
    now >= "2020-01-01T00:00:00"
  </global_rules>
  <tool name="cancel_visit" confirmation="required">
    <description>cancel a visit</description>
    <preconditions>
      session.authenticated = true
    </preconditions>
    <input_validation>
      visit_id: pattern "v[0-9]+"
      fee: range 0..100
      reason: enum ["sick", "travel"]
    </input_validation>
    <permissions>
      not exists(Visit, visit_id = param.visit_id) => REJECT "unknown visit"
      lookup(Visit, param.visit_id).status = "cancelled" => REJECT "already cancelled"
      otherwise => PERMIT
    </permissions>
    <effects>
      update Visit key param.visit_id set status = "cancelled"
    </effects>
    <returns>effect</returns>
  </tool>
  <tool name="list_visits">
    <returns>
      rows Visit where status != "cancelled"
    </returns>
  </tool>
</policy>
"""


def visits():
    t = Table("Visit", {"visit_id": "string", "status": "string", "fee": "number"}, primary_key="visit_id")
    t.insert({"visit_id": "v1", "status": "booked", "fee": 10.0})
    t.insert({"visit_id": "v2", "status": "cancelled", "fee": 20.0})
    return Database({"Visit": t})


def ctx(params=None, session=None, now="2025-01-01T00:00:00"):
    return EvalContext(session or {"authenticated": True}, visits(), params or {}, now)


def test_parse_document_structure():
    doc = parse_policy(DOC)
    assert doc.domain == "ClinicService"
    c = doc.contract("cancel_visit")
    assert c.requires_confirmation and c.mutating
    assert c.tables_written() == {"Visit"}
    assert [r.decision for r in c.permission_rules] == ["REJECT", "REJECT", "PERMIT"]
    assert not doc.contract("list_visits").mutating


def test_serialize_roundtrip():
    doc = parse_policy(DOC)
    assert parse_policy(serialize_policy(doc)) == doc


def test_validation_rules():
    rules = parse_policy(DOC).contract("cancel_visit").input_validation
    (pat,), (rng,), (enum,) = rules["visit_id"], rules["fee"], rules["reason"]
    assert pat.check("v12") and not pat.check("v12x") and not pat.check(12)
    assert rng.check(0) and rng.check(100.0) and not rng.check(101) and not rng.check(True)
    assert enum.check("sick") and not enum.check("SICK")


@pytest.mark.parametrize(
    "src, expect",
    [
        ('exists(Visit, status = "booked")', True),
        ('exists(Visit, status = "gone")', False),
        ('lookup(Visit, "v2").status = "cancelled"', True),
        ("lookup(Visit, param.visit_id).fee >= 10", True),
        ("lookup(Visit, param.visit_id).fee > 10.0", False),
        ("session.authenticated = true and not (param.visit_id = \"v2\")", True),
        ("param.visit_id = \"v9\" or 1 = 1.0", True),
        ("true = 1", False),
        ('now > "2024-12-31T00:00:00"', True),
        ('param.visit_id < 3', False),
    ],
)
def test_predicates(src, expect):
    assert evaluate_predicate(parse_predicate(src), ctx({"visit_id": "v1"})) is expect


def test_missing_lookup_row_is_null():
    assert evaluate_term(parse_predicate('lookup(Visit, "nope").status'), ctx()) is None


def test_unbound_reference_raises_even_when_short_circuit_possible():
    with pytest.raises(PredicateTypeError):
        evaluate_predicate(parse_predicate("false and param.missing = 1"), ctx())
    with pytest.raises(PredicateTypeError):
        evaluate_predicate(parse_predicate("exists(Nowhere)"), ctx())


@pytest.mark.parametrize(
    "text, err",
    [
        ("<policy domain=\"x\">\n<tool name=\"a\">\n</policy>\n", MalformedDelimiter),
        (
            "<policy domain=\"x\">\n<tool name=\"a\">\n</tool>\n<tool name=\"a\">\n</tool>\n</policy>\n",
            DuplicateToolBlock,
        ),
        (
            "<policy domain=\"x\">\n<tool name=\"a\">\n<preconditions>\nparam.x ~~ 3\n</preconditions>\n</tool>\n</policy>\n",
            UnknownPredicateSyntax,
        ),
    ],
)
def test_parse_errors_are_positioned(text, err):
    with pytest.raises(err) as info:
        parse_policy(text)
    assert isinstance(info.value, PolicyParseError)
    assert info.value.line >= 1 and info.value.column >= 1


def test_audit_finds_fabrications_and_wallclock():
    text = DOC.replace('now >= "2020', 'today >= "2020').replace('set status = "cancelled"', 'set statuz = "cancelled", mood = "sad"')
    findings = audit_policy(parse_policy(text), visits())
    kinds = {(f.violation, f.detail) for f in findings}
    assert ("TimelineViolation", "today") in kinds
    assert ("FabricatedAttribute", "Visit.statuz") in kinds
    assert ("FabricatedAttribute", "Visit.mood") in kinds
    fixed, _ = repair_policy_text(text, visits())
    doc = parse_policy(fixed)
    assert audit_policy(doc, visits()) == []
    (m,) = doc.contract("cancel_visit").side_effects
    assert [c for c, _ in m.assignments] == ["status"]


def test_audit_clean_document():
    assert repair_policy_text(DOC, visits()) == (DOC, [])


def test_apply_patches_deletes_on_empty_replace():
    out = apply_patches("a\n  b\nc", [SearchReplace("  b", "")])
    assert out.split("\n") == ["a", "c"]


names = st.sampled_from(["param.a", "param.b", "session.authenticated", "now", "1", "2.5", '"s"', "true", "null"])
ops = st.sampled_from(["=", "!=", "<", "<=", ">", ">="])


@st.composite
def predicates(draw, depth=2):
    if depth == 0 or draw(st.booleans()):
        return f"{draw(names)} {draw(ops)} {draw(names)}"
    kind = draw(st.sampled_from(["and", "or", "not"]))
    if kind == "not":
        return f"not ({draw(predicates(depth - 1))})"
    return f"({draw(predicates(depth - 1))}) {kind} ({draw(predicates(depth - 1))})"


@settings(max_examples=150, deadline=None)
@given(predicates(), st.integers(-3, 3), st.sampled_from(["x", 1.5, True, None]))
def test_to_source_roundtrip_preserves_meaning(src, a, b):
    node = parse_predicate(src)
    again = parse_predicate(to_source(node))
    assert again == node
    c = ctx({"a": a, "b": b})
    assert evaluate_predicate(again, c) == evaluate_predicate(node, c)

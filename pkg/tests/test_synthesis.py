"""Upstream stages checked against the artifacts of one default run."""

from __future__ import annotations

import re

import pytest

from envsynth.blueprint import dump_tool_docs, load_tool_docs, sample_outlines, standardize_tools, validate_blueprint
from envsynth.datastore import check_constraints, derive_constraints
from envsynth.errors import IsolatedPerson
from envsynth.fusion import SEP, pair_domains, shared_people
from envsynth.ontology import EntityGraph, expand_domains, normalize_primary_key, validate_entity_graph
from envsynth.report import build_report
from envsynth.rollout import asked_slots, is_confirmation_request
from envsynth.stub import StubProvider
from envsynth.tasks import PLACEHOLDER, GroundedTask, fill_template, slot_synonyms
from envsynth.toolgraph import enumerate_trajectories, validate_tool_graph
from envsynth.util import is_snake_label, read_json, read_jsonl


@pytest.fixture(scope="module")
def ws(desk):
    return desk.ws


def test_domain_expansion_is_exact_and_deterministic():
    seeds = ["healthcare_clinic", "travel_booking"]
    a = expand_domains(seeds, 7, 3, StubProvider(1))
    b = expand_domains(seeds, 7, 3, StubProvider(1))
    assert a.labels() == b.labels()
    assert len(a.labels()) == len(set(a.labels())) == 7
    assert a.labels()[:2] == seeds
    assert all(is_snake_label(x) for x in a.labels())


@pytest.mark.parametrize("name, key", [("Patient", "patient_id"), ("ClinicVisit", "clinicvisit_id"), ("HotelRoom", "hotelroom_id")])
def test_primary_key_naming(name, key):
    assert normalize_primary_key(name) == key


def test_entity_graph_is_clean(desk):
    g = EntityGraph.from_node_link(read_json(desk.root / "03_entity_graph" / "graph.json"))
    assert validate_entity_graph(g) == []
    assert set(desk.config.persons) <= set(g.persons())
    for p in g.persons():
        assert g.neighbors(p)
    outlines = sample_outlines(g, g.persons()[0], 3, 2, seed=4)
    assert len({o.peripherals for o in outlines}) == len(outlines)
    assert all(set(o.peripherals) <= set(g.neighbors(o.core)) for o in outlines)


def test_isolated_person_rejected():
    g = EntityGraph(nodes={"Loner": True, "Thing": False})
    with pytest.raises(IsolatedPerson):
        sample_outlines(g, "Loner", 1, 1)


def test_blueprints_validate_and_docs_roundtrip(ws):
    assert ws.servers()
    for server in ws.servers():
        bp = ws.blueprint(server)
        assert validate_blueprint(bp) == []
        docs = standardize_tools(bp)
        assert load_tool_docs(dump_tool_docs(server, docs)) == docs
        assert bp.authorize_tool().name in {d.name for d in docs}


def test_databases_meet_their_constraints(ws):
    for server in ws.servers():
        bp, db = ws.blueprint(server), ws.database(server)
        rules = derive_constraints(bp)
        assert rules
        for r in bp.relationships:
            assert check_constraints(db, r.name, rules, r.foreign_keys()) == []
            for row in db[r.name].rows:
                for fk, target in r.foreign_keys().items():
                    assert db[target].get(row[fk]) is not None


def test_tool_graphs_single_source_dag(ws, desk):
    for server in ws.servers():
        g = ws.graph(server)
        assert validate_tool_graph(g) == []
        assert g.source() == ws.blueprint(server).authorize_tool().name
        assert enumerate_trajectories(g, desk.config.l_min, desk.config.l_max)


def test_fusion_pairs_share_a_person(ws):
    bps = {s: ws.blueprint(s) for s in ws.servers()}
    pairs = pair_domains(bps)
    assert pairs and set(ws.combos()) <= set(pairs)
    for a, b in pairs:
        assert shared_people(bps[a], bps[b])


def test_merged_policy_prefixes_every_tool(ws):
    for a, b in ws.combos():
        merged = ws.merged_policy(a, b)
        for tool in merged.contracts:
            assert tool.startswith(f"{a}{SEP}") or tool.startswith(f"{b}{SEP}")
        fused = ws.fused_database(a, b)
        for r in ws.blueprint(a).relationships:
            assert f"{a}_{r.name}" in fused.tables


def test_tasks_are_fully_grounded(desk):
    tasks = [GroundedTask.from_dict(r["task"]) for r in read_jsonl(desk.root / "17_instantiation" / "tasks.jsonl")]
    assert tasks
    for t in tasks:
        assert not PLACEHOLDER.search(t.grounded_instruction)
        assert set(t.required_slots) <= set(t.hidden_user_knowledge)
        assert all(t.synonyms.get(s) for s in t.required_slots)


def test_fill_template():
    assert fill_template("see <Visit.day> for <Patient.patient_id>", {"Visit.day": "mon"}) == "see mon for <Patient.patient_id>"
    assert fill_template("<A.b>", {"A.b": True}) == "true"


def test_slot_synonyms_and_questions():
    syn = {"ClinicVisit.notes": slot_synonyms("ClinicVisit", "notes"), "Patient.patient_id": slot_synonyms("Patient", "patient_id")}
    assert syn["ClinicVisit.notes"][0] == "clinic visit notes"
    assert "patient id" in syn["Patient.patient_id"]
    assert asked_slots("What is your patient id?", syn) == ["Patient.patient_id"]
    assert asked_slots("Your patient id is fine.", syn) == []
    assert is_confirmation_request("Shall I go ahead and book it?")
    assert not is_confirmation_request("Booked. Anything else?")


def test_report_is_consistent(desk):
    bundle = build_report(desk.root)
    assert bundle.check() == []
    assert bundle.pass_rate["golden"] == 1.0
    text = bundle.render()
    assert re.search(r"golden", text)

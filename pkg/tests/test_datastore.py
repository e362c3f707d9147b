from __future__ import annotations

import pytest
from hypothesis import given, settings, strategies as st

from envsynth.datastore import (
    Database,
    Snapshot,
    Table,
    conforms,
    fuse_databases,
    load_database,
    parse_range,
    restore,
    save_database,
    snapshot,
)
from envsynth.errors import CorruptSnapshot, EntitySchemaConflict, UnsatisfiableRange


def people(rows=()):
    return Table("Person", {"person_id": "string", "age": "integer", "born": "timestamp"}, rows, primary_key="person_id")


@pytest.mark.parametrize(
    "value, kind, ok",
    [
        (None, "integer", True),
        (3, "integer", True),
        (True, "integer", False),
        (3.5, "integer", False),
        (3, "number", True),
        (False, "boolean", True),
        ("2025-01-02T03:04:05", "timestamp", True),
        ("2025-13-02T03:04:05", "timestamp", False),
        (20250102, "timestamp", False),
        ("x", "string", True),
        (1, "string", False),
    ],
)
def test_conforms(value, kind, ok):
    assert conforms(value, kind) is ok


def test_insert_update_delete_roundtrip():
    t = people()
    t.insert({"person_id": "p1", "age": 30})
    assert t.get("p1") == {"person_id": "p1", "age": 30, "born": None}
    t.update("p1", {"age": 31})
    assert t.get("p1")["age"] == 31
    t.delete("p1")
    assert t.get("p1") is None and len(t) == 0


def test_insert_rejects_bad_rows():
    t = people([{"person_id": "p1", "age": 1, "born": None}])
    with pytest.raises(ValueError):
        t.insert({"person_id": "p1"})
    with pytest.raises(TypeError):
        t.insert({"person_id": "p2", "age": "old"})
    with pytest.raises(KeyError):
        t.insert({"person_id": "p3", "height": 2})
    with pytest.raises(ValueError):
        t.update("p1", {"person_id": "p9"})
    assert [r["person_id"] for r in t.rows] == ["p1"]


def test_get_with_unhashable_key_is_none():
    assert people([{"person_id": "p1"}]).get(["p1"]) is None


def test_parse_range():
    assert parse_range("1..5", "integer") == (1, 5)
    assert parse_range("", "integer") is None
    assert parse_range("a..b", "string") is None
    with pytest.raises(UnsatisfiableRange):
        parse_range("9..1", "integer")
    with pytest.raises(UnsatisfiableRange):
        parse_range("x..1", "number")


def test_snapshot_restore_is_exact():
    db = Database({"Person": people([{"person_id": "p1", "age": 4, "born": None}])})
    snap = snapshot(db)
    before = db.content_hash()
    db["Person"].insert({"person_id": "p2"})
    db["Person"].update("p1", {"age": 5})
    restore(db, snap)
    assert db.content_hash() == before
    assert snap.database().content_hash() == before


def test_corrupt_snapshot_detected():
    snap = snapshot(Database({"Person": people()}))
    bad = Snapshot(snap.address, snap.payload.replace(b"Person", b"Persom"))
    with pytest.raises(CorruptSnapshot):
        restore(Database(), bad)


def test_save_load_roundtrip(tmp_path):
    db = Database({"Person": people([{"person_id": "p1", "age": 2, "born": "2024-05-06T07:08:09"}])}, {"k": 1})
    save_database(db, tmp_path / "db")
    assert load_database(tmp_path / "db").content_hash() == db.content_hash()
    # stale tables disappear on re-save
    db.tables.pop("Person")
    db.add(Table("Other", {"o": "string"}, primary_key="o"))
    save_database(db, tmp_path / "db")
    assert set(load_database(tmp_path / "db").tables) == {"Other"}


def test_fuse_unions_entities_and_namespaces_relationships():
    visit = Table("Visit", {"visit_id": "string"}, [{"visit_id": "v1"}], primary_key="visit_id", kind="relationship")
    a = Database({"Person": people([{"person_id": "p1", "age": 1, "born": None}]), "Visit": visit})
    b = Database({"Person": people([{"person_id": "p1", "age": 2, "born": None}, {"person_id": "p2", "age": 3, "born": None}]), "Visit": visit.copy()})
    fused = fuse_databases({"A": a, "B": b}, "A+B")
    assert set(fused.tables) == {"Person", "A_Visit", "B_Visit"}
    assert fused["Person"].get("p1")["age"] == 1
    assert fused["Person"].get("p2") is not None
    assert fused.metadata["collisions"] == [{"table": "Person", "key": "p1", "kept": "A", "dropped": "B"}]


def test_fuse_schema_conflict():
    a = Database({"Person": people()})
    b = Database({"Person": Table("Person", {"person_id": "string"}, primary_key="person_id")})
    with pytest.raises(EntitySchemaConflict):
        fuse_databases({"A": a, "B": b}, "A+B")


ops = st.lists(
    st.tuples(st.sampled_from(["insert", "update", "delete"]), st.sampled_from(["a", "b", "c"]), st.integers(0, 99)),
    max_size=20,
)


@settings(max_examples=60, deadline=None)
@given(ops)
def test_restore_undoes_any_edit_sequence(seq):
    db = Database({"Person": people([{"person_id": "a", "age": 0, "born": None}])})
    snap = snapshot(db)
    t = db["Person"]
    for op, key, n in seq:
        try:
            if op == "insert":
                t.insert({"person_id": key, "age": n})
            elif op == "update":
                t.update(key, {"age": n})
            else:
                t.delete(key)
        except (KeyError, ValueError):
            pass
    assert restore(db, snap).content_hash() == snap.database().content_hash()

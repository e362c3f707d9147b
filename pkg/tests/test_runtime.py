from __future__ import annotations

import io
import json
import threading

import pytest

from envsynth.datastore import Database, Table
from envsynth.policy import parse_policy
from envsynth.runtime import Runtime, Service, pairing_key, serve_ndjson

POLICY = """\
<policy domain="Clinic">
  <tool name="authorize_patient">
    <permissions>
      otherwise => PERMIT
    </permissions>
    <returns>status</returns>
  </tool>
  <tool name="book_visit" confirmation="required">
    <preconditions>
      session.authenticated = true
    </preconditions>
    <input_validation>
      day: pattern "[0-9T:-]+"
    </input_validation>
    <permissions>
      param.fee > 500 => REJECT "too expensive"
      otherwise => PERMIT
    </permissions>
    <effects>
      insert Visit set visit_id = new_id, patient_id = session.authorized_patient_id, day = param.day, fee = param.fee
    </effects>
    <returns>effect</returns>
  </tool>
  <tool name="list_visits">
    <preconditions>
      session.authenticated = true
    </preconditions>
    <permissions>
      otherwise => PERMIT
    </permissions>
    <returns>rows Visit where patient_id = session.authorized_patient_id</returns>
  </tool>
  <tool name="broken">
    <permissions>
      param.nothing = 1 => REJECT "never"
      otherwise => PERMIT
    </permissions>
  </tool>
</policy>
"""

PARAMS = {
    "authorize_patient": {"patient_id": "string"},
    "book_visit": {"day": "string", "fee": "number"},
    "list_visits": {},
}


def runtime(**kw):
    db = Database()
    db.add(Table("Patient", {"patient_id": "string", "name": "string"}, [{"patient_id": "p1", "name": "Ada"}], primary_key="patient_id"))
    db.add(Table("Visit", {"visit_id": "string", "patient_id": "string", "day": "timestamp", "fee": "number"}, primary_key="visit_id", kind="relationship"))
    svc = Service("", "Patient", "patient_id", "authorize_patient", PARAMS)
    return Runtime(db, parse_policy(POLICY), {"": svc}, "2025-06-01T09:00:00", **kw)


BOOK = {"day": "2025-06-02T10:00:00", "fee": 40}


def authed(rt):
    sid = rt.create_session()
    assert rt.authorize(sid, "p1").ok
    return sid


def test_authorization_gate():
    rt = runtime()
    sid = rt.create_session()
    assert rt.invoke(sid, "list_visits").status == "rejected"
    bad = rt.authorize(sid, "nobody")
    assert bad.status == "rejected" and bad.payload == {"status": "Failed"}
    assert rt.authorize(sid, "p1").payload == {"status": "Success"}
    assert rt.invoke(sid, "list_visits").payload == {"rows": []}


def test_preview_then_commit():
    rt = runtime()
    sid = authed(rt)
    before = rt.session(sid).db.content_hash()
    first = rt.invoke(sid, "book_visit", BOOK)
    assert first.status == "needs_confirmation"
    assert first.payload["needs_confirmation"] is True
    assert "insert Visit" in first.payload["action_preview"]
    assert rt.session(sid).db.content_hash() == before
    done = rt.invoke(sid, "book_visit", {**BOOK, "confirm": True})
    assert done.ok and done.meta["previewed"] is True
    assert done.meta["pairing_key"] == pairing_key("book_visit", BOOK)
    (row,) = rt.invoke(sid, "list_visits").payload["rows"]
    assert row["fee"] == 40 and row["patient_id"] == "p1"


def test_commit_without_preview_is_flagged():
    rt = runtime()
    sid = authed(rt)
    assert rt.invoke(sid, "book_visit", {**BOOK, "confirm": True}).meta["previewed"] is False


@pytest.mark.parametrize(
    "args, code",
    [
        ({"day": "2025-06-02T10:00:00"}, "InvalidInput"),
        ({"day": "2025-06-02T10:00:00", "fee": "40"}, "InvalidInput"),
        ({"day": "tomorrow!", "fee": 40}, "InvalidInput"),
        # matches the pattern but is no real timestamp
        ({"day": "2025-99-02T10:00:00", "fee": 40}, "InvalidInput"),
        ({"day": "2025-06-02T10:00:00", "fee": 900}, "PolicyRejected"),
    ],
)
def test_rejections_leave_db_untouched(args, code):
    rt = runtime()
    sid = authed(rt)
    before = rt.session(sid).db.content_hash()
    res = rt.invoke(sid, "book_visit", {**args, "confirm": True})
    assert (res.status, res.meta["code"]) == ("rejected", code)
    assert rt.session(sid).db.content_hash() == before


@pytest.mark.parametrize(
    "tool, args",
    [("no_such_tool", {}), ("book_visit", "not a dict"), ("broken", {}), (None, None)],
)
def test_invoke_never_raises(tool, args):
    rt = runtime()
    res = rt.invoke(authed(rt), tool, args)
    assert res.status in ("rejected", "error")
    assert rt.invoke("missing-session", "list_visits").status == "error"


def test_unbound_reference_is_internal_error():
    rt = runtime()
    res = rt.invoke(authed(rt), "broken", {})
    assert res.status == "error" and res.meta["code"] == "InternalError"


def test_sessions_are_isolated_and_base_untouched():
    rt = runtime()
    a, b = authed(rt), authed(rt)
    base = rt.base.content_hash()
    rt.invoke(a, "book_visit", {**BOOK, "confirm": True})
    assert rt.invoke(b, "list_visits").payload == {"rows": []}
    assert rt.base.content_hash() == base


def test_new_ids_replay_identically():
    ids = []
    for _ in range(2):
        rt = runtime()
        sid = authed(rt)
        rt.invoke(rt.create_session(), "list_visits")
        ids.append([rt.invoke(sid, "book_visit", {**BOOK, "confirm": True}).meta["mutations"][0]["key"] for _ in range(3)])
    assert ids[0] == ids[1] and len(set(ids[0])) == 3


def test_concurrent_sessions():
    rt = runtime()
    sids = [authed(rt) for _ in range(8)]

    def work(sid):
        for _ in range(5):
            rt.invoke(sid, "book_visit", {**BOOK, "confirm": True})

    threads = [threading.Thread(target=work, args=(s,)) for s in sids]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(len(rt.invoke(s, "list_visits").payload["rows"]) == 5 for s in sids)


def test_tick_advances_clock():
    rt = runtime(tick_seconds=60)
    sid = authed(rt)
    rt.invoke(sid, "list_visits")
    assert rt.now(rt.session(sid)) > "2025-06-01T09:00:00"


def test_ndjson_wire():
    rt = runtime()
    lines = [
        json.dumps({"op": "create_session"}),
        "{oops",
        "[1]",
        "",
        json.dumps({"session_id": "session-00001", "tool_name": "authorize_patient", "args": {"patient_id": "p1"}}),
    ]
    out = io.StringIO()
    assert serve_ndjson(rt, io.StringIO("\n".join(lines)), out) == 4
    replies = [json.loads(x) for x in out.getvalue().splitlines()]
    assert [r["status"] for r in replies] == ["ok", "error", "error", "ok"]
    assert replies[1]["meta"]["code"] == "BadRequest"

from __future__ import annotations

import json

import pytest

from envsynth.cli import main, parse_steps
from envsynth.config import PipelineConfig
from envsynth.pipeline import Ledger
from envsynth.toolgraph import Edge, ToolGraph

SMALL = PipelineConfig(max_trajectories_per_domain=2, combos_per_trajectory=1, cross_pairs=2, entity_rows=10, relationship_rows=12)


def error_of(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def finished(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(SMALL.to_dict()))
    out = root / "run"
    for cmd in ("synth", "fuse", "tasks", "rollout"):
        assert main([cmd, "--config", str(cfg), "--out", str(out)]) == 0
    return cfg, out


@pytest.mark.parametrize("text, rng", [("3", (3, 3)), ("1..18", (1, 18)), ("4..9", (4, 9))])
def test_parse_steps(text, rng):
    assert parse_steps(text) == rng


@pytest.mark.parametrize("text", ["0..3", "5..2", "x", "1..19"])
def test_parse_steps_rejects(text):
    with pytest.raises(Exception):
        parse_steps(text)


def test_commands_cover_all_steps(finished):
    _, out = finished
    latest = Ledger(out / "checkpoints.jsonl").latest()
    assert sorted(latest) == list(range(1, 19))
    assert all(r["status"] == "done" for r in latest.values())
    assert json.loads((out / "last_run.json").read_text()) == {"command": "rollout", "steps": [18, 18]}


def test_validate_run(finished, capsys):
    _, out = finished
    assert main(["validate", "--out", str(out)]) == 0
    assert "all hashes match" in capsys.readouterr().out


def test_eval_and_report(finished, capsys):
    _, out = finished
    assert main(["eval", "--out", str(out), "--json"]) == 0
    bundle = json.loads(capsys.readouterr().out)
    assert bundle["pass_rate"]["golden"] == 1.0
    assert bundle["pass_rate"]["drop_write"] == 0.0
    assert main(["report", "--out", str(out)]) == 0
    assert capsys.readouterr().out.strip()


def test_rerun_is_a_noop(finished, capsys):
    cfg, out = finished
    assert main(["tasks", "--config", str(cfg), "--out", str(out)]) == 0
    assert "executed steps none" in capsys.readouterr().out


def test_config_mismatch_exits_2(finished, capsys):
    _, out = finished
    other = out.parent / "other.json"
    other.write_text(json.dumps({"seed": 99}))
    assert main(["synth", "--config", str(other), "--out", str(out)]) == 2
    assert error_of(capsys)["error"] == "ConfigError"


def test_bad_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"l_min": 9}))
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    err = error_of(capsys)
    assert err["error"] == "ConfigError" and "message" in err


def test_resume_without_ledger(tmp_path, capsys):
    assert main(["resume", "--out", str(tmp_path)]) == 1
    assert error_of(capsys)["error"] == "LedgerMissing"


def test_interrupted_command_resumes_its_range(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(SMALL.to_dict()))
    out = tmp_path / "run"
    assert main(["synth", "--config", str(cfg), "--out", str(out), "--stop-after", "4"]) == 0
    assert main(["resume", "--out", str(out)]) == 0
    assert sorted(Ledger(out / "checkpoints.jsonl").latest()) == list(range(1, 11))


def test_validate_graph_file(tmp_path, capsys):
    good = tmp_path / "g.json"
    good.write_text(json.dumps(ToolGraph(["a", "b"], [Edge("a", "b", "state_dependency")]).to_node_link()))
    assert main(["validate", "--graph", str(good)]) == 0
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(ToolGraph(["a", "b"], [Edge("a", "b", "state_dependency"), Edge("b", "a", "state_dependency")]).to_node_link()))
    assert main(["validate", "--graph", str(bad)]) == 1
    err = error_of(capsys)
    assert err["error"] == "GraphInvalid" and "NoSource" in err["details"]["kinds"]
    junk = tmp_path / "junk.json"
    junk.write_text("{}")
    assert main(["validate", "--graph", str(junk)]) == 1

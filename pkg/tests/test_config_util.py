from __future__ import annotations

import json

import pytest
from hypothesis import given, strategies as st

from envsynth.config import PipelineConfig, load_config
from envsynth.errors import ConfigError
from envsynth.util import canonical_json, content_hash, derive_seed, is_snake_label, read_jsonl, rng_for, to_snake, write_jsonl


def test_defaults_roundtrip():
    cfg = PipelineConfig()
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.replace(seed=3).digest != cfg.digest


@pytest.mark.parametrize(
    "bad",
    [
        {"l_min": 4, "l_max": 2},
        {"l_min": 0},
        {"epsilon": 0},
        {"agents": ["golden", "psychic"]},
        {"seed_domains": []},
        {"repair_budget": 0},
        {"not_a_key": 1},
    ],
)
def test_invalid_config(bad):
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict(bad)


def test_load_config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 5, "persons": ["Patient"]}))
    cfg = load_config(p, l_max=4, seed=None)
    assert (cfg.seed, cfg.persons, cfg.l_max) == (5, ("Patient",), 4)
    assert load_config(None) == PipelineConfig()
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text("{broken")
    with pytest.raises(ConfigError):
        load_config(p)


json_values = st.recursive(
    st.none() | st.booleans() | st.integers() | st.text(max_size=8),
    lambda inner: st.lists(inner, max_size=4) | st.dictionaries(st.text(max_size=5), inner, max_size=4),
    max_leaves=12,
)


@given(st.dictionaries(st.text(max_size=5), json_values, max_size=5))
def test_canonical_json_ignores_key_order(d):
    flipped = dict(reversed(list(d.items())))
    assert canonical_json(d) == canonical_json(flipped)
    assert content_hash(d) == content_hash(flipped)
    assert json.loads(canonical_json(d)) == d


def test_seeds_are_content_keyed():
    assert derive_seed("a", 1) == derive_seed("a", 1) != derive_seed("a", 2)
    assert rng_for("x").random() == rng_for("x").random()
    # no separator collisions
    assert derive_seed("ab", "c") != derive_seed("a", "bc")


@pytest.mark.parametrize(
    "raw, snake",
    [("ClinicVisit", "clinic_visit"), ("HTTPServer", "http_server"), ("visit-ID 2", "visit_id_2"), ("9lives", "x_9lives"), ("", "x")],
)
def test_to_snake(raw, snake):
    assert to_snake(raw) == snake


def test_snake_labels():
    assert is_snake_label("travel_booking")
    assert not is_snake_label("Travel")
    assert not is_snake_label("a_b_c_d")


def test_jsonl_roundtrip(tmp_path):
    rows = [{"a": 1}, {"b": [2, 3]}]
    write_jsonl(tmp_path / "x.jsonl", rows)
    assert list(read_jsonl(tmp_path / "x.jsonl")) == rows

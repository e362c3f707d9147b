"""Domain corpus, entity schemas and the person-centric entity graph."""

from __future__ import annotations

import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .errors import EmptyExtraction, FormatViolation, NoPersonEntities, ProviderExhausted
from .ports import RelationOraclePort, SynthesisPort
from .util import Violation, canonical_json, is_snake_label, read_jsonl, to_snake

log = logging.getLogger(__name__)

STRATEGIES = ("horizontal", "diagonal", "temporal", "hierarchical", "role_based")
VALUE_TYPES = ("string", "integer", "number", "boolean", "timestamp", "identifier", "enum")
DIMENSIONS = ("physical", "lifecycle", "state", "geospatial", "other")
MANDATORY_DIMENSIONS = ("physical", "lifecycle", "state", "geospatial")
DENY_LIST = frozenset({"person", "thing", "item"})
RESERVED_NAMES = frozenset({"session"})
FORMAT_RETRIES = 3
MAX_STALLED_BATCHES = 3


@dataclass(frozen=True)
class DomainTopic:
    label: str
    parent_seed: str
    strategy: str

    def to_dict(self) -> dict[str, str]:
        return {"label": self.label, "parent_seed": self.parent_seed, "strategy": self.strategy}


@dataclass
class DomainCorpus:
    topics: list[DomainTopic] = field(default_factory=list)

    def labels(self) -> list[str]:
        return [t.label for t in self.topics]

    def __len__(self) -> int:
        return len(self.topics)

    def to_dict(self) -> dict[str, Any]:
        return {"topics": [t.to_dict() for t in self.topics]}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "DomainCorpus":
        return cls([DomainTopic(**t) for t in data["topics"]])


def _valid_topic(item: Any) -> bool:
    return (
        isinstance(item, dict)
        and isinstance(item.get("label"), str)
        and is_snake_label(item["label"])
        and item.get("strategy") in STRATEGIES
    )


def expand_domains(
    seeds: list[str],
    target_count: int,
    batch_size: int,
    provider: SynthesisPort,
    checkpoint: Path | None = None,
) -> DomainCorpus:
    """Grow ``seeds`` to exactly ``target_count`` unique topics.

    Each batch is generated, format-checked item by item (with up to three
    retries per bad item) and deduplicated before it is stored. With a
    ``checkpoint`` path, stored batches are appended as JSONL and replayed
    on the next call.
    """
    if not seeds:
        raise ValueError("seeds must be non-empty")
    if target_count < len(seeds):
        raise ValueError("target_count must be at least the number of seeds")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    for s in seeds:
        if not is_snake_label(s):
            raise FormatViolation(f"seed {s!r} is not a snake_case label", label=s)

    topics: list[DomainTopic] = []
    seen: set[str] = set()
    for s in seeds:
        if s not in seen:
            topics.append(DomainTopic(s, s, "horizontal"))
            seen.add(s)

    batch_index = 0
    if checkpoint is not None and Path(checkpoint).exists():
        for rec in read_jsonl(checkpoint):
            for t in rec["topics"]:
                if t["label"] not in seen:
                    topics.append(DomainTopic(**t))
                    seen.add(t["label"])
            batch_index = rec["batch_index"] + 1

    stalled = 0
    while len(topics) < target_count:
        want = min(batch_size, target_count - len(topics))
        request = {"seeds": list(seeds), "existing": sorted(seen), "count": want, "batch_index": batch_index}
        items = provider.generate("domains", request) or []
        added: list[DomainTopic] = []
        for pos, item in enumerate(items):
            item = _checked_topic(item, provider, request, pos)
            if item["label"] in seen or len(added) >= want:
                continue
            topic = DomainTopic(item["label"], item.get("parent_seed", ""), item["strategy"])
            added.append(topic)
            seen.add(topic.label)
        topics.extend(added)
        if checkpoint is not None:
            _append_line(Path(checkpoint), {"batch_index": batch_index, "topics": [t.to_dict() for t in added]})
        batch_index += 1
        stalled = stalled + 1 if not added else 0
        if stalled >= MAX_STALLED_BATCHES:
            raise ProviderExhausted(
                f"provider stopped producing new topics at {len(topics)}/{target_count}",
                reached=len(topics),
                target=target_count,
            )
    return DomainCorpus(topics)


def _checked_topic(item: Any, provider: SynthesisPort, request: dict[str, Any], pos: int) -> dict[str, Any]:
    attempt = 0
    while not _valid_topic(item):
        if attempt >= FORMAT_RETRIES:
            raise FormatViolation(f"provider emitted an invalid topic after {FORMAT_RETRIES} retries: {item!r}", item=repr(item))
        attempt += 1
        item = provider.generate("domain_retry", {**request, "position": pos, "attempt": attempt, "rejected": repr(item)})
    return item


_append_lock = threading.Lock()


def _append_line(path: Path, record: dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    line = canonical_json(record) + "\n"
    with _append_lock, open(path, "a", encoding="utf-8") as fh:
        fh.write(line)
        fh.flush()


# --------------------------------------------------------------------------- entities


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    value_type: str
    categories: tuple[str, ...] = ()
    dimension: str = "other"
    range: str = ""

    def __post_init__(self) -> None:
        if self.value_type not in VALUE_TYPES:
            raise ValueError(f"unknown value type {self.value_type!r}")
        if (self.value_type == "enum") != bool(self.categories):
            raise ValueError(f"attribute {self.name}: enum type requires categories and vice versa")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"value_type": self.value_type, "dimension": self.dimension}
        if self.categories:
            out["categories"] = list(self.categories)
        if self.range:
            out["range"] = self.range
        return out

    @classmethod
    def from_dict(cls, name: str, data: dict[str, Any]) -> "AttributeSpec":
        return cls(
            name,
            data["value_type"],
            tuple(data.get("categories") or ()),
            data.get("dimension", "other"),
            data.get("range", ""),
        )


@dataclass(frozen=True)
class EntitySchema:
    name: str
    is_person: bool
    primary_key: str
    attributes: dict[str, AttributeSpec]

    def columns(self) -> dict[str, str]:
        cols = {self.primary_key: "identifier"}
        cols.update({a.name: a.value_type for a in self.attributes.values()})
        return cols

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "is_person": self.is_person,
            "primary_key": self.primary_key,
            "attributes": {k: v.to_dict() for k, v in self.attributes.items()},
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "EntitySchema":
        attrs = {k: AttributeSpec.from_dict(k, v) for k, v in data["attributes"].items()}
        return cls(data["name"], bool(data["is_person"]), data["primary_key"], attrs)


def normalize_primary_key(entity_name: str) -> str:
    """``LabEquipment`` -> ``labequipment_id``; already-normalized input is stable."""
    if not entity_name:
        raise ValueError("entity name must be non-empty")
    base = entity_name
    if base.lower().endswith("_id"):
        base = base[:-3]
    return base.lower() + "_id"


def _sanitize_entity(raw: dict[str, Any]) -> EntitySchema | None:
    name = str(raw.get("name", "")).strip()
    if not name or not name[0].isupper() or not name.isidentifier() or "_" in name:
        log.warning("dropping entity with invalid name %r", name)
        return None
    if name.lower() in RESERVED_NAMES or name.lower() in DENY_LIST:
        log.info("filtered entity %s", name)
        return None
    pk = normalize_primary_key(name)
    attrs: dict[str, AttributeSpec] = {}
    for aname, spec in (raw.get("attributes") or {}).items():
        key = to_snake(aname)
        if key == pk or key in attrs:
            continue
        try:
            attrs[key] = AttributeSpec.from_dict(key, spec)
        except (ValueError, KeyError, TypeError) as exc:
            log.warning("dropping attribute %s.%s: %s", name, aname, exc)
    return EntitySchema(name, bool(raw.get("is_person")), pk, attrs)


def extract_entities(corpus: DomainCorpus, provider: SynthesisPort) -> list[EntitySchema]:
    if not len(corpus):
        raise EmptyExtraction("corpus is empty")
    raw = provider.generate("entities", {"domains": corpus.labels()}) or []
    out: list[EntitySchema] = []
    names: set[str] = set()
    for item in raw:
        schema = _sanitize_entity(item)
        if schema is None or schema.name in names:
            continue
        names.add(schema.name)
        out.append(schema)
    if not out:
        raise EmptyExtraction("no entities survived sanitization")
    return out


# --------------------------------------------------------------------------- entity graph


@dataclass
class EntityGraph:
    nodes: dict[str, bool] = field(default_factory=dict)  # name -> is_person
    edges: set[tuple[str, str, str]] = field(default_factory=set)

    def persons(self) -> list[str]:
        return sorted(n for n, p in self.nodes.items() if p)

    def neighbors(self, person: str) -> list[str]:
        return sorted({v for u, v, _ in self.edges if u == person})

    def context(self, u: str, v: str) -> str:
        for a, b, ctx in sorted(self.edges):
            if a == u and b == v:
                return ctx
        return ""

    def to_node_link(self) -> dict[str, Any]:
        return {
            "directed": True,
            "multigraph": False,
            "graph": {},
            "nodes": [{"id": n, "is_person": self.nodes[n]} for n in sorted(self.nodes)],
            "links": [
                {"source": u, "target": v, "type": "person_relation", "domain_context": c}
                for u, v, c in sorted(self.edges)
            ],
        }

    @classmethod
    def from_node_link(cls, data: dict[str, Any]) -> "EntityGraph":
        nodes = {n["id"]: bool(n.get("is_person", False)) for n in data["nodes"]}
        links = data.get("links", data.get("edges", []))
        edges = {(e["source"], e["target"], e.get("domain_context", "")) for e in links}
        return cls(nodes, edges)


def build_entity_graph(
    entities: list[EntitySchema],
    oracle: RelationOraclePort,
    batch_size: int = 10,
    progress_path: Path | None = None,
    workers: int = 1,
) -> EntityGraph:
    """Ask the oracle, person by person and batch by batch, which targets relate.

    Completed batches recorded in ``progress_path`` are not re-queried.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    nodes = {e.name: e.is_person for e in entities}
    persons = sorted(n for n, p in nodes.items() if p)
    if not persons:
        raise NoPersonEntities("entity set has no person entities")

    done: dict[tuple[str, int], list[dict[str, str]]] = {}
    if progress_path is not None and Path(progress_path).exists():
        for rec in read_jsonl(progress_path):
            done[(rec["person"], rec["batch_index"])] = rec["edges"]

    def run_person(person: str) -> list[tuple[str, str, str]]:
        targets = sorted(n for n in nodes if n != person)
        found: list[tuple[str, str, str]] = []
        for bi in range(0, (len(targets) + batch_size - 1) // batch_size):
            batch = targets[bi * batch_size: (bi + 1) * batch_size]
            if (person, bi) in done:
                answer = done[(person, bi)]
            else:
                answer = _clean_answer(oracle.relate(person, list(batch)), batch, person)
                if progress_path is not None:
                    _append_line(Path(progress_path), {"person": person, "batch_index": bi, "edges": answer})
            found.extend((person, a["target"], a["domain_context"]) for a in answer)
        return found

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_person, persons))
    else:
        results = [run_person(p) for p in persons]
    edges = {e for chunk in results for e in chunk}
    return EntityGraph(nodes, edges)


def _clean_answer(answer: Iterable[dict[str, str]], batch: list[str], person: str) -> list[dict[str, str]]:
    out: dict[str, str] = {}
    for a in answer or []:
        target = a.get("target")
        if target in batch and target != person and target not in out:
            # only the first context per pair survives
            out[target] = str(a.get("domain_context", ""))
    return [{"target": t, "domain_context": c} for t, c in sorted(out.items())]


def validate_entity_graph(graph: EntityGraph) -> list[Violation]:
    out: list[Violation] = []
    for u, v, _ in sorted(graph.edges):
        if u not in graph.nodes or v not in graph.nodes:
            out.append(Violation("UnknownNode", f"{u}->{v}"))
            continue
        if u == v:
            out.append(Violation("SelfEdge", u))
        if not graph.nodes[u]:
            out.append(Violation("NonPersonSource", f"{u}->{v}"))
    return out


def dump_entities(entities: list[EntitySchema]) -> str:
    return json.dumps([e.to_dict() for e in entities], indent=2, sort_keys=True) + "\n"

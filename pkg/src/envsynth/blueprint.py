"""Service blueprints: outline sampling, provider feedback loop, validation, tool schemas."""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from typing import Any

from .errors import FeedbackBudgetExhausted, IsolatedPerson, UnknownValueType
from .ontology import EntityGraph, EntitySchema
from .ports import SynthesisPort
from .util import Violation, is_identifier, rng_for

log = logging.getLogger(__name__)

TYPE_MAP = {"str": "string", "int": "integer", "float": "number", "bool": "boolean"}
JSON_TYPES = frozenset(TYPE_MAP.values())
ROLES = ("authorize", "read", "write")


@dataclass
class BlueprintConfig:
    min_functions: int = 8
    max_relationships: int = 2
    max_rounds: int = 3


@dataclass(frozen=True)
class Outline:
    name: str
    core: str
    peripherals: tuple[str, ...]

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "core": self.core, "peripherals": list(self.peripherals)}


def sample_outlines(
    graph: EntityGraph, person: str, k: int, max_peripherals: int, seed: int = 0
) -> list[Outline]:
    """Pick ``k`` distinct neighbour subsets of ``person`` (sizes 1..max_peripherals)."""
    if k <= 0:
        return []
    neighbors = graph.neighbors(person)
    if person not in graph.nodes or not neighbors:
        raise IsolatedPerson(f"{person} has no neighbours in the entity graph", person=person)
    subsets = [
        combo
        for size in range(1, max(1, max_peripherals) + 1)
        for combo in itertools.combinations(neighbors, size)
    ]
    chosen = rng_for(seed, "outlines", person).sample(subsets, min(k, len(subsets)))
    return [Outline(f"{person}{''.join(c)}Service", person, tuple(c)) for c in chosen]


@dataclass(frozen=True)
class RelAttribute:
    value_type: str
    value_from_entity: str = ""
    range: str = ""

    @property
    def categories(self) -> tuple[str, ...]:
        return tuple(self.range.split("|")) if self.value_type == "enum" and self.range else ()

    def to_dict(self) -> dict[str, str]:
        return {"type": self.value_type, "value_from_entity": self.value_from_entity, "range": self.range}


@dataclass(frozen=True)
class RelationshipSchema:
    name: str
    description: str
    attributes: dict[str, RelAttribute]

    @property
    def primary_key(self) -> str:
        return self.name.lower() + "_id"

    def foreign_keys(self) -> dict[str, str]:
        """Column -> referenced entity."""
        return {
            a: spec.value_from_entity
            for a, spec in self.attributes.items()
            if spec.value_type == "identifier" and spec.value_from_entity
        }

    def columns(self) -> dict[str, str]:
        return {a: spec.value_type for a, spec in self.attributes.items()}

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "description": self.description,
            "attributes": {a: s.to_dict() for a, s in self.attributes.items()},
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RelationshipSchema":
        attrs = {
            a: RelAttribute(s.get("type", ""), s.get("value_from_entity", "") or "", s.get("range", "") or "")
            for a, s in data.get("attributes", {}).items()
        }
        return cls(data["name"], data.get("description", ""), attrs)


@dataclass(frozen=True)
class ToolParam:
    description: str
    value_type: str
    range: str = ""
    source: str = ""  # "Table.column" this parameter is drawn from
    nondeterministic: bool = False


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str
    parameters: dict[str, ToolParam] = field(default_factory=dict)
    mutating: bool = False
    requires_confirmation: bool = False
    role: str = "read"
    returns: str = "status"
    legal_accessor: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "description": self.description,
            "legal_accessor": list(self.legal_accessor),
            "parameters": {
                p: {"description": s.description, "type": s.value_type, "range": s.range}
                for p, s in self.parameters.items()
            },
        }

    def meta(self) -> dict[str, Any]:
        return {
            "mutating": self.mutating,
            "requires_confirmation": self.requires_confirmation,
            "role": self.role,
            "returns": self.returns,
            "sources": {p: s.source for p, s in self.parameters.items() if s.source},
            "nondeterministic": sorted(p for p, s in self.parameters.items() if s.nondeterministic),
        }

    @classmethod
    def from_dicts(cls, data: dict[str, Any], meta: dict[str, Any] | None = None) -> "ToolSpec":
        meta = meta or {}
        sources = meta.get("sources", {})
        nondet = set(meta.get("nondeterministic", ()))
        params = {
            p: ToolParam(s.get("description", ""), s.get("type", ""), s.get("range", "") or "", sources.get(p, ""), p in nondet)
            for p, s in (data.get("parameters") or {}).items()
        }
        return cls(
            name=data["name"],
            description=data.get("description", ""),
            parameters=params,
            mutating=bool(meta.get("mutating", False)),
            requires_confirmation=bool(meta.get("requires_confirmation", False)),
            role=meta.get("role", "read"),
            returns=meta.get("returns", "status"),
            legal_accessor=tuple(data.get("legal_accessor") or ()),
        )


@dataclass
class Blueprint:
    server_name: str
    description: str
    core_entity: str
    peripheral_entities: list[str]
    relationships: list[RelationshipSchema]
    functions: list[ToolSpec]
    entities: dict[str, EntitySchema] = field(default_factory=dict)

    def tool(self, name: str) -> ToolSpec:
        for f in self.functions:
            if f.name == name:
                return f
        raise KeyError(name)

    def authorize_tool(self) -> ToolSpec:
        return next(f for f in self.functions if f.role == "authorize")

    def relationship(self, name: str) -> RelationshipSchema:
        for r in self.relationships:
            if r.name == name:
                return r
        raise KeyError(name)

    def schema(self) -> dict[str, dict[str, str]]:
        """Table -> column -> value type, entities first."""
        out: dict[str, dict[str, str]] = {}
        for name in [self.core_entity, *self.peripheral_entities]:
            if name in self.entities:
                out[name] = self.entities[name].columns()
        for r in self.relationships:
            out[r.name] = r.columns()
        return out

    def primary_keys(self) -> dict[str, str]:
        out = {n: e.primary_key for n, e in self.entities.items()}
        out.update({r.name: r.primary_key for r in self.relationships})
        return out

    def to_dict(self) -> dict[str, Any]:
        """Provider-facing blueprint JSON, nothing else."""
        return {
            "MCP_server_name": self.server_name,
            "description": self.description,
            "core_entity": self.core_entity,
            "peripheral_entities": list(self.peripheral_entities),
            "relationships": [r.to_dict() for r in self.relationships],
            "functions": [f.to_dict() for f in self.functions],
        }

    def meta_dict(self) -> dict[str, Any]:
        return {
            "tools": {f.name: f.meta() for f in self.functions},
            "entities": {n: e.to_dict() for n, e in sorted(self.entities.items())},
        }

    @classmethod
    def from_dicts(cls, data: dict[str, Any], meta: dict[str, Any] | None = None) -> "Blueprint":
        meta = meta or {}
        tool_meta = meta.get("tools", {})
        return cls(
            server_name=data["MCP_server_name"],
            description=data.get("description", ""),
            core_entity=data["core_entity"],
            peripheral_entities=list(data.get("peripheral_entities") or []),
            relationships=[RelationshipSchema.from_dict(r) for r in data.get("relationships") or []],
            functions=[ToolSpec.from_dicts(f, tool_meta.get(f["name"])) for f in data.get("functions") or []],
            entities={n: EntitySchema.from_dict(e) for n, e in meta.get("entities", {}).items()},
        )


def validate_blueprint(bp: Blueprint, config: BlueprintConfig | None = None) -> list[Violation]:
    config = config or BlueprintConfig()
    out: list[Violation] = []
    known = {bp.core_entity, *bp.peripheral_entities}
    rel_names = {r.name for r in bp.relationships}
    for name in sorted(known):
        if bp.entities and name not in bp.entities:
            out.append(Violation("UnknownEntity", name))
    core_pk = bp.core_entity.lower() + "_id"

    pair_counts: dict[tuple[str, ...], int] = {}
    for r in bp.relationships:
        if not is_identifier(r.name):
            out.append(Violation("InvalidIdentifier", r.name))
        if r.primary_key not in r.attributes:
            out.append(Violation("MissingRelationshipKey", r.name))
        fks = r.foreign_keys()
        if fks.get(core_pk) != bp.core_entity:
            out.append(Violation("StarSchemaViolation", f"{r.name} lacks a foreign key to {bp.core_entity}"))
        for attr, spec in r.attributes.items():
            if not is_identifier(attr):
                out.append(Violation("InvalidIdentifier", f"{r.name}.{attr}"))
            if spec.value_type not in ("string", "integer", "number", "boolean", "timestamp", "identifier", "enum"):
                out.append(Violation("UnknownValueType", f"{r.name}.{attr}: {spec.value_type}"))
            if spec.value_type == "enum" and not spec.categories:
                out.append(Violation("UnknownValueType", f"{r.name}.{attr}: enum without categories"))
            src = spec.value_from_entity
            if not src:
                continue
            if src in rel_names or (attr.endswith("_id") and attr != r.primary_key and attr[:-3] in {n.lower() for n in rel_names}):
                out.append(Violation("RelationshipReference", f"{r.name}.{attr} -> {src}"))
                continue
            if src not in known:
                out.append(Violation("UnknownEntity", f"{r.name}.{attr} -> {src}"))
                continue
            if spec.value_type == "identifier" and attr != src.lower() + "_id":
                out.append(Violation("ForeignKeyNaming", f"{r.name}.{attr} should be {src.lower()}_id"))
        pair = tuple(sorted(set(fks.values())))
        pair_counts[pair] = pair_counts.get(pair, 0) + 1
    for pair, n in sorted(pair_counts.items()):
        if n > config.max_relationships:
            out.append(Violation("TooManyRelationships", f"{'/'.join(pair)}: {n}"))

    auth = [f for f in bp.functions if f.role == "authorize"]
    if len(auth) > 1:
        out.append(Violation("DuplicateAuthGate", ", ".join(f.name for f in auth)))
    elif not auth:
        out.append(Violation("MissingAuthGate", bp.server_name))
    for f in auth:
        if f.returns != "status":
            out.append(Violation("AuthReturnsData", f.name))
    if len(bp.functions) < config.min_functions:
        out.append(Violation("TooFewFunctions", f"{len(bp.functions)} < {config.min_functions}"))
    names = [f.name for f in bp.functions]
    for dup in sorted({n for n in names if names.count(n) > 1}):
        out.append(Violation("DuplicateTool", dup))
    for f in bp.functions:
        if not is_identifier(f.name) or f.name != f.name.lower():
            out.append(Violation("InvalidIdentifier", f.name))
        if f.role not in ROLES:
            out.append(Violation("UnknownRole", f"{f.name}: {f.role}"))
        for p, spec in f.parameters.items():
            if not is_identifier(p):
                out.append(Violation("InvalidIdentifier", f"{f.name}.{p}"))
            if spec.value_type not in TYPE_MAP and spec.value_type not in JSON_TYPES:
                out.append(Violation("UnknownValueType", f"{f.name}.{p}: {spec.value_type}"))
    return out


def synthesize_blueprint(
    outline: Outline,
    provider: SynthesisPort,
    entities: dict[str, EntitySchema],
    max_rounds: int = 3,
    config: BlueprintConfig | None = None,
) -> Blueprint:
    """Draft a blueprint, feeding validation violations back until it is clean."""
    config = config or BlueprintConfig()
    needed = {outline.core, *outline.peripherals}
    scoped = {n: entities[n] for n in sorted(needed) if n in entities}
    feedback: list[dict[str, Any]] = []
    violations: list[Violation] = []
    for rnd in range(max_rounds):
        raw = provider.generate(
            "blueprint",
            {
                "outline": outline.to_dict(),
                "entities": {n: e.to_dict() for n, e in scoped.items()},
                "feedback": feedback,
                "round": rnd,
                "min_functions": config.min_functions,
            },
        )
        try:
            bp = Blueprint.from_dicts(raw["blueprint"], raw.get("meta"))
            bp.entities = dict(scoped)
            violations = validate_blueprint(bp, config)
        except (KeyError, TypeError, ValueError) as exc:
            violations = [Violation("Unparseable", str(exc))]
        if not violations:
            return bp
        log.info("blueprint %s round %d: %d violations", outline.name, rnd + 1, len(violations))
        feedback = [v.to_dict() for v in violations]
    raise FeedbackBudgetExhausted(
        f"blueprint {outline.name} still invalid after {max_rounds} rounds",
        violations=[v.to_dict() for v in violations],
    )


@dataclass(frozen=True)
class ToolSchemaDoc:
    name: str
    description: str
    parameters: dict[str, Any]
    required: tuple[str, ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "description": self.description,
            "parameters": self.parameters,
            "required": list(self.required),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ToolSchemaDoc":
        return cls(data["name"], data.get("description", ""), data["parameters"], tuple(data.get("required", ())))


def json_type(value_type: str) -> str:
    if value_type in TYPE_MAP:
        return TYPE_MAP[value_type]
    if value_type in JSON_TYPES:
        return value_type
    raise UnknownValueType(f"cannot map parameter type {value_type!r}", value_type=value_type)


def standardize_tools(bp: Blueprint) -> list[ToolSchemaDoc]:
    """One JSON-Schema document per tool with every parameter required.

    Tools that need confirmation also get a boolean ``confirm`` parameter.
    """
    docs = []
    for f in bp.functions:
        props: dict[str, Any] = {}
        for p, spec in f.parameters.items():
            props[p] = {"type": json_type(spec.value_type), "description": spec.description}
        if f.requires_confirmation:
            props["confirm"] = {
                "type": "boolean",
                "description": "false returns a preview; true executes after the user agrees",
            }
        docs.append(ToolSchemaDoc(f.name, f.description, {"type": "object", "properties": props}, tuple(props)))
    return docs


def dump_tool_docs(server: str, docs: list[ToolSchemaDoc]) -> str:
    return json.dumps({"server": server, "tools": [d.to_dict() for d in docs]}, indent=2, sort_keys=True) + "\n"


def load_tool_docs(text: str) -> list[ToolSchemaDoc]:
    return [ToolSchemaDoc.from_dict(d) for d in json.loads(text)["tools"]]

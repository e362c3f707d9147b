"""Per-tool metadata shared by planning, rollout and evaluation.

A catalog resolves local names (tool ``create_x`` in service ``S``) to the
names a runtime actually exposes (``S__create_x``, table ``S_X``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

from .blueprint import Blueprint, RelationshipSchema, json_type
from .ontology import EntitySchema


@dataclass(frozen=True)
class ParamInfo:
    json_type: str
    table: str = ""  # resolved table the value is drawn from
    column: str = ""
    nondeterministic: bool = False


@dataclass(frozen=True)
class ToolInfo:
    name: str
    local: str
    namespace: str
    description: str
    params: dict[str, ParamInfo]
    role: str = "read"
    mutating: bool = False
    requires_confirmation: bool = False


@dataclass
class Namespace:
    name: str
    core_entity: str
    core_key: str
    auth_tool: str
    table_map: dict[str, str]
    relationships: dict[str, RelationshipSchema]  # resolved name -> schema
    entities: dict[str, EntitySchema]


@dataclass
class Catalog:
    tools: dict[str, ToolInfo] = field(default_factory=dict)
    namespaces: dict[str, Namespace] = field(default_factory=dict)
    sep: str = "__"

    @classmethod
    def single(cls, bp: Blueprint) -> "Catalog":
        cat = cls()
        cat._add(bp, "")
        return cat

    @classmethod
    def fused(cls, blueprints: Mapping[str, Blueprint], sep: str = "__") -> "Catalog":
        cat = cls(sep=sep)
        for ns, bp in blueprints.items():
            cat._add(bp, ns)
        return cat

    def _add(self, bp: Blueprint, ns: str) -> None:
        prefix = f"{ns}{self.sep}" if ns else ""
        tmap = {r.name: f"{ns}_{r.name}" for r in bp.relationships} if ns else {}
        core = bp.entities.get(bp.core_entity)
        core_key = core.primary_key if core else bp.core_entity.lower() + "_id"
        for f in bp.functions:
            params = {}
            for p, spec in f.parameters.items():
                table, _, column = spec.source.partition(".")
                params[p] = ParamInfo(json_type(spec.value_type), tmap.get(table, table), column, spec.nondeterministic)
            self.tools[prefix + f.name] = ToolInfo(
                prefix + f.name, f.name, ns, f.description, params, f.role, f.mutating, f.requires_confirmation
            )
        self.namespaces[ns] = Namespace(
            ns,
            bp.core_entity,
            core_key,
            prefix + bp.authorize_tool().name,
            tmap,
            {tmap.get(r.name, r.name): r for r in bp.relationships},
            dict(bp.entities),
        )

    def namespace_of(self, tool: str) -> Namespace:
        return self.namespaces[self.tools[tool].namespace]

    def is_auth(self, tool: str) -> bool:
        return self.namespace_of(tool).auth_tool == tool

    def resolve(self, tool: str, table: str) -> str:
        return self.namespace_of(tool).table_map.get(table, table)

    def column_types(self) -> dict[str, dict[str, str]]:
        out: dict[str, dict[str, str]] = {}
        for ns in self.namespaces.values():
            for name, e in ns.entities.items():
                out[name] = e.columns()
            for name, r in ns.relationships.items():
                out[name] = r.columns()
        return out

    def primary_key(self, table: str) -> str | None:
        for ns in self.namespaces.values():
            if table in ns.entities:
                return ns.entities[table].primary_key
            if table in ns.relationships:
                return ns.relationships[table].primary_key
        return None

    def relationship(self, table: str) -> RelationshipSchema | None:
        for ns in self.namespaces.values():
            if table in ns.relationships:
                return ns.relationships[table]
        return None

    def entity(self, table: str) -> EntitySchema | None:
        for ns in self.namespaces.values():
            if table in ns.entities:
                return ns.entities[table]
        return None

    def nondeterministic(self, tool: str) -> set[str]:
        return {p for p, info in self.tools[tool].params.items() if info.nondeterministic}

    def to_dict(self) -> dict[str, Any]:
        return {
            "tools": {
                n: {
                    "namespace": t.namespace,
                    "params": {p: [i.json_type, i.table, i.column, i.nondeterministic] for p, i in t.params.items()},
                    "mutating": t.mutating,
                }
                for n, t in sorted(self.tools.items())
            }
        }

"""In-memory tables: synthesis, summaries, constraint-aware sampling, snapshots, fusion."""

from __future__ import annotations

import bisect
import copy
import itertools
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Any, Iterable, Mapping

from .blueprint import Blueprint, RelationshipSchema
from .errors import CorruptSnapshot, EntitySchemaConflict, UnsatisfiableConstraints, UnsatisfiableRange
from .ontology import AttributeSpec, EntitySchema
from .stub import kb
from .util import canonical_json, content_hash, read_json, rng_for, write_text

TS_FORMAT = "%Y-%m-%dT%H:%M:%S"
DEFAULT_TS_RANGE = ("2024-01-01T00:00:00", "2025-12-31T23:59:59")
ORDERED_TYPES = frozenset({"integer", "number", "timestamp"})
CATEGORICAL_TYPES = frozenset({"enum", "boolean"})


def parse_ts(value: str) -> datetime:
    return datetime.strptime(value, TS_FORMAT)


def format_ts(value: datetime) -> str:
    return value.strftime(TS_FORMAT)


def conforms(value: Any, value_type: str) -> bool:
    """Does ``value`` fit the column type? ``None`` (null) fits every type."""
    if value is None:
        return True
    if value_type == "boolean":
        return isinstance(value, bool)
    if value_type == "integer":
        return isinstance(value, int) and not isinstance(value, bool)
    if value_type == "number":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if value_type == "timestamp":
        if not isinstance(value, str):
            return False
        try:
            parse_ts(value)
        except ValueError:
            return False
        return True
    return isinstance(value, str)


class Table:
    """Ordered rows plus a lazily built primary-key index."""

    def __init__(
        self,
        name: str,
        columns: Mapping[str, str],
        rows: Iterable[dict[str, Any]] = (),
        primary_key: str | None = None,
        kind: str = "entity",
        metadata: Mapping[str, Any] | None = None,
    ) -> None:
        self.name = name
        self.columns = dict(columns)
        self.rows = [dict(r) for r in rows]
        self.primary_key = primary_key
        self.kind = kind
        self.metadata = dict(metadata or {})
        self._index: dict[Any, int] | None = None

    def __len__(self) -> int:
        return len(self.rows)

    def _build_index(self) -> dict[Any, int]:
        if self._index is None:
            pk = self.primary_key
            self._index = {} if pk is None else {r.get(pk): i for i, r in enumerate(self.rows)}
        return self._index

    def get(self, key: Any) -> dict[str, Any] | None:
        if self.primary_key is None:
            return None
        try:
            i = self._build_index().get(key)
        except TypeError:  # unhashable probe value
            return None
        return None if i is None else self.rows[i]

    def insert(self, row: Mapping[str, Any]) -> dict[str, Any]:
        full = {c: row.get(c) for c in self.columns}
        unknown = set(row) - set(self.columns)
        if unknown:
            raise KeyError(f"{self.name}: unknown columns {sorted(unknown)}")
        for c, t in self.columns.items():
            if not conforms(full[c], t):
                raise TypeError(f"{self.name}.{c}: {full[c]!r} is not a valid {t}")
        if self.primary_key is not None:
            key = full.get(self.primary_key)
            if key is None or self.get(key) is not None:
                raise ValueError(f"{self.name}: duplicate or missing primary key {key!r}")
            self._build_index()[key] = len(self.rows)
        self.rows.append(full)
        return full

    def update(self, key: Any, changes: Mapping[str, Any]) -> dict[str, Any]:
        row = self.get(key)
        if row is None:
            raise KeyError(f"{self.name}: no row with key {key!r}")
        for c, v in changes.items():
            if c not in self.columns:
                raise KeyError(f"{self.name}: unknown column {c}")
            if not conforms(v, self.columns[c]):
                raise TypeError(f"{self.name}.{c}: {v!r} is not a valid {self.columns[c]}")
            if c == self.primary_key and v != key:
                raise ValueError(f"{self.name}: primary key is immutable")
        row.update(changes)
        return row

    def delete(self, key: Any) -> dict[str, Any]:
        row = self.get(key)
        if row is None:
            raise KeyError(f"{self.name}: no row with key {key!r}")
        self.rows.remove(row)
        self._index = None
        return row

    def copy(self) -> "Table":
        return Table(self.name, self.columns, copy.deepcopy(self.rows), self.primary_key, self.kind, copy.deepcopy(self.metadata))

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "kind": self.kind,
            "primary_key": self.primary_key,
            "columns": dict(self.columns),
            "metadata": self.metadata,
            "rows": self.rows,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Table":
        return cls(data["name"], data["columns"], data.get("rows", ()), data.get("primary_key"), data.get("kind", "entity"), data.get("metadata"))


class Database:
    def __init__(self, tables: Mapping[str, Table] | None = None, metadata: Mapping[str, Any] | None = None) -> None:
        self.tables: dict[str, Table] = dict(tables or {})
        self.metadata: dict[str, Any] = dict(metadata or {})

    def __getitem__(self, name: str) -> Table:
        return self.tables[name]

    def add(self, table: Table) -> Table:
        self.tables[table.name] = table
        return table

    def copy(self) -> "Database":
        return Database({n: t.copy() for n, t in self.tables.items()}, copy.deepcopy(self.metadata))

    def schema(self) -> dict[str, list[str]]:
        return {n: list(t.columns) for n, t in self.tables.items()}

    def to_dict(self) -> dict[str, Any]:
        return {"metadata": self.metadata, "tables": {n: t.to_dict() for n, t in sorted(self.tables.items())}}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Database":
        return cls({n: Table.from_dict(t) for n, t in data["tables"].items()}, data.get("metadata"))

    def content_hash(self) -> str:
        return content_hash(self.to_dict())


# --------------------------------------------------------------------------- value generators


def parse_range(spec: str, value_type: str) -> tuple[Any, Any] | None:
    if not spec or ".." not in spec:
        return None
    lo_s, hi_s = spec.split("..", 1)
    try:
        if value_type == "integer":
            lo, hi = int(lo_s), int(hi_s)
        elif value_type == "number":
            lo, hi = float(lo_s), float(hi_s)
        elif value_type == "timestamp":
            lo, hi = parse_ts(lo_s.strip()), parse_ts(hi_s.strip())
        else:
            return None
    except ValueError as exc:
        raise UnsatisfiableRange(f"unparseable range {spec!r} for {value_type}", range=spec) from exc
    if lo > hi:
        raise UnsatisfiableRange(f"empty range {spec!r}", range=spec)
    return lo, hi


def _random_ts(rng: Any, lo: datetime, hi: datetime) -> datetime:
    span = int((hi - lo).total_seconds())
    # whole quarter hours keep generated schedules readable
    steps = span // 900
    return lo + timedelta(seconds=900 * rng.randint(0, steps)) if steps else lo


def generate_value(rng: Any, attr: AttributeSpec, row: Mapping[str, Any]) -> Any:
    vt = attr.value_type
    rng_spec = parse_range(attr.range, vt)
    if vt == "enum":
        return rng.choice(attr.categories)
    if vt == "boolean":
        return rng.random() < 0.8
    if vt == "integer":
        lo, hi = rng_spec or (0, 1000)
        return rng.randint(lo, hi)
    if vt == "number":
        lo, hi = rng_spec or (0.0, 1000.0)
        return round(rng.uniform(lo, hi), 2)
    if vt == "timestamp":
        lo, hi = rng_spec or tuple(parse_ts(x) for x in DEFAULT_TS_RANGE)
        return format_ts(_random_ts(rng, lo, hi))
    if vt == "identifier":
        return f"x_{rng.getrandbits(40):010x}"
    return _string_value(rng, attr.name, row)


def _string_value(rng: Any, name: str, row: Mapping[str, Any]) -> str:
    if name in ("full_name", "name"):
        return f"{rng.choice(kb.FIRST_NAMES)} {rng.choice(kb.LAST_NAMES)}"
    if name == "email":
        base = str(row.get("full_name") or rng.choice(kb.FIRST_NAMES)).lower().replace(" ", ".")
        return f"{base}{rng.randint(1, 99)}@example.org"
    if name == "city":
        return rng.choice(kb.CITIES)
    if name == "notes":
        return rng.choice(kb.NOTE_PHRASES)
    return f"{rng.choice(kb.WORDS).title()} {rng.choice(kb.WORDS).title()}"


def make_id(rng: Any, table: str) -> str:
    # fused tables are named ``Server_Relationship``; prefix from the relationship
    prefix = "".join(ch for ch in table.split("_")[-1].lower() if ch.isalnum())[:4]
    return f"{prefix}_{rng.getrandbits(40):010x}"


def _unique_id(rng: Any, table: str, taken: set[str]) -> str:
    while True:
        key = make_id(rng, table)
        if key not in taken:
            taken.add(key)
            return key


def generate_entities(bp: Blueprint, seed: int, counts: Mapping[str, int]) -> Database:
    """One table per blueprint entity, values drawn from per-type seeded generators."""
    db = Database()
    for name in [bp.core_entity, *bp.peripheral_entities]:
        schema = bp.entities[name]
        n = counts.get(name, 0)
        if n < 1:
            raise ValueError(f"count for {name} must be at least 1")
        db.add(entity_table(schema, seed, n))
    return db


def entity_table(schema: EntitySchema, seed: int, n: int) -> Table:
    for a in schema.attributes.values():
        parse_range(a.range, a.value_type)  # surface bad ranges before drawing anything
    rng = rng_for(seed, "entity", schema.name)
    taken: set[str] = set()
    table = Table(schema.name, schema.columns(), primary_key=schema.primary_key, kind="entity")
    for _ in range(n):
        row: dict[str, Any] = {schema.primary_key: _unique_id(rng, schema.name, taken)}
        for a in schema.attributes.values():
            row[a.name] = generate_value(rng, a, row)
        table.insert(row)
    return table


# --------------------------------------------------------------------------- constraints


@dataclass(frozen=True)
class ConstraintRule:
    kind: str  # semantic_match | temporal_order
    lhs: tuple[str, str]
    rhs: tuple[str, str]
    relation: str = "="

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "lhs": list(self.lhs), "rhs": list(self.rhs), "relation": self.relation}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ConstraintRule":
        return cls(data["kind"], tuple(data["lhs"]), tuple(data["rhs"]), data.get("relation", "="))


_TIME_PAIRS = (("start_time", "end_time"), ("start_date", "end_date"), ("check_in", "check_out"), ("opened_at", "closed_at"))


def derive_constraints(bp: Blueprint) -> list[ConstraintRule]:
    """Semantic matches from copied entity attributes, temporal order from start/end pairs."""
    out: list[ConstraintRule] = []
    for r in bp.relationships:
        for attr, spec in r.attributes.items():
            src = spec.value_from_entity
            if spec.value_type == "identifier" or not src:
                continue
            ent = bp.entities.get(src)
            if ent is not None and attr in ent.attributes:
                out.append(ConstraintRule("semantic_match", (r.name, attr), (src, attr), "="))
        for a, b in _TIME_PAIRS:
            if r.attributes.get(a) and r.attributes.get(b):
                out.append(ConstraintRule("temporal_order", (r.name, a), (r.name, b), "<"))
    return out


def check_constraints(db: Database, rel: str, constraints: Iterable[ConstraintRule], fks: Mapping[str, str]) -> list[str]:
    """Full-scan check of every constraint on ``rel``; returns one message per failing row."""
    table = db.tables[rel]
    errors = []
    by_entity = {e: c for c, e in fks.items()}
    for c in constraints:
        if c.lhs[0] != rel:
            continue
        for row in table.rows:
            left = row.get(c.lhs[1])
            if c.kind == "temporal_order":
                right = row.get(c.rhs[1])
                ok = left is not None and right is not None and (left < right if c.relation == "<" else left <= right)
            else:
                ent = db.tables[c.rhs[0]]
                target = ent.get(row.get(by_entity.get(c.rhs[0], "")))
                ok = target is not None and target.get(c.rhs[1]) == left
            if not ok:
                errors.append(f"{rel}.{table.primary_key}={row.get(table.primary_key)} violates {c.kind} {c.lhs}->{c.rhs}")
    return errors


class IndexSampler:
    """Uniform draws over valid entity combinations, without rejection.

    ``groups`` maps each participating entity to its candidate rows and
    the shared join columns it must agree on. Rows are bucketed by join key;
    a joint key is drawn with probability proportional to the product of its
    bucket sizes, then one row per entity is drawn uniformly inside its
    bucket. Every valid combination is therefore equally likely.
    """

    def __init__(self, groups: Mapping[str, tuple[list[dict[str, Any]], Mapping[str, str]]]) -> None:
        self.entities = list(groups)
        self.buckets: dict[str, dict[tuple, list[dict[str, Any]]]] = {}
        self.join_cols: dict[str, list[tuple[str, str]]] = {}
        for ent, (rows, cols) in groups.items():
            pairs = sorted(cols.items())  # shared slot -> entity column
            self.join_cols[ent] = pairs
            b: dict[tuple, list[dict[str, Any]]] = {}
            for r in rows:
                b.setdefault(tuple(r.get(c) for _, c in pairs), []).append(r)
            self.buckets[ent] = b
        self.keys: list[dict[str, tuple]] = []
        weights: list[int] = []
        for combo in itertools.product(*(sorted(self.buckets[e], key=repr) for e in self.entities)):
            slots: dict[str, Any] = {}
            ok = True
            for ent, key in zip(self.entities, combo):
                for (slot, _), v in zip(self.join_cols[ent], key):
                    if slot in slots and slots[slot] != v:
                        ok = False
                    slots.setdefault(slot, v)
            if ok:
                self.keys.append(dict(zip(self.entities, combo)))
                weights.append(math.prod(len(self.buckets[e][k]) for e, k in zip(self.entities, combo)))
        self.cumulative = list(itertools.accumulate(weights))

    @property
    def empty(self) -> bool:
        return not self.keys

    def draw(self, rng: Any) -> dict[str, dict[str, Any]]:
        x = rng.randrange(self.cumulative[-1])
        joint = self.keys[bisect.bisect_right(self.cumulative, x)]
        return {e: rng.choice(self.buckets[e][k]) for e, k in joint.items()}


def populate_relationships(
    db: Database,
    bp: Blueprint,
    constraints: list[ConstraintRule],
    counts: Mapping[str, int],
    seed: int,
) -> Database:
    """Add one table per relationship whose rows satisfy every constraint by construction."""
    out = db.copy()
    for r in bp.relationships:
        out.add(_relationship_table(out, r, [c for c in constraints if c.lhs[0] == r.name], counts.get(r.name, 0), seed))
    return out


def _relationship_table(db: Database, r: RelationshipSchema, constraints: list[ConstraintRule], n: int, seed: int) -> Table:
    fks = r.foreign_keys()
    groups: dict[str, tuple[list[dict[str, Any]], dict[str, str]]] = {}
    for col, ent in fks.items():
        if ent not in db.tables or not db.tables[ent].rows:
            raise UnsatisfiableConstraints(f"{r.name}: entity table {ent} is empty", relationship=r.name, entity=ent)
        groups[ent] = (db.tables[ent].rows, {})
    matched: dict[str, str] = {}
    for c in constraints:
        if c.kind == "semantic_match" and c.rhs[0] in groups:
            groups[c.rhs[0]][1][c.lhs[1]] = c.rhs[1]
            matched[c.lhs[1]] = c.rhs[0]
    sampler = IndexSampler(groups)
    if sampler.empty:
        keys = sorted({slot for _, cols in groups.values() for slot in cols})
        raise UnsatisfiableConstraints(f"{r.name}: no entity combination agrees on {', '.join(keys)}", relationship=r.name, join_key=keys)
    order = {c.lhs[1]: c.rhs[1] for c in constraints if c.kind == "temporal_order"}
    later = set(order.values())

    rng = rng_for(seed, "relationship", r.name)
    table = Table(r.name, r.columns(), primary_key=r.primary_key, kind="relationship")
    taken: set[str] = set()
    for _ in range(n):
        picks = sampler.draw(rng)
        row: dict[str, Any] = {r.primary_key: _unique_id(rng, r.name, taken)}
        for col, ent in fks.items():
            row[col] = picks[ent][db.tables[ent].primary_key]
        for attr, spec in r.attributes.items():
            if attr in row or attr in later:
                continue
            if attr in matched:
                row[attr] = picks[matched[attr]][attr]
                continue
            aspec = AttributeSpec(attr, spec.value_type, spec.categories, "other", spec.range)
            if attr in order:
                lo, hi = parse_range(spec.range, "timestamp") or tuple(parse_ts(x) for x in DEFAULT_TS_RANGE)
                hi = max(lo, hi - timedelta(hours=4))
                start = _random_ts(rng, lo, hi)
                row[attr] = format_ts(start)
                row[order[attr]] = format_ts(start + timedelta(minutes=30 * rng.randint(1, 8)))
                continue
            row[attr] = generate_value(rng, aspec, row)
        table.insert(row)
    return table


# --------------------------------------------------------------------------- summaries


@dataclass
class ColumnSummary:
    value_type: str
    min: Any = None
    max: Any = None
    categories: dict[Any, int] = field(default_factory=dict)
    null_rate: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        cats = [[k, v] for k, v in sorted(self.categories.items(), key=lambda kv: repr(kv[0]))]
        return {"value_type": self.value_type, "min": self.min, "max": self.max, "categories": cats, "null_rate": self.null_rate}


@dataclass
class DatabaseSummary:
    tables: dict[str, dict[str, ColumnSummary]]

    def schema(self) -> dict[str, list[str]]:
        return {t: list(cols) for t, cols in self.tables.items()}

    def column(self, table: str, col: str) -> ColumnSummary:
        return self.tables[table][col]

    def to_dict(self) -> dict[str, Any]:
        return {t: {c: s.to_dict() for c, s in cols.items()} for t, cols in sorted(self.tables.items())}


def summarize(db: Database) -> DatabaseSummary:
    out: dict[str, dict[str, ColumnSummary]] = {}
    for name, table in db.tables.items():
        cols: dict[str, ColumnSummary] = {}
        for col, vt in table.columns.items():
            values = [r.get(col) for r in table.rows]
            present = [v for v in values if v is not None]
            s = ColumnSummary(vt, null_rate=(len(values) - len(present)) / len(values) if values else 0.0)
            if vt in ORDERED_TYPES and present:
                s.min, s.max = min(present), max(present)
            if vt in CATEGORICAL_TYPES:
                for v in present:
                    s.categories[v] = s.categories.get(v, 0) + 1
            cols[col] = s
        out[name] = cols
    return DatabaseSummary(out)


# --------------------------------------------------------------------------- snapshots


@dataclass(frozen=True)
class Snapshot:
    address: str
    payload: bytes

    @classmethod
    def of(cls, db: Database) -> "Snapshot":
        data = canonical_json(db.to_dict()).encode("utf-8")
        return cls(content_hash(data), data)

    def database(self) -> Database:
        return restore(Database(), self)


def snapshot(db: Database) -> Snapshot:
    return Snapshot.of(db)


def restore(db: Database, snap: Snapshot) -> Database:
    """Reset ``db`` in place to exactly the snapshot state and return it."""
    if content_hash(snap.payload) != snap.address:
        raise CorruptSnapshot(f"snapshot {snap.address[:12]} does not match its content", address=snap.address)
    try:
        fresh = Database.from_dict(json.loads(snap.payload.decode("utf-8")))
    except (ValueError, KeyError) as exc:
        raise CorruptSnapshot(f"snapshot {snap.address[:12]} is unreadable: {exc}") from exc
    db.tables = fresh.tables
    db.metadata = fresh.metadata
    return db


# --------------------------------------------------------------------------- fusion


def fuse_databases(dbs: Mapping[str, Database], combo_name: str) -> Database:
    """Union entity tables by primary key and namespace every relationship as ``server_R``."""
    if len(dbs) < 2:
        raise ValueError("fusion needs at least two databases")
    fused = Database(metadata={"combo": combo_name, "sources": list(dbs), "collisions": []})
    for server, db in dbs.items():
        for name, t in db.tables.items():
            if t.kind == "relationship":
                new = t.copy()
                new.name = f"{server}_{name}"
                new.metadata.update({"source": server, "original": name})
                fused.add(new)
                continue
            existing = fused.tables.get(name)
            if existing is None:
                new = t.copy()
                new.metadata["sources"] = [server]
                fused.add(new)
                continue
            if existing.columns != t.columns or existing.primary_key != t.primary_key:
                raise EntitySchemaConflict(f"entity {name} differs between sources", entity=name, server=server)
            existing.metadata["sources"].append(server)
            for row in t.rows:
                have = existing.get(row.get(t.primary_key))
                if have is None:
                    existing.insert(copy.deepcopy(row))
                elif have != row:
                    fused.metadata["collisions"].append({"table": name, "key": row.get(t.primary_key), "kept": existing.metadata["sources"][0], "dropped": server})
    return fused


# --------------------------------------------------------------------------- files


def save_database(db: Database, directory: Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for stale in directory.glob("*.json"):
        if stale.stem not in db.tables and stale.name != "_database.json":
            stale.unlink()
    for name, t in db.tables.items():
        write_text(directory / f"{name}.json", json.dumps(t.to_dict(), indent=1, sort_keys=True, ensure_ascii=False) + "\n")
    write_text(directory / "_database.json", canonical_json({"metadata": db.metadata, "tables": sorted(db.tables)}) + "\n")


def load_database(directory: Path) -> Database:
    directory = Path(directory)
    index = read_json(directory / "_database.json")
    return Database({n: Table.from_dict(read_json(directory / f"{n}.json")) for n in index["tables"]}, index["metadata"])

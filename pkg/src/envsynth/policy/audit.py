"""Reference and timeline audit for policy documents, with line-level patches."""

from __future__ import annotations

import difflib
import re
from dataclasses import dataclass, replace
from typing import Any, Iterable, Mapping

from .document import Mutation, PermissionRule, PolicyDoc, ReturnSpec, SourceItem
from .dsl import RefIssue, check_references

EFFECT_EXTRAS = ("new_id",)


@dataclass(frozen=True)
class SearchReplace:
    """Replace ``search`` with ``replace``.

    In ``line`` mode ``search`` must equal a whole line and an empty
    ``replace`` deletes it. ``text`` mode is a plain substring replacement.
    """

    search: str
    replace: str
    mode: str = "line"

    def to_dict(self) -> dict[str, str]:
        return {"search": self.search, "replace": self.replace, "mode": self.mode}


@dataclass(frozen=True)
class Finding:
    violation: str  # FabricatedTable | FabricatedAttribute | TimelineViolation
    detail: str
    line: int
    tool: str | None
    patch: SearchReplace

    def to_dict(self) -> dict[str, Any]:
        return {
            "violation": self.violation,
            "detail": self.detail,
            "line": self.line,
            "tool": self.tool,
            "patch": self.patch.to_dict(),
        }


def apply_patches(text: str, patches: Iterable[SearchReplace]) -> str:
    for p in patches:
        if p.mode == "text":
            text = text.replace(p.search, p.replace)
            continue
        out = []
        for line in text.split("\n"):
            if line == p.search:
                if p.replace:
                    out.append(p.replace)
            else:
                out.append(line)
        text = "\n".join(out)
    return text


def schema_of(summary: Any) -> dict[str, list[str]]:
    """Accept a DatabaseSummary, a Database or a plain ``{table: columns}`` map."""
    if hasattr(summary, "schema"):
        return {t: list(c) for t, c in summary.schema().items()}
    return {t: list(c) for t, c in summary.items()}


def _issues_for(item: SourceItem, schema: Mapping[str, list[str]], tmap: Mapping[str, str]) -> list[RefIssue]:
    check = lambda n, extra=(): check_references(n, schema, extra=extra, table_map=tmap)  # noqa: E731
    p = item.payload
    issues: list[RefIssue] = []
    if item.section in ("global_rules", "preconditions"):
        issues += check(p)
    elif item.section == "bridge_rules":
        issues += check(p.predicate)
    elif item.section == "permissions" and isinstance(p, PermissionRule):
        if p.condition is not None:
            issues += check(p.condition)
    elif item.section == "effects" and isinstance(p, Mutation):
        cols = _table_cols(p.table, schema, tmap)
        if cols is None:
            issues.append(RefIssue("table", p.table))
        else:
            for c, _ in p.assignments:
                if c not in cols:
                    issues.append(RefIssue("column", f"{p.table}.{c}", c))
        if p.key is not None:
            issues += check(p.key, EFFECT_EXTRAS)
        for _, v in p.assignments:
            issues += check(v, EFFECT_EXTRAS)
    elif item.section == "returns" and isinstance(p, ReturnSpec):
        if p.table is not None:
            if _table_cols(p.table, schema, tmap) is None:
                issues.append(RefIssue("table", p.table))
            elif p.where is not None:
                from .dsl import Exists

                issues += check(Exists(p.table, p.where))
        if p.key is not None:
            issues += check(p.key)
    return [i for i in issues if i.kind in ("table", "column", "wallclock")]


def _table_cols(name: str, schema: Mapping[str, list[str]], tmap: Mapping[str, str]) -> list[str] | None:
    return schema.get(tmap.get(name, name))


def _label(issue: RefIssue) -> str:
    return {"table": "FabricatedTable", "column": "FabricatedAttribute", "wallclock": "TimelineViolation"}[issue.kind]


def _sub_word(text: str, old: str, new: str) -> str:
    return re.sub(rf"(?<![A-Za-z0-9_\"]){re.escape(old)}(?![A-Za-z0-9_\"])", new, text)


def _drop_assignments(item: SourceItem, bad: set[str]) -> str:
    m: Mutation = item.payload
    kept = tuple((c, v) for c, v in m.assignments if c not in bad)
    if m.kind != "delete" and not kept:
        return ""
    indent = item.raw[: len(item.raw) - len(item.raw.lstrip())]
    return indent + replace(m, assignments=kept).source()


def _fix_line(
    item: SourceItem, issues: list[RefIssue], schema: Mapping[str, list[str]], tmap: Mapping[str, str]
) -> str:
    line = item.raw
    drop_cols: set[str] = set()
    for issue in issues:
        if issue.kind == "wallclock":
            line = _sub_word(line, issue.name, "now")
        elif issue.kind == "table":
            guess = difflib.get_close_matches(issue.name, sorted(schema), n=1, cutoff=0.8)
            if not guess:
                return ""
            line = _sub_word(line, issue.name, guess[0])
        else:
            table, col = issue.name.split(".", 1)
            cols = _table_cols(table, schema, tmap) or []
            guess = difflib.get_close_matches(col, sorted(cols), n=1, cutoff=0.8)
            if guess:
                line = _sub_word(line, col, guess[0])
            elif item.section == "effects" and any(c == col for c, _ in item.payload.assignments):
                drop_cols.add(col)
            else:
                return ""
    if drop_cols:
        return _drop_assignments(replace(item, raw=line, payload=_reparse(item, line)), drop_cols)
    return line


def _reparse(item: SourceItem, line: str) -> Any:
    from .document import _parse_line

    stripped = line.strip()
    col = len(line) - len(line.lstrip()) + 1
    return _parse_line(item.section, stripped, item.line, col)


def audit_policy(
    doc: PolicyDoc,
    summary: Any,
    table_maps: Mapping[str, Mapping[str, str]] | None = None,
) -> list[Finding]:
    """Flag fabricated tables/attributes and wall-clock references.

    ``table_maps`` maps a contract's ``source`` namespace to its local→fused
    table names, for merged policies.
    """
    schema = schema_of(summary)
    maps = table_maps or {}
    findings: list[Finding] = []
    for item in doc.items:
        tmap: Mapping[str, str] = {}
        if item.tool is not None and item.tool in doc.contracts:
            tmap = maps.get(doc.contracts[item.tool].source, {})
        issues = _issues_for(item, schema, tmap)
        if not issues:
            continue
        fixed = _fix_line(item, issues, schema, tmap)
        if fixed:
            # a rename that still leaves a problem on the line is not a fix
            try:
                again = _issues_for(replace(item, raw=fixed, payload=_reparse(item, fixed)), schema, tmap)
            except Exception:
                again = [RefIssue("unparseable", fixed)]
            if again:
                fixed = ""
        patch = SearchReplace(item.raw, fixed)
        for issue in issues:
            findings.append(Finding(_label(issue), issue.name, item.line, item.tool, patch))
    return findings


def patches_of(findings: Iterable[Finding]) -> list[SearchReplace]:
    seen: dict[tuple[str, str], SearchReplace] = {}
    for f in findings:
        seen.setdefault((f.patch.search, f.patch.replace), f.patch)
    return list(seen.values())


def repair_policy_text(text: str, summary: Any, table_maps: Mapping[str, Mapping[str, str]] | None = None) -> tuple[str, list[Finding]]:
    """Audit, apply every patch, and return the patched text with the findings."""
    from .document import parse_policy

    doc = parse_policy(text)
    findings = audit_policy(doc, summary, table_maps)
    if not findings:
        return text, []
    return apply_patches(text, patches_of(findings)), findings


__all__ = [
    "Finding",
    "SearchReplace",
    "apply_patches",
    "audit_policy",
    "patches_of",
    "repair_policy_text",
    "schema_of",
]

"""Delimited policy documents: parsing into contracts and canonical serialization.

A document looks like::

    <policy domain="ClinicBooking">
      <global_rules>
        now >= "2020-01-01T00:00:00"
      </global_rules>
      <tool name="cancel_appointment" confirmation="required">
        <preconditions>
          session.authenticated = true
        </preconditions>
        <input_validation>
          appointment_id: pattern "[a-z_]+_[0-9]{4}"
        </input_validation>
        <permissions>
          lookup(Appointment, param.appointment_id).status = "completed" => REJECT "already completed"
          otherwise => PERMIT
        </permissions>
        <effects>
          update Appointment key param.appointment_id set status = "cancelled"
        </effects>
        <returns>
          effect
        </returns>
      </tool>
    </policy>

Tags must start their own line. ``<description>`` may be written inline.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any, Mapping

from ..errors import DuplicateToolBlock, MalformedDelimiter, PolicyParseError, UnknownPredicateSyntax
from .dsl import Node, Token, _Parser, parse_predicate, to_source, tokenize

DEFAULT_REJECT_REASON = "not permitted"

_TAG_RE = re.compile(r"<(/?)([A-Za-z_][A-Za-z0-9_]*)((?:\s+[A-Za-z_][A-Za-z0-9_-]*=\"[^\"]*\")*)\s*>")
_ATTR_RE = re.compile(r"([A-Za-z_][A-Za-z0-9_-]*)=\"([^\"]*)\"")
_VALIDATION_RE = re.compile(r"([A-Za-z_][A-Za-z0-9_]*)\s*:\s*(pattern|range|enum)\s+(.*)$")
_BRIDGE_RE = re.compile(r"([A-Za-z_][A-Za-z0-9_]*)\s*:\s*(.*)$")

_CHILDREN = {
    None: {"policy"},
    "policy": {"description", "global_rules", "bridge_rules", "tool"},
    "tool": {"description", "preconditions", "input_validation", "permissions", "effects", "returns"},
}
_LEAVES = {"description", "global_rules", "bridge_rules", "preconditions", "input_validation", "permissions", "effects", "returns"}


@dataclass(frozen=True)
class ValidationRule:
    kind: str  # pattern | range | enum
    value: Any

    def check(self, v: Any) -> bool:
        if self.kind == "pattern":
            return isinstance(v, str) and re.fullmatch(self.value, v) is not None
        if self.kind == "range":
            lo, hi = self.value
            same = (isinstance(v, str) and isinstance(lo, str)) or (
                isinstance(v, (int, float)) and not isinstance(v, bool) and isinstance(lo, (int, float))
            )
            return bool(same) and lo <= v <= hi
        if self.kind == "enum":
            return any(type(v) is type(c) and v == c for c in self.value)
        return False

    def source(self) -> str:
        if self.kind == "pattern":
            return "pattern " + json.dumps(self.value, ensure_ascii=False)
        if self.kind == "range":
            lo, hi = self.value
            return f"range {json.dumps(lo, ensure_ascii=False)}..{json.dumps(hi, ensure_ascii=False)}"
        return "enum " + json.dumps(list(self.value), ensure_ascii=False)


@dataclass(frozen=True)
class PermissionRule:
    condition: Node | None  # None is the catch-all ``otherwise``
    decision: str  # PERMIT | REJECT
    reason: str = ""

    def source(self) -> str:
        cond = "otherwise" if self.condition is None else to_source(self.condition)
        if self.decision == "PERMIT":
            return f"{cond} => PERMIT"
        return f"{cond} => REJECT {json.dumps(self.reason, ensure_ascii=False)}"


@dataclass(frozen=True)
class Mutation:
    kind: str  # insert | update | delete
    table: str
    key: Node | None = None
    assignments: tuple[tuple[str, Node], ...] = ()

    def source(self) -> str:
        out = [self.kind, self.table]
        if self.key is not None:
            out += ["key", _term_source(self.key)]
        if self.assignments:
            out += ["set", ", ".join(f"{c} = {_term_source(v)}" for c, v in self.assignments)]
        return " ".join(out)


@dataclass(frozen=True)
class ReturnSpec:
    kind: str = "status"  # status | none | effect | row | rows
    table: str | None = None
    key: Node | None = None
    where: Node | None = None

    def source(self) -> str:
        if self.kind == "row":
            return f"row {self.table} key {_term_source(self.key)}"
        if self.kind == "rows":
            if self.where is None:
                return f"rows {self.table}"
            return f"rows {self.table} where {to_source(self.where)}"
        return self.kind


@dataclass(frozen=True)
class BridgeRule:
    tool: str
    predicate: Node

    def source(self) -> str:
        return f"{self.tool}: {to_source(self.predicate)}"


@dataclass(frozen=True)
class ToolContract:
    tool: str
    description: str = ""
    preconditions: tuple[Node, ...] = ()
    input_validation: Mapping[str, tuple[ValidationRule, ...]] = field(default_factory=dict)
    permission_rules: tuple[PermissionRule, ...] = (PermissionRule(None, "REJECT", DEFAULT_REJECT_REASON),)
    side_effects: tuple[Mutation, ...] = ()
    returns: ReturnSpec = ReturnSpec()
    requires_confirmation: bool = False
    source: str = ""
    block_text: str = field(default="", compare=False)

    @property
    def mutating(self) -> bool:
        return bool(self.side_effects)

    def tables_written(self) -> set[str]:
        return {m.table for m in self.side_effects}


@dataclass(frozen=True)
class SourceItem:
    """One parsed line, kept so the auditor can emit line-level patches."""

    line: int
    raw: str
    section: str
    tool: str | None
    payload: Any


@dataclass(frozen=True)
class PolicyDoc:
    domain: str
    description: str = ""
    global_rules: tuple[Node, ...] = ()
    contracts: Mapping[str, ToolContract] = field(default_factory=dict)
    bridge_rules: tuple[BridgeRule, ...] = ()
    source_text: str = field(default="", compare=False)
    items: tuple[SourceItem, ...] = field(default=(), compare=False, repr=False)

    def contract(self, tool: str) -> ToolContract:
        return self.contracts[tool]

    def bridge_for(self, tool: str) -> list[Node]:
        return [b.predicate for b in self.bridge_rules if b.tool == tool]


def _term_source(node: Node) -> str:
    from .dsl import And, Compare, Not, Or

    text = to_source(node)
    return f"({text})" if isinstance(node, (And, Or, Not, Compare)) else text


# --------------------------------------------------------------------------- parsing


class _Builder:
    def __init__(self, name: str, attrs: dict[str, str], line: int) -> None:
        self.name = name
        self.attrs = attrs
        self.line = line
        self.sections: dict[str, Any] = {}


def parse_policy(text: str | bytes) -> PolicyDoc:
    """Parse a delimited policy document. Errors carry line and column."""
    if isinstance(text, (bytes, bytearray)):
        data = bytes(text)
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            line = data[: exc.start].count(b"\n") + 1
            col = exc.start - (data.rfind(b"\n", 0, exc.start) + 1) + 1
            raise PolicyParseError("invalid UTF-8", line, col) from None
    if text.startswith("﻿"):
        text = text[1:]
    if not text.strip():
        raise MalformedDelimiter("empty policy document", 1, 1)
    if "\x00" in text:
        idx = text.index("\x00")
        raise PolicyParseError("NUL byte in document", text.count("\n", 0, idx) + 1, idx - text.rfind("\n", 0, idx))

    lines = text.split("\n")
    stack: list[tuple[str, int, int, dict[str, str], list[tuple[int, int, str]]]] = []
    policy: _Builder | None = None
    tool: _Builder | None = None
    tools: dict[str, ToolContract] = {}
    items: list[SourceItem] = []
    done = False

    for idx, raw in enumerate(lines):
        lineno = idx + 1
        stripped = raw.strip()
        indent = len(raw) - len(raw.lstrip())
        col = indent + 1
        parent = stack[-1][0] if stack else None
        if stripped.startswith("<") and len(stripped) > 1 and (stripped[1] == "/" or stripped[1].isalpha() or stripped[1] == "_"):
            m = _TAG_RE.match(stripped)
            if m is None:
                raise MalformedDelimiter("malformed tag", lineno, col)
            closing, name, attr_text = m.group(1) == "/", m.group(2), m.group(3)
            rest = stripped[m.end():]
            if closing:
                if rest.strip():
                    raise MalformedDelimiter("text after closing tag", lineno, col + m.end())
                if attr_text.strip():
                    raise MalformedDelimiter("attributes on closing tag", lineno, col)
                if not stack or stack[-1][0] != name:
                    expected = stack[-1][0] if stack else "nothing"
                    raise MalformedDelimiter(f"closing </{name}> does not match open <{expected}>", lineno, col)
                tname, tline, tcol, tattrs, body = stack.pop()
                if tname in _LEAVES:
                    target = tool if tool is not None else policy
                    _close_leaf(tname, body, target, tool.attrs["name"] if tool is not None else None, items, tline, lines)
                elif tname == "tool":
                    assert tool is not None
                    block = "\n".join(lines[tline: idx])
                    contract = _build_contract(tool, block)
                    tools[contract.tool] = contract
                    tool = None
                elif tname == "policy":
                    done = True
                continue
            if done:
                raise MalformedDelimiter("content after </policy>", lineno, col)
            if name not in _CHILDREN.get(parent, set()):
                where = f"inside <{parent}>" if parent else "at top level"
                raise MalformedDelimiter(f"unexpected <{name}> {where}", lineno, col)
            attrs = dict(_ATTR_RE.findall(attr_text))
            if rest:
                close = f"</{name}>"
                if name not in _LEAVES or not rest.endswith(close):
                    raise MalformedDelimiter(f"unclosed <{name}> on single line", lineno, col)
                inner = rest[: -len(close)]
                if "<" in inner and _TAG_RE.search(inner):
                    raise MalformedDelimiter("nested tag on single line", lineno, col)
                target = tool if tool is not None else policy
                body = [(lineno, col + m.end(), inner)] if inner.strip() else []
                _close_leaf(name, body, target, tool.attrs["name"] if tool is not None else None, items, lineno, lines)
                continue
            if name == "policy":
                policy = _Builder("policy", attrs, lineno)
            elif name == "tool":
                tname = attrs.get("name", "")
                if not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", tname):
                    raise MalformedDelimiter("tool block needs a valid name attribute", lineno, col)
                if tname in tools:
                    raise DuplicateToolBlock(f"duplicate tool block {tname!r}", lineno, col)
                conf = attrs.get("confirmation", "none")
                if conf not in ("required", "none"):
                    raise MalformedDelimiter(f"bad confirmation attribute {conf!r}", lineno, col)
                tool = _Builder("tool", attrs, lineno)
            elif name in _LEAVES:
                target = tool if tool is not None else policy
                if target is not None and name in target.sections:
                    raise MalformedDelimiter(f"duplicate <{name}> section", lineno, col)
            stack.append((name, lineno, col, attrs, []))
            continue
        if not stripped or stripped.startswith("#"):
            continue
        if parent in _LEAVES:
            stack[-1][4].append((lineno, col, stripped))
            continue
        raise MalformedDelimiter("unexpected text outside a section", lineno, col)

    if stack:
        name, line, col, _, _ = stack[-1]
        raise MalformedDelimiter(f"unclosed <{name}>", line, col)
    if policy is None:
        raise MalformedDelimiter("missing <policy> root", 1, 1)
    sections = policy.sections
    return PolicyDoc(
        domain=policy.attrs.get("domain", ""),
        description=sections.get("description", ""),
        global_rules=tuple(sections.get("global_rules", ())),
        contracts=tools,
        bridge_rules=tuple(sections.get("bridge_rules", ())),
        source_text=text,
        items=tuple(items),
    )


def _close_leaf(
    name: str,
    body: list[tuple[int, int, str]],
    target: _Builder | None,
    tool_name: str | None,
    items: list[SourceItem],
    open_line: int,
    all_lines: list[str],
) -> None:
    if target is None:
        raise MalformedDelimiter(f"<{name}> outside <policy>", open_line, 1)
    if name in target.sections:
        raise MalformedDelimiter(f"duplicate <{name}> section", open_line, 1)
    if name == "description":
        target.sections[name] = "\n".join(t for _, _, t in body)
        return
    parsed: list[Any] = []
    for line, col, content in body:
        payload = _parse_line(name, content, line, col)
        parsed.append(payload)
        items.append(SourceItem(line, all_lines[line - 1], name, tool_name, payload))
    if name == "input_validation":
        merged: dict[str, tuple[ValidationRule, ...]] = {}
        for param, rule in parsed:
            merged[param] = merged.get(param, ()) + (rule,)
        target.sections[name] = merged
    elif name == "returns":
        if len(parsed) > 1:
            raise MalformedDelimiter("a tool has exactly one returns clause", body[1][0], body[1][1])
        target.sections[name] = parsed[0] if parsed else ReturnSpec()
    else:
        target.sections[name] = parsed


def _build_contract(b: _Builder, block: str) -> ToolContract:
    s = b.sections
    perms = list(s.get("permissions", ()))
    if not perms or perms[-1].condition is not None:
        perms.append(PermissionRule(None, "REJECT", DEFAULT_REJECT_REASON))
    return ToolContract(
        tool=b.attrs["name"],
        description=s.get("description", ""),
        preconditions=tuple(s.get("preconditions", ())),
        input_validation=s.get("input_validation", {}),
        permission_rules=tuple(perms),
        side_effects=tuple(s.get("effects", ())),
        returns=s.get("returns", ReturnSpec()),
        requires_confirmation=b.attrs.get("confirmation", "none") == "required",
        source=b.attrs.get("source", ""),
        block_text=block,
    )


def _parse_line(section: str, content: str, line: int, col: int) -> Any:
    if section in ("global_rules", "preconditions"):
        return parse_predicate(content, line, col)
    if section == "input_validation":
        return _parse_validation(content, line, col)
    if section == "permissions":
        return _parse_permission(content, line, col)
    if section == "effects":
        return _parse_effect(content, line, col)
    if section == "returns":
        return _parse_returns(content, line, col)
    if section == "bridge_rules":
        m = _BRIDGE_RE.fullmatch(content)
        if m is None:
            raise UnknownPredicateSyntax("bridge rule must be 'tool: predicate'", line, col)
        return BridgeRule(m.group(1), parse_predicate(m.group(2), line, col + m.start(2)))
    raise MalformedDelimiter(f"unknown section {section}", line, col)


def _parse_validation(content: str, line: int, col: int) -> tuple[str, ValidationRule]:
    m = _VALIDATION_RE.fullmatch(content)
    if m is None:
        raise UnknownPredicateSyntax("validation rule must be 'param: pattern|range|enum ...'", line, col)
    param, kind, arg = m.group(1), m.group(2), m.group(3).strip()
    acol = col + m.start(3)
    try:
        if kind == "pattern":
            value = json.loads(arg)
            if not isinstance(value, str):
                raise ValueError("pattern must be a string")
            re.compile(value)
            return param, ValidationRule("pattern", value)
        if kind == "range":
            parts = _split_range(arg)
            lo, hi = json.loads(parts[0]), json.loads(parts[1])
            ok_num = all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in (lo, hi))
            ok_str = all(isinstance(x, str) for x in (lo, hi))
            if not (ok_num or ok_str):
                raise ValueError("range bounds must both be numbers or both be strings")
            return param, ValidationRule("range", (lo, hi))
        values = json.loads(arg)
        if not isinstance(values, list) or not values or any(isinstance(v, (list, dict)) for v in values):
            raise ValueError("enum must be a non-empty list of scalars")
        return param, ValidationRule("enum", tuple(values))
    except (ValueError, re.error) as exc:
        raise UnknownPredicateSyntax(f"bad {kind} rule: {exc}", line, acol) from None


def _split_range(arg: str) -> tuple[str, str]:
    in_str = False
    i = 0
    while i < len(arg) - 1:
        ch = arg[i]
        if ch == "\\" and in_str:
            i += 2
            continue
        if ch == '"':
            in_str = not in_str
        elif not in_str and arg[i: i + 2] == "..":
            return arg[:i].strip(), arg[i + 2:].strip()
        i += 1
    raise ValueError("expected LO..HI")


def _find_arrow(content: str) -> int:
    in_str = False
    i = 0
    while i < len(content) - 1:
        ch = content[i]
        if ch == "\\" and in_str:
            i += 2
            continue
        if ch == '"':
            in_str = not in_str
        elif not in_str and content[i: i + 2] == "=>":
            return i
        i += 1
    return -1


def _parse_permission(content: str, line: int, col: int) -> PermissionRule:
    pos = _find_arrow(content)
    if pos < 0:
        raise UnknownPredicateSyntax("permission rule needs '=> PERMIT' or '=> REJECT \"reason\"'", line, col)
    left, right = content[:pos].strip(), content[pos + 2:].strip()
    rcol = col + pos + 2 + (len(content[pos + 2:]) - len(content[pos + 2:].lstrip()))
    if left == "otherwise":
        cond = None
    else:
        cond = parse_predicate(content[:pos], line, col)
    if right == "PERMIT":
        return PermissionRule(cond, "PERMIT", "")
    if right == "REJECT":
        return PermissionRule(cond, "REJECT", DEFAULT_REJECT_REASON)
    if right.startswith("REJECT"):
        reason_text = right[len("REJECT"):].strip()
        try:
            reason = json.loads(reason_text)
        except ValueError:
            reason = None
        if isinstance(reason, str):
            return PermissionRule(cond, "REJECT", reason)
    raise UnknownPredicateSyntax("decision must be PERMIT or REJECT \"reason\"", line, rcol)


class _LineParser(_Parser):
    def word(self, w: str) -> None:
        if not self.at_word(w):
            found = self.tok.text or "end of line"
            raise self._fail(f"expected {w!r}, found {found!r}")
        self.advance()

    def term(self) -> Node:
        return self.parse_operand()


def _parse_effect(content: str, line: int, col: int) -> Mutation:
    p = _LineParser(tokenize(content, line, col))
    kind_tok = p.tok
    kind = p.expect_name("effect kind")
    if kind not in ("insert", "update", "delete"):
        raise UnknownPredicateSyntax("effect must start with insert, update or delete", kind_tok.line, kind_tok.col)
    table = p.expect_name("table name")
    key = None
    if kind in ("update", "delete"):
        p.word("key")
        key = p.term()
    assignments: list[tuple[str, Node]] = []
    if kind in ("insert", "update"):
        p.word("set")
        while True:
            colname = p.expect_name("column name")
            if p.tok.kind != "op" or p.tok.text != "=":
                raise p._fail("expected '=' in assignment")
            p.advance()
            assignments.append((colname, p.term()))
            if p.tok.kind == "punct" and p.tok.text == ",":
                p.advance()
                continue
            break
        seen = [c for c, _ in assignments]
        if len(seen) != len(set(seen)):
            raise UnknownPredicateSyntax("column assigned twice", line, col)
    p.finish()
    return Mutation(kind, table, key, tuple(assignments))


def _parse_returns(content: str, line: int, col: int) -> ReturnSpec:
    p = _LineParser(tokenize(content, line, col))
    tok: Token = p.tok
    kind = p.expect_name("return kind")
    if kind in ("status", "none", "effect"):
        p.finish()
        return ReturnSpec(kind)
    if kind == "row":
        table = p.expect_name("table name")
        p.word("key")
        key = p.term()
        p.finish()
        return ReturnSpec("row", table, key)
    if kind == "rows":
        table = p.expect_name("table name")
        where = None
        if p.at_word("where"):
            p.advance()
            where = p.parse_expr()
        p.finish()
        return ReturnSpec("rows", table, None, where)
    raise UnknownPredicateSyntax("returns must be status, none, effect, row or rows", tok.line, tok.col)


# --------------------------------------------------------------------------- serialization


def _leaf(lines: list[str], tag: str, body: list[str], indent: str) -> None:
    if not body:
        return
    lines.append(f"{indent}<{tag}>")
    lines.extend(f"{indent}  {b}" for b in body)
    lines.append(f"{indent}</{tag}>")


def _description(lines: list[str], text: str, indent: str) -> None:
    if not text:
        return
    if "\n" in text:
        _leaf(lines, "description", text.split("\n"), indent)
    else:
        lines.append(f"{indent}<description>{text}</description>")


def serialize_contract(c: ToolContract, indent: str = "  ", name: str | None = None) -> list[str]:
    attrs = f' name="{name or c.tool}"'
    if c.requires_confirmation:
        attrs += ' confirmation="required"'
    if c.source:
        attrs += f' source="{c.source}"'
    inner = indent + "  "
    out = [f"{indent}<tool{attrs}>"]
    _description(out, c.description, inner)
    _leaf(out, "preconditions", [to_source(p) for p in c.preconditions], inner)
    _leaf(
        out,
        "input_validation",
        [f"{param}: {r.source()}" for param, rules in c.input_validation.items() for r in rules],
        inner,
    )
    _leaf(out, "permissions", [r.source() for r in c.permission_rules], inner)
    _leaf(out, "effects", [m.source() for m in c.side_effects], inner)
    _leaf(out, "returns", [c.returns.source()], inner)
    out.append(f"{indent}</tool>")
    return out


def serialize_policy(doc: PolicyDoc) -> str:
    lines = [f'<policy domain="{doc.domain}">']
    _description(lines, doc.description, "  ")
    _leaf(lines, "global_rules", [to_source(r) for r in doc.global_rules], "  ")
    _leaf(lines, "bridge_rules", [b.source() for b in doc.bridge_rules], "  ")
    for c in doc.contracts.values():
        lines.extend(serialize_contract(c))
    lines.append("</policy>")
    return "\n".join(lines) + "\n"

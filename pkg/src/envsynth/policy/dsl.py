"""Predicate DSL: tokenizer, parser, canonical printer, evaluator, reference checker.

The grammar is documented in ``docs/policy_dsl.md``. Predicates are immutable
trees of the node classes below; evaluation is pure and total except for
unbound references, which raise :class:`PredicateTypeError`.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, Mapping, Union

from ..errors import PredicateTypeError, UnknownPredicateSyntax

# --------------------------------------------------------------------------- AST


@dataclass(frozen=True, eq=False)
class Literal:
    value: Any

    def _key(self) -> tuple:
        return (type(self.value).__name__, self.value)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Literal) and self._key() == other._key()

    def __hash__(self) -> int:
        return hash(self._key())


@dataclass(frozen=True)
class Ref:
    path: tuple[str, ...]


@dataclass(frozen=True)
class Compare:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class And:
    items: tuple["Node", ...]


@dataclass(frozen=True)
class Or:
    items: tuple["Node", ...]


@dataclass(frozen=True)
class Not:
    item: "Node"


@dataclass(frozen=True)
class Exists:
    table: str
    where: "Node | None"


@dataclass(frozen=True)
class Lookup:
    table: str
    key: "Node"
    field: str


Node = Union[Literal, Ref, Compare, And, Or, Not, Exists, Lookup]

COMPARE_OPS = ("=", "!=", "<", "<=", ">", ">=")
KEYWORDS = {"and", "or", "not", "true", "false", "null", "exists", "lookup"}
WALLCLOCK_NAMES = frozenset(
    {"today", "current_date", "current_time", "wall_clock", "system_time", "utcnow", "real_time"}
)
SESSION_FIELDS = frozenset({"authenticated", "authorized_id", "session_id"})

# --------------------------------------------------------------------------- lexer

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<number>-?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>==|!=|<=|>=|=>|[=<>≠≤≥])
  | (?P<punct>[(),.])
    """,
    re.VERBOSE,
)
_OP_ALIASES = {"==": "=", "≠": "!=", "≤": "<=", "≥": ">="}


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    line: int
    col: int


def tokenize(text: str, line: int = 1, col: int = 1) -> list[Token]:
    tokens: list[Token] = []
    pos = 0
    cur_line, cur_col = line, col
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise UnknownPredicateSyntax(f"unexpected character {text[pos]!r}", cur_line, cur_col)
        kind = m.lastgroup or ""
        chunk = m.group()
        if kind != "ws":
            if kind == "op":
                chunk = _OP_ALIASES.get(chunk, chunk)
                if chunk == "=>":
                    raise UnknownPredicateSyntax("unexpected '=>'", cur_line, cur_col)
            tokens.append(Token(kind, chunk, cur_line, cur_col))
        raw = m.group()
        newlines = raw.count("\n")
        if newlines:
            cur_line += newlines
            cur_col = len(raw) - raw.rfind("\n")
        else:
            cur_col += len(raw)
        pos = m.end()
    tokens.append(Token("eof", "", cur_line, cur_col))
    return tokens


# --------------------------------------------------------------------------- parser


class _Parser:
    def __init__(self, tokens: list[Token]) -> None:
        self.tokens = tokens
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.tokens[self.i]

    def _fail(self, message: str, tok: Token | None = None) -> UnknownPredicateSyntax:
        tok = tok or self.tok
        return UnknownPredicateSyntax(message, tok.line, tok.col)

    def advance(self) -> Token:
        tok = self.tok
        self.i += 1
        return tok

    def at_word(self, word: str) -> bool:
        return self.tok.kind == "ident" and self.tok.text == word

    def expect_punct(self, ch: str) -> Token:
        if self.tok.kind != "punct" or self.tok.text != ch:
            found = self.tok.text or "end of input"
            raise self._fail(f"expected {ch!r}, found {found!r}")
        return self.advance()

    def expect_name(self, what: str) -> str:
        tok = self.tok
        if tok.kind != "ident" or tok.text in KEYWORDS:
            raise self._fail(f"expected {what}")
        self.advance()
        return tok.text

    def parse_expr(self) -> Node:
        items = [self.parse_and()]
        while self.at_word("or"):
            self.advance()
            items.append(self.parse_and())
        return items[0] if len(items) == 1 else Or(tuple(items))

    def parse_and(self) -> Node:
        items = [self.parse_unary()]
        while self.at_word("and"):
            self.advance()
            items.append(self.parse_unary())
        return items[0] if len(items) == 1 else And(tuple(items))

    def parse_unary(self) -> Node:
        if self.at_word("not"):
            self.advance()
            return Not(self.parse_unary())
        return self.parse_compare()

    def parse_compare(self) -> Node:
        left = self.parse_operand()
        if self.tok.kind == "op":
            op = self.advance().text
            right = self.parse_operand()
            if self.tok.kind == "op":
                raise self._fail("chained comparisons are not allowed")
            return Compare(op, left, right)
        return left

    def parse_operand(self) -> Node:
        tok = self.tok
        if tok.kind == "punct" and tok.text == "(":
            self.advance()
            node = self.parse_expr()
            self.expect_punct(")")
            return node
        if tok.kind == "string":
            self.advance()
            try:
                return Literal(json.loads(tok.text))
            except ValueError as exc:
                raise self._fail(f"bad string literal: {exc}", tok) from None
        if tok.kind == "number":
            self.advance()
            text = tok.text
            if re.fullmatch(r"-?\d+", text):
                return Literal(int(text))
            return Literal(float(text))
        if tok.kind == "ident":
            word = tok.text
            if word == "true":
                self.advance()
                return Literal(True)
            if word == "false":
                self.advance()
                return Literal(False)
            if word == "null":
                self.advance()
                return Literal(None)
            if word == "exists":
                return self.parse_exists()
            if word == "lookup":
                return self.parse_lookup()
            if word in KEYWORDS:
                raise self._fail(f"unexpected keyword {word!r}")
            return self.parse_ref()
        found = tok.text or "end of input"
        raise self._fail(f"unexpected {found!r}")

    def parse_exists(self) -> Node:
        self.advance()
        self.expect_punct("(")
        table = self.expect_name("table name")
        where = None
        if self.tok.kind == "punct" and self.tok.text == ",":
            self.advance()
            where = self.parse_expr()
        self.expect_punct(")")
        return Exists(table, where)

    def parse_lookup(self) -> Node:
        self.advance()
        self.expect_punct("(")
        table = self.expect_name("table name")
        self.expect_punct(",")
        key = self.parse_expr()
        self.expect_punct(")")
        self.expect_punct(".")
        name = self.expect_name("field name")
        return Lookup(table, key, name)

    def parse_ref(self) -> Node:
        parts = [self.expect_name("identifier")]
        while self.tok.kind == "punct" and self.tok.text == ".":
            self.advance()
            parts.append(self.expect_name("field name"))
        return Ref(tuple(parts))

    def finish(self) -> None:
        if self.tok.kind != "eof":
            raise self._fail(f"unexpected trailing {self.tok.text!r}")


def parse_predicate(text: str, line: int = 1, col: int = 1) -> Node:
    """Parse a predicate; errors carry positions relative to ``line``/``col``."""
    parser = _Parser(tokenize(text, line, col))
    if parser.tok.kind == "eof":
        raise parser._fail("empty predicate")
    node = parser.parse_expr()
    parser.finish()
    return node


def parse_term(text: str, line: int = 1, col: int = 1) -> Node:
    """Parse a value term (literal, reference, lookup or parenthesised expression)."""
    parser = _Parser(tokenize(text, line, col))
    node = parser.parse_compare()
    parser.finish()
    return node


# --------------------------------------------------------------------------- printer


def _literal_source(value: Any) -> str:
    if value is None:
        return "null"
    if value is True:
        return "true"
    if value is False:
        return "false"
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=False)
    return repr(value)


def to_source(node: Node) -> str:
    """Canonical text; ``parse_predicate(to_source(n)) == n`` for every tree."""
    if isinstance(node, Literal):
        return _literal_source(node.value)
    if isinstance(node, Ref):
        return ".".join(node.path)
    if isinstance(node, Compare):
        return f"{_operand(node.left)} {node.op} {_operand(node.right)}"
    if isinstance(node, And):
        return " and ".join(_wrap(i, (Or, And)) for i in node.items)
    if isinstance(node, Or):
        return " or ".join(_wrap(i, (Or,)) for i in node.items)
    if isinstance(node, Not):
        return "not " + _wrap(node.item, (And, Or, Compare))
    if isinstance(node, Exists):
        if node.where is None:
            return f"exists({node.table})"
        return f"exists({node.table}, {to_source(node.where)})"
    if isinstance(node, Lookup):
        return f"lookup({node.table}, {to_source(node.key)}).{node.field}"
    raise TypeError(f"not a predicate node: {node!r}")


def _wrap(node: Node, kinds: tuple[type, ...]) -> str:
    text = to_source(node)
    return f"({text})" if isinstance(node, kinds) else text


def _operand(node: Node) -> str:
    return _wrap(node, (And, Or, Not, Compare))


# --------------------------------------------------------------------------- evaluation


@dataclass
class EvalContext:
    """Everything a predicate may read. ``database`` exposes ``tables``."""

    session: Mapping[str, Any]
    database: Any
    params: Mapping[str, Any]
    now: str | None = None
    table_map: Mapping[str, str] = field(default_factory=dict)
    extra: Mapping[str, Any] = field(default_factory=dict)

    def table(self, name: str) -> Any:
        resolved = self.table_map.get(name, name)
        tables = self.database.tables
        if resolved not in tables:
            raise PredicateTypeError(f"unknown table {name!r}")
        return tables[resolved]


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def values_equal(a: Any, b: Any) -> bool:
    if _is_number(a) and _is_number(b):
        return a == b
    if type(a) is not type(b):
        return False
    return a == b


def compare_values(op: str, a: Any, b: Any) -> bool:
    if op == "=":
        return values_equal(a, b)
    if op == "!=":
        return not values_equal(a, b)
    if _is_number(a) and _is_number(b):
        pass
    elif isinstance(a, str) and isinstance(b, str):
        pass
    else:
        return False
    if op == "<":
        return a < b
    if op == "<=":
        return a <= b
    if op == ">":
        return a > b
    if op == ">=":
        return a >= b
    raise PredicateTypeError(f"unknown operator {op!r}")


class _Scope:
    __slots__ = ("table", "resolved", "columns", "row", "parent")

    def __init__(self, table: str, resolved: str, columns: Mapping[str, Any], row: Mapping[str, Any], parent: "_Scope | None") -> None:
        self.table = table
        self.resolved = resolved
        self.columns = columns
        self.row = row
        self.parent = parent


def evaluate_predicate(node: Node, ctx: EvalContext) -> bool:
    """Evaluate to a strict boolean; non-boolean values count as false."""
    return _truth(_eval(node, ctx, None))


def evaluate_term(node: Node, ctx: EvalContext) -> Any:
    return _eval(node, ctx, None)


def matches_row(where: Node, ctx: EvalContext, table: str, row: Mapping[str, Any]) -> bool:
    """Evaluate ``where`` with bare column names bound to ``row`` of ``table``."""
    t = ctx.table(table)
    return _truth(_eval(where, ctx, _Scope(table, ctx.table_map.get(table, table), t.columns, row, None)))


def _truth(value: Any) -> bool:
    return value is True


def _eval(node: Node, ctx: EvalContext, scope: _Scope | None) -> Any:
    if isinstance(node, Literal):
        return node.value
    if isinstance(node, Ref):
        return _resolve(node.path, ctx, scope)
    if isinstance(node, Compare):
        return compare_values(node.op, _eval(node.left, ctx, scope), _eval(node.right, ctx, scope))
    if isinstance(node, And):
        # evaluate every branch so unbound references surface regardless of order
        results = [_truth(_eval(i, ctx, scope)) for i in node.items]
        return all(results)
    if isinstance(node, Or):
        results = [_truth(_eval(i, ctx, scope)) for i in node.items]
        return any(results)
    if isinstance(node, Not):
        return not _truth(_eval(node.item, ctx, scope))
    if isinstance(node, Exists):
        return _exists(node, ctx, scope)
    if isinstance(node, Lookup):
        table = ctx.table(node.table)
        if node.field not in table.columns:
            raise PredicateTypeError(f"unknown column {node.table}.{node.field}")
        key = _eval(node.key, ctx, scope)
        row = table.get(key)
        return None if row is None else row.get(node.field)
    raise PredicateTypeError(f"not a predicate node: {node!r}")


def _resolve(path: tuple[str, ...], ctx: EvalContext, scope: _Scope | None) -> Any:
    head = path[0]
    if head == "session" and len(path) == 2:
        if path[1] not in ctx.session:
            raise PredicateTypeError(f"unbound session field {path[1]!r}")
        return ctx.session[path[1]]
    if head == "param" and len(path) == 2:
        if path[1] not in ctx.params:
            raise PredicateTypeError(f"unbound parameter {path[1]!r}")
        return ctx.params[path[1]]
    if head == "now" and len(path) == 1:
        if ctx.now is None:
            raise PredicateTypeError("simulation time is not bound")
        return ctx.now
    if head == "db" and len(path) == 3:
        s = scope
        while s is not None:
            if path[1] in (s.table, s.resolved):
                if path[2] not in s.columns:
                    raise PredicateTypeError(f"unknown column {path[1]}.{path[2]}")
                return s.row.get(path[2])
            s = s.parent
        raise PredicateTypeError(f"table {path[1]!r} is not bound by an enclosing exists()")
    if len(path) == 1:
        if head in ctx.extra:
            return ctx.extra[head]
        if scope is not None and head in scope.columns:
            return scope.row.get(head)
    raise PredicateTypeError(f"unbound reference {'.'.join(path)!r}")


def _pk_probe(where: Node, table_name: str, pk: str | None) -> Node | None:
    """Find a ``pk = <row-independent term>`` conjunct usable as an index probe."""
    if pk is None:
        return None
    conjuncts = where.items if isinstance(where, And) else (where,)
    for c in conjuncts:
        if isinstance(c, Compare) and c.op == "=":
            for a, b in ((c.left, c.right), (c.right, c.left)):
                if _is_column_ref(a, table_name, pk) and _row_independent(b):
                    return b
    return None


def _is_column_ref(node: Node, table: str, column: str) -> bool:
    if not isinstance(node, Ref):
        return False
    return node.path == (column,) or node.path == ("db", table, column)


def _row_independent(node: Node) -> bool:
    if isinstance(node, Literal):
        return True
    if isinstance(node, Ref):
        return node.path[0] in ("session", "param", "now") and len(node.path) <= 2
    return False


def _exists(node: Exists, ctx: EvalContext, scope: _Scope | None) -> bool:
    table = ctx.table(node.table)
    if node.where is None:
        return bool(table.rows)
    probe = _pk_probe(node.where, node.table, table.primary_key)
    if probe is not None:
        _check_bindings(node.where, ctx, table, node.table, scope)
        row = table.get(_eval(probe, ctx, scope))
        candidates: Iterable[Mapping[str, Any]] = () if row is None else (row,)
    else:
        candidates = table.rows
        if not table.rows:
            _check_bindings(node.where, ctx, table, node.table, scope)
    resolved = ctx.table_map.get(node.table, node.table)
    for row in candidates:
        inner = _Scope(node.table, resolved, table.columns, row, scope)
        if _truth(_eval(node.where, ctx, inner)):
            return True
    return False


def _check_bindings(where: Node, ctx: EvalContext, table: Any, name: str, scope: _Scope | None) -> None:
    # evaluation against a dummy row keeps unbound-reference errors independent of table contents
    dummy = {c: None for c in table.columns}
    resolved = ctx.table_map.get(name, name)
    _eval(where, ctx, _Scope(name, resolved, table.columns, dummy, scope))


# --------------------------------------------------------------------------- static analysis


@dataclass(frozen=True)
class RefIssue:
    kind: str  # table | column | session | param | unbound | wallclock
    name: str
    detail: str = ""


def walk(node: Node) -> Iterator[Node]:
    yield node
    if isinstance(node, Compare):
        yield from walk(node.left)
        yield from walk(node.right)
    elif isinstance(node, (And, Or)):
        for i in node.items:
            yield from walk(i)
    elif isinstance(node, Not):
        yield from walk(node.item)
    elif isinstance(node, Exists):
        if node.where is not None:
            yield from walk(node.where)
    elif isinstance(node, Lookup):
        yield from walk(node.key)


def referenced_tables(node: Node) -> set[str]:
    return {n.table for n in walk(node) if isinstance(n, (Exists, Lookup))}


def check_references(
    node: Node,
    schema: Mapping[str, Iterable[str]],
    *,
    params: Iterable[str] | None = None,
    session_fields: Iterable[str] | None = None,
    extra: Iterable[str] = (),
    table_map: Mapping[str, str] | None = None,
) -> list[RefIssue]:
    """Closed-world check of every reference in ``node`` against ``schema``.

    ``schema`` maps table name to its column names. ``params``/``session_fields``
    are only checked when given.
    """
    cols = {t: set(c) for t, c in schema.items()}
    tmap = dict(table_map or {})
    issues: list[RefIssue] = []
    param_set = None if params is None else set(params)
    sess = None if session_fields is None else set(session_fields)
    extra_set = set(extra)

    def table_cols(name: str) -> set[str] | None:
        resolved = tmap.get(name, name)
        if resolved not in cols:
            issues.append(RefIssue("table", name))
            return None
        return cols[resolved]

    def visit(n: Node, bound: list[tuple[str, set[str] | None]]) -> None:
        if isinstance(n, Ref):
            _check_ref(n.path, bound)
        elif isinstance(n, Compare):
            visit(n.left, bound)
            visit(n.right, bound)
        elif isinstance(n, (And, Or)):
            for i in n.items:
                visit(i, bound)
        elif isinstance(n, Not):
            visit(n.item, bound)
        elif isinstance(n, Exists):
            tc = table_cols(n.table)
            if n.where is not None:
                visit(n.where, bound + [(n.table, tc)])
        elif isinstance(n, Lookup):
            tc = table_cols(n.table)
            if tc is not None and n.field not in tc:
                issues.append(RefIssue("column", f"{n.table}.{n.field}", n.field))
            visit(n.key, bound)

    def _check_ref(path: tuple[str, ...], bound: list[tuple[str, set[str] | None]]) -> None:
        head = path[0]
        if head in WALLCLOCK_NAMES:
            issues.append(RefIssue("wallclock", head))
            return
        if head == "session" and len(path) == 2:
            if sess is not None and path[1] not in sess:
                issues.append(RefIssue("session", path[1]))
            return
        if head == "param" and len(path) == 2:
            if param_set is not None and path[1] not in param_set:
                issues.append(RefIssue("param", path[1]))
            return
        if head == "now" and len(path) == 1:
            return
        if len(path) == 1 and head in extra_set:
            return
        if head == "db" and len(path) == 3:
            for tname, tc in reversed(bound):
                if tname == path[1]:
                    if tc is not None and path[2] not in tc:
                        issues.append(RefIssue("column", f"{path[1]}.{path[2]}", path[2]))
                    return
            issues.append(RefIssue("unbound", ".".join(path)))
            return
        if len(path) == 1 and bound:
            tname, tc = bound[-1]
            if tc is None:
                return
            if head in tc:
                return
            issues.append(RefIssue("column", f"{tname}.{head}", head))
            return
        issues.append(RefIssue("unbound", ".".join(path)))

    visit(node, [])
    return issues

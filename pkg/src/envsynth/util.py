from __future__ import annotations

import hashlib
import json
import os
import random
import re
import tempfile
from pathlib import Path
from typing import Any, Iterable, Iterator

SNAKE_LABEL = re.compile(r"^[a-z][a-z0-9]*(_[a-z0-9]+){0,2}$")
IDENTIFIER = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
_CAMEL_SPLIT = re.compile(r"[A-Z]+(?=[A-Z][a-z]|$)|[A-Z]?[a-z0-9]+|[A-Z]+")


def canonical_json(obj: Any) -> str:
    """Stable JSON encoding used for hashing and on-disk artifacts."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, default=_default)


def pretty_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False, default=_default) + "\n"


def _default(obj: Any) -> Any:
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def content_hash(obj: Any) -> str:
    if isinstance(obj, bytes):
        return hashlib.sha256(obj).hexdigest()
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def derive_seed(*parts: Any) -> int:
    digest = hashlib.sha256("\x1f".join(map(str, parts)).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def rng_for(*parts: Any) -> random.Random:
    """Independent PRNG keyed by content, so results never depend on call order."""
    return random.Random(derive_seed(*parts))


def is_snake_label(label: str) -> bool:
    return bool(SNAKE_LABEL.match(label))


def is_identifier(name: str) -> bool:
    return bool(IDENTIFIER.match(name)) and not name[0].isdigit()


def camel_words(name: str) -> list[str]:
    return [w.lower() for w in _CAMEL_SPLIT.findall(name)]


def to_snake(name: str) -> str:
    name = re.sub(r"[^0-9A-Za-z]+", "_", name).strip("_")
    parts = []
    for chunk in name.split("_"):
        parts.extend(camel_words(chunk) or [chunk.lower()])
    out = "_".join(p for p in parts if p)
    if out and out[0].isdigit():
        out = "x_" + out
    return out or "x"


def write_text(path: Path, text: str) -> None:
    """Write atomically: readers never observe a half-written artifact."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: Path, obj: Any) -> None:
    write_text(path, pretty_json(obj))


def read_json(path: Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_jsonl(path: Path, records: Iterable[Any]) -> None:
    write_text(path, "".join(canonical_json(r) + "\n" for r in records))


def read_jsonl(path: Path) -> Iterator[Any]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def file_hash(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Violation:
    """A structural problem reported as data rather than raised."""

    __slots__ = ("kind", "detail", "path")

    def __init__(self, kind: str, detail: str = "", path: Iterable[str] = ()) -> None:
        self.kind = kind
        self.detail = detail
        self.path = tuple(path)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Violation) and (self.kind, self.detail, self.path) == (other.kind, other.detail, other.path)

    def __hash__(self) -> int:
        return hash((self.kind, self.detail, self.path))

    def __repr__(self) -> str:
        extra = f", path={list(self.path)}" if self.path else ""
        return f"Violation({self.kind}, {self.detail!r}{extra})"

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind, "detail": self.detail}
        if self.path:
            out["path"] = list(self.path)
        return out

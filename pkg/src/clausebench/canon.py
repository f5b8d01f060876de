"""Policy canon: the clause store and its version stamps.

Clauses are loaded from a YAML list, validated, and materialized twice: as an
in-memory map for lookup and as an SQLite database that the query templates
run against. Both views share the same clause identifiers.
"""

from __future__ import annotations

import hashlib
import json
import re
import sqlite3
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Optional

import yaml

from .errors import CanonError

CLAUSE_ID_RE = re.compile(r"^[A-Z0-9]+(-[A-Z0-9]+)+$")
CLAUSE_KINDS = ("requirement", "exception", "precedence")
_CLAUSE_KEYS = {"id", "domain", "topic", "kind", "text", "excepts", "overrides"}

SCHEMA = """
CREATE TABLE clauses (
    id TEXT PRIMARY KEY,
    domain TEXT NOT NULL,
    topic TEXT NOT NULL,
    kind TEXT NOT NULL,
    text TEXT NOT NULL
);
CREATE TABLE excepts (exception_id TEXT NOT NULL, target_id TEXT NOT NULL);
CREATE TABLE precedence (clause_id TEXT NOT NULL, over_id TEXT NOT NULL);
"""


@dataclass(frozen=True)
class Clause:
    clause_id: str
    domain: str
    topic: str
    kind: str
    text: str
    excepts: tuple[str, ...] = ()
    overrides: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "id": self.clause_id,
            "domain": self.domain,
            "topic": self.topic,
            "kind": self.kind,
            "text": self.text,
            "excepts": list(self.excepts),
            "overrides": list(self.overrides),
        }


def digest(payload) -> str:
    """SHA-256 over the canonical JSON form of ``payload``."""
    data = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(data.encode("utf-8")).hexdigest()


class CanonStore:
    """Immutable clause store with an SQLite materialization."""

    def __init__(self, clauses: Iterable[Clause]):
        ordered = sorted(clauses, key=lambda c: c.clause_id)
        self._clauses: dict[str, Clause] = {c.clause_id: c for c in ordered}
        self.db = sqlite3.connect(":memory:", check_same_thread=False)
        self.db.executescript(SCHEMA)
        self.db.executemany(
            "INSERT INTO clauses VALUES (?, ?, ?, ?, ?)",
            [(c.clause_id, c.domain, c.topic, c.kind, c.text) for c in ordered],
        )
        self.db.executemany(
            "INSERT INTO excepts VALUES (?, ?)",
            [(c.clause_id, t) for c in ordered for t in c.excepts],
        )
        self.db.executemany(
            "INSERT INTO precedence VALUES (?, ?)",
            [(c.clause_id, t) for c in ordered for t in c.overrides],
        )
        self.db.commit()

    def __len__(self) -> int:
        return len(self._clauses)

    def __iter__(self) -> Iterator[Clause]:
        return iter(self._clauses.values())

    def __contains__(self, clause_id: object) -> bool:
        return clause_id in self._clauses

    @property
    def ids(self) -> list[str]:
        return list(self._clauses)

    def get(self, clause_id: str) -> Optional[Clause]:
        return self._clauses.get(clause_id)

    def filter(self, domain: str | None = None, topic: str | None = None,
               kind: str | None = None) -> list[Clause]:
        return [
            c for c in self._clauses.values()
            if (domain is None or c.domain == domain)
            and (topic is None or c.topic == topic)
            and (kind is None or c.kind == kind)
        ]

    @property
    def domains(self) -> list[str]:
        return sorted({c.domain for c in self})

    @property
    def topics(self) -> list[str]:
        return sorted({c.topic for c in self})

    def exceptions_for(self, clause_id: str) -> list[str]:
        return sorted(c.clause_id for c in self if clause_id in c.excepts)

    def precedence_over(self, clause_id: str) -> list[str]:
        return sorted(c.clause_id for c in self if clause_id in c.overrides)

    def closure(self, clause_ids: Iterable[str]) -> set[str]:
        """Close a clause set over the exceptions and precedence clauses that bear on it."""
        result = set(clause_ids)
        frontier = list(result)
        while frontier:
            cid = frontier.pop()
            for nxt in self.exceptions_for(cid) + self.precedence_over(cid):
                if nxt not in result:
                    result.add(nxt)
                    frontier.append(nxt)
        return result

    def content_hash(self) -> str:
        return digest([c.to_dict() for c in self])

    def write_snapshot(self, path: str | Path) -> None:
        """Write the relational view to a single SQLite file."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        if path.exists():
            path.unlink()
        target = sqlite3.connect(str(path))
        with target:
            self.db.backup(target)
        target.close()


def get_clause(store: CanonStore, clause_id: str) -> Optional[Clause]:
    return store.get(clause_id)


def _item_lines(text: str) -> list[int]:
    node = yaml.compose(text)
    if node is None:
        return []
    if not isinstance(node, yaml.SequenceNode):
        raise CanonError(f"line {node.start_mark.line + 1}: canon must be a YAML list of clauses")
    return [item.start_mark.line + 1 for item in node.value]


def _parse_clause(raw, line: int) -> Clause:
    where = f"line {line}"
    if not isinstance(raw, Mapping):
        raise CanonError(f"{where}: clause entry must be a mapping")
    unknown = set(raw) - _CLAUSE_KEYS
    if unknown:
        raise CanonError(f"{where}: unknown clause keys {sorted(unknown)}")
    for key in ("id", "domain", "topic", "kind", "text"):
        if not isinstance(raw.get(key), str) or not raw[key].strip():
            raise CanonError(f"{where}: missing or empty '{key}'")
    cid = raw["id"]
    if not CLAUSE_ID_RE.match(cid):
        raise CanonError(f"{where}: clause id {cid!r} does not match {CLAUSE_ID_RE.pattern}")
    if raw["kind"] not in CLAUSE_KINDS:
        raise CanonError(f"{where}: kind {raw['kind']!r} not in {CLAUSE_KINDS}")
    refs = {}
    for key in ("excepts", "overrides"):
        value = raw.get(key) or []
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise CanonError(f"{where}: '{key}' must be a list of clause ids")
        refs[key] = tuple(value)
    if raw["kind"] == "exception" and not refs["excepts"]:
        raise CanonError(f"{where}: exception clause {cid} must list the clauses it excepts")
    return Clause(cid, raw["domain"], raw["topic"], raw["kind"], " ".join(raw["text"].split()),
                  refs["excepts"], refs["overrides"])


def parse_canon(text: str) -> CanonStore:
    lines = _item_lines(text)
    data = yaml.safe_load(text)
    if not data:
        raise CanonError("empty canon")
    clauses = [_parse_clause(raw, line) for raw, line in zip(data, lines)]

    seen: dict[str, int] = {}
    dupes = []
    for clause, line in zip(clauses, lines):
        if clause.clause_id in seen:
            dupes.append(f"{clause.clause_id} (lines {seen[clause.clause_id]} and {line})")
        seen.setdefault(clause.clause_id, line)
    if dupes:
        raise CanonError("duplicate clause ids: " + "; ".join(dupes))

    by_id = {c.clause_id: c for c in clauses}
    for clause in clauses:
        for target in clause.excepts:
            if target not in by_id or by_id[target].kind != "requirement":
                raise CanonError(
                    f"line {seen[clause.clause_id]}: {clause.clause_id} excepts "
                    f"{target!r}, which is not a requirement clause")
        for target in clause.overrides:
            if target not in by_id:
                raise CanonError(
                    f"line {seen[clause.clause_id]}: {clause.clause_id} overrides unknown clause {target!r}")
    return CanonStore(clauses)


def load_canon(canon_file: str | Path) -> CanonStore:
    path = Path(canon_file)
    if not path.is_file():
        raise FileNotFoundError(f"canon not found: {path}")
    return parse_canon(path.read_text(encoding="utf-8"))


@dataclass
class CanonManifest:
    canon_hash: str
    rules_hash: str
    index_hashes: dict[str, str]
    created_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())

    def stamps(self) -> dict[str, str]:
        """Flat key to hex-digest map embedded in every run record."""
        out = {"canon": self.canon_hash, "rules": self.rules_hash}
        out.update({f"index.{name}": h for name, h in sorted(self.index_hashes.items())})
        return out

    def indexes_digest(self) -> str:
        return digest(dict(sorted(self.index_hashes.items())))

    def to_dict(self) -> dict:
        return {
            "canon_hash": self.canon_hash,
            "rules_hash": self.rules_hash,
            "index_hashes": dict(sorted(self.index_hashes.items())),
            "created_at": self.created_at,
        }


def manifest(store: CanonStore, rules, indexes: Iterable) -> CanonManifest:
    """Build version stamps; every index must expose ``name`` and ``digest()``."""
    return CanonManifest(
        canon_hash=store.content_hash(),
        rules_hash=rules.digest(),
        index_hashes={ix.name: ix.digest() for ix in indexes},
    )

"""Natural-language queries over the clause store through closed SQL templates.

Four intents, four templates. A question is parsed by a keyword/slot grammar
into a typed intent, bound to a parameterized statement and executed against
the store's SQLite view. Correctness is judged on result sets (sorted clause
id multisets), never on query text.
"""

from __future__ import annotations

import hashlib
import re
import sqlite3
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

from .canon import CLAUSE_ID_RE, CanonStore

INTENTS: dict[str, tuple[str, ...]] = {
    "find_clauses_by_topic": ("domain", "topics"),
    "find_exceptions_for": ("target",),
    "find_precedence_over": ("target",),
    "find_clauses_by_domain": ("domain",),
}
FAILURES = ("no_parse", "empty_support", "exec_error")
MAX_RUNGS = 3

# Surface word -> topic tag. The first word listed for a tag is used when rendering.
TOPIC_LEXICON: dict[str, str] = {
    "identification": "ident",
    "ident": "ident",
    "sender": "ident",
    "unsubscribe": "unsubscribe",
    "opt-out": "unsubscribe",
    "transactional": "transactional",
    "receipts": "transactional",
    "consent": "consent",
    "relationship": "relationship",
    "implied": "implied",
    "precedence": "precedence",
    "mixed": "precedence",
    "sms": "sms",
    "stop": "sms",
    "claims": "claims",
    "pricing": "pricing",
    "price": "pricing",
    "fees": "pricing",
    "endorsement": "endorsement",
    "endorsements": "endorsement",
    "contest": "contest",
    "contests": "contest",
    "sensitive": "sensitive",
    "minors": "minors",
    "children": "minors",
    "purpose": "purpose",
    "health": "health",
}
_TOPIC_WORD = {}
for _word, _tag in TOPIC_LEXICON.items():
    _TOPIC_WORD.setdefault(_tag, _word)

_CLAUSE_REF = re.compile(r"\b[A-Z0-9]+(?:-[A-Z0-9]+)+\b")
_DOMAIN_WORD = re.compile(r"\b[A-Z][A-Z0-9]{1,11}\b")
_EXCEPTION_CUE = re.compile(r"\bexceptions?\b|\bexempt(ions?)?\b")
_PRECEDENCE_CUE = re.compile(r"\bprecedence\s+over\b|\boverrides?\b")
_ALL_CUE = re.compile(r"\ball\b|\bevery\b|\blist\b")


@dataclass(frozen=True)
class TypedIntent:
    intent: str
    params: tuple[tuple[str, object], ...]

    def __post_init__(self):
        if self.intent not in INTENTS:
            raise ValueError(f"unknown intent {self.intent!r}")
        names = tuple(n for n, _ in self.params)
        if names != INTENTS[self.intent]:
            raise ValueError(f"{self.intent} takes {INTENTS[self.intent]}, got {names}")

    @classmethod
    def make(cls, intent: str, **params) -> "TypedIntent":
        if "topics" in params:
            params["topics"] = tuple(params["topics"])
        names = INTENTS.get(intent)
        if names is None:
            raise ValueError(f"unknown intent {intent!r}")
        if set(params) != set(names):
            raise ValueError(f"{intent} takes {names}, got {tuple(sorted(params))}")
        return cls(intent, tuple((n, params[n]) for n in names))

    def get(self, name: str):
        return dict(self.params)[name]

    def to_dict(self) -> dict:
        return {"intent": self.intent,
                "params": {n: list(v) if isinstance(v, tuple) else v for n, v in self.params}}


@dataclass(frozen=True)
class NoParse:
    text: str
    reason: str = "no matching intent"

    def to_dict(self) -> dict:
        return {"intent": None, "no_parse": self.reason}


@dataclass(frozen=True)
class SafeQuery:
    template_id: str
    bound_params: tuple
    rendered_text: str
    sql: str

    def to_dict(self) -> dict:
        return {"template_id": self.template_id, "bound_params": list(self.bound_params),
                "rendered_text": self.rendered_text}


@dataclass(frozen=True)
class ResultSet:
    ids: tuple[str, ...]
    status: str = "ok"

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(sorted(self.ids)))

    @property
    def empty_support(self) -> bool:
        return not self.ids

    def __len__(self) -> int:
        return len(self.ids)


def _quote(value: str) -> str:
    return "'" + str(value).replace("'", "''") + "'"


def _bind(intent: TypedIntent) -> SafeQuery:
    """Instantiate the template for ``intent``: parameterized SQL plus its canonical rendering."""
    kind = intent.intent
    if kind == "find_clauses_by_topic":
        domain, topics = intent.get("domain"), tuple(intent.get("topics"))
        marks = ", ".join("?" for _ in topics)
        sql = f"SELECT id FROM clauses WHERE domain = ? AND topic IN ({marks}) ORDER BY id"
        shown = ",".join(_quote(t) for t in topics)
        text = f"SELECT id FROM clauses WHERE domain={_quote(domain)} AND topic IN ({shown});"
        return SafeQuery("T_TOPIC", (domain,) + topics, text, sql)
    if kind == "find_clauses_by_domain":
        domain = intent.get("domain")
        sql = "SELECT id FROM clauses WHERE domain = ? ORDER BY id"
        text = f"SELECT id FROM clauses WHERE domain={_quote(domain)};"
        return SafeQuery("T_DOMAIN", (domain,), text, sql)
    target = intent.get("target")
    table, column, key = (("excepts", "exception_id", "target_id") if kind == "find_exceptions_for"
                          else ("precedence", "clause_id", "over_id"))
    sql = f"SELECT id FROM clauses WHERE id IN (SELECT {column} FROM {table} WHERE {key} = ?) ORDER BY id"
    text = f"SELECT id FROM clauses WHERE id IN (SELECT {column} FROM {table} WHERE {key}={_quote(target)});"
    return SafeQuery("T_EXCEPT" if table == "excepts" else "T_PRECEDENCE", (target,), text, sql)


def bind_and_execute(intent: TypedIntent, store: CanonStore) -> tuple[SafeQuery, ResultSet]:
    query = _bind(intent)
    try:
        rows = store.db.execute(query.sql, query.bound_params).fetchall()
    except sqlite3.Error:
        return query, ResultSet((), "exec_error")
    ids = tuple(r[0] for r in rows)
    return query, ResultSet(ids, "ok" if ids else "empty_support")


def resultset_equivalent(a: ResultSet, b: ResultSet) -> bool:
    return sorted(a.ids) == sorted(b.ids)


def result_hash(rs: ResultSet | Iterable[str]) -> str:
    """MD5 of the comma-joined sorted ids. The empty set hashes the empty string."""
    ids = rs.ids if isinstance(rs, ResultSet) else tuple(rs)
    return hashlib.md5(",".join(sorted(ids)).encode("utf-8")).hexdigest()


def _topics_in(lowered: str) -> list[str]:
    found: list[tuple[int, str]] = []
    for word, tag in TOPIC_LEXICON.items():
        for m in re.finditer(rf"(?<![\w-]){re.escape(word)}(?![\w-])", lowered):
            found.append((m.start(), tag))
    out: list[str] = []
    for _, tag in sorted(found):
        if tag not in out:
            out.append(tag)
    return out


def parse_intent(nlq: str) -> TypedIntent | NoParse:
    """Keyword/slot grammar.

    * ``exceptions to <CLAUSE-ID>``      -> find_exceptions_for
    * ``... precedence over <CLAUSE-ID>`` -> find_precedence_over
    * ``<DOMAIN> ... <topic words>``      -> find_clauses_by_topic (topics in order of mention)
    * ``all <DOMAIN> clauses``            -> find_clauses_by_domain
    """
    text = (nlq or "").strip()
    if not text:
        return NoParse(text, "empty question")
    lowered = text.lower()
    refs = [r for r in _CLAUSE_REF.findall(text) if CLAUSE_ID_RE.match(r)]
    if refs:
        if _PRECEDENCE_CUE.search(lowered):
            return TypedIntent.make("find_precedence_over", target=refs[0])
        if _EXCEPTION_CUE.search(lowered):
            return TypedIntent.make("find_exceptions_for", target=refs[0])
        return NoParse(text, "clause reference without an exception or precedence cue")
    domains = [d for d in _DOMAIN_WORD.findall(text) if d not in ("I", "SQL")]
    if not domains:
        return NoParse(text, "no domain")
    domain = domains[0]
    topics = _topics_in(lowered.replace(domain.lower(), " "))
    if topics:
        return TypedIntent.make("find_clauses_by_topic", domain=domain, topics=topics)
    if _ALL_CUE.search(lowered) or "clauses" in lowered:
        return TypedIntent.make("find_clauses_by_domain", domain=domain)
    return NoParse(text, "no topic")


def render_nlq(intent: TypedIntent) -> str:
    """Canonical question for ``intent``; ``parse_intent`` maps it back to ``intent``."""
    kind = intent.intent
    if kind == "find_clauses_by_topic":
        words = [_TOPIC_WORD[t] for t in intent.get("topics")]
        joined = words[0] if len(words) == 1 else ", ".join(words[:-1]) + " and " + words[-1]
        return f"which {intent.get('domain')} clauses govern {joined}?"
    if kind == "find_clauses_by_domain":
        return f"list all {intent.get('domain')} clauses"
    if kind == "find_exceptions_for":
        return f"exceptions to {intent.get('target')}?"
    return f"which clauses take precedence over {intent.get('target')}?"


def dominant_domain(clause_ids: Sequence[str], store: CanonStore) -> str | None:
    counts = Counter(store.get(c).domain for c in clause_ids if c in store)
    if not counts:
        return None
    return min(counts, key=lambda d: (-counts[d], d))


def evidence_intent(clause_ids: Iterable[str], store: CanonStore) -> TypedIntent | NoParse:
    """Intent selecting the governing requirements among ``clause_ids``.

    Keeps requirement clauses in the domain with the most of them (ties go
    alphabetically) and asks for their topics, sorted.
    """
    ids = [c for c in dict.fromkeys(clause_ids) if c in store]
    reqs = [c for c in ids if store.get(c).kind == "requirement"]
    if not reqs:
        domain = dominant_domain(ids, store)
        if domain is None:
            return NoParse("", "no evidence")
        return TypedIntent.make("find_clauses_by_domain", domain=domain)
    domain = dominant_domain(reqs, store)
    topics = sorted({store.get(c).topic for c in reqs if store.get(c).domain == domain})
    return TypedIntent.make("find_clauses_by_topic", domain=domain, topics=topics)


@dataclass(frozen=True)
class RetryAction:
    """Next step on the retry ladder. ``intent`` is None for lexical-only and degraded."""

    action: str  # switch_template | tighten | lexical_only | degraded
    rung: int
    intent: TypedIntent | None = None
    reason: str = ""

    def to_dict(self) -> dict:
        return {"action": self.action, "rung": self.rung,
                "intent": self.intent.to_dict() if self.intent else None, "reason": self.reason}


def retry_policy(prev: TypedIntent | NoParse, failure: str, budget, rung: int = 0,
                 domain_hint: str | None = None) -> RetryAction:
    """Ladder: (1) template switch, (2) drop one topic, (3) lexical-only fallback.

    ``rung`` counts the rungs already tried. ``budget`` is anything with an
    ``exhausted()`` method. Rungs that cannot apply to ``prev`` are skipped.
    """
    if failure not in FAILURES:
        raise ValueError(f"unknown failure {failure!r}")
    if budget is not None and budget.exhausted():
        return RetryAction("degraded", rung, None, "budget exhausted")
    nxt = rung + 1
    if nxt > MAX_RUNGS:
        return RetryAction("degraded", rung, None, "retry ladder exhausted")
    if nxt == 1:
        if isinstance(prev, NoParse):
            if domain_hint:
                return RetryAction("switch_template", 1,
                                   TypedIntent.make("find_clauses_by_domain", domain=domain_hint),
                                   "no parse; query the evidence domain")
        elif prev.intent == "find_clauses_by_topic":
            return RetryAction("switch_template", 1,
                               TypedIntent.make("find_clauses_by_domain", domain=prev.get("domain")),
                               "topic template to domain template")
        elif prev.intent == "find_exceptions_for":
            return RetryAction("switch_template", 1,
                               TypedIntent.make("find_precedence_over", target=prev.get("target")),
                               "exception template to precedence template")
        elif prev.intent == "find_precedence_over":
            return RetryAction("switch_template", 1,
                               TypedIntent.make("find_exceptions_for", target=prev.get("target")),
                               "precedence template to exception template")
        nxt = 2
    if nxt == 2:
        if isinstance(prev, TypedIntent) and prev.intent == "find_clauses_by_topic" \
                and len(prev.get("topics")) >= 2:
            topics = tuple(prev.get("topics"))[:-1]
            return RetryAction("tighten", 2,
                               TypedIntent.make("find_clauses_by_topic", domain=prev.get("domain"),
                                                topics=topics),
                               f"drop topic {prev.get('topics')[-1]!r}")
        nxt = 3
    return RetryAction("lexical_only", 3, None, "fall back to lexical retrieval only")

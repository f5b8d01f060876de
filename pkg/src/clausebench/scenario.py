"""Scenario parsing and fact compilation.

A scenario file carries a context (typed, closed-enum facts about the send)
and the message content. ``compile_facts`` turns both into the ground atoms
the rule engine consumes. Gold packages never pass through this module.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Mapping

import yaml

from .errors import ScenarioError

CHANNELS = ("email", "sms", "social", "web", "chat")
CONSENT_STATES = ("none", "implied", "express")
PURPOSES = ("promotional", "transactional", "mixed")
RELATIONSHIPS = ("none", "family", "personal")
AUDIENCES = ("general", "minors")
ROLES = ("applies", "exception", "precedence", "violated", "not_applicable")

# Commercial electronic message channels. A public web page is not a message.
CEM_CHANNELS = frozenset({"email", "sms", "social", "chat"})

_CONTEXT_ENUMS = {
    "channel": CHANNELS,
    "consent_state": CONSENT_STATES,
    "purpose": PURPOSES,
    "relationship": RELATIONSHIPS,
    "audience": AUDIENCES,
}
_CONTEXT_DEFAULTS = {
    "purpose": "promotional",
    "relationship": "none",
    "audience": "general",
    "sender_identified": True,
}
_REQUIRED_CONTEXT = ("channel", "consent_state")
_CONTENT_FIELDS = ("subject", "body", "footer")

# Fact predicates understood by the rule engine, with their value domains.
FACT_VOCABULARY: dict[str, tuple] = {
    "channel": CHANNELS,
    "consent": CONSENT_STATES,
    "is_cem": (True, False),
    "has_sender_identification": (True, False),
    "has_unsubscribe": (True, False),
    "is_transactional": (True, False),
    "is_mixed": (True, False),
    "has_relationship": (True, False),
    "targets_minors": (True, False),
    "has_performance_claim": (True, False),
    "has_health_claim": (True, False),
    "has_sensitive_data": (True, False),
    "has_drip_pricing": (True, False),
    "undisclosed_endorsement": (True, False),
    "contest_without_terms": (True, False),
    "collects_data_without_purpose": (True, False),
}


@dataclass(frozen=True)
class TraceStep:
    clause_id: str
    role: str
    rationale: str = ""

    def to_dict(self) -> dict:
        out = {"clause_id": self.clause_id, "role": self.role}
        if self.rationale:
            out["rationale"] = self.rationale
        return out

    @classmethod
    def from_dict(cls, raw: Mapping) -> "TraceStep":
        return cls(str(raw["clause_id"]), str(raw["role"]), str(raw.get("rationale", "")))

    @classmethod
    def parse(cls, text: str) -> "TraceStep":
        """Parse the compact ``CLAUSE-ID:role`` form."""
        clause_id, sep, role = text.rpartition(":")
        if not sep:
            raise ValueError(f"expected CLAUSE-ID:role, got {text!r}")
        return cls(clause_id.strip(), role.strip())


@dataclass(frozen=True)
class Scenario:
    scenario_id: str
    context: dict
    content: dict
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def channel(self) -> str:
        return self.context["channel"]

    @property
    def consent_state(self) -> str:
        return self.context["consent_state"]


@dataclass(frozen=True)
class FactSet:
    facts: tuple[tuple[str, Any], ...]

    def __getitem__(self, predicate: str):
        return dict(self.facts)[predicate]

    def get(self, predicate: str, default=None):
        return dict(self.facts).get(predicate, default)

    def as_dict(self) -> dict:
        return dict(self.facts)

    def atoms(self) -> list[str]:
        """Ground atoms such as ``channel(email)`` or ``has_unsubscribe(false)``."""
        def fmt(v):
            return str(v).lower() if isinstance(v, bool) else str(v)
        return [f"{p}({fmt(v)})" for p, v in self.facts]


def _ensure_mapping(value, path: str) -> dict:
    if not isinstance(value, Mapping):
        raise ScenarioError("expected a mapping", path)
    return dict(value)


def scenario_from_dict(doc: Mapping) -> Scenario:
    if not isinstance(doc, Mapping):
        raise ScenarioError("scenario document must be a mapping")
    if "gold" in doc:
        raise ScenarioError("gold data is evaluator-only and belongs in the gold/ tree", "gold")
    unknown = set(doc) - {"scenario_id", "context", "content"}
    if unknown:
        raise ScenarioError("unknown key", sorted(unknown)[0])
    for key in ("scenario_id", "context", "content"):
        if key not in doc:
            raise ScenarioError("missing required field", key)
    sid = doc["scenario_id"]
    if not isinstance(sid, str) or not sid.strip():
        raise ScenarioError("must be a non-empty string", "scenario_id")

    raw_ctx = _ensure_mapping(doc["context"], "context")
    unknown = set(raw_ctx) - set(_CONTEXT_ENUMS) - {"sender_identified"}
    if unknown:
        raise ScenarioError("unknown key", f"context.{sorted(unknown)[0]}")
    for key in _REQUIRED_CONTEXT:
        if key not in raw_ctx:
            raise ScenarioError("missing required field", f"context.{key}")
    context = dict(_CONTEXT_DEFAULTS)
    for key, value in raw_ctx.items():
        if key == "sender_identified":
            if not isinstance(value, bool):
                raise ScenarioError("must be a boolean", "context.sender_identified")
        elif value not in _CONTEXT_ENUMS[key]:
            raise ScenarioError(f"unknown value {value!r}; expected one of {_CONTEXT_ENUMS[key]}",
                                f"context.{key}")
        context[key] = value

    raw_content = _ensure_mapping(doc["content"], "content")
    unknown = set(raw_content) - set(_CONTENT_FIELDS)
    if unknown:
        raise ScenarioError("unknown key", f"content.{sorted(unknown)[0]}")
    content = {}
    for key in _CONTENT_FIELDS:
        if key not in raw_content:
            raise ScenarioError("missing required field", f"content.{key}")
        if not isinstance(raw_content[key], str):
            raise ScenarioError("must be a string", f"content.{key}")
        content[key] = raw_content[key]
    return Scenario(sid, context, content, raw=dict(doc))


def parse_scenario(text: str | bytes) -> Scenario:
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"malformed YAML: {exc}") from exc
    return scenario_from_dict(doc)


def load_scenario(path) -> Scenario:
    with open(path, "rb") as fh:
        return parse_scenario(fh.read())


# Content cue lexicon. Patterns run over lowercased subject, body and footer.
_NO_UNSUB = re.compile(r"\bno\s+(unsubscribe|opt[- ]out)\b")
_UNSUB = re.compile(
    r"\b(unsubscribe|opt[- ]out)\b\s*(:|here\b|at\b|via\b|link\b|<|https?://)"
    r"|\b(reply|text)\s+stop\b")
_CUES = {
    "performance_claim": re.compile(r"\bguaranteed?\b|\bproven results\b|\bdouble your\b"),
    "health_claim": re.compile(r"\b(cures?|treats?|prevents?)\b[^.]*\b(disease|illness|infection|arthritis)\b"),
    "sensitive_data": re.compile(r"\b(diagnosis|credit score|medical record|account balance|social insurance number)\b"),
    "drip_pricing": re.compile(r"\bplus fees\b|\bfees extra\b|\bfees added at checkout\b"),
    "endorsement": re.compile(r"\b(i love|my favourite|i use|testimonial)\b"),
    "disclosure": re.compile(r"#ad\b|\bpaid partnership\b|\bsponsored\b"),
    "contest": re.compile(r"\b(contest|sweepstakes|giveaway)\b"),
    "contest_terms": re.compile(r"\bodds\b[^.]*\bskill[- ]testing question\b"),
    "collects_data": re.compile(r"\bsign up (form|below)\b|\benter your (email|name|phone)\b"),
    "purpose_statement": re.compile(r"\bwe use (it|this|your \w+) (only )?to\b|\bpurpose of collection\b"),
}


def _text(s: Scenario) -> str:
    return " \n".join(s.content[k] for k in _CONTENT_FIELDS).lower()


def has_unsubscribe_affordance(text: str) -> bool:
    text = text.lower()
    if _NO_UNSUB.search(text):
        return False
    return bool(_UNSUB.search(text))


def compile_facts(s: Scenario) -> FactSet:
    """Compile a validated scenario into its ground fact set."""
    ctx = s.context
    text = _text(s)
    cue = {name: bool(rx.search(text)) for name, rx in _CUES.items()}
    facts = {
        "channel": ctx["channel"],
        "consent": ctx["consent_state"],
        "is_cem": ctx["channel"] in CEM_CHANNELS,
        "has_sender_identification": bool(ctx["sender_identified"]),
        "has_unsubscribe": has_unsubscribe_affordance(text),
        "is_transactional": ctx["purpose"] in ("transactional", "mixed"),
        "is_mixed": ctx["purpose"] == "mixed",
        "has_relationship": ctx["relationship"] != "none",
        "targets_minors": ctx["audience"] == "minors",
        "has_performance_claim": cue["performance_claim"],
        "has_health_claim": cue["health_claim"],
        "has_sensitive_data": cue["sensitive_data"],
        "has_drip_pricing": cue["drip_pricing"],
        "undisclosed_endorsement": cue["endorsement"] and not cue["disclosure"],
        "contest_without_terms": cue["contest"] and not cue["contest_terms"],
        "collects_data_without_purpose": cue["collects_data"] and not cue["purpose_statement"],
    }
    return FactSet(tuple((p, facts[p]) for p in FACT_VOCABULARY))


def retrieval_query(s: Scenario) -> str:
    """Retrieval query surface: subject, body, footer, then channel and consent tags."""
    parts = [s.content["subject"], s.content["body"], s.content["footer"],
             s.context["channel"], s.context["consent_state"]]
    return " ".join(p for p in parts if p)


def scenario_to_dict(s: Scenario) -> dict:
    """Canonical document form; defaults are left implicit."""
    ctx = {k: v for k, v in s.context.items() if k in _REQUIRED_CONTEXT or _CONTEXT_DEFAULTS.get(k) != v}
    return {"scenario_id": s.scenario_id, "context": ctx, "content": dict(s.content)}

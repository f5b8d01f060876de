"""Deterministic scenario suite generator.

Candidates are built from a base scenario (promotional email, no consent, no
unsubscribe affordance, nothing else remarkable) by toggling up to
``MAX_DEVIATIONS`` fact dimensions. Each candidate's message text is written so
that ``compile_facts`` reads back exactly the intended bits. Candidates are
ordered by (number of deviations, seeded random key) and picked greedily: at
each step the candidate adding the most not-yet-covered gold closure clauses
wins, within the labels whose quota is still open.
"""

from __future__ import annotations

import itertools
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import yaml

from .canon import CanonStore
from .errors import ConflictError, SuiteError
from .gold import GoldPackage, derive_gold, write_gold
from .rules import DECISIONS, RuleSet, normalize_decision
from .scenario import (CHANNELS, CONSENT_STATES, Scenario, compile_facts, scenario_from_dict,
                       scenario_to_dict)

MAX_DEVIATIONS = 3
BENCH_DISTRIBUTION = {"allow": 1, "block": 2, "safe_rewrite": 4, "escalate": 9}

BASE = {
    "channel": "email",
    "consent_state": "none",
    "purpose": "promotional",
    "relationship": "none",
    "audience": "general",
    "sender_identified": True,
    "unsubscribe": False,
}
CUES = ("performance_claim", "health_claim", "sensitive_data", "drip_pricing",
        "endorsement", "contest", "collects_data")

_CUE_TEXT = {
    "performance_claim": "Results guaranteed in 30 days.",
    "health_claim": "Our tea cures joint disease.",
    "sensitive_data": "We reviewed your credit score.",
    "drip_pricing": "Only $10 a month, plus fees.",
    "endorsement": "I love this blender, says our host.",
    "contest": "Enter our contest to win a trip.",
    "collects_data": "Enter your email in the sign up form.",
}
_CUE_FACT = {
    "performance_claim": "has_performance_claim",
    "health_claim": "has_health_claim",
    "sensitive_data": "has_sensitive_data",
    "drip_pricing": "has_drip_pricing",
    "endorsement": "undisclosed_endorsement",
    "contest": "contest_without_terms",
    "collects_data": "collects_data_without_purpose",
}
_SUBJECT = {
    "promotional": "Upgrade today!",
    "transactional": "Your order receipt",
    "mixed": "Your receipt and a special offer",
}


@dataclass(frozen=True)
class SuiteSpec:
    n: int
    label_distribution: Mapping[str, int]
    seed: int = 0
    channels: tuple[str, ...] = CHANNELS
    clause_families: tuple[str, ...] = ()

    def __post_init__(self):
        dist = {normalize_decision(k): int(v) for k, v in self.label_distribution.items()}
        object.__setattr__(self, "label_distribution", dist)
        if any(v < 0 for v in dist.values()):
            raise SuiteError("label counts must be non-negative")
        if sum(dist.values()) != self.n:
            raise SuiteError(f"label counts sum to {sum(dist.values())}, expected n={self.n}")
        bad = [c for c in self.channels if c not in CHANNELS]
        if bad:
            raise SuiteError(f"unknown channels {bad}")


def _dimensions(channels: Iterable[str]) -> list[tuple[str, list]]:
    """Each dimension with its non-base values."""
    dims = [
        ("channel", [c for c in channels if c != BASE["channel"]]),
        ("consent_state", [c for c in CONSENT_STATES if c != BASE["consent_state"]]),
        ("purpose", ["transactional", "mixed"]),
        ("relationship", ["family"]),
        ("audience", ["minors"]),
        ("sender_identified", [False]),
        ("unsubscribe", [True]),
    ]
    dims += [(cue, [True]) for cue in CUES]
    return [(name, values) for name, values in dims if values]


def _footer(bits: dict) -> str:
    if not bits["unsubscribe"]:
        return "(no unsubscribe)"
    if bits["channel"] == "sms":
        return "Reply STOP to unsubscribe."
    return "unsubscribe: <link>"


def render_scenario(scenario_id: str, bits: dict) -> Scenario:
    body = " ".join(_CUE_TEXT[c] for c in CUES if bits.get(c)) or "..."
    context = {k: bits[k] for k in ("channel", "consent_state", "purpose", "relationship",
                                    "audience", "sender_identified")}
    doc = {"scenario_id": scenario_id, "context": context,
           "content": {"subject": _SUBJECT[bits["purpose"]], "body": body, "footer": _footer(bits)}}
    s = scenario_from_dict(doc)
    s = scenario_from_dict(scenario_to_dict(s))
    facts = compile_facts(s)
    expected = {_CUE_FACT[c]: bool(bits.get(c)) for c in CUES}
    expected["has_unsubscribe"] = bits["unsubscribe"]
    for pred, value in expected.items():
        if facts[pred] != value:
            raise SuiteError(f"generated text for {scenario_id} compiles {pred}={facts[pred]}, wanted {value}")
    return s


def candidates(spec: SuiteSpec) -> list[tuple[int, float, dict]]:
    rng = random.Random(spec.seed)
    dims = _dimensions(spec.channels)
    base = dict(BASE, **{c: False for c in CUES})
    if base["channel"] not in spec.channels:
        base["channel"] = spec.channels[0]
    out = []
    for level in range(MAX_DEVIATIONS + 1):
        for chosen in itertools.combinations(dims, level):
            for values in itertools.product(*(v for _, v in chosen)):
                bits = dict(base)
                bits.update({name: value for (name, _), value in zip(chosen, values)})
                out.append((level, rng.random(), bits))
    out.sort(key=lambda c: (c[0], c[1]))
    return out


def _scenario_id(gold: GoldPackage, store: CanonStore, rules: RuleSet, bits: dict, serial: int,
                 common: set[str]) -> str:
    """Name a scenario after the clause that best explains its label.

    Clauses shared with the base scenario's witness are skipped when anything
    else is cited; escalations prefer the clause behind the trigger.
    """
    steps = [s for s in gold.witness_trace if s.clause_id not in common] or list(gold.witness_trace)

    def trigger(step) -> bool:
        return any(r.effect == "escalate_trigger" for r in rules.rules_for_clause(step.clause_id))

    focus = None
    if gold.decision == "escalate":
        focus = next((s for s in steps if trigger(s)), None)
    focus = focus or next((s for s in steps if s.role == "violated"), None) or steps[0]
    clause = store.get(focus.clause_id)
    topic = clause.topic.upper().replace("_", "-")
    return f"{clause.domain}-{bits['channel'].upper()}-{topic}-{serial:03d}"


def generate_suite(spec: SuiteSpec, store: CanonStore, rules: RuleSet) -> tuple[list[Scenario], list[GoldPackage]]:
    for label in spec.label_distribution:
        if label not in DECISIONS:
            raise SuiteError(f"unknown label {label!r}")
    remaining = {k: v for k, v in spec.label_distribution.items() if v > 0}

    pool = []
    for level, key, bits in candidates(spec):
        draft = render_scenario("DRAFT-000", bits)
        try:
            gold = derive_gold(draft, store, rules)
        except ConflictError:
            continue
        if not gold.witness_trace or gold.decision not in remaining:
            continue
        if spec.clause_families and any(store.get(c).domain not in spec.clause_families
                                        for c in gold.witness_ids):
            continue
        pool.append((level, key, bits, gold))

    covered: set[str] = set()
    chosen = []
    used = set()
    while remaining:
        best = None
        for i, (level, key, bits, gold) in enumerate(pool):
            if i in used or gold.decision not in remaining:
                continue
            gain = len(set(gold.clause_closure) - covered)
            rank = (-gain, level, key)
            if best is None or rank < best[0]:
                best = (rank, i)
        if best is None:
            label = sorted(remaining)[0]
            raise SuiteError(f"label {label!r} cannot be realized by this canon and rule set "
                             f"({remaining[label]} more needed)")
        i = best[1]
        used.add(i)
        level, key, bits, gold = pool[i]
        covered |= set(gold.clause_closure)
        chosen.append((bits, gold))
        remaining[gold.decision] -= 1
        if remaining[gold.decision] == 0:
            del remaining[gold.decision]

    base_bits = candidates(spec)[0][2]
    common = set(derive_gold(render_scenario("BASE-000", base_bits), store, rules).witness_ids)
    scenarios, golds = [], []
    order = {label: i for i, label in enumerate(DECISIONS)}
    chosen.sort(key=lambda c: order[c[1].decision])
    for serial, (bits, draft_gold) in enumerate(chosen, start=1):
        s = render_scenario(_scenario_id(draft_gold, store, rules, bits, serial, common), bits)
        scenarios.append(s)
        golds.append(derive_gold(s, store, rules))
    return scenarios, golds


def dump_scenario(s: Scenario) -> str:
    return yaml.safe_dump(scenario_to_dict(s), sort_keys=False, allow_unicode=True, width=120)


def write_suite(out_dir: str | Path, scenarios: list[Scenario], golds: list[GoldPackage]) -> Path:
    out = Path(out_dir)
    (out / "scenarios").mkdir(parents=True, exist_ok=True)
    for s in scenarios:
        (out / "scenarios" / f"{s.scenario_id}.yml").write_text(dump_scenario(s), encoding="utf-8")
    for g in golds:
        write_gold(out / "gold", g)
    return out

"""Evaluator-only answer keys.

A gold package is derived by running the reference engine with the whole
canon visible, so nothing is lost to retrieval truncation. Inference modules
never import this file; the evaluator and the suite generator do.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import yaml

from .canon import CanonStore
from .errors import ScenarioError
from .nlq import NoParse, SafeQuery, TypedIntent, bind_and_execute, evidence_intent
from .rules import (DECISIONS, RuleSet, display_decision, evaluate, normalize_decision)
from .scenario import ROLES, Scenario, TraceStep, compile_facts

WITNESS_GRADE = 2
CLOSURE_GRADE = 1


@dataclass(frozen=True)
class GoldPackage:
    scenario_id: str
    decision: str
    witness_trace: tuple[TraceStep, ...]
    clause_closure: tuple[str, ...]
    canonical_intent: TypedIntent | None
    canonical_query: SafeQuery | None = None
    qrels: Mapping[str, int] = field(default_factory=dict)

    @property
    def witness_ids(self) -> list[str]:
        return [s.clause_id for s in self.witness_trace]

    def expected_result(self, store: CanonStore):
        if self.canonical_intent is None:
            return None
        return bind_and_execute(self.canonical_intent, store)[1]

    def to_dict(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "decision": display_decision(self.decision),
            "trace": [f"{s.clause_id}:{s.role}" for s in self.witness_trace],
            "closure": list(self.clause_closure),
            "intent": self.canonical_intent.to_dict() if self.canonical_intent else None,
            "sql": self.canonical_query.rendered_text if self.canonical_query else None,
            "qrels": dict(sorted(self.qrels.items())),
        }


def gold_from_dict(doc: Mapping, store: CanonStore | None = None) -> GoldPackage:
    try:
        intent = None
        if doc.get("intent"):
            raw = doc["intent"]
            intent = TypedIntent.make(raw["intent"], **raw["params"])
        trace = tuple(TraceStep.parse(t) if isinstance(t, str) else TraceStep.from_dict(t)
                      for t in doc.get("trace") or ())
        gold = GoldPackage(
            scenario_id=str(doc["scenario_id"]),
            decision=normalize_decision(str(doc["decision"])),
            witness_trace=trace,
            clause_closure=tuple(sorted(doc.get("closure") or ())),
            canonical_intent=intent,
            qrels={str(k): int(v) for k, v in (doc.get("qrels") or {}).items()},
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"malformed gold package: {exc}") from exc
    if store is not None and intent is not None:
        query, _ = bind_and_execute(intent, store)
        gold = GoldPackage(gold.scenario_id, gold.decision, gold.witness_trace,
                           gold.clause_closure, intent, query, gold.qrels)
    return gold


def dump_gold(gold: GoldPackage) -> str:
    return yaml.safe_dump(gold.to_dict(), sort_keys=False, allow_unicode=True, width=120)


def write_gold(directory: str | Path, gold: GoldPackage) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{gold.scenario_id}.yml"
    path.write_text(dump_gold(gold), encoding="utf-8")
    return path


def load_gold(path: str | Path, store: CanonStore | None = None) -> GoldPackage:
    return gold_from_dict(yaml.safe_load(Path(path).read_text(encoding="utf-8")), store)


def load_gold_dir(directory: str | Path, store: CanonStore | None = None) -> dict[str, GoldPackage]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"gold directory not found: {directory}")
    out = {}
    for path in sorted(directory.glob("*.y*ml")):
        gold = load_gold(path, store)
        out[gold.scenario_id] = gold
    return out


def derive_gold(s: Scenario, store: CanonStore, rules: RuleSet) -> GoldPackage:
    """Run the reference engine with the full canon visible.

    Raises ConflictError when two fired rules disagree on a clause and nothing
    orders them.
    """
    facts = compile_facts(s)
    fired = rules.fire(facts)
    just = rules.justify(fired, strict_conflicts=True)
    witness = tuple(p.step() for p in just.steps)
    ids = [p.clause_id for p in just.steps]
    closure = tuple(sorted(store.closure(ids)))
    intent = evidence_intent(ids, store)
    if isinstance(intent, NoParse):
        intent, query = None, None
    else:
        query, _ = bind_and_execute(intent, store)
    witness_set = set(ids)
    qrels = {cid: WITNESS_GRADE if cid in witness_set else CLOSURE_GRADE for cid in closure}
    return GoldPackage(s.scenario_id, just.decision, witness, closure, intent, query, qrels)


def witness_is_minimal(gold: GoldPackage, s: Scenario, rules: RuleSet) -> bool:
    """Leave-one-out check.

    The witness must be reproduced exactly when the engine may cite only its
    clauses. Dropping any one clause must then either change the (strict)
    decision or leave a justification step uncited.
    """
    facts = compile_facts(s)
    ids = gold.witness_ids
    full = evaluate(facts, ids, rules, builder="full")
    expected = [(t.clause_id, t.role) for t in gold.witness_trace]
    if full.decision != gold.decision or [(t.clause_id, t.role) for t in full.trace] != expected:
        return False
    for i in range(len(ids)):
        reduced = ids[:i] + ids[i + 1:]
        rec = evaluate(facts, reduced, rules, builder="full", strict=True)
        still_justified = rec.decision == gold.decision and len(rec.trace) == len(ids)
        if still_justified:
            return False
    return True


@dataclass(frozen=True)
class Finding:
    kind: str  # dangling_id | bad_role | duplicate_scenario | missing_gold | orphan_gold | witness_outside_closure | bad_decision
    subject: str
    detail: str

    def __str__(self) -> str:
        return f"{self.kind}: {self.subject}: {self.detail}"


@dataclass
class ValidationReport:
    findings: list[Finding] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.findings

    def __len__(self) -> int:
        return len(self.findings)

    def add(self, kind: str, subject: str, detail: str) -> None:
        self.findings.append(Finding(kind, subject, detail))

    def kinds(self) -> list[str]:
        return [f.kind for f in self.findings]


def validate_world(suite: Sequence[Scenario], golds: Iterable[GoldPackage],
                   store: CanonStore) -> ValidationReport:
    report = ValidationReport()
    seen: set[str] = set()
    for s in suite:
        if s.scenario_id in seen:
            report.add("duplicate_scenario", s.scenario_id, "scenario id used more than once")
        seen.add(s.scenario_id)

    gold_ids: set[str] = set()
    for g in golds:
        sid = g.scenario_id
        if sid in gold_ids:
            report.add("duplicate_scenario", sid, "more than one gold package")
        gold_ids.add(sid)
        if sid not in seen:
            report.add("orphan_gold", sid, "gold package without a scenario")
        if g.decision not in DECISIONS:
            report.add("bad_decision", sid, repr(g.decision))
        referenced = [s.clause_id for s in g.witness_trace] + list(g.clause_closure) + list(g.qrels)
        for cid in dict.fromkeys(referenced):
            if cid not in store:
                report.add("dangling_id", sid, f"unknown clause {cid}")
        for step in g.witness_trace:
            if step.role not in ROLES:
                report.add("bad_role", sid, f"{step.clause_id} has role {step.role!r}")
            if step.clause_id not in g.clause_closure:
                report.add("witness_outside_closure", sid, step.clause_id)
        for cid, grade in g.qrels.items():
            if grade < 0:
                report.add("bad_grade", sid, f"{cid} has grade {grade}")
        if g.canonical_intent is not None and "target" in dict(g.canonical_intent.params):
            target = g.canonical_intent.get("target")
            if target not in store:
                report.add("dangling_id", sid, f"canonical query targets unknown clause {target}")
    for sid in sorted(seen - gold_ids):
        report.add("missing_gold", sid, "scenario has no gold package")
    return report

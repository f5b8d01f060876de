"""Deterministic compliance rule engine.

Rules are data. Each one grounds to a single clause, fires when its guard (a
conjunction over the fact vocabulary) holds, and carries an effect:

    require           the requirement applies and is met      -> ``applies``
    violate           the requirement applies and is broken   -> ``violated``
    except            an exception to listed violate rules    -> ``exception`` / ``not_applicable``
    precedence        overrides listed exception rules       -> ``precedence``
    escalate_trigger  the case needs human review             -> ``applies``

The decision depends only on which rules fired. Retrieval decides which of
the resulting steps may be cited.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import yaml

from .canon import CanonStore, digest
from .errors import ConflictError, RuleError
from .scenario import FACT_VOCABULARY, FactSet, TraceStep

EFFECTS = ("require", "violate", "except", "precedence", "escalate_trigger")
DECISIONS = ("allow", "block", "safe_rewrite", "escalate")
REMEDIES = ("safe_rewrite",)

ROLE_OF_EFFECT = {
    "require": "applies",
    "escalate_trigger": "applies",
    "violate": "violated",
    "except": "exception",
    "precedence": "precedence",
}
# Trace layout: applies, then violated, then exception dispositions, then precedence.
_GROUP = {"applies": 0, "violated": 1, "exception": 2, "not_applicable": 2, "precedence": 3}
_RULE_KEYS = {"id", "clause", "effect", "when", "severity", "depends_on", "remedy", "excepts", "overrides"}


def normalize_decision(label: str) -> str:
    value = label.strip().lower().replace("-", "_")
    if value not in DECISIONS:
        raise ValueError(f"unknown decision {label!r}")
    return value


def display_decision(label: str) -> str:
    return label.replace("_", "-")


@dataclass(frozen=True)
class Rule:
    rule_id: str
    clause_id: str
    effect: str
    guard: tuple[tuple[str, tuple], ...]
    severity_rank: int = 0
    depends_on: tuple[str, ...] = ()
    remedy: str | None = None
    excepts: tuple[str, ...] = ()
    overrides: tuple[str, ...] = ()

    def holds(self, facts: FactSet) -> bool:
        values = facts.as_dict()
        return all(values.get(pred) in allowed for pred, allowed in self.guard)

    def guard_text(self) -> str:
        def fmt(v):
            return str(v).lower() if isinstance(v, bool) else str(v)
        parts = []
        for pred, allowed in self.guard:
            parts.append(f"{pred}({'|'.join(fmt(v) for v in allowed)})")
        return ", ".join(parts)

    def to_dict(self) -> dict:
        return {
            "id": self.rule_id,
            "clause": self.clause_id,
            "effect": self.effect,
            "when": {p: list(v) for p, v in self.guard},
            "severity": self.severity_rank,
            "depends_on": list(self.depends_on),
            "remedy": self.remedy,
            "excepts": list(self.excepts),
            "overrides": list(self.overrides),
        }


def _topo(nodes: Sequence[Rule], edges: Mapping[str, set[str]]) -> list[Rule]:
    """Kahn's algorithm; ``edges[a]`` are nodes that must come after ``a``.

    Ready nodes are taken by (severity desc, rule id asc).
    """
    by_id = {r.rule_id: r for r in nodes}
    indeg = {rid: 0 for rid in by_id}
    for src, dsts in edges.items():
        for dst in dsts:
            if src in by_id and dst in by_id:
                indeg[dst] += 1
    heap = [(-by_id[rid].severity_rank, rid) for rid, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    out = []
    while heap:
        _, rid = heapq.heappop(heap)
        out.append(by_id[rid])
        for dst in sorted(edges.get(rid, ())):
            if dst in indeg:
                indeg[dst] -= 1
                if indeg[dst] == 0:
                    heapq.heappush(heap, (-by_id[dst].severity_rank, dst))
    if len(out) != len(by_id):
        stuck = sorted(rid for rid, d in indeg.items() if d > 0)
        raise RuleError("cyclic rule graph through " + ", ".join(stuck))
    return out


def resolve_precedence(candidates: Iterable[Rule]) -> list[Rule]:
    """Order fired rules by precedence edges, then severity desc, then rule id."""
    cands = list(candidates)
    ids = {r.rule_id for r in cands}
    edges = {r.rule_id: {o for o in r.overrides if o in ids} for r in cands}
    return _topo(cands, edges)


@dataclass(frozen=True)
class PlannedStep:
    rule_id: str
    clause_id: str
    role: str
    order: tuple[int, int]
    rationale: str = ""

    def step(self) -> TraceStep:
        return TraceStep(self.clause_id, self.role, self.rationale)


@dataclass
class Justification:
    """Everything the engine concludes from a set of fired rules."""

    decision: str
    steps: list[PlannedStep]
    conflicts: list[str] = field(default_factory=list)
    excused: list[str] = field(default_factory=list)
    active_violations: list[str] = field(default_factory=list)
    escalations: list[str] = field(default_factory=list)

    @property
    def clause_ids(self) -> list[str]:
        return [s.clause_id for s in self.steps]


@dataclass
class DecisionRecord:
    decision: str
    trace: list[TraceStep]
    fired_rules: list[str]
    grounding_ok: bool
    conflicts: list[str] = field(default_factory=list)
    strict_downgrade: bool = False


class RuleSet:
    def __init__(self, rules: Iterable[Rule], store: CanonStore | None = None):
        self.rules: list[Rule] = sorted(rules, key=lambda r: r.rule_id)
        self.by_id = {r.rule_id: r for r in self.rules}
        if len(self.by_id) != len(self.rules):
            seen, dupes = set(), set()
            for r in self.rules:
                (dupes if r.rule_id in seen else seen).add(r.rule_id)
            raise RuleError("duplicate rule ids: " + ", ".join(sorted(dupes)))
        self._validate(store)
        order = _topo(self.rules, self._dependents())
        self.position = {r.rule_id: i for i, r in enumerate(order)}
        # Overrides must be acyclic as well.
        _topo(self.rules, {r.rule_id: set(r.overrides) for r in self.rules})

    def __iter__(self):
        return iter(self.rules)

    def __len__(self) -> int:
        return len(self.rules)

    def _dependents(self) -> dict[str, set[str]]:
        edges: dict[str, set[str]] = {r.rule_id: set() for r in self.rules}
        for r in self.rules:
            for dep in r.depends_on:
                edges[dep].add(r.rule_id)
        return edges

    def _validate(self, store: CanonStore | None) -> None:
        for r in self.rules:
            if r.effect not in EFFECTS:
                raise RuleError(f"{r.rule_id}: unknown effect {r.effect!r}")
            if r.remedy is not None and (r.effect != "violate" or r.remedy not in REMEDIES):
                raise RuleError(f"{r.rule_id}: remedy only allowed on violate rules, one of {REMEDIES}")
            for pred, allowed in r.guard:
                if pred not in FACT_VOCABULARY:
                    raise RuleError(f"{r.rule_id}: unknown fact predicate {pred!r}")
                bad = [v for v in allowed if v not in FACT_VOCABULARY[pred]]
                if bad:
                    raise RuleError(f"{r.rule_id}: {pred} cannot take {bad}")
            for dep in r.depends_on:
                if dep not in self.by_id:
                    raise RuleError(f"{r.rule_id}: depends on unknown rule {dep!r}")
            for target in r.excepts:
                if self.by_id.get(target) is None or self.by_id[target].effect != "violate":
                    raise RuleError(f"{r.rule_id}: excepts must name violate rules, got {target!r}")
            for target in r.overrides:
                if target not in self.by_id:
                    raise RuleError(f"{r.rule_id}: overrides unknown rule {target!r}")
            if r.effect == "except" and not r.excepts:
                raise RuleError(f"{r.rule_id}: except rule lists no violate rules")
            if r.effect == "precedence" and not r.overrides:
                raise RuleError(f"{r.rule_id}: precedence rule overrides nothing")
            if store is not None and r.clause_id not in store:
                raise RuleError(f"{r.rule_id}: clause {r.clause_id!r} not in canon")

    def digest(self) -> str:
        return digest([r.to_dict() for r in self.rules])

    def rules_for_clause(self, clause_id: str) -> list[Rule]:
        return [r for r in self.rules if r.clause_id == clause_id]

    def fire(self, facts: FactSet, disabled: Iterable[str] = ()) -> list[str]:
        off = set(disabled)
        return [r.rule_id for r in self.rules if r.rule_id not in off and r.holds(facts)]

    def justify(self, fired: Iterable[str], disabled: Iterable[str] = (),
                strict_conflicts: bool = False) -> Justification:
        """Derive the decision and the full ordered step list from fired rule ids."""
        off = set(disabled)
        fired_rules = [self.by_id[rid] for rid in fired if rid in self.by_id and rid not in off]

        # Same-clause contradictions between require and violate.
        conflicts, dropped = [], set()
        by_clause: dict[str, list[Rule]] = {}
        for r in fired_rules:
            if r.effect in ("require", "violate"):
                by_clause.setdefault(r.clause_id, []).append(r)
        for cid, group in sorted(by_clause.items()):
            if len({r.effect for r in group}) < 2:
                continue
            ordered = resolve_precedence(group)
            leader = ordered[0]
            rival = next(r for r in ordered if r.effect != leader.effect)
            distinguishable = (rival.rule_id in leader.overrides
                               or leader.severity_rank != rival.severity_rank)
            if distinguishable:
                dropped.update(r.rule_id for r in group if r.effect != leader.effect)
            else:
                conflicts.append(cid)
                dropped.update(r.rule_id for r in group if r is not leader)
        if conflicts and strict_conflicts:
            raise ConflictError(conflicts)
        live = [r for r in fired_rules if r.rule_id not in dropped]
        live_ids = {r.rule_id for r in live}

        violations = [r for r in live if r.effect == "violate"]
        violation_ids = {r.rule_id for r in violations}
        precedence = [r for r in live if r.effect == "precedence"]
        overridden = {o for p in precedence for o in p.overrides}

        planned: list[PlannedStep] = []
        excused: set[str] = set()

        def plan(rule: Rule, role: str, why: str) -> None:
            planned.append(PlannedStep(rule.rule_id, rule.clause_id, role,
                                       (_GROUP[role], self.position[rule.rule_id]), why))

        for r in live:
            if r.effect in ("require", "escalate_trigger", "violate"):
                plan(r, ROLE_OF_EFFECT[r.effect], f"{r.rule_id}: {r.guard_text()}")

        used_precedence: set[str] = set()
        for r in self.rules:
            if r.effect != "except" or r.rule_id in off:
                continue
            targets = violation_ids.intersection(r.excepts)
            if not targets:
                continue
            if r.rule_id not in live_ids:
                plan(r, "not_applicable", f"{r.rule_id}: {r.guard_text()} does not hold")
                continue
            plan(r, "exception", f"{r.rule_id}: {r.guard_text()}")
            overriding = [p for p in precedence if r.rule_id in p.overrides]
            if overriding:
                used_precedence.update(p.rule_id for p in overriding)
            else:
                excused.update(targets)
        for p in precedence:
            if p.rule_id in used_precedence:
                plan(p, "precedence", f"{p.rule_id}: overrides {', '.join(sorted(overridden))}")

        planned.sort(key=lambda s: s.order)
        seen, steps = set(), []
        for s in planned:
            if s.clause_id not in seen:
                seen.add(s.clause_id)
                steps.append(s)

        active = [r for r in violations if r.rule_id not in excused]
        escalations = [r.rule_id for r in live if r.effect == "escalate_trigger"]
        if escalations or conflicts:
            decision = "escalate"
        elif any(r.remedy is None for r in active):
            decision = "block"
        elif active:
            decision = "safe_rewrite"
        else:
            decision = "allow"
        return Justification(decision, steps, conflicts, sorted(excused),
                             [r.rule_id for r in active], escalations)


def _parse_rule(raw, index: int) -> Rule:
    where = f"rule #{index + 1}"
    if not isinstance(raw, Mapping):
        raise RuleError(f"{where}: expected a mapping")
    unknown = set(raw) - _RULE_KEYS
    if unknown:
        raise RuleError(f"{where}: unknown keys {sorted(unknown)}")
    for key in ("id", "clause", "effect"):
        if not isinstance(raw.get(key), str):
            raise RuleError(f"{where}: missing '{key}'")
    when = raw.get("when") or {}
    if not isinstance(when, Mapping):
        raise RuleError(f"{raw['id']}: 'when' must be a mapping")
    guard = []
    for pred, value in sorted(when.items()):
        allowed = tuple(value) if isinstance(value, list) else (value,)
        guard.append((pred, allowed))
    return Rule(
        rule_id=raw["id"],
        clause_id=raw["clause"],
        effect=raw["effect"],
        guard=tuple(guard),
        severity_rank=int(raw.get("severity", 0)),
        depends_on=tuple(raw.get("depends_on") or ()),
        remedy=raw.get("remedy"),
        excepts=tuple(raw.get("excepts") or ()),
        overrides=tuple(raw.get("overrides") or ()),
    )


def parse_rules(text: str, store: CanonStore | None = None) -> RuleSet:
    data = yaml.safe_load(text)
    if not data:
        raise RuleError("empty rule file")
    if not isinstance(data, list):
        raise RuleError("rule file must be a YAML list")
    return RuleSet([_parse_rule(raw, i) for i, raw in enumerate(data)], store)


def load_rules(path: str | Path, store: CanonStore | None = None) -> RuleSet:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"rules not found: {path}")
    return parse_rules(path.read_text(encoding="utf-8"), store)


def enforce_grounding(trace: Sequence[TraceStep], retrieved) -> list[str]:
    """Clause ids cited in ``trace`` but absent from ``retrieved`` (empty means grounded)."""
    universe = set(retrieved.ids if hasattr(retrieved, "ids") else retrieved)
    out, seen = [], set()
    for step in trace:
        if step.clause_id not in universe and step.clause_id not in seen:
            seen.add(step.clause_id)
            out.append(step.clause_id)
    return out


def evaluate(facts: FactSet, retrieved, rules: RuleSet, *, strict: bool = False,
             disabled: Iterable[str] = (), builder: str = "minimal") -> DecisionRecord:
    """Decide and build a trace citing only retrieved clauses.

    ``builder="minimal"`` omits satisfied-requirement steps, which is the
    under-tracing baseline the trace critic repairs; ``"full"`` cites every
    retrievable step.
    """
    if builder not in ("minimal", "full"):
        raise ValueError(f"unknown trace builder {builder!r}")
    disabled = set(disabled)
    fired = rules.fire(facts, disabled)
    just = rules.justify(fired, disabled)
    universe = set(retrieved.ids if hasattr(retrieved, "ids") else retrieved)

    trace = []
    for s in just.steps:
        if s.clause_id not in universe:
            continue
        if builder == "minimal" and rules.by_id[s.rule_id].effect == "require":
            continue
        trace.append(s.step())

    decision, downgraded = just.decision, False
    if strict and decision in ("allow", "safe_rewrite"):
        if any(cid not in universe for cid in just.clause_ids):
            decision, downgraded = "block", True
    return DecisionRecord(decision, trace, fired, not enforce_grounding(trace, universe),
                          just.conflicts, downgraded)


def complete_trace(trace: Sequence[TraceStep], retrieved, rules: RuleSet, fired: Iterable[str],
                   disabled: Iterable[str] = ()) -> list[TraceStep]:
    """Insert justification steps that are retrieved but missing from ``trace``.

    Each inserted step lands at its dependency-order position. Clauses outside
    ``retrieved`` are never added, and a complete trace comes back unchanged.
    """
    universe = set(retrieved.ids if hasattr(retrieved, "ids") else retrieved)
    planned = {p.clause_id: p for p in rules.justify(fired, disabled).steps}
    present = {s.clause_id for s in trace}
    out = list(trace)
    for p in planned.values():
        if p.clause_id in present or p.clause_id not in universe:
            continue
        pos = len(out)
        for i, s in enumerate(out):
            other = planned.get(s.clause_id)
            if other is not None and other.order > p.order:
                pos = i
                break
        out.insert(pos, p.step())
        present.add(p.clause_id)
    return out

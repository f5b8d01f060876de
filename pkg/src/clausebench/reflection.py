"""Budgeted reflective loop.

Critics read a finished run record plus inference-side artefacts (canon,
rules, indexes) and propose changes to local knobs only. The loop re-runs the
pipeline with those knobs, keeps the newer record when the gold-free proxy
objective does not drop, and stops on a fixed point, a small gain, the cycle
cap or the time budget. Every cycle is appended to the record's
``reflection`` array.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .budget import TimeBudget
from .nlq import NoParse, TypedIntent, parse_intent, retry_policy
from .pipeline import Knobs, PipelineConfig, World, run_pass
from .retrieval import FusionWeights, RankedList, tokenize
from .rules import RuleSet, complete_trace
from .runlog import RunRecord
from .scenario import Scenario, TraceStep, compile_facts, scenario_from_dict

EXPANSION_TERMS = 3
TRACE_WEIGHT = EVIDENCE_WEIGHT = SQL_WEIGHT = 1.0 / 3.0

__all__ = ["TimeBudget", "Adjustment", "AdjustmentSet", "run_critics", "trace_critic",
           "reflect_loop", "proxy_objective"]


@dataclass(frozen=True)
class Adjustment:
    knob: str  # k | mode | weights | query_extra | template | rule_toggle | trace_amend | rerank_n
    value: object
    critic: str
    reason: str

    def to_dict(self) -> dict:
        value = self.value
        if isinstance(value, TypedIntent):
            value = value.to_dict()
        elif isinstance(value, (tuple, frozenset, set)):
            value = sorted(value) if isinstance(value, (frozenset, set)) else list(value)
        return {"knob": self.knob, "value": value, "critic": self.critic, "reason": self.reason}


@dataclass
class AdjustmentSet:
    changes: list[Adjustment] = field(default_factory=list)

    def __bool__(self) -> bool:
        return bool(self.changes)

    def __len__(self) -> int:
        return len(self.changes)

    def knobs(self) -> set[str]:
        return {c.knob for c in self.changes}

    def apply(self, knobs: Knobs) -> Knobs:
        updates: dict = {}
        for c in self.changes:
            if c.knob == "query_extra":
                updates["query_extra"] = tuple(knobs.query_extra) + tuple(c.value)
            elif c.knob == "rule_toggle":
                updates["disabled"] = frozenset(knobs.disabled) - {c.value}
            elif c.knob == "template":
                updates["template"], updates["sql_rung"] = c.value
            else:
                updates[c.knob] = c.value
        return knobs.apply(**updates)

    def to_list(self) -> list[dict]:
        out = []
        for c in self.changes:
            d = c.to_dict()
            if c.knob == "template":
                intent, rung = c.value
                d["value"] = {"intent": intent.to_dict(), "rung": rung}
            out.append(d)
        return out


def _scenario(record: RunRecord) -> Scenario:
    return scenario_from_dict(record.scenario_input)


def _knobs(record: RunRecord) -> Knobs:
    raw = record.config.get("knobs", {})
    template = None
    if raw.get("template"):
        t = raw["template"]
        template = TypedIntent.make(t["intent"], **t["params"])
    return Knobs(
        k=record.k,
        mode=record.mode,
        weights=FusionWeights(raw.get("w_vec", 0.6), raw.get("w_bm25", 0.4)),
        rerank_n=raw.get("rerank_n", 0),
        query_extra=tuple(raw.get("query_extra", ())),
        template=template,
        sql_rung=raw.get("sql_rung", 0),
        disabled=frozenset(raw.get("disabled", ())),
        trace_amend=bool(raw.get("trace_amend", False)),
    )


def _evidence(record: RunRecord, world: World, disabled: Iterable[str]) -> tuple[list[str], set[str]]:
    """Justification clauses for the fired rules and their canon closure."""
    just = world.rules.justify(record.fired_rules, disabled)
    ids = just.clause_ids
    return ids, world.store.closure(ids)


def proxy_objective(record: RunRecord, world: World) -> float:
    """Gold-free quality signal in [0, 1].

    Mean of: share of justification clauses cited in the trace, share of
    evidence clauses (justification plus canon closure) retrieved, and
    whether SQL support is non-empty.
    """
    disabled = _knobs(record).disabled
    needed, evidence = _evidence(record, world, disabled)
    cited = set(record.trace_ids)
    retrieved = set(record.retrieved_ids)
    trace_fill = len(cited & set(needed)) / len(needed) if needed else 1.0
    evidence_fill = len(evidence & retrieved) / len(evidence) if evidence else 1.0
    sql_ok = 1.0 if record.result_ids else 0.0
    return TRACE_WEIGHT * trace_fill + EVIDENCE_WEIGHT * evidence_fill + SQL_WEIGHT * sql_ok


def trace_critic(trace: Sequence[TraceStep], retrieved: RankedList | Sequence[str], rules: RuleSet,
                 fired: Iterable[str], disabled: Iterable[str] = ()) -> list[TraceStep]:
    """Rule-only completion: add fired-rule steps that are retrieved but missing."""
    return complete_trace(trace, retrieved, rules, fired, disabled)


def _expansion_terms(world: World, clause_id: str, n: int = EXPANSION_TERMS) -> list[str]:
    terms = sorted(set(tokenize(world.store.get(clause_id).text)),
                   key=lambda t: (-world.lex.idf(t), t))
    return terms[:n]


def _retrieval_critic(record, world, knobs) -> list[Adjustment]:
    _, evidence = _evidence(record, world, knobs.disabled)
    missing = sorted(evidence - set(record.retrieved_ids))
    if not missing:
        return []
    extra = [t for cid in missing for t in _expansion_terms(world, cid)]
    extra = [t for t in dict.fromkeys(extra) if t not in knobs.query_extra]
    out = []
    if extra:
        out.append(Adjustment("query_extra", tuple(extra), "retrieval",
                              "expand query toward un-retrieved evidence " + ", ".join(missing)))
    out.append(Adjustment("k", record.k + len(missing), "retrieval",
                          f"{len(missing)} evidence clause(s) outside top-{record.k}"))
    return out


def _sql_critic(record, world, knobs) -> list[Adjustment]:
    if record.sql_status == "ok":
        return []
    prev = parse_intent(record.nlq) if record.nlq else NoParse("")
    if isinstance(prev, NoParse):
        failure = "no_parse"
    elif record.sql_status == "exec_error":
        failure = "exec_error"
    else:
        failure = "empty_support"
    _, evidence = _evidence(record, world, knobs.disabled)
    hint = min((world.store.get(c).domain for c in evidence), default=None)
    ladder = record.config.get("sql_ladder") or []
    rung = max([knobs.sql_rung] + [step["rung"] for step in ladder])
    action = retry_policy(prev, failure, None, rung, hint)
    if action.intent is None:
        return []
    return [Adjustment("template", (action.intent, action.rung), "sql",
                       f"{record.sql_status}: {action.action} ({action.reason})")]


def _rule_critic(record, world, knobs) -> list[Adjustment]:
    if not record.conflicts or not knobs.disabled:
        return []
    base = len(world.rules.justify(record.fired_rules, knobs.disabled).conflicts)
    facts = compile_facts(_scenario(record))
    out = []
    for rule in (world.rules.by_id[r] for r in sorted(knobs.disabled) if r in world.rules.by_id):
        if rule.effect != "precedence" or not rule.holds(facts):
            continue
        trial = knobs.disabled - {rule.rule_id}
        fired = world.rules.fire(facts, trial)
        if len(world.rules.justify(fired, trial).conflicts) < base:
            out.append(Adjustment("rule_toggle", rule.rule_id, "rule",
                                  f"enabling {rule.rule_id} resolves a conflict"))
    return out


def _trace_critic(record, world, knobs) -> list[Adjustment]:
    if knobs.trace_amend:
        return []
    needed, _ = _evidence(record, world, knobs.disabled)
    cited = set(record.trace_ids)
    gaps = [c for c in needed if c not in cited]
    if not gaps:
        return []
    return [Adjustment("trace_amend", True, "trace",
                       "fired-rule clauses missing from trace: " + ", ".join(gaps))]


def run_critics(record: RunRecord, world: World, knobs: Knobs | None = None) -> AdjustmentSet:
    """Proposals from observable signals. An empty set means the record is a fixed point."""
    knobs = knobs or _knobs(record)
    changes: list[Adjustment] = []
    for critic in (_retrieval_critic, _sql_critic, _rule_critic, _trace_critic):
        changes.extend(critic(record, world, knobs))
    return AdjustmentSet(changes)


@dataclass
class LoopResult:
    record: RunRecord
    cycles: list[dict]
    stop_reason: str


def reflect_loop(world: World, scenario: Scenario, budget: TimeBudget, cfg: PipelineConfig | None = None,
                 cycles: int | None = None) -> LoopResult:
    """Pass 0 followed by at most ``min(cycles, budget.b_cycles)`` critic-adjusted passes."""
    cfg = cfg or PipelineConfig()
    max_cycles = budget.b_cycles if cycles is None else min(cycles, budget.b_cycles)
    clock = budget.start()
    knobs = Knobs.from_config(cfg)
    snapshot = cfg.snapshot()
    snapshot["cycles"] = max_cycles

    started = time.perf_counter()
    best = run_pass(world, scenario, knobs, strict=cfg.strict, builder=cfg.builder,
                    clock=clock, config=snapshot)
    best_j = proxy_objective(best, world)
    parts = dict(best.latency_ms)
    log = [{"cycle": 0, "adjustments": [], "objective": best_j, "gain": 0.0, "accepted": True,
            "latency_ms": best.total_latency}]
    stop = "cycles_exhausted" if max_cycles == 0 else ""

    for n in range(1, max_cycles + 1):
        if clock.exhausted():
            stop = "budget_exceeded"
            break
        adjustments = run_critics(best, world, knobs)
        if not adjustments:
            stop = "fixed_point"
            break
        knobs = adjustments.apply(knobs)
        candidate = run_pass(world, scenario, knobs, strict=cfg.strict, builder=cfg.builder,
                             clock=clock, config=snapshot)
        for key, value in candidate.latency_ms.items():
            parts[key] = parts.get(key, 0.0) + value
        j = proxy_objective(candidate, world)
        gain = j - best_j
        accepted = gain >= 0
        log.append({"cycle": n, "adjustments": adjustments.to_list(), "objective": j,
                    "gain": gain, "accepted": accepted, "latency_ms": candidate.total_latency})
        if accepted:
            best, best_j = candidate, j
        if gain < budget.epsilon:
            stop = "small_gain"
            break
    else:
        stop = stop or "cycles_exhausted"
    if stop != "budget_exceeded" and clock.exhausted():
        stop = "budget_exceeded"

    if max_cycles:
        wall = (time.perf_counter() - started) * 1000.0
        parts["reflect"] = max(wall - sum(entry["latency_ms"] for entry in log), 0.0)
        parts["total"] = parts["retrieve"] + parts["nlq"] + parts["reason"] + parts["reflect"]
        best.latency_ms = parts
    log[-1]["stop"] = stop
    best.reflection = log
    best.__post_init__()
    return LoopResult(best, log, stop)

"""One inference pass: retrieve, query the store, decide, log.

Nothing here accepts or reads a gold package. The only citation universe
handed to the rule engine is this pass's own ranked list.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

from .budget import BudgetClock, TimeBudget
from .canon import CanonManifest, CanonStore, load_canon, manifest
from .errors import GroundingError
from .nlq import (NoParse, TypedIntent, bind_and_execute, evidence_intent, parse_intent,
                  render_nlq, result_hash, retry_policy)
from .retrieval import (DEFAULT_K, FusionWeights, LexIndex, VecIndex, build_lexical_index,
                        build_vector_index, rerank_topN, search)
from .rules import RuleSet, complete_trace, enforce_grounding, evaluate, load_rules
from .runlog import RunRecord
from .scenario import Scenario, compile_facts, retrieval_query, scenario_to_dict

WORLDS = ("seed", "bench")


@dataclass
class World:
    store: CanonStore
    rules: RuleSet
    lex: LexIndex
    vec: VecIndex
    manifest: CanonManifest


def build_world(canon_path: str | Path, rules_path: str | Path) -> World:
    store = load_canon(canon_path)
    rules = load_rules(rules_path, store)
    lex = build_lexical_index(store)
    vec = build_vector_index(store)
    return World(store, rules, lex, vec, manifest(store, rules, [lex, vec]))


def packaged_path(world: str, *parts: str) -> Path:
    if world not in WORLDS:
        raise ValueError(f"unknown world {world!r}; expected one of {WORLDS}")
    return Path(str(resources.files("clausebench") / "data" / world)).joinpath(*parts)


def packaged_world(world: str = "seed") -> World:
    return build_world(packaged_path(world, "canon.yaml"), packaged_path(world, "rules.yaml"))


@dataclass
class PipelineConfig:
    canon: str | None = None
    rules: str | None = None
    scenarios_dir: str | None = None
    gold_dir: str | None = None
    world: str = "seed"
    mode: str = "bm25"
    k: int = DEFAULT_K
    weights: FusionWeights = field(default_factory=FusionWeights)
    budget: TimeBudget = field(default_factory=TimeBudget)
    rerank_n: int = 0
    strict: bool = False
    builder: str = "minimal"
    reflect: int = 0
    out_dir: str = "out"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.mode not in ("bm25", "hybrid"):
            raise ValueError(f"mode must be bm25 or hybrid, got {self.mode!r}")
        if self.rerank_n < 0:
            raise ValueError("rerank_n must be >= 0")
        if self.reflect < 0:
            raise ValueError("reflect must be >= 0")

    def snapshot(self) -> dict:
        return {
            "mode": self.mode,
            "k": self.k,
            "w_vec": self.weights.w_vec,
            "w_bm25": self.weights.w_bm25,
            "rerank_n": self.rerank_n,
            "strict": self.strict,
            "builder": self.builder,
            "b_time_ms": self.budget.b_time_ms,
            "b_cycles": self.budget.b_cycles,
            "epsilon": self.budget.epsilon,
            "cycles": min(self.reflect, self.budget.b_cycles),
        }


@dataclass(frozen=True)
class Knobs:
    """Local settings a critic may change between passes."""

    k: int = DEFAULT_K
    mode: str = "bm25"
    weights: FusionWeights = FusionWeights()
    rerank_n: int = 0
    query_extra: tuple[str, ...] = ()
    template: TypedIntent | None = None
    sql_rung: int = 0
    disabled: frozenset = frozenset()
    trace_amend: bool = False

    @classmethod
    def from_config(cls, cfg: PipelineConfig) -> "Knobs":
        return cls(k=cfg.k, mode=cfg.mode, weights=cfg.weights, rerank_n=cfg.rerank_n)

    def apply(self, **changes) -> "Knobs":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "mode": self.mode,
            "w_vec": self.weights.w_vec,
            "w_bm25": self.weights.w_bm25,
            "rerank_n": self.rerank_n,
            "query_extra": list(self.query_extra),
            "template": self.template.to_dict() if self.template else None,
            "sql_rung": self.sql_rung,
            "disabled": sorted(self.disabled),
            "trace_amend": self.trace_amend,
        }


def _ms(start: float) -> float:
    return (time.perf_counter() - start) * 1000.0


def _run_sql(world: World, intent, knobs: Knobs, clock: BudgetClock | None, domain_hint):
    """Execute the intent, walking the retry ladder on failure."""
    rung = knobs.sql_rung
    ladder = []
    current = intent
    while True:
        if isinstance(current, TypedIntent):
            query, rs = bind_and_execute(current, world.store)
            if rs.status == "ok":
                return current, query, rs, "ok", ladder
            failure = rs.status
        else:
            query, rs, failure = None, None, "no_parse"
        action = retry_policy(current if current is not None else NoParse(""), failure, clock,
                              rung, domain_hint)
        ladder.append(action.to_dict())
        if action.intent is None:
            status = "degraded" if action.action == "degraded" else "lexical_only"
            return current, query, rs, status, ladder
        current, rung = action.intent, action.rung


def run_pass(world: World, scenario: Scenario, knobs: Knobs, *, strict: bool = False,
             builder: str = "minimal", clock: BudgetClock | None = None,
             config: dict | None = None) -> RunRecord:
    t0 = time.perf_counter()
    query = retrieval_query(scenario)
    if knobs.query_extra:
        query = query + " " + " ".join(knobs.query_extra)
    ranked = search(world.lex, world.vec, query, knobs.mode, knobs.k, knobs.weights)
    if knobs.rerank_n:
        ranked = rerank_topN(ranked, world.vec, query, knobs.rerank_n)
    t_retrieve = _ms(t0)

    t1 = time.perf_counter()
    facts = compile_facts(scenario)
    fired = world.rules.fire(facts, knobs.disabled)
    evidence = world.rules.justify(fired, knobs.disabled).clause_ids
    if knobs.template is not None:
        intent = knobs.template
        nlq_text = render_nlq(intent)
    else:
        planned = evidence_intent(evidence, world.store)
        nlq_text = render_nlq(planned) if isinstance(planned, TypedIntent) else ""
        intent = parse_intent(nlq_text)
    hint = None
    if evidence:
        hint = world.store.get(evidence[0]).domain
    final_intent, sql_query, rs, sql_status, ladder = _run_sql(world, intent, knobs, clock, hint)
    t_nlq = _ms(t1)

    t2 = time.perf_counter()
    decision = evaluate(facts, ranked, world.rules, strict=strict, disabled=knobs.disabled,
                        builder=builder)
    trace = decision.trace
    if knobs.trace_amend:
        trace = complete_trace(trace, ranked, world.rules, fired, knobs.disabled)
    violations = enforce_grounding(trace, ranked)
    t_reason = _ms(t2)
    if violations:
        raise GroundingError(violations)

    ids = list(rs.ids) if rs is not None else []
    latency = {"retrieve": t_retrieve, "nlq": t_nlq, "reason": t_reason}
    latency["total"] = t_retrieve + t_nlq + t_reason
    cfg = dict(config or {})
    cfg["knobs"] = knobs.to_dict()
    if ladder:
        cfg["sql_ladder"] = ladder
    return RunRecord(
        scenario_id=scenario.scenario_id,
        scenario_input=dict(scenario.raw) or scenario_to_dict(scenario),
        decision=decision.decision,
        trace=[t.to_dict() for t in trace],
        retrieved=[{"clause_id": e.clause_id, "rank": e.rank, "score": e.score} for e in ranked.entries],
        mode=ranked.mode,
        k=knobs.k,
        query_text=query,
        nlq=render_nlq(final_intent) if isinstance(final_intent, TypedIntent) else nlq_text,
        sql=sql_query.rendered_text if sql_query is not None else None,
        result_ids=ids,
        result_hash=result_hash(ids),
        sql_status=sql_status,
        latency_ms=latency,
        stamps=world.manifest.stamps(),
        fired_rules=list(fired),
        conflicts=list(decision.conflicts),
        grounding_ok=True,
        config=cfg,
    )

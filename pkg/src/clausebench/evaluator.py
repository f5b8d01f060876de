"""Scoring against gold packages. This is the only module that reads them at run time.

Metric conventions:

* trace order ``t_o = (tau + 1) / 2`` with Kendall tau over clauses common to
  both traces; with fewer than two common clauses ``t_o`` is 1 when both
  traces are empty or when completeness and correctness are both positive,
  else 0.
* macro-F1 runs over the four decision classes; a class absent from both gold
  and predictions scores F1 = 1.
* nDCG uses gain ``2**grade - 1`` and a log2 discount; the ideal ranking
  sorts qrels by grade desc, then clause id.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

from .canon import CanonStore
from .gold import GoldPackage
from .nlq import ResultSet, resultset_equivalent
from .rules import DECISIONS, RuleSet
from .runlog import RunRecord

log = logging.getLogger(__name__)


def _ids(items) -> list[str]:
    """Clause ids from TraceSteps, trace dicts, RankedLists or plain strings; first occurrence wins."""
    if hasattr(items, "ids"):
        items = items.ids
    out = []
    for it in items:
        if isinstance(it, str):
            cid = it
        elif isinstance(it, Mapping):
            cid = it["clause_id"]
        else:
            cid = it.clause_id
        out.append(cid)
    return list(dict.fromkeys(out))


def count_inversions(seq: Sequence[int]) -> int:
    """Pairs i < j with seq[i] > seq[j], by merge sort."""
    def sort(xs):
        if len(xs) <= 1:
            return xs, 0
        mid = len(xs) // 2
        left, a = sort(xs[:mid])
        right, b = sort(xs[mid:])
        merged, inv, i, j = [], a + b, 0, 0
        while i < len(left) and j < len(right):
            if left[i] <= right[j]:
                merged.append(left[i])
                i += 1
            else:
                merged.append(right[j])
                inv += len(left) - i
                j += 1
        merged.extend(left[i:])
        merged.extend(right[j:])
        return merged, inv
    return sort(list(seq))[1]


def kendall_tau(a: Sequence[str], b: Sequence[str]) -> float | None:
    """Kendall tau between two orderings restricted to their common items; None below two."""
    pos_b = {x: i for i, x in enumerate(b)}
    common = [x for x in a if x in pos_b]
    n = len(common)
    if n < 2:
        return None
    pairs = n * (n - 1) // 2
    discordant = count_inversions([pos_b[x] for x in common])
    return (pairs - 2 * discordant) / pairs


@dataclass(frozen=True)
class TraceScores:
    t_c: float
    t_k: float
    t_o: float

    @property
    def t_mean(self) -> float:
        return (self.t_c + self.t_k + self.t_o) / 3.0


def trace_scores(pred, gold_witness) -> TraceScores:
    p, g = _ids(pred), _ids(gold_witness)
    hits = len(set(p) & set(g))
    t_c = hits / len(g) if g else (1.0 if not p else 0.0)
    if not p:
        t_k = 1.0 if not g else 0.0
    else:
        t_k = hits / len(p)
    tau = kendall_tau(p, g)
    if tau is None:
        t_o = 1.0 if (t_c * t_k > 0 or (not p and not g)) else 0.0
    else:
        t_o = (tau + 1.0) / 2.0
    return TraceScores(t_c, t_k, t_o)


def role_agreement(pred, gold_witness) -> float:
    """Share of common clauses cited with the gold role (reported, not folded into t_k)."""
    def roles(items):
        out = {}
        for it in items:
            cid, role = (it["clause_id"], it["role"]) if isinstance(it, Mapping) else (it.clause_id, it.role)
            out.setdefault(cid, role)
        return out
    p, g = roles(pred), roles(gold_witness)
    common = set(p) & set(g)
    if not common:
        return 1.0 if not p and not g else 0.0
    return sum(p[c] == g[c] for c in common) / len(common)


@dataclass
class DecisionMetrics:
    accuracy: float
    macro_f1: float
    per_class_f1: dict[str, float]
    confusion: dict[str, dict[str, int]]  # gold -> predicted -> count


def decision_metrics(preds: Sequence[str], golds: Sequence[str],
                     absent_class_f1: float = 1.0) -> DecisionMetrics:
    if len(preds) != len(golds):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(golds)} gold labels")
    if not golds:
        raise ValueError("no decisions to score")
    confusion = {g: {p: 0 for p in DECISIONS} for g in DECISIONS}
    for p, g in zip(preds, golds):
        if p not in DECISIONS or g not in DECISIONS:
            raise ValueError(f"unknown decision label in ({p!r}, {g!r})")
        confusion[g][p] += 1
    per_class = {}
    for c in DECISIONS:
        tp = confusion[c][c]
        fp = sum(confusion[g][c] for g in DECISIONS) - tp
        fn = sum(confusion[c].values()) - tp
        if tp + fp + fn == 0:
            per_class[c] = absent_class_f1
        else:
            per_class[c] = 2 * tp / (2 * tp + fp + fn)
    accuracy = sum(p == g for p, g in zip(preds, golds)) / len(golds)
    return DecisionMetrics(accuracy, sum(per_class.values()) / len(DECISIONS), per_class, confusion)


def _dcg(grades: Sequence[int]) -> float:
    return sum((2 ** g - 1) / math.log2(i + 2) for i, g in enumerate(grades))


def retrieval_metrics(ranked, qrels: Mapping[str, int], k: int) -> tuple[float, float, float]:
    """(recall@k, MRR, nDCG@k) of a ranked id list against graded qrels."""
    if not qrels:
        raise ValueError("qrels must be non-empty")
    if k < 1:
        raise ValueError("k must be >= 1")
    top = _ids(ranked)[:k]
    relevant = {c for c, g in qrels.items() if g > 0}
    recall = len(relevant & set(top)) / len(relevant) if relevant else 0.0
    mrr = next((1.0 / (i + 1) for i, c in enumerate(top) if c in relevant), 0.0)
    ideal = sorted(qrels.items(), key=lambda p: (-p[1], p[0]))[:k]
    idcg = _dcg([g for _, g in ideal])
    ndcg = _dcg([qrels.get(c, 0) for c in top]) / idcg if idcg > 0 else 0.0
    return recall, mrr, ndcg


# Which decisions a clause's rule effect can honestly support.
_EFFECT_COMPAT = {
    "require": set(DECISIONS),
    "except": set(DECISIONS),
    "precedence": set(DECISIONS),
    "escalate_trigger": {"escalate"},
}


def clause_supports(clause_id: str, decision: str, rules: RuleSet | None) -> bool:
    """Rule-file lookup: does any rule grounded in ``clause_id`` fit ``decision``?"""
    if rules is None:
        return True
    for r in rules.rules_for_clause(clause_id):
        if r.effect == "violate":
            ok = {"safe_rewrite", "block", "escalate"} if r.remedy else {"block", "escalate"}
        else:
            ok = _EFFECT_COMPAT[r.effect]
        if decision in ok:
            return True
    return False


def hallucination_rates(pred, gold_closure: Iterable[str], retrieved, decision: str,
                        rules: RuleSet | None = None) -> tuple[float, float]:
    p = _ids(pred)
    if not p:
        return 0.0, 0.0
    closure = set(gold_closure)
    universe = set(_ids(retrieved))
    extra = [c for c in p if c not in closure]
    unexcused = [c for c in extra if c not in universe or not clause_supports(c, decision, rules)]
    return len(extra) / len(p), len(unexcused) / len(p)


def coverage(pred, retrieved, gold_closure: Iterable[str]) -> float:
    closure = set(gold_closure)
    if not closure:
        raise ValueError("gold closure is empty; the gold package is invalid")
    seen = set(_ids(pred)) | set(_ids(retrieved))
    return len(closure & seen) / len(closure)


def sql_accuracy(pred_ids: Sequence[str], gold_result: ResultSet | None,
                 gold_closure: Iterable[str]) -> float:
    """Result-set equivalence, with no credit for an empty answer when evidence exists."""
    if gold_result is None:
        return 1.0 if not pred_ids else 0.0
    pred = ResultSet(tuple(pred_ids))
    if not pred.ids and set(gold_closure):
        return 0.0
    return 1.0 if resultset_equivalent(pred, gold_result) else 0.0


@dataclass(frozen=True)
class SdiWeights:
    w_d: float = 0.5
    w_t: float = 0.3
    w_r: float = 0.2
    lam: float = 0.3

    def __post_init__(self):
        if min(self.w_d, self.w_t, self.w_r) < 0 or abs(self.w_d + self.w_t + self.w_r - 1.0) > 1e-9:
            raise ValueError("SDI weights must be non-negative and sum to 1")


def sdi(acc: float, trace: TraceScores | float, ndcg: float, w: SdiWeights = SdiWeights()) -> float:
    t = trace.t_mean if isinstance(trace, TraceScores) else float(trace)
    return w.w_d * (1.0 - acc) + w.w_t * (1.0 - t) + w.w_r * (1.0 - ndcg)


def sdi_r(sdi_value: float, latency: float, baseline: float, lam: float = 0.3) -> float:
    """Latency-discounted SDI, ``SDI * (1 - lam * rho)`` with ``rho = (L - L_base) / L_base``."""
    if baseline <= 0:
        raise ValueError(f"baseline latency must be > 0, got {baseline}")
    rho = (latency - baseline) / baseline
    value = sdi_value * (1.0 - lam * rho)
    if value < 0:
        log.warning("SDI-R clamped to 0 (sdi=%.6f, rho=%.6f, lambda=%.3f)", sdi_value, rho, lam)
        return 0.0
    return value


def q_score(t_c: float, cov: float) -> float:
    return (t_c + cov) / 2.0


@dataclass
class MetricsRow:
    scenario_id: str
    decision: str
    gold_decision: str
    acc: float
    trace: TraceScores
    role_agreement: float
    recall_at_k: float
    mrr: float
    ndcg_at_k: float
    sql_acc: float
    coverage: float
    hallu_strict: float
    hallu_liberal: float
    q_score: float
    latency_ms: float
    latency_parts: dict = field(default_factory=dict)
    sdi: float = 0.0
    sdi_r: float | None = None


@dataclass
class SuiteReport:
    rows: list[MetricsRow]
    summary: dict

    def row(self, scenario_id: str) -> MetricsRow:
        return next(r for r in self.rows if r.scenario_id == scenario_id)


def score_record(record: RunRecord, gold: GoldPackage, store: CanonStore, rules: RuleSet | None,
                 weights: SdiWeights = SdiWeights(), baseline_latency: float | None = None) -> MetricsRow:
    ts = trace_scores(record.trace, gold.witness_trace)
    retrieved = record.retrieved_ids
    qrels = gold.qrels or {c: 1 for c in gold.clause_closure}
    recall, mrr, ndcg = retrieval_metrics(retrieved, qrels, max(record.k, 1))
    strict, liberal = hallucination_rates(record.trace, gold.clause_closure, retrieved,
                                          record.decision, rules)
    cov = coverage(record.trace, retrieved, gold.clause_closure)
    acc = 1.0 if record.decision == gold.decision else 0.0
    value = sdi(acc, ts, ndcg, weights)
    parts = {k: float(record.latency_ms.get(k, 0.0)) for k in ("retrieve", "nlq", "reason")}
    return MetricsRow(
        scenario_id=record.scenario_id,
        decision=record.decision,
        gold_decision=gold.decision,
        acc=acc,
        trace=ts,
        role_agreement=role_agreement(record.trace, gold.witness_trace),
        recall_at_k=recall,
        mrr=mrr,
        ndcg_at_k=ndcg,
        sql_acc=sql_accuracy(record.result_ids, gold.expected_result(store), gold.clause_closure),
        coverage=cov,
        hallu_strict=strict,
        hallu_liberal=liberal,
        q_score=q_score(ts.t_c, cov),
        latency_ms=record.total_latency,
        latency_parts=parts,
        sdi=value,
        sdi_r=None if baseline_latency is None else sdi_r(value, record.total_latency,
                                                          baseline_latency, weights.lam),
    )


def _mean(xs: Sequence[float]) -> float:
    return sum(xs) / len(xs)


def score_suite(records: Sequence[RunRecord], golds: Mapping[str, GoldPackage] | Sequence[GoldPackage],
                store: CanonStore, rules: RuleSet | None = None,
                baseline: Sequence[RunRecord] | None = None,
                weights: SdiWeights = SdiWeights()) -> SuiteReport:
    """Score every record. Gold is keyed by scenario id; a record without gold is an error."""
    if not records:
        raise ValueError("no run records to score")
    if not isinstance(golds, Mapping):
        golds = {g.scenario_id: g for g in golds}
    seen: set[str] = set()
    for r in records:
        if r.scenario_id in seen:
            raise ValueError(f"duplicated scenario id {r.scenario_id!r} in records")
        seen.add(r.scenario_id)
        if r.scenario_id not in golds:
            raise KeyError(f"no gold package for scenario {r.scenario_id!r}")
    base = {b.scenario_id: b for b in baseline} if baseline else {}
    rows = []
    for r in records:
        b = base.get(r.scenario_id)
        rows.append(score_record(r, golds[r.scenario_id], store, rules, weights,
                                 b.total_latency if b is not None and b.total_latency > 0 else None))
    dm = decision_metrics([r.decision for r in rows], [r.gold_decision for r in rows])
    summary = {
        "n": len(rows),
        "accuracy": dm.accuracy,
        "macro_f1": dm.macro_f1,
        "per_class_f1": dm.per_class_f1,
        "confusion": dm.confusion,
        "t_c": _mean([r.trace.t_c for r in rows]),
        "t_k": _mean([r.trace.t_k for r in rows]),
        "t_o": _mean([r.trace.t_o for r in rows]),
        "t_mean": _mean([r.trace.t_mean for r in rows]),
        "role_agreement": _mean([r.role_agreement for r in rows]),
        "recall_at_k": _mean([r.recall_at_k for r in rows]),
        "mrr": _mean([r.mrr for r in rows]),
        "ndcg_at_k": _mean([r.ndcg_at_k for r in rows]),
        "sql_acc": _mean([r.sql_acc for r in rows]),
        "coverage": _mean([r.coverage for r in rows]),
        "hallu_strict": _mean([r.hallu_strict for r in rows]),
        "hallu_liberal": _mean([r.hallu_liberal for r in rows]),
        "q_score": _mean([r.q_score for r in rows]),
        "latency_ms_sum": sum(r.latency_ms for r in rows),
        "latency_ms_mean": _mean([r.latency_ms for r in rows]),
        "latency_parts_sum": {k: sum(r.latency_parts.get(k, 0.0) for r in rows)
                              for k in ("retrieve", "nlq", "reason")},
        "sdi": _mean([r.sdi for r in rows]),
        "sdi_r": None,
        "delta_t_c": None,
    }
    with_r = [r.sdi_r for r in rows if r.sdi_r is not None]
    if with_r:
        summary["sdi_r"] = _mean(with_r)
    if base:
        matched = [trace_scores(base[r.scenario_id].trace, golds[r.scenario_id].witness_trace).t_c
                   for r in rows if r.scenario_id in base]
        own = [r.trace.t_c for r in rows if r.scenario_id in base]
        if matched:
            summary["delta_t_c"] = _mean(own) - _mean(matched)
    return SuiteReport(rows, summary)


CSV_COLUMNS = (
    "scenario_id", "decision", "gold_decision", "acc", "macro_f1", "t_c", "t_k", "t_o", "t_mean",
    "role_agreement", "recall_at_k", "mrr", "ndcg_at_k", "sql_acc", "coverage", "hallu_strict",
    "hallu_liberal", "q_score", "latency_ms", "latency_retrieve", "latency_nlq", "latency_reason",
    "sdi", "sdi_r",
)
SUMMARY_ID = "ALL"


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def csv_rows(report: SuiteReport) -> list[list[str]]:
    out = []
    for r in report.rows:
        values = {
            "scenario_id": r.scenario_id, "decision": r.decision, "gold_decision": r.gold_decision,
            "acc": r.acc, "macro_f1": None, "t_c": r.trace.t_c, "t_k": r.trace.t_k, "t_o": r.trace.t_o,
            "t_mean": r.trace.t_mean, "role_agreement": r.role_agreement,
            "recall_at_k": r.recall_at_k, "mrr": r.mrr, "ndcg_at_k": r.ndcg_at_k,
            "sql_acc": r.sql_acc, "coverage": r.coverage, "hallu_strict": r.hallu_strict,
            "hallu_liberal": r.hallu_liberal, "q_score": r.q_score, "latency_ms": r.latency_ms,
            "latency_retrieve": r.latency_parts.get("retrieve"),
            "latency_nlq": r.latency_parts.get("nlq"),
            "latency_reason": r.latency_parts.get("reason"), "sdi": r.sdi, "sdi_r": r.sdi_r,
        }
        out.append([_fmt(values[c]) for c in CSV_COLUMNS])
    s = report.summary
    summary = {c: s.get(c) for c in CSV_COLUMNS}
    summary.update({
        "scenario_id": SUMMARY_ID, "decision": None, "gold_decision": None, "acc": s["accuracy"],
        "latency_ms": s["latency_ms_mean"],
        "latency_retrieve": s["latency_parts_sum"]["retrieve"] / s["n"],
        "latency_nlq": s["latency_parts_sum"]["nlq"] / s["n"],
        "latency_reason": s["latency_parts_sum"]["reason"] / s["n"],
    })
    out.append([_fmt(summary[c]) for c in CSV_COLUMNS])
    return out


def row_dict(row: MetricsRow) -> dict:
    d = asdict(row)
    d["trace"]["t_mean"] = row.trace.t_mean
    return d

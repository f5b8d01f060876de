"""End-to-end acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line (also repeated in the terminal
summary) and then asserts, so a failing criterion fails the run.
"""

import itertools
import random
import shutil
import statistics
import subprocess
import sys
import time
from collections import Counter

from acceptance_log import record
import oracles

from clausebench import cli
from clausebench.evaluator import (decision_metrics, hallucination_rates, kendall_tau, retrieval_metrics,
                                   score_suite, sdi, sdi_r, TraceScores)
from clausebench.gold import derive_gold
from clausebench.pipeline import Knobs, PipelineConfig, packaged_path, run_pass
from clausebench.reflection import reflect_loop
from clausebench.retrieval import LexIndex, rank_histogram, self_retrieval_check
from clausebench.rules import DECISIONS
from clausebench.runlog import append_record, read_log
from clausebench.suite_gen import BENCH_DISTRIBUTION, SuiteSpec, generate_suite

SEED = "CASL-EMAIL-UNSUB-003"
TOL = 1e-9


def _score(world, records, golds, baseline=None):
    return score_suite(records, golds, world.store, world.rules, baseline=baseline)


def _looks_0667(x):
    return abs(x - 2 / 3) <= TOL and round(x, 3) == 0.667


def test_criterion_1_worked_example(seed_world, seed_scenario, seed_gold, tmp_path, capsys):
    start = time.perf_counter()
    code = cli.main(["run", SEED, "--mode", "bm25", "--k", "10", "--out", str(tmp_path)])
    elapsed = time.perf_counter() - start
    out = capsys.readouterr().out
    rec = read_log(tmp_path / "log.jsonl")[-1]
    row = _score(seed_world, [rec], [seed_gold]).rows[0]
    ok = (code == 0 and "decision: safe-rewrite" in out and len(rec.trace) == 2
          and set(rec.trace_ids) <= set(rec.retrieved_ids) and row.hallu_strict == 0.0
          and row.sql_acc == 1.0 and _looks_0667(row.trace.t_c) and _looks_0667(row.coverage)
          and elapsed < 1.0)
    record(1, ok, f"decision={rec.decision} steps={len(rec.trace)} TrC={row.trace.t_c:.6f} "
                  f"Cov={row.coverage:.6f} Hallu={row.hallu_strict:.3f} SQL={row.sql_acc:.3f} "
                  f"runtime={elapsed * 1000:.1f}ms")
    assert ok


def _wall(fn, reps):
    times = []
    for _ in range(reps):
        t = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t) * 1000.0)
    return times


def test_criterion_2_reflection_closes_trace(seed_world, seed_scenario, seed_gold):
    cfg = PipelineConfig()
    pre = reflect_loop(seed_world, seed_scenario, cfg.budget, cfg, cycles=0).record
    post = reflect_loop(seed_world, seed_scenario, cfg.budget, cfg, cycles=1).record
    report = _score(seed_world, [post], [seed_gold], baseline=[pre])
    row = report.rows[0]
    base_ms = _wall(lambda: reflect_loop(seed_world, seed_scenario, cfg.budget, cfg, cycles=0), 41)
    refl_ms = _wall(lambda: reflect_loop(seed_world, seed_scenario, cfg.budget, cfg, cycles=1), 41)
    added = statistics.median(refl_ms) - statistics.median(base_ms)
    delta = report.summary["delta_t_c"]
    ok = (row.trace.t_c == 1.0 and row.coverage == 1.0 and row.hallu_strict == 0.0
          and post.decision == pre.decision and added <= 5.0 and abs(delta - 1 / 3) <= TOL)
    record(2, ok, f"TrC={row.trace.t_c:.3f} Cov={row.coverage:.3f} Hallu={row.hallu_strict:.3f} "
                  f"decision {pre.decision}->{post.decision} added={added:+.3f}ms dT={delta:+.3f}")
    assert ok


def test_criterion_3_ablation_shape(seed_world, seed_scenario, seed_gold):
    rows, lat = {}, {"bm25": [], "hybrid": []}
    for mode in ("bm25", "hybrid"):
        rec = run_pass(seed_world, seed_scenario, Knobs(mode=mode, k=10))
        rows[mode] = _score(seed_world, [rec], [seed_gold]).rows[0]
    for _ in range(201):
        for mode in ("bm25", "hybrid"):
            lat[mode].append(run_pass(seed_world, seed_scenario, Knobs(mode=mode, k=10)).total_latency)
    expected = {"t_c": 2 / 3, "coverage": 2 / 3, "hallu": 0.0, "sql": 1.0, "q": 2 / 3}

    def quality(r):
        return {"t_c": r.trace.t_c, "coverage": r.coverage, "hallu": r.hallu_strict, "sql": r.sql_acc,
                "q": r.q_score}

    qb, qh = quality(rows["bm25"]), quality(rows["hybrid"])
    matches = all(abs(qb[m] - v) <= TOL and abs(qh[m] - v) <= TOL for m, v in expected.items())
    mb, mh = statistics.median(lat["bm25"]), statistics.median(lat["hybrid"])
    ok = matches and qb == qh and mh > mb
    record(3, ok, f"Q bm25={qb['q']:.3f} hybrid={qh['q']:.3f} identical={qb == qh} "
                  f"median latency bm25={mb:.3f}ms hybrid={mh:.3f}ms")
    assert ok


def test_criterion_4_suite_saturation(bench_world):
    scenarios, golds = generate_suite(SuiteSpec(16, BENCH_DISTRIBUTION, seed=0), bench_world.store,
                                      bench_world.rules)
    cfg = PipelineConfig(world="bench")
    pre = [reflect_loop(bench_world, s, cfg.budget, cfg, cycles=0).record for s in scenarios]
    post = [reflect_loop(bench_world, s, cfg.budget, cfg, cycles=2).record for s in scenarios]
    before = _score(bench_world, pre, golds).summary
    after = _score(bench_world, post, golds, baseline=pre).summary
    labels = Counter(g.decision for g in golds)
    diagonal = all(after["confusion"][g][p] == (labels[g] if g == p else 0)
                   for g in DECISIONS for p in DECISIONS)
    added = statistics.median(b.total_latency - a.total_latency for a, b in zip(pre, post))
    ok = (labels == Counter(BENCH_DISTRIBUTION) and after["accuracy"] == 1.0 and after["macro_f1"] == 1.0
          and diagonal and before["t_c"] < 1.0 and after["t_c"] == 1.0 and after["coverage"] == 1.0
          and after["hallu_strict"] == 0.0 and after["delta_t_c"] > 0 and added <= 2.0)
    record(4, ok, f"labels={dict(sorted(labels.items()))} Acc={after['accuracy']:.3f} "
                  f"M-F1={after['macro_f1']:.3f} TrC {before['t_c']:.3f}->{after['t_c']:.3f} "
                  f"PolCov={after['coverage']:.3f} Hallu={after['hallu_strict']:.3f} "
                  f"median added={added:+.3f}ms")
    assert ok


def test_criterion_5_metric_oracles():
    rng = random.Random(5)
    start = time.perf_counter()
    counts = Counter()
    failures = []

    def check(name, got, want):
        counts[name] += 1
        if (got is None) != (want is None) or (got is not None and abs(got - want) > TOL):
            failures.append((name, got, want))

    # exhaustive small inputs
    for n in range(2, 9):
        base = [str(i) for i in range(n)]
        for perm in itertools.permutations(base):
            check("kendall", kendall_tau(list(perm), base), oracles.kendall_tau_pairs(list(perm), base))
    ids = [f"D{i}" for i in range(6)]
    for grades in itertools.product(range(3), repeat=4):
        qrels = dict(zip(ids[:4], grades))
        for size in range(0, 5):
            for ranked in itertools.permutations(ids[:5], size):
                for k in (1, 3, 5):
                    recall, mrr, ndcg = retrieval_metrics(list(ranked), qrels, k)
                    check("recall", recall, oracles.recall(list(ranked), qrels, k))
                    check("mrr", mrr, oracles.mrr(list(ranked), qrels, k))
                    check("ndcg", ndcg, oracles.ndcg(list(ranked), qrels, k))
    for n in range(1, 4):
        for preds in itertools.product(DECISIONS, repeat=n):
            for golds in itertools.product(DECISIONS, repeat=n):
                check("macro_f1", decision_metrics(list(preds), list(golds)).macro_f1,
                      oracles.macro_f1(preds, golds, DECISIONS))

    # randomized cases
    vocab = ["unsubscribe", "sender", "consent", "email", "stop", "fee", "x", "y"]
    for _ in range(1000):
        a = rng.sample(range(10), rng.randint(0, 8))
        b = rng.sample(range(10), rng.randint(0, 8))
        check("kendall", kendall_tau([str(x) for x in a], [str(x) for x in b]),
              oracles.kendall_tau_pairs([str(x) for x in a], [str(x) for x in b]))
        ranked = rng.sample([f"D{i}" for i in range(8)], rng.randint(0, 8))
        qrels = {f"D{i}": rng.randint(0, 3) for i in rng.sample(range(8), rng.randint(1, 6))}
        k = rng.randint(1, 8)
        recall, mrr, ndcg = retrieval_metrics(ranked, qrels, k)
        check("recall", recall, oracles.recall(ranked, qrels, k))
        check("mrr", mrr, oracles.mrr(ranked, qrels, k))
        check("ndcg", ndcg, oracles.ndcg(ranked, qrels, k))
        golds = [rng.choice(DECISIONS) for _ in range(rng.randint(1, 16))]
        preds = [rng.choice(DECISIONS) for _ in golds]
        check("macro_f1", decision_metrics(preds, golds).macro_f1, oracles.macro_f1(preds, golds, DECISIONS))
        docs = [(f"C-{i}", " ".join(rng.choices(vocab, k=rng.randint(0, 10)))) for i in range(rng.randint(1, 8))]
        query = " ".join(rng.choices(vocab + ["zzz"], k=rng.randint(0, 5)))
        got, want = LexIndex(docs).scores(query), oracles.bm25(docs, query)
        if set(got) != set(want):
            failures.append(("bm25", sorted(got), sorted(want)))
        for d in want:
            check("bm25", got[d], want[d])
    elapsed = time.perf_counter() - start
    enough = all(counts[m] >= 1000 for m in ("kendall", "ndcg", "mrr", "recall", "macro_f1", "bm25"))
    ok = not failures and enough and elapsed < 60
    record(5, ok, " ".join(f"{m}={counts[m]}" for m in sorted(counts)) +
           f" mismatches={len(failures)} time={elapsed:.1f}s")
    assert ok, failures[:5]


def test_criterion_6_sdi_formulas():
    zero = sdi(1.0, TraceScores(1, 1, 1), 1.0)
    one = sdi(0.0, TraceScores(0, 0, 0), 0.0)
    same = sdi_r(0.42, 12.5, 12.5)
    rho = (1 - 0.85) / 0.3
    anchor = sdi_r(0.755, 10.0 * (1 + rho), 10.0, lam=0.3)
    ok = (abs(zero) <= TOL and abs(one - 1) <= TOL and abs(same - 0.42) <= TOL
          and abs(anchor - 0.64175) <= 5e-4 and abs(anchor - 0.642) <= 5e-4)
    record(6, ok, f"SDI(1,1,1)={zero:.3f} SDI(0,0,0)={one:.3f} SDI-R(rho=0)={same:.3f} "
                  f"anchor={anchor:.5f} (rho={rho:.4f})")
    assert ok


def test_criterion_7_invariants(bench_world, tmp_path):
    rng = random.Random(77)
    from test_pipeline import _random_scenario
    log = tmp_path / "fuzz.jsonl"
    liberal_ok = True
    for n in range(1000):
        s = _random_scenario(rng, n)
        rec = run_pass(bench_world, s, Knobs(k=rng.randint(1, 16), mode=rng.choice(["bm25", "hybrid"]),
                                             trace_amend=rng.random() < 0.5),
                       builder=rng.choice(["minimal", "full"]), strict=rng.random() < 0.3)
        append_record(log, rec)
        try:
            gold = derive_gold(s, bench_world.store, bench_world.rules)
        except Exception:
            continue
        strict, liberal = hallucination_rates(rec.trace, gold.clause_closure, rec.retrieved_ids,
                                              rec.decision, bench_world.rules)
        liberal_ok &= liberal <= strict
    records = read_log(log)
    grounded = len(records) == 1000 and all(set(r.trace_ids) <= set(r.retrieved_ids) for r in records)

    # no-peek: inference commands with the gold tree absent and any gold read trapped
    world = tmp_path / "world"
    world.mkdir()
    for name in ("canon.yaml", "rules.yaml"):
        shutil.copy(packaged_path("bench", name), world / name)
    shutil.copytree(packaged_path("bench", "scenarios"), world / "scenarios")
    guard = ("import sys\n"
             "def g(e, a):\n"
             "    if e == 'open' and a and isinstance(a[0], str) and '/gold' in a[0]:\n"
             "        raise PermissionError(a[0])\n"
             "sys.addaudithook(g)\n"
             "from clausebench.cli import main\n"
             "f = sys.argv[1:]\n"
             "sys.exit(max(main(['init-db', *f]), main(['run', '--all', '--quiet', '--reflect', '2', *f]),"
             " main(['selfcheck', *f])))\n")
    flags = ["--canon", str(world / "canon.yaml"), "--rules", str(world / "rules.yaml"),
             "--scenarios", str(world / "scenarios"), "--out", str(tmp_path / "out")]
    proc = subprocess.run([sys.executable, "-c", guard, *flags], capture_output=True, text=True)
    no_peek = proc.returncode == 0

    # replay: metrics from the same log twice, second time in a fresh process
    argv = ["metrics", "--world", "bench", "--log", str(tmp_path / "out" / "log.jsonl")]
    first = subprocess.run([sys.executable, "-m", "clausebench.cli", *argv, "--csv", str(tmp_path / "a.csv")],
                           capture_output=True, text=True)
    second = subprocess.run([sys.executable, "-m", "clausebench.cli", *argv, "--csv", str(tmp_path / "b.csv")],
                            capture_output=True, text=True)
    replay = (first.returncode == second.returncode == 0
              and (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes())
    ok = grounded and liberal_ok and no_peek and replay
    record(7, ok, f"grounded={grounded} ({len(records)} runs) liberal<=strict={liberal_ok} "
                  f"no_peek={no_peek} replay={replay}")
    assert ok, proc.stderr + first.stderr + second.stderr


def test_criterion_8_self_retrieval(bench_world):
    check = self_retrieval_check(bench_world.lex, bench_world.vec, bench_world.store, k=5)
    vector, lexical = rank_histogram(check, 1), rank_histogram(check, 0)
    ok = len(check) == 16 and vector.get("1", 0) >= 15 and set(lexical) <= {"1", "2"}
    record(8, ok, f"vector={vector} lexical={lexical}")
    assert ok

"""Command-line entry point.

Exit codes: 0 ok, 2 user or configuration error, 3 invariant violation.
The inference commands (``init-db``, ``run``, ``selfcheck``) never read the
gold tree and refuse a ``--gold`` argument.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import yaml

from .budget import TimeBudget
from .errors import ClauseBenchError, GroundingError, LogError, ScenarioError, SuiteError
from .pipeline import PipelineConfig, World, build_world, packaged_path
from .retrieval import FusionWeights, rank_histogram, self_retrieval_check
from .rules import display_decision
from .runlog import append_record, read_log, write_csv
from .scenario import load_scenario

EXIT_OK, EXIT_USER, EXIT_INVARIANT = 0, 2, 3
OUT_ENV = "CLAUSEBENCH_OUT"

_CONFIG_KEYS = {"world", "canon", "rules", "scenarios_dir", "gold_dir", "mode", "k", "w_vec",
                "w_bm25", "rerank_n", "b_time_ms", "b_cycles", "epsilon", "strict", "builder",
                "out_dir", "reflect"}


class UserError(Exception):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file; flags override it")
    p.add_argument("--world", choices=("seed", "bench"), help="packaged canon, rules and scenarios")
    p.add_argument("--canon", help="canon YAML (overrides --world)")
    p.add_argument("--rules", help="rule YAML (overrides --world)")
    p.add_argument("--scenarios", dest="scenarios_dir", help="scenario directory")
    p.add_argument("--gold", dest="gold_dir", help="gold directory (evaluator commands only)")
    p.add_argument("--out", dest="out_dir", help=f"output directory (env {OUT_ENV} also works)")


def _retrieval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=("bm25", "hybrid"))
    p.add_argument("--k", type=int)
    p.add_argument("--w-vec", dest="w_vec", type=float)
    p.add_argument("--w-bm25", dest="w_bm25", type=float)
    p.add_argument("--rerank-n", dest="rerank_n", type=int)
    p.add_argument("--b-time-ms", dest="b_time_ms", type=float)
    p.add_argument("--b-cycles", dest="b_cycles", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--strict", action="store_true", default=None,
                   help="un-retrieved justification clauses make allow/safe-rewrite conservative")
    p.add_argument("--builder", choices=("minimal", "full"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clausebench",
                                     description="Trace-grounded compliance evaluation harness.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-db", help="build store, indexes and manifest; print digests")
    _common(p)

    p = sub.add_parser("run", help="run scenarios end to end and append run records")
    _common(p)
    _retrieval_flags(p)
    p.add_argument("scenario_ids", nargs="*")
    p.add_argument("--all", action="store_true", help="run every scenario in the directory")
    p.add_argument("--reflect", type=int, help="reflection cycles, capped at b_cycles")
    p.add_argument("--log", help="log path (default <out>/log.jsonl)")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("metrics", help="score a log against gold and write metrics.csv")
    _common(p)
    p.add_argument("--log", help="log path (default <out>/log.jsonl)")
    p.add_argument("--baseline", help="matched no-reflection log for SDI-R and delta TrC")
    p.add_argument("--csv", help="CSV path (default <out>/metrics.csv)")

    p = sub.add_parser("selfcheck", help="self-retrieval rank histogram per index")
    _common(p)
    p.add_argument("--k", type=int, default=5)

    p = sub.add_parser("gen-suite", help="generate scenarios and gold with a label distribution")
    _common(p)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--dist", default="allow=1,block=2,safe_rewrite=4,escalate=9",
                   help="comma-separated label=count pairs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--target", required=True, help="directory receiving scenarios/ and gold/")

    p = sub.add_parser("derive-gold", help="derive gold packages for a scenario directory")
    _common(p)
    return parser


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UserError(f"config not found: {p}")
    data = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
    if not isinstance(data, dict):
        raise UserError("config file must be a YAML mapping")
    unknown = set(data) - _CONFIG_KEYS
    if unknown:
        raise UserError(f"unknown config keys {sorted(unknown)}")
    return data


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    """Defaults, then config file, then environment (out dir only), then flags."""
    merged = _load_config_file(getattr(args, "config", None))
    if os.environ.get(OUT_ENV):
        merged["out_dir"] = os.environ[OUT_ENV]
    for key in _CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    base = PipelineConfig()
    weights = base.weights
    if "w_vec" in merged or "w_bm25" in merged:
        w_vec = float(merged.get("w_vec", 1.0 - float(merged.get("w_bm25", weights.w_bm25))))
        w_bm25 = float(merged.get("w_bm25", 1.0 - w_vec))
        weights = FusionWeights(w_vec, w_bm25)
    budget = TimeBudget(float(merged.get("b_time_ms", base.budget.b_time_ms)),
                        int(merged.get("b_cycles", base.budget.b_cycles)),
                        float(merged.get("epsilon", base.budget.epsilon)))
    world = merged.get("world", base.world)
    canon = merged.get("canon") or str(packaged_path(world, "canon.yaml"))
    rules = merged.get("rules") or str(packaged_path(world, "rules.yaml"))
    scenarios = merged.get("scenarios_dir") or str(packaged_path(world, "scenarios"))
    return PipelineConfig(
        canon=canon, rules=rules, scenarios_dir=scenarios, gold_dir=merged.get("gold_dir"),
        world=world, mode=merged.get("mode", base.mode), k=int(merged.get("k", base.k)),
        weights=weights, budget=budget, rerank_n=int(merged.get("rerank_n", base.rerank_n)),
        strict=bool(merged.get("strict", base.strict)), builder=merged.get("builder", base.builder),
        reflect=int(merged.get("reflect", base.reflect)), out_dir=merged.get("out_dir", base.out_dir),
    )


def _world(cfg: PipelineConfig) -> World:
    if not Path(cfg.canon).is_file():
        raise UserError(f"canon not found: {cfg.canon}")
    if not Path(cfg.rules).is_file():
        raise UserError(f"rules not found: {cfg.rules}")
    return build_world(cfg.canon, cfg.rules)


def _scenario_files(directory: str) -> dict[str, Path]:
    d = Path(directory)
    if not d.is_dir():
        raise UserError(f"scenario directory not found: {d}")
    out = {}
    for path in sorted(d.glob("*.y*ml")):
        s = load_scenario(path)
        if s.scenario_id in out:
            raise UserError(f"duplicate scenario id {s.scenario_id} in {d}")
        out[s.scenario_id] = path
    return out


def _reject_gold(args, command: str) -> None:
    if getattr(args, "gold_dir", None):
        raise UserError(f"{command} is an inference command and does not accept --gold")


def cmd_init_db(args, cfg: PipelineConfig) -> int:
    _reject_gold(args, "init-db")
    world = _world(cfg)
    out = Path(cfg.out_dir)
    world.store.write_snapshot(out / "policy_db" / "policy.db")
    (out / "index").mkdir(parents=True, exist_ok=True)
    world.lex.save(out / "index" / "bm25.json")
    world.vec.save(out / "index" / "tfidf.json")
    (out / "manifest.json").write_text(json.dumps(world.manifest.to_dict(), indent=2, sort_keys=True))
    print(f"policy_db: {world.manifest.canon_hash}")
    print(f"rules: {world.manifest.rules_hash}")
    print(f"indexes: {world.manifest.indexes_digest()}")
    return EXIT_OK


def _format_trace(trace: list[dict]) -> str:
    return "[" + ",\n        ".join(repr({"clause_id": t["clause_id"], "role": t["role"]}) for t in trace) + "]"


def cmd_run(args, cfg: PipelineConfig) -> int:
    from .reflection import reflect_loop

    _reject_gold(args, "run")
    world = _world(cfg)
    files = _scenario_files(cfg.scenarios_dir)
    if args.all:
        ids = list(files)
    elif args.scenario_ids:
        ids = args.scenario_ids
    else:
        raise UserError("name scenario ids or pass --all")
    unknown = [i for i in ids if i not in files]
    if unknown:
        raise UserError(f"unknown scenario id(s): {', '.join(unknown)}")
    log_path = Path(args.log) if args.log else Path(cfg.out_dir) / "log.jsonl"
    cycles = min(cfg.reflect, cfg.budget.b_cycles)
    for sid in ids:
        scenario = load_scenario(files[sid])
        result = reflect_loop(world, scenario, cfg.budget, cfg, cycles=cycles)
        r = result.record
        append_record(log_path, r)
        if not args.quiet:
            if len(ids) > 1:
                print(f"scenario: {sid}")
            print(f"decision: {display_decision(r.decision)}")
            print(f"trace: {_format_trace(r.trace)}")
            print(f"retrieve@{r.k}: {r.retrieved_ids}")
            print(f"sql_hash: {r.result_hash} | latency_ms: {r.total_latency:.1f}")
    return EXIT_OK


def _latest(records):
    out = {}
    for r in records:
        out[r.scenario_id] = r
    return list(out.values())


def cmd_metrics(args, cfg: PipelineConfig) -> int:
    from .evaluator import CSV_COLUMNS, csv_rows, score_suite
    from .gold import load_gold_dir

    log_path = Path(args.log) if args.log else Path(cfg.out_dir) / "log.jsonl"
    if not log_path.is_file():
        raise UserError(f"log not found: {log_path}")
    records = _latest(read_log(log_path))
    if not records:
        raise UserError(f"log {log_path} has no records")
    gold_dir = cfg.gold_dir or str(packaged_path(cfg.world, "gold"))
    world = _world(cfg)
    try:
        golds = load_gold_dir(gold_dir, world.store)
    except FileNotFoundError as exc:
        raise UserError(str(exc)) from exc
    missing = [r.scenario_id for r in records if r.scenario_id not in golds]
    if missing:
        raise UserError(f"missing gold for: {', '.join(missing)}")
    baseline = None
    if args.baseline:
        if not Path(args.baseline).is_file():
            raise UserError(f"baseline log not found: {args.baseline}")
        baseline = _latest(read_log(args.baseline))
    report = score_suite(records, golds, world.store, world.rules, baseline=baseline)
    csv_path = Path(args.csv) if args.csv else Path(cfg.out_dir) / "metrics.csv"
    write_csv(csv_path, CSV_COLUMNS, csv_rows(report))
    s = report.summary
    print(f"scenarios: {s['n']}")
    print(f"Acc {s['accuracy']:.3f} | M-F1 {s['macro_f1']:.3f} | TrC {s['t_c']:.3f} | "
          f"PolCov {s['coverage']:.3f} | Hallu {s['hallu_strict']:.3f} | SQL Acc {s['sql_acc']:.3f} | "
          f"latency_ms {s['latency_ms_mean']:.1f} | SDI {s['sdi']:.3f}")
    if s["delta_t_c"] is not None:
        print(f"delta TrC {s['delta_t_c']:+.3f}")
    if s["sdi_r"] is not None:
        print(f"SDI-R {s['sdi_r']:.3f}")
    print(f"metrics: {csv_path}")
    return EXIT_OK


def cmd_selfcheck(args, cfg: PipelineConfig) -> int:
    _reject_gold(args, "selfcheck")
    world = _world(cfg)
    check = self_retrieval_check(world.lex, world.vec, world.store, k=args.k)
    lexical, vector = rank_histogram(check, 0), rank_histogram(check, 1)
    print(f"self-retrieval@{args.k} over {len(check)} clauses")
    print(f"lexical: {lexical}")
    print(f"vector: {vector}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    snapshot = {"k": args.k, "lexical": lexical, "vector": vector,
                "ranks": {cid: list(r) for cid, r in sorted(check.items())},
                "stamps": world.manifest.stamps()}
    (out / "selfcheck.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _parse_dist(text: str) -> dict[str, int]:
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        label, sep, count = part.partition("=")
        if not sep:
            raise UserError(f"bad --dist entry {part!r}; expected label=count")
        try:
            out[label.strip()] = int(count)
        except ValueError as exc:
            raise UserError(f"bad count in {part!r}") from exc
    return out


def cmd_gen_suite(args, cfg: PipelineConfig) -> int:
    from .suite_gen import SuiteSpec, generate_suite, write_suite

    world = _world(cfg)
    spec = SuiteSpec(args.n, _parse_dist(args.dist), seed=args.seed)
    scenarios, golds = generate_suite(spec, world.store, world.rules)
    target = write_suite(args.target, scenarios, golds)
    print(f"wrote {len(scenarios)} scenarios to {target / 'scenarios'} and gold to {target / 'gold'}")
    return EXIT_OK


def cmd_derive_gold(args, cfg: PipelineConfig) -> int:
    from .gold import derive_gold, validate_world, write_gold

    if not cfg.gold_dir:
        raise UserError("derive-gold needs --gold (the output directory)")
    world = _world(cfg)
    files = _scenario_files(cfg.scenarios_dir)
    scenarios = [load_scenario(p) for p in files.values()]
    golds = [derive_gold(s, world.store, world.rules) for s in scenarios]
    report = validate_world(scenarios, golds, world.store)
    if not report.ok:
        for f in report.findings:
            print(f, file=sys.stderr)
        return EXIT_INVARIANT
    for g in golds:
        write_gold(cfg.gold_dir, g)
        print(f"{g.scenario_id}: {display_decision(g.decision)} ({len(g.witness_trace)} steps)")
    return EXIT_OK


COMMANDS = {
    "init-db": cmd_init_db,
    "run": cmd_run,
    "metrics": cmd_metrics,
    "selfcheck": cmd_selfcheck,
    "gen-suite": cmd_gen_suite,
    "derive-gold": cmd_derive_gold,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except GroundingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (UserError, FileNotFoundError, ScenarioError, SuiteError, LogError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except (ClauseBenchError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())

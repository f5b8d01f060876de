import json
import os
import shutil
import subprocess
import sys
import textwrap

import pytest

from clausebench import cli, pipeline
from clausebench.pipeline import packaged_path
from clausebench.rules import DecisionRecord
from clausebench.scenario import TraceStep

SEED = "CASL-EMAIL-UNSUB-003"


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture()
def gold_free_world(tmp_path):
    """Seed canon, rules and scenarios copied somewhere with no gold tree next to them."""
    root = tmp_path / "world"
    root.mkdir()
    shutil.copy(packaged_path("seed", "canon.yaml"), root / "canon.yaml")
    shutil.copy(packaged_path("seed", "rules.yaml"), root / "rules.yaml")
    shutil.copytree(packaged_path("seed", "scenarios"), root / "scenarios")
    return root


def _world_flags(root):
    return ["--canon", str(root / "canon.yaml"), "--rules", str(root / "rules.yaml"),
            "--scenarios", str(root / "scenarios")]


def test_init_db_prints_three_digests(tmp_path, capsys):
    code, out, _ = run(["init-db", "--out", str(tmp_path)], capsys)
    assert code == 0
    lines = out.strip().splitlines()
    assert [line.split(":")[0] for line in lines] == ["policy_db", "rules", "indexes"]
    assert (tmp_path / "policy_db" / "policy.db").is_file()
    assert json.loads((tmp_path / "manifest.json").read_text())["canon_hash"]
    code, again, _ = run(["init-db", "--out", str(tmp_path)], capsys)
    assert again == out


def test_init_db_missing_canon(tmp_path, capsys):
    code, _, err = run(["init-db", "--canon", str(tmp_path / "nope.yaml"), "--out", str(tmp_path)], capsys)
    assert code == 2 and "canon not found" in err


def test_run_prints_worked_example(tmp_path, capsys):
    code, out, _ = run(["run", SEED, "--out", str(tmp_path)], capsys)
    assert code == 0
    assert "decision: safe-rewrite" in out
    assert "{'clause_id': 'CASL-UNSUB-001', 'role': 'violated'}" in out
    assert "{'clause_id': 'CASL-TRX-EXCEPT-001', 'role': 'not_applicable'}" in out
    assert "retrieve@10: ['CASL-UNSUB-001', 'CASL-TRX-EXCEPT-001']" in out
    assert "sql_hash: 2a82039578af0508dd805712d5118d38 | latency_ms:" in out
    assert len((tmp_path / "log.jsonl").read_text().splitlines()) == 1


def test_run_reflect_one(tmp_path, capsys):
    code, out, _ = run(["run", SEED, "--reflect", "1", "--out", str(tmp_path)], capsys)
    assert code == 0
    assert "decision: safe-rewrite" in out
    assert "{'clause_id': 'CASL-IDENT-001', 'role': 'applies'}" in out


def test_run_unknown_id_and_no_ids(tmp_path, capsys):
    assert run(["run", "NOPE-1", "--out", str(tmp_path)], capsys)[0] == 2
    assert run(["run", "--out", str(tmp_path)], capsys)[0] == 2


@pytest.mark.parametrize("command", ["init-db", "run", "selfcheck"])
def test_inference_commands_reject_gold(command, tmp_path, capsys):
    argv = [command, "--gold", str(tmp_path), "--out", str(tmp_path)]
    if command == "run":
        argv.append("--all")
    code, _, err = run(argv, capsys)
    assert code == 2 and "--gold" in err


def test_grounding_violation_exits_3(tmp_path, capsys, monkeypatch):
    real = pipeline.evaluate

    def ungrounded(*args, **kwargs):
        rec = real(*args, **kwargs)
        return DecisionRecord(rec.decision, rec.trace + [TraceStep("CASL-IDENT-001", "applies")],
                              rec.fired_rules, False, rec.conflicts, rec.strict_downgrade)

    monkeypatch.setattr(pipeline, "evaluate", ungrounded)
    code, _, err = run(["run", SEED, "--out", str(tmp_path)], capsys)
    assert code == 3 and "CASL-IDENT-001" in err
    assert not (tmp_path / "log.jsonl").exists()


def test_metrics_seed_row(tmp_path, capsys):
    run(["run", SEED, "--out", str(tmp_path)], capsys)
    code, out, _ = run(["metrics", "--out", str(tmp_path)], capsys)
    assert code == 0
    assert "TrC 0.667" in out and "Hallu 0.000" in out and "SQL Acc 1.000" in out
    rows = (tmp_path / "metrics.csv").read_text().splitlines()
    assert rows[0].startswith("scenario_id,") and rows[1].startswith(SEED) and rows[2].startswith("ALL,")


def test_metrics_with_baseline_prints_delta_and_sdi_r(tmp_path, capsys):
    base, post = tmp_path / "base", tmp_path / "post"
    run(["run", SEED, "--out", str(base)], capsys)
    run(["run", SEED, "--reflect", "1", "--out", str(post)], capsys)
    code, out, _ = run(["metrics", "--out", str(post), "--baseline", str(base / "log.jsonl")], capsys)
    assert code == 0
    assert "delta TrC +0.333" in out and "SDI-R" in out


def test_metrics_errors(tmp_path, capsys):
    empty = tmp_path / "log.jsonl"
    empty.write_text("")
    assert run(["metrics", "--log", str(empty), "--out", str(tmp_path)], capsys)[0] == 2
    assert run(["metrics", "--log", str(tmp_path / "none.jsonl"), "--out", str(tmp_path)], capsys)[0] == 2
    run(["run", SEED, "--out", str(tmp_path / "o")], capsys)
    code, _, err = run(["metrics", "--out", str(tmp_path / "o"), "--gold", str(tmp_path / "nogold")], capsys)
    assert code == 2 and "gold" in err
    (tmp_path / "g").mkdir()
    code, _, err = run(["metrics", "--out", str(tmp_path / "o"), "--gold", str(tmp_path / "g")], capsys)
    assert code == 2 and "missing gold" in err


def test_metrics_uses_latest_record_per_scenario(tmp_path, capsys):
    run(["run", SEED, "--out", str(tmp_path)], capsys)
    run(["run", SEED, "--reflect", "1", "--out", str(tmp_path)], capsys)
    code, out, _ = run(["metrics", "--out", str(tmp_path)], capsys)
    assert code == 0 and "scenarios: 1" in out and "TrC 1.000" in out


def test_selfcheck(tmp_path, capsys):
    code, out, _ = run(["selfcheck", "--world", "bench", "--out", str(tmp_path)], capsys)
    assert code == 0 and "vector: {'1': 16}" in out
    snap = json.loads((tmp_path / "selfcheck.json").read_text())
    assert snap["vector"] == {"1": 16} and set(snap["lexical"]) <= {"1", "2"}


def test_selfcheck_single_clause(tmp_path, capsys):
    canon = tmp_path / "canon.yaml"
    canon.write_text("- {id: ONE-001, domain: ONE, topic: t, kind: requirement, text: only clause text}\n")
    rules = tmp_path / "rules.yaml"
    rules.write_text("- {id: R-1, clause: ONE-001, effect: require, severity: 1, when: {is_cem: true}}\n")
    code, out, _ = run(["selfcheck", "--canon", str(canon), "--rules", str(rules), "--out", str(tmp_path)],
                       capsys)
    assert code == 0 and "lexical: {'1': 1}" in out and "vector: {'1': 1}" in out


def test_config_file_env_and_flag_priority(tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(f"k: 3\nout_dir: {tmp_path / 'from_config'}\n")
    args = cli.build_parser().parse_args(["run", "--all", "--config", str(cfg)])
    resolved = cli.resolve_config(args)
    assert resolved.k == 3 and resolved.out_dir == str(tmp_path / "from_config")
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "from_env"))
    assert cli.resolve_config(args).out_dir == str(tmp_path / "from_env")
    args = cli.build_parser().parse_args(["run", "--all", "--config", str(cfg), "--k", "7",
                                          "--out", str(tmp_path / "flag")])
    resolved = cli.resolve_config(args)
    assert resolved.k == 7 and resolved.out_dir == str(tmp_path / "flag")
    defaults = cli.resolve_config(cli.build_parser().parse_args(["run", "--all"]))
    assert (defaults.k, defaults.weights.w_vec, defaults.weights.w_bm25, defaults.budget.b_cycles,
            defaults.rerank_n, defaults.mode) == (10, 0.6, 0.4, 2, 0, "bm25")


def test_bad_config(tmp_path, capsys):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("warp: 9\n")
    assert run(["init-db", "--config", str(cfg), "--out", str(tmp_path)], capsys)[0] == 2
    assert run(["init-db", "--config", str(tmp_path / "none.yaml")], capsys)[0] == 2


def test_gen_suite_and_derive_gold(tmp_path, capsys):
    code, out, _ = run(["gen-suite", "--world", "bench", "--target", str(tmp_path / "suite")], capsys)
    assert code == 0
    assert len(list((tmp_path / "suite" / "scenarios").glob("*.yml"))) == 16
    code, out, _ = run(["derive-gold", "--world", "bench", "--scenarios", str(tmp_path / "suite" / "scenarios"),
                        "--gold", str(tmp_path / "rederived")], capsys)
    assert code == 0
    for path in (tmp_path / "suite" / "gold").glob("*.yml"):
        assert (tmp_path / "rederived" / path.name).read_bytes() == path.read_bytes()
    assert run(["gen-suite", "--dist", "allow=x", "--n", "1", "--target", str(tmp_path)], capsys)[0] == 2
    assert run(["gen-suite", "--dist", "escalate=1", "--n", "1", "--target", str(tmp_path)], capsys)[0] == 2


def test_inference_commands_never_open_gold(gold_free_world, tmp_path):
    """Run init-db, run and selfcheck in a process that aborts on any path containing a gold dir."""
    script = textwrap.dedent("""
        import sys
        def guard(event, args):
            if event == "open" and args and isinstance(args[0], (str, bytes)):
                path = args[0] if isinstance(args[0], str) else args[0].decode()
                if "/gold" in path:
                    raise PermissionError("gold tree opened: " + path)
        sys.addaudithook(guard)
        from clausebench.cli import main
        commands = sys.argv[1].split(",")
        flags = sys.argv[2:]
        extra = {"run": ["--all", "--reflect", "2"]}
        sys.exit(max(main([c, *extra.get(c, []), *flags]) for c in commands))
    """)
    flags = _world_flags(gold_free_world) + ["--out", str(tmp_path / "out")]
    proc = subprocess.run([sys.executable, "-c", script, "init-db,run,selfcheck", *flags],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "decision: safe-rewrite" in proc.stdout
    assert not (gold_free_world / "gold").exists()
    # control: the evaluator command does read gold, and the guard notices
    control = subprocess.run([sys.executable, "-c", script, "metrics", "--out", str(tmp_path / "out")],
                             capture_output=True, text=True)
    assert control.returncode != 0 and "gold tree opened" in control.stderr


def test_replay_reproduces_metrics_byte_identically(tmp_path, capsys):
    out = tmp_path / "out"
    run(["run", "--all", "--world", "bench", "--reflect", "1", "--quiet", "--out", str(out)], capsys)
    assert run(["metrics", "--world", "bench", "--out", str(out)], capsys)[0] == 0
    first = (out / "metrics.csv").read_bytes()
    shutil.copy(out / "log.jsonl", tmp_path / "copy.jsonl")
    proc = subprocess.run(["clausebench", "metrics", "--world", "bench", "--log", str(tmp_path / "copy.jsonl"),
                           "--csv", str(tmp_path / "replay.csv")], capture_output=True, text=True,
                          env={**os.environ, "CLAUSEBENCH_OUT": str(tmp_path / "other")})
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "replay.csv").read_bytes() == first

import pytest

from clausebench.gold import load_gold_dir
from clausebench.pipeline import packaged_path, packaged_world
from clausebench.scenario import load_scenario

SEED_ID = "CASL-EMAIL-UNSUB-003"


@pytest.fixture(scope="session")
def seed_world():
    return packaged_world("seed")


@pytest.fixture(scope="session")
def bench_world():
    return packaged_world("bench")


@pytest.fixture(scope="session")
def seed_scenario():
    return load_scenario(packaged_path("seed", "scenarios", f"{SEED_ID}.yml"))


@pytest.fixture(scope="session")
def seed_gold(seed_world):
    return load_gold_dir(packaged_path("seed", "gold"), seed_world.store)[SEED_ID]


@pytest.fixture(scope="session")
def bench_scenarios():
    return [load_scenario(p) for p in sorted(packaged_path("bench", "scenarios").glob("*.yml"))]


@pytest.fixture(scope="session")
def bench_golds(bench_world):
    return load_gold_dir(packaged_path("bench", "gold"), bench_world.store)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}")

import pytest

from idal.pipeline import IdalConfig, prepare_dataset
from idal.synth import SynthConfig, generate_cases


@pytest.fixture(scope="session")
def synth_small():
    """Six phantoms, two per appearance cluster."""
    return generate_cases(SynthConfig(n_cases=6, n_clusters=3, seed=5))


@pytest.fixture(scope="session")
def small_cfg():
    return IdalConfig(seed=5, n_trees=20, cw_grid=(1.0, 5.0), leaf_grid=(5, 25))


@pytest.fixture(scope="session")
def prepared_small(synth_small, small_cfg):
    prepared, csf = prepare_dataset([s.case for s in synth_small], small_cfg)
    return prepared, csf


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def acceptance():
    def record(name: str, ok: bool, detail: str = "") -> bool:
        ACCEPTANCE.append((name, bool(ok), detail))
        print(f"{'PASS' if ok else 'FAIL'}: {name} {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}: {name} {detail}")

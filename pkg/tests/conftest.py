import numpy as np
import pytest

from recshard.generate import generate_model
from recshard.modelfile import save_spec
from recshard.replayer import WorkloadProfile, generate_requests


@pytest.fixture(scope="session")
def small_long_tail():
    return generate_model("long_tail", "2MiB", 11)


@pytest.fixture(scope="session")
def small_dominant():
    return generate_model("single_dominant", "2MiB", 5)


@pytest.fixture(scope="session")
def long_tail_file(tmp_path_factory, small_long_tail):
    path = tmp_path_factory.mktemp("models") / "lt.model"
    save_spec(small_long_tail, path)
    return path


@pytest.fixture(scope="session")
def lt_requests(small_long_tail):
    prof = WorkloadProfile(seed=3, batch_size=16, candidates=(20, 40))
    return generate_requests(small_long_tail, prof, 6)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance verdicts

ACCEPTANCE: dict[int, tuple[bool, str]] = {}
_ACCEPTANCE_COLLECTED = []


def pytest_collection_modifyitems(config, items):
    _ACCEPTANCE_COLLECTED[:] = [it for it in items if it.path.name == "test_acceptance.py"]


@pytest.fixture(scope="session")
def verdict(request):
    """Record one criterion's outcome and echo it past output capture."""
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def record(n: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[n] = (bool(ok), detail)
        with capman.global_and_fixture_disabled():
            print(f"\nC{n} {'PASS' if ok else 'FAIL'}: {detail}", flush=True)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_COLLECTED:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        ok, detail = ACCEPTANCE.get(n, (False, "did not complete"))
        terminalreporter.write_line(f"C{n} {'PASS' if ok else 'FAIL'}: {detail}")

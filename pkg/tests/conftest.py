import pytest
from hypothesis import settings

# property tests draw the same examples on every run
settings.register_profile("repro", derandomize=True)
settings.load_profile("repro")

ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_results(request):
    return request.config.stash.setdefault(ACCEPTANCE, {})


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE, None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, line = results[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {line}")
    terminalreporter.write_line(f"{sum(ok for ok, _ in results.values())}/{len(results)} criteria passed")

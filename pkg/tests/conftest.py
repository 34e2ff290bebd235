import pytest

from duplexrelay.harness import load_config, load_verifier

CRITERIA = {
    1: "latency composition and simulation speed",
    2: "verifier property suite",
    3: "verifier training on separable data",
    4: "threshold monotonicity",
    5: "seamlessness equivalence",
    6: "barge-in safety",
    7: "event scorer oracle equivalence",
    8: "k-fold integrity",
    9: "fallback equivalence",
    10: "quality bookkeeping from label files",
}
_results: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    if rep.when == "call" or rep.failed or rep.skipped:
        ok = rep.passed if rep.when == "call" else not (rep.failed or rep.skipped)
        _results[n] = _results.get(n, True) and ok


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        status = "PASS" if _results[n] else "FAIL"
        terminalreporter.write_line(f"criterion {n:>2} {status}  {CRITERIA.get(n, '')}")


@pytest.fixture(scope="session")
def small_config():
    return load_config(env={}, n_templates=6, train_scripts=120, train_epochs=10)


@pytest.fixture(scope="session")
def verifier(small_config):
    return load_verifier(small_config)

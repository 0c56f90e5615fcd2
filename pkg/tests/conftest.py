import pytest

ACCEPTANCE_TITLES = {
    1: "reward bound",
    2: "reward arithmetic oracle",
    3: "sampler correctness",
    4: "log-prob and gradient fidelity",
    5: "end-to-end creativity training",
    6: "CAN loop sanity",
    7: "classifier properties",
    8: "k-means oracle",
    9: "prompt composer statistics",
    10: "reproducibility",
}
_results = {}


@pytest.fixture
def acceptance():
    """``acceptance(n, ok, detail)`` records the verdict for criterion ``n`` and asserts it."""

    def record(n, ok, detail):
        _results[n] = (bool(ok), detail)
        assert ok, f"criterion {n} ({ACCEPTANCE_TITLES[n]}): {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in ACCEPTANCE_TITLES.items():
        if n in _results:
            ok, detail = _results[n]
            verdict = "PASS" if ok else "FAIL"
        else:
            verdict, detail = "NOT RUN", "test errored or was deselected before reaching its verdict"
        terminalreporter.write_line(f"criterion {n:>2} [{verdict}] {title}: {detail}")

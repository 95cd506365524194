import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

# criterion number -> (title, passed, detail, seconds)
ACCEPTANCE: dict[int, tuple] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def detail(request):
    """Tests store a one-line summary here; it is printed with the criterion's verdict."""
    request.node.acceptance_detail = ""

    def set_detail(text: str):
        request.node.acceptance_detail = text

    return set_detail


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        n, title = marker.args
        ACCEPTANCE[n] = (title, rep.passed, getattr(item, "acceptance_detail", ""), rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, passed, text, seconds = ACCEPTANCE[n]
        verdict = "PASS" if passed else "FAIL"
        suffix = f": {text}" if text else ""
        terminalreporter.write_line(f"criterion {n} {verdict} [{seconds:7.1f}s] {title}{suffix}")

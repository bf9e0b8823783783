"""Collects ``@pytest.mark.acceptance(n, title)`` outcomes into one summary block."""

import pytest

_RESULTS: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion check")


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    marker = item.get_closest_marker("acceptance")
    if marker is not None and (report.when == "call" or report.outcome != "passed"):
        number, title = marker.args
        detail = getattr(item, "acceptance_detail", "")
        _RESULTS[number] = ("PASS" if report.passed else "FAIL", title, detail)
    return report


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        status, title, detail = _RESULTS[number]
        line = f"[{status}] criterion {number}: {title}"
        terminalreporter.write_line(line + (f" | {detail}" if detail else ""))


@pytest.fixture
def detail(request):
    """Attach a one-line measurement summary to the acceptance line of this test."""

    def set_detail(text: str) -> None:
        request.node.acceptance_detail = text

    return set_detail

import pytest

_RESULTS: dict[int, list] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not report.failed:
        return
    n = marker.args[0]
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    _RESULTS.setdefault(n, []).append((item.name, report.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        rows = _RESULTS[n]
        ok = all(passed for _, passed, _ in rows)
        names = ", ".join(name for name, _, _ in rows)
        details = " | ".join(d for _, _, d in rows if d)
        terminalreporter.write_line(
            f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  [{names}]" + (f"  {details}" if details else "")
        )

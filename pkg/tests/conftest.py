import pytest

_RESULTS = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None or (rep.when != "call" and rep.passed):
        return
    n, title = m.args
    prev = _RESULTS.get(n)
    ok = rep.passed and (prev is None or prev[1])
    measured = "; ".join(str(v) for k, v in item.user_properties if k == "measured")
    _RESULTS[n] = (title, ok, measured or (prev[2] if prev else ""))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        title, ok, measured = _RESULTS[n]
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(f"{line}  [{measured}]" if measured else line)

import pytest

_RESULTS = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("acceptance")
    if mark is None or call.when != "call":
        return
    n, title = mark.args
    ok = call.excinfo is None
    detail = dict(item.user_properties).get("detail", "")
    if not ok:
        detail = str(call.excinfo.value).splitlines()[0] if call.excinfo.value.args else call.excinfo.typename
    _RESULTS[n] = (ok, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        ok, title, detail = _RESULTS[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d} {title}: {detail}")


@pytest.fixture
def detail(record_property):
    """Attach a one-line measurement summary to the running criterion."""
    def put(text):
        record_property("detail", text)
        print(text)
    return put

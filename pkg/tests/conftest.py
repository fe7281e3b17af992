import pytest

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the terminal summary")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    name = dict(report.user_properties).get("criterion")
    if name is None:
        return
    detail = dict(report.user_properties).get("detail", "")
    _CRITERIA[name] = ("PASS" if report.passed else "FAIL", detail)


@pytest.fixture
def criterion(request, record_property):
    """Tag a test as an acceptance criterion; call the returned function to attach a detail string."""
    marker = request.node.get_closest_marker("criterion")
    record_property("criterion", marker.args[0])

    def detail(text):
        record_property("detail", text)

    return detail


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, (status, detail) in _CRITERIA.items():
        terminalreporter.write_line(f"{status}  {name}" + (f"  [{detail}]" if detail else ""))

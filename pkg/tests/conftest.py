import pytest

_VERDICTS: dict[int, tuple[str, str, str]] = {}


class Criterion:
    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title
        self.detail = ""

    def note(self, detail: str) -> None:
        self.detail = detail


@pytest.fixture
def criterion(request):
    """Records an acceptance verdict; the test outcome decides PASS or FAIL."""
    marker = request.node.get_closest_marker("criterion")
    c = Criterion(*marker.args)
    yield c
    rep = getattr(request.node, "rep_call", None)
    verdict = "PASS" if rep is not None and rep.passed else "FAIL"
    _VERDICTS[c.number] = (verdict, c.title, c.detail)
    print(f"\nACCEPTANCE {c.number:>2} {verdict}: {c.title} {c.detail}".rstrip())


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        verdict, title, detail = _VERDICTS[number]
        terminalreporter.write_line(f"{number:>2} {verdict}  {title}  {detail}".rstrip())

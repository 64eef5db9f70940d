import pytest

from freqquality.netmodel import load_case
from freqquality.scenario import DATA_DIR

CASE_PATH = DATA_DIR / "ieee39_wind25.json"


@pytest.fixture(scope="session")
def case():
    return load_case(CASE_PATH)


@pytest.fixture
def case_dict():
    import json

    return json.loads(CASE_PATH.read_text())


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            lines += [v for k, v in getattr(rep, "user_properties", []) if k == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)

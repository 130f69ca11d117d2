import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    import helpers
    if not helpers.CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(helpers.CRITERIA):
        terminalreporter.write_line(helpers.criterion_line(n))

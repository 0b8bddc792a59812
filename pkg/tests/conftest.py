import os

from hypothesis import settings

settings.register_profile("ci", deadline=None, derandomize=True)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))

# one line per acceptance criterion, filled in by tests/test_acceptance.py
CRITERIA: dict[str, str] = {}


def record(key: str, passed: bool, detail: str) -> str:
    line = f"criterion {key}: {'PASS' if passed else 'FAIL'}  {detail}"
    CRITERIA[key] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA, key=lambda k: (int(k.split(".")[0].rstrip("abcd")), k)):
        terminalreporter.write_line(CRITERIA[key])

"""Collects acceptance verdicts and prints them after the run."""
from hypothesis import HealthCheck, settings

# the acceptance suite re-runs property tests on fresh instances of their classes
settings.register_profile("protoalign", suppress_health_check=[HealthCheck.differing_executors])
settings.load_profile("protoalign")

VERDICTS: list[str] = []


def record_verdict(number: int, passed: bool, detail: str) -> str:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    VERDICTS.append(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

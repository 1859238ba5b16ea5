import re

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("pkg", deadline=None, max_examples=25, derandomize=True)
settings.load_profile("pkg")


@pytest.fixture(scope="session")
def shipped_bath():
    """The default scan bath pipeline on the shipped mode table (E_max units)."""
    from vibrolase.scan import ScanConfig, prepare_bath

    return prepare_bath(ScanConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, with the measured values."""
    verdicts, details = {}, {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            match = re.search(r"test_acceptance\.py::test_c(\d+)_", rep.nodeid)
            if not match or (rep.when != "call" and outcome == "passed"):
                continue
            number = int(match.group(1))
            if outcome != "passed" or number not in verdicts:
                verdicts[number] = "PASS" if outcome == "passed" else "FAIL"
            detail = dict(getattr(rep, "user_properties", ())).get("detail", "")
            if detail:
                details.setdefault(number, []).append(detail)
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(verdicts):
        text = " | ".join(details.get(number, []))
        terminalreporter.write_line(f"criterion {number:2d}: {verdicts[number]}  {text}")

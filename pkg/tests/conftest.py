import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_sim():
    """A one-week campus with a few hundred agents."""
    from campusflow.synth import SynthConfig, simulate

    return simulate(SynthConfig(seed=11, n_agents=120, weeks=1))


@pytest.fixture(scope="session")
def small_data(small_sim):
    """Graph and feature tables at every width for ``small_sim``."""
    from campusflow import evalharness as eh
    from campusflow.ingest import ParsedLog, anonymize

    mapping = {ap.wifi_id: ap for ap in small_sim.campus.aps}
    anon, _ = anonymize(ParsedLog(small_sim.log, 0), mapping, b"test-salt")
    return eh.build_dataset(anon, mapping, small_sim.campus.schedule, seed=11)


_CRITERIA = {}


@pytest.fixture(scope="session")
def criterion():
    """``criterion(n, detail)`` records a one-line summary for acceptance criterion ``n``."""

    def record(n, detail):
        _CRITERIA[n] = detail
        print(f"criterion {n}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    outcomes = {}
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            name = getattr(rep, "nodeid", "").rsplit("::", 1)[-1]
            if "test_acceptance.py" in getattr(rep, "nodeid", "") and name.startswith("test_c"):
                n = int(name[len("test_c"):].split("_", 1)[0])
                if rep.when == "call" or key == "error":
                    outcomes[n] = "PASS" if key == "passed" else "FAIL"
    if not outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(outcomes):
        terminalreporter.write_line(f"criterion {n}: {outcomes[n]}  {_CRITERIA.get(n, '')}".rstrip())

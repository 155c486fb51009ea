import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_KEY = pytest.StashKey[dict]()
ACCEPTANCE_TITLES = {
    1: "gradient suite",
    2: "focal loss with gamma 0 is cross-entropy",
    3: "dilation oracle and schedule weights",
    4: "pipeline properties",
    5: "end-to-end synthetic training",
    6: "MC uncertainty lower at sampled pixels",
    7: "constrained >= unconstrained test accuracy",
    8: "transfer learning converges no slower",
    9: "bit-identical reruns",
    10: "tiled inference equals untiled",
}


@pytest.fixture(scope="session")
def acceptance(request):
    """Records ``(passed, detail)`` per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(ACCEPTANCE_KEY, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE_KEY, None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in ACCEPTANCE_TITLES.items():
        if n in results:
            passed, detail = results[n]
            terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  [{n:2d}] {title}: {detail}")
        else:
            terminalreporter.write_line(f"NOT RUN  [{n:2d}] {title}")

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from medbert.ehr import build_vocabulary, encode_patient
from medbert.synth import SynthConfig, generate_cohort

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_cohort():
    return generate_cohort(SynthConfig(n_patients=200, vocab_size=60, n_clusters=6, seed=3))


@pytest.fixture(scope="session")
def small_vocab(small_cohort):
    return build_vocabulary(small_cohort)


@pytest.fixture(scope="session")
def small_inputs(small_cohort, small_vocab):
    return [encode_patient(p, small_vocab, 64) for p in small_cohort]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Acceptance criteria report one line each; collected here so the lines also
# appear in the terminal summary when output capture is on.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

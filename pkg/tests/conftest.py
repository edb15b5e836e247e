import numpy as np
import pytest

from carousel.phasetype import ErlangMixture, MomentSummary, fit_hyperexponential

# Seeds fixed before any case was run; do not tune them.
MIXTURE_SEED = 20261016
HYPER_SEED = 20261017
SIM_SEED_BASE = 1000
HYPER_SIM_SEED_BASE = 2000

ACCEPTANCE_LINES = []


def fuzz_mixtures(count=50, seed=MIXTURE_SEED):
    """Erlang mixtures with mu in [0.5, 20] and up to six phases."""
    rng = np.random.default_rng(seed)
    cases = []
    for _ in range(count):
        n = int(rng.integers(1, 7))
        mu = float(rng.uniform(0.5, 20.0))
        alpha = rng.dirichlet(np.ones(n))
        cases.append(ErlangMixture(mu, tuple(alpha / alpha.sum())))
    return cases


def fuzz_hyperexponentials(count=20, seed=HYPER_SEED):
    """Fitted hyperexponentials with scv in (1, 10] and mean in [0.1, 2]."""
    rng = np.random.default_rng(seed)
    cases = []
    for _ in range(count):
        scv = float(rng.uniform(1.0, 10.0))
        if scv == 1.0:
            scv = float(np.nextafter(1.0, 2.0))
        mean = float(rng.uniform(0.1, 2.0))
        cases.append(fit_hyperexponential(MomentSummary(mean, scv)))
    return cases


@pytest.fixture
def erl21():
    return ErlangMixture.erlang(2.0, 1)


@pytest.fixture
def erl42():
    return ErlangMixture.erlang(4.0, 2)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

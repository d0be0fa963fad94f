import numpy as np
import pytest

# one line per acceptance criterion, printed in the terminal summary
CRITERION_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERION_LINES:
            terminalreporter.write_line(line)

from jointrisk import LinkSpec, MCMCConfig, ModelSpec, SimConfig, SplineBasis, \
    simulate_cohort

SIM_BASIS = SplineBasis(degree=3, interior_knots=(55.0, 65.0, 75.0),
                        boundary=(40.0, 88.0))

TRUE_BETA = np.array([9.0, -0.1, 0.02, 0.15])
TRUE_B_COV = np.array([[1.0, -0.01], [-0.01, 0.02]])
TRUE_SIGMA = 0.6
TRUE_LINK = LinkSpec("value_slope", alpha1=0.1, alpha2=0.5)


def sim_config(n_subjects, seed=0, **overrides):
    kwargs = dict(
        n_subjects=n_subjects, beta=TRUE_BETA, b_cov=TRUE_B_COV,
        sigma_eps=TRUE_SIGMA, link=TRUE_LINK,
        gamma_h0=np.full(SIM_BASIS.size, -4.5), basis=SIM_BASIS,
        max_visits=8, seed=seed)
    kwargs.update(overrides)
    return SimConfig(**kwargs)


@pytest.fixture(scope="session")
def small_sim():
    """120-subject simulated cohort shared by the heavier integration tests."""
    return simulate_cohort(sim_config(120, seed=7))


@pytest.fixture(scope="session")
def small_fit(small_sim):
    from jointrisk import fit
    config = MCMCConfig(n_chains=2, n_iter=700, n_warmup=350, seed=11)
    return fit(small_sim.cohort, ModelSpec(link=LinkSpec("value_slope")),
               config=config)

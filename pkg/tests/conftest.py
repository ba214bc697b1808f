import numpy as np
import pytest

from mcrt.design import AllocationScheme, CovariateTable, OutcomeDataset, TrialDesign


def random_dataset(design: TrialDesign, rng, p_cluster=1, p_indiv=1, scheme=None,
                   sigma_gamma=0.7, effects=None):
    """Normal random-intercept data with random covariates and a random scheme."""
    G, N = design.n_clusters, design.n_individuals
    if scheme is None:
        scheme = AllocationScheme(tuple(rng.permutation(design.base_labels)), design)
    X = rng.normal(size=(G, p_cluster))
    Z = rng.normal(size=(N, p_indiv))
    cov = CovariateTable(X, Z, design.cluster_sizes)
    idx = np.repeat(np.arange(G), design.cluster_sizes)
    y = rng.normal(size=N) + sigma_gamma * rng.normal(size=G)[idx]
    if p_cluster:
        y += X[idx].sum(axis=1)
    if p_indiv:
        y += 0.5 * Z.sum(axis=1)
    if effects is not None:
        T = scheme.indicators.astype(float)
        y += (T @ np.asarray(effects, float))[idx]
    return OutcomeDataset(design, scheme, cov, y)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def small_design():
    return TrialDesign((3, 3, 3), (4, 5, 3, 6, 4, 5, 2, 4, 5))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

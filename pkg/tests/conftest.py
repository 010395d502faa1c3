# ABOUTME: Global pytest configuration and fixtures for all test modules
# ABOUTME: Provides seeded generators, small systems and H-matrices, and marker registration

import sys

import numpy as np
import pytest

# Add src to Python path for imports
sys.path.insert(0, 'src')

from tests.fixtures.problem_factory import ProblemFactory


@pytest.fixture
def rng():
    """Seeded random generator, fresh per test."""
    return np.random.default_rng(20240617)


@pytest.fixture
def small_poisson():
    """Constant-coefficient Poisson system on a 7^3 grid."""
    return ProblemFactory.poisson(7)


@pytest.fixture
def small_variable_poisson():
    """Variable-coefficient Poisson system on a 7^3 grid, two orders of contrast."""
    return ProblemFactory.poisson(7, contrast=2.0, seed=3)


@pytest.fixture
def small_convdiff():
    """Convection-diffusion system on a 7^3 grid."""
    return ProblemFactory.convdiff(7, alpha=10.0)


@pytest.fixture
def small_helmholtz():
    """Waveguide Helmholtz system on a 7^3 grid at a low frequency."""
    return ProblemFactory.helmholtz(7, frequency=0.5)


@pytest.fixture
def kernel_hmatrix():
    """H-matrix of a smooth kernel on 256 points of the unit square, with its dense source."""
    return ProblemFactory.kernel_hmatrix(16, epsilon=1e-6, eta=2.0, n_min=16)


# Markers for different test types
def pytest_configure(config):
    """Configure pytest markers."""
    config.addinivalue_line("markers", "integration: Integration tests")
    config.addinivalue_line("markers", "performance: Performance tests")
    config.addinivalue_line("markers", "acceptance: Scaled-down experiment reproductions")
    config.addinivalue_line("markers", "slow: Slow running tests")
    config.addinivalue_line("markers", "unit: Unit tests")
    config.addinivalue_line("markers", "smoke: Smoke tests")


def pytest_collection_modifyitems(config, items):
    """Modify test collection to add markers based on file location."""
    for item in items:
        # Add markers based on test file location
        if "integration" in str(item.fspath):
            item.add_marker(pytest.mark.integration)
            item.add_marker(pytest.mark.acceptance)
        elif "performance" in str(item.fspath):
            item.add_marker(pytest.mark.performance)
            item.add_marker(pytest.mark.slow)
        else:
            item.add_marker(pytest.mark.unit)

        # Add smoke marker for essential tests
        if "test_basic" in item.name or "help" in item.name:
            item.add_marker(pytest.mark.smoke)


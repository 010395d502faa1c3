"""Tests for the Krylov solvers."""

import numpy as np
import pytest
import scipy.linalg
import scipy.sparse as sp

from acr_precond.config import KrylovOptions
from acr_precond.core.krylov import as_operator, cg, gmres, solve_with_fallback
from acr_precond.core.problems import build_problem
from acr_precond.exceptions import KrylovBreakdownError, ShapeMismatchError


def _exact_inverse(a):
    lu = scipy.linalg.lu_factor(a.toarray() if sp.issparse(a) else a)
    return lambda x: scipy.linalg.lu_solve(lu, x)


class TestOperators:
    """Test operator wrapping."""

    def test_wrappers(self, small_poisson, rng):
        """Sparse, dense, matvec objects, callables and None all act as operators."""
        a = small_poisson.to_sparse()
        x = rng.standard_normal(a.shape[0])
        expected = a @ x
        np.testing.assert_allclose(as_operator(a)(x), expected)
        np.testing.assert_allclose(as_operator(a.toarray())(x), expected)
        np.testing.assert_allclose(as_operator(small_poisson)(x), expected)
        np.testing.assert_allclose(as_operator(lambda v: a @ v)(x), expected)
        np.testing.assert_array_equal(as_operator(None)(x), x)


class TestConjugateGradients:
    """Test preconditioned CG."""

    def test_plain_iterations_grow_with_grid(self):
        """Without a preconditioner CG needs more iterations on finer grids."""
        opts = KrylovOptions(tol=1e-8, max_iters=10_000)
        iterations = []
        for n in (7, 15, 31):
            system = build_problem("poisson", n).system
            result = cg(system.matvec, None, system.rhs, opts)
            assert result.converged
            iterations.append(result.iterations)
        assert iterations[0] < iterations[1] < iterations[2]

    def test_identity_one_iteration(self, rng):
        """A = I converges in one iteration."""
        b = rng.standard_normal(50)
        result = cg(np.eye(50), None, b)
        assert result.converged
        assert result.iterations == 1
        np.testing.assert_allclose(result.x, b)

    def test_exact_preconditioner_one_iteration(self, small_variable_poisson):
        """M = inv(A) converges in one iteration."""
        a = small_variable_poisson.to_sparse()
        result = cg(a, _exact_inverse(a), small_variable_poisson.rhs)
        assert result.converged
        assert result.iterations == 1

    def test_distinct_eigenvalues(self, rng):
        """k distinct eigenvalues need at most k iterations."""
        a = np.diag(np.repeat([1.0, 3.0, 10.0], 20))
        result = cg(a, None, rng.standard_normal(60))
        assert result.converged
        assert result.iterations <= 3

    def test_history(self, small_poisson):
        """The history starts at 1 and has iterations + 1 entries."""
        result = cg(small_poisson, None, small_poisson.rhs, KrylovOptions(tol=1e-8, max_iters=500))
        assert result.converged
        assert len(result.history) == result.iterations + 1
        assert result.history[0] == pytest.approx(1.0)
        assert result.history[-1] <= 1e-8
        assert result.final_relres == pytest.approx(result.relative_residual(small_poisson, small_poisson.rhs))

    def test_iteration_cap(self, small_poisson):
        """Stopping at max_iters reports non-convergence."""
        result = cg(small_poisson, None, small_poisson.rhs, KrylovOptions(max_iters=2))
        assert not result.converged
        assert result.iterations == 2
        assert result.final_relres > 1e-8

    def test_zero_rhs(self):
        """A zero right-hand side returns zero immediately."""
        result = cg(np.eye(4), None, np.zeros(4))
        assert result.converged
        assert result.iterations == 0
        assert not result.x.any()

    def test_indefinite_breakdown(self):
        """p^T A p = 0 raises a breakdown."""
        with pytest.raises(KrylovBreakdownError) as excinfo:
            cg(np.diag([1.0, -1.0]), None, np.array([1.0, 1.0]))
        assert excinfo.value.iteration == 1

    def test_rhs_must_be_vector(self):
        """Matrices of right-hand sides are rejected."""
        with pytest.raises(ShapeMismatchError):
            cg(np.eye(3), None, np.ones((3, 2)))


class TestGMRES:
    """Test left-preconditioned restarted GMRES."""

    def test_identity_one_iteration(self, rng):
        """A = I converges in one iteration."""
        b = rng.standard_normal(30)
        result = gmres(np.eye(30), None, b)
        assert result.converged
        assert result.iterations == 1
        np.testing.assert_allclose(result.x, b)

    def test_exact_preconditioner_one_iteration(self, small_convdiff):
        """M = inv(A) converges in one iteration on a nonsymmetric system."""
        a = small_convdiff.to_sparse()
        result = gmres(a, _exact_inverse(a), small_convdiff.rhs)
        assert result.converged
        assert result.iterations == 1

    def test_nonsymmetric_unpreconditioned(self, small_convdiff):
        """Plain GMRES converges on the true residual."""
        opts = KrylovOptions(tol=1e-8, max_iters=3000, restart=30)
        result = gmres(small_convdiff, None, small_convdiff.rhs, opts)
        assert result.converged
        assert result.relative_residual(small_convdiff, small_convdiff.rhs) <= 1e-8
        assert len(result.history) == result.iterations + 1

    def test_history_nonincreasing(self, small_convdiff):
        """Preconditioned residual norms never grow, across restarts too."""
        opts = KrylovOptions(tol=1e-8, max_iters=400, restart=10)
        result = gmres(small_convdiff, None, small_convdiff.rhs, opts)
        history = np.asarray(result.history)
        assert (history[1:] <= history[:-1] * (1 + 1e-8) + 1e-14).all()

    def test_iteration_cap(self, small_convdiff):
        """Stopping at max_iters reports non-convergence."""
        result = gmres(small_convdiff, None, small_convdiff.rhs, KrylovOptions(max_iters=3, restart=2))
        assert not result.converged
        assert result.iterations == 3

    def test_indefinite_system(self):
        """GMRES handles indefinite symmetric systems."""
        a = np.diag([1.0, -1.0, 2.0, -3.0])
        b = np.ones(4)
        result = gmres(a, None, b)
        assert result.converged
        np.testing.assert_allclose(result.x, b / np.diag(a), atol=1e-8)


class TestFallback:
    """Test the CG-to-GMRES fallback."""

    def test_fallback_on_breakdown(self):
        """A CG breakdown switches to GMRES."""
        result = solve_with_fallback(np.diag([1.0, -1.0]), None, np.array([1.0, 1.0]))
        assert result.method == "gmres-fallback"
        assert result.converged

    def test_no_fallback_raises(self):
        """Without fallback the breakdown propagates."""
        with pytest.raises(KrylovBreakdownError):
            solve_with_fallback(np.diag([1.0, -1.0]), None, np.array([1.0, 1.0]), fallback=False)

    def test_gmres_method(self, rng):
        """method='gmres' skips CG."""
        result = solve_with_fallback(np.eye(5), None, rng.standard_normal(5), method="gmres")
        assert result.method == "gmres"

"""Tests for cyclic reduction and the ACR preconditioner."""

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from acr_precond.config import HOptions, KrylovOptions
from acr_precond.core.acr import (
    DiagonalBlock,
    acr_apply,
    acr_setup,
    exact_cr_solve,
    exact_factorization,
    expected_level_count,
    red_black_permutation,
)
from acr_precond.core.hmatrix import HMatrix
from acr_precond.core.krylov import cg
from acr_precond.core.problems import BlockTridiagonalSystem
from acr_precond.exceptions import ShapeMismatchError, SingularPivotError
from tests.fixtures.problem_factory import ProblemFactory


def _direct(system):
    return spsolve(system.to_sparse().tocsc(), system.rhs)


class TestExactCyclicReduction:
    """Test cyclic reduction with exact dense blocks."""

    def test_matches_sparse_direct(self, small_poisson):
        """Exact CR reproduces a sparse direct solve."""
        x = exact_cr_solve(small_poisson)
        np.testing.assert_allclose(x, _direct(small_poisson), rtol=1e-10)

    @pytest.mark.parametrize("n_blocks", [1, 2, 3, 5, 8])
    def test_nonsymmetric_dense_blocks(self, n_blocks):
        """General block tridiagonal systems of any length are solved exactly."""
        system = ProblemFactory.random_block_tridiagonal(n_blocks, 6, seed=n_blocks, symmetric=False)
        x = exact_cr_solve(system)
        np.testing.assert_allclose(system.matvec(x), system.rhs, atol=1e-10)

    def test_explicit_rhs(self, small_convdiff, rng):
        """A different right-hand side can be passed."""
        f = rng.standard_normal(small_convdiff.size)
        x = exact_cr_solve(small_convdiff, f)
        np.testing.assert_allclose(small_convdiff.matvec(x), f, atol=1e-8)

    @pytest.mark.parametrize("n_blocks", [1, 2, 3, 4, 5, 7, 8, 9, 16])
    def test_level_count(self, n_blocks):
        """Reducing to one row takes ceil(log2(n + 1)) levels including the coarse solve."""
        system = ProblemFactory.random_block_tridiagonal(n_blocks, 3, seed=1)
        factor = exact_factorization(system)
        assert factor.level_count == expected_level_count(n_blocks)

    @pytest.mark.parametrize("n_blocks", [2, 6, 7, 11])
    def test_elimination_order_is_red_black(self, n_blocks):
        """Rows are eliminated in the red-black order."""
        system = ProblemFactory.random_block_tridiagonal(n_blocks, 3, seed=2)
        factor = exact_factorization(system)
        assert factor.elimination_order() == red_black_permutation(n_blocks).tolist()
        assert factor.check_structure()

    def test_red_black_permutation(self):
        """Odd 1-based rows go first at every level."""
        assert red_black_permutation(7).tolist() == [0, 2, 4, 6, 1, 5, 3]
        assert red_black_permutation(1).tolist() == [0]

    def test_coarse_rows(self):
        """Stopping early leaves several rows for the dense coarse solve."""
        system = ProblemFactory.random_block_tridiagonal(9, 4, seed=3)
        factor = exact_factorization(system, coarse_rows=3)
        assert len(factor.coarse.rows) <= 3
        np.testing.assert_allclose(system.matvec(factor.apply(system.rhs)), system.rhs, atol=1e-10)


class TestACRSetup:
    """Test the H-matrix preconditioner."""

    def test_dense_only_is_direct_solver(self, small_variable_poisson):
        """Exact options turn ACR into a direct solver."""
        pc = acr_setup(small_variable_poisson, HOptions.dense_only())
        x = pc.apply(small_variable_poisson.rhs)
        np.testing.assert_allclose(x, _direct(small_variable_poisson), rtol=1e-9)

    def test_structure_per_level(self, small_poisson):
        """Every level eliminates the odd positions and stays block tridiagonal."""
        pc = acr_setup(small_poisson, HOptions(epsilon=1e-2, n_min=16))
        assert pc.check_structure()
        assert pc.level_count == expected_level_count(small_poisson.n_blocks)
        rows = [s.rows for s in pc.stats]
        assert rows == sorted(rows, reverse=True)
        assert len(pc.stats) == len(pc.levels)

    def test_first_level_couplings_are_diagonal(self, small_poisson):
        """Plane couplings of the original system are stored exactly as diagonals."""
        pc = acr_setup(small_poisson, HOptions(epsilon=1e-2, n_min=16))
        first = pc.levels[0]
        assert isinstance(first.lower[1], DiagonalBlock)
        assert isinstance(first.inverses[0], HMatrix)
        if len(pc.levels) > 1:
            assert isinstance(pc.levels[1].lower[3], HMatrix)

    def test_dense_only_helmholtz(self, small_helmholtz):
        """Exact ACR also solves the shifted Helmholtz operator."""
        pc = acr_setup(small_helmholtz, HOptions.dense_only())
        x = pc.apply(small_helmholtz.rhs)
        np.testing.assert_allclose(x, _direct(small_helmholtz), rtol=1e-9)

    def test_preconditioner_reduces_iterations(self):
        """CG with ACR needs fewer iterations than plain CG."""
        system = ProblemFactory.poisson(11, contrast=2.0, seed=4)
        opts = KrylovOptions(tol=1e-8, max_iters=500)
        plain = cg(system.matvec, None, system.rhs, opts)
        pc = acr_setup(system, HOptions(epsilon=1e-3, n_min=16))
        preconditioned = cg(system.matvec, pc, system.rhs, opts)
        assert preconditioned.converged
        assert preconditioned.iterations < plain.iterations

    def test_apply_columns(self, small_poisson, rng):
        """Blocks of right-hand sides are solved column by column."""
        pc = acr_setup(small_poisson, HOptions(epsilon=1e-2, n_min=16))
        f = rng.standard_normal((small_poisson.size, 3))
        out = acr_apply(pc, f)
        assert out.shape == f.shape
        for j in range(3):
            np.testing.assert_allclose(out[:, j], pc.apply(f[:, j]), atol=1e-12)

    def test_apply_wrong_length(self, small_poisson):
        """Right-hand sides must match the system size."""
        pc = acr_setup(small_poisson, HOptions(epsilon=1e-2, n_min=16))
        with pytest.raises(ShapeMismatchError):
            pc.apply(np.ones(10))

    def test_footprint_below_dense(self):
        """Loose truncation stores less than the densified blocks."""
        system = ProblemFactory.poisson(15)
        pc = acr_setup(system, HOptions(epsilon=1e-1, eta=2.0, n_min=16))
        assert 0 < pc.footprint() < pc.dense_footprint()
        max_rank, avg_rank = pc.rank_stats()
        assert max_rank >= 1 and avg_rank > 0

    def test_footprint_is_levels_plus_coarse(self, small_variable_poisson):
        """Per-level bytes plus the coarse factors add up to the footprint."""
        pc = acr_setup(small_variable_poisson, HOptions(epsilon=1e-3, n_min=16))
        assert pc.coarse_bytes > 0
        assert sum(s.bytes for s in pc.stats) + pc.coarse_bytes == pc.footprint()

    def test_workers_do_not_change_result(self, small_convdiff):
        """Concurrent eliminations give the same preconditioner."""
        options = HOptions(epsilon=1e-2, n_min=16)
        serial = acr_setup(small_convdiff, options, max_workers=1)
        threaded = acr_setup(small_convdiff, options, max_workers=3)
        np.testing.assert_allclose(threaded.apply(small_convdiff.rhs), serial.apply(small_convdiff.rhs))

    def test_progress_callback(self, small_poisson):
        """Progress is reported for inversions and updates."""
        messages = []
        acr_setup(small_poisson, HOptions(epsilon=1e-2, n_min=16),
                  progress_callback=lambda pct, msg: messages.append((pct, msg)))
        assert messages
        assert any("inversions" in msg for _, msg in messages)
        assert all(0 <= pct <= 100 for pct, _ in messages)

    def test_singular_pivot_reports_location(self):
        """A singular diagonal block raises with its level and block row."""
        system = ProblemFactory.random_block_tridiagonal(5, 4, seed=7)
        diag = list(system.diag)
        diag[2] = sp.csr_matrix((4, 4))
        broken = BlockTridiagonalSystem(diag, system.lower, system.upper, system.rhs,
                                        plane_points=system.plane_points)
        with pytest.raises(SingularPivotError) as excinfo:
            acr_setup(broken, HOptions(epsilon=1e-2, n_min=32))
        assert excinfo.value.level == 0
        assert excinfo.value.block_index == 2

    def test_repr(self, small_poisson):
        """The representation names the options."""
        pc = acr_setup(small_poisson, HOptions(epsilon=1e-2, n_min=16))
        assert "eps=0.01" in repr(pc)

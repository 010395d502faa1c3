"""Tests for cluster trees, block trees and H-matrix arithmetic."""

import numpy as np
import pytest
import scipy.sparse as sp

from acr_precond.config import WEAK, HOptions
from acr_precond.core.hmatrix import (
    DENSE,
    LOWRANK,
    SUBDIVIDED,
    assemble,
    build_block_tree,
    build_cluster_tree,
    densify,
    footprint,
    h_add,
    h_invert,
    h_matvec,
    h_mul,
    h_recompress,
    h_scale,
    h_scale_cols,
    h_scale_rows,
    identity_residual,
    is_admissible,
    leafwise_errors,
    plane_block_tree,
    rank_stats,
)
from acr_precond.core.lowrank import DenseBlock, LowRankBlock
from acr_precond.core.problems import Grid2D, plane_operator_2d
from acr_precond.exceptions import (
    InvalidInputError,
    ShapeMismatchError,
    SingularPivotError,
    TreeMismatchError,
)
from tests.fixtures.problem_factory import ProblemFactory


def _rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


class TestClusterTree:
    """Test geometric bisection."""

    def test_perm_is_permutation(self):
        """perm holds every original index exactly once."""
        tree = build_cluster_tree(Grid2D(9).coordinates(), 8)
        assert sorted(tree.perm.tolist()) == list(range(81))
        np.testing.assert_array_equal(tree.perm[tree.inverse_perm], np.arange(81))

    def test_leaves_partition_points(self):
        """Leaves are contiguous, disjoint and cover [0, N)."""
        tree = build_cluster_tree(Grid2D(10).coordinates(), 7)
        leaves = sorted(tree.leaves(), key=lambda node: node.lo)
        assert leaves[0].lo == 0
        assert leaves[-1].hi == 100
        for left, right in zip(leaves, leaves[1:]):
            assert left.hi == right.lo
        assert all(leaf.size <= 7 for leaf in leaves)

    def test_split_sizes(self):
        """Every split puts ceil(count/2) points in the first child."""
        tree = build_cluster_tree(Grid2D(7).coordinates(), 4)
        for node in tree.nodes:
            if not node.is_leaf:
                first, second = node.children
                assert first.size == (node.size + 1) // 2
                assert second.size == node.size // 2

    def test_split_along_longer_axis(self):
        """Points spread along x are split in x first."""
        points = np.stack([np.linspace(0, 10, 40), np.linspace(0, 1, 40) % 0.3], axis=1)
        tree = build_cluster_tree(points, 4)
        left, right = tree.root.children
        assert points[tree.indices(left), 0].max() <= points[tree.indices(right), 0].min()

    def test_deterministic(self):
        """Two builds over the same points agree."""
        points = Grid2D(8).coordinates()
        assert build_cluster_tree(points, 5).same_as(build_cluster_tree(points, 5))

    def test_bounding_boxes_contain_points(self):
        """Every node's box contains its points."""
        points = Grid2D(6).coordinates()
        tree = build_cluster_tree(points, 3)
        for node in tree.nodes:
            member = points[tree.indices(node)]
            assert (member >= node.box_min - 1e-15).all()
            assert (member <= node.box_max + 1e-15).all()

    def test_invalid_n_min(self):
        """n_min below 1 is rejected."""
        with pytest.raises(InvalidInputError):
            build_cluster_tree(Grid2D(4).coordinates(), 0)


class TestAdmissibility:
    """Test the admissibility condition."""

    def setup_method(self):
        """Two separated leaves and one touching pair."""
        self.tree = build_cluster_tree(np.linspace(0.0, 1.0, 16)[:, None], 4)
        self.leaves = sorted(self.tree.leaves(), key=lambda node: node.lo)

    def test_touching_clusters_never_admissible(self):
        """A cluster is never admissible with itself, even under weak admissibility."""
        leaf = self.leaves[0]
        assert not is_admissible(leaf, leaf, 1e6)
        assert not is_admissible(leaf, leaf, WEAK)

    def test_weak_admits_separated(self):
        """Weak admissibility accepts every pair at positive distance."""
        assert is_admissible(self.leaves[0], self.leaves[1], WEAK)

    def test_standard_condition(self):
        """min(diam) <= eta * dist decides admissibility."""
        a, c = self.leaves[0], self.leaves[2]
        ratio = min(a.diameter, c.diameter) / a.distance(c)
        assert is_admissible(a, c, ratio * 1.01)
        assert not is_admissible(a, c, ratio * 0.99)


class TestBlockTree:
    """Test block cluster trees."""

    def test_leaves_partition_matrix(self):
        """Leaf areas add up to N^2 and no entry is covered twice."""
        bt = plane_block_tree(Grid2D(10).coordinates(), HOptions(eta=2.0, n_min=8))
        cover = np.zeros((100, 100), dtype=int)
        for leaf in bt.leaves():
            cover[leaf.row.lo:leaf.row.hi, leaf.col.lo:leaf.col.hi] += 1
        assert (cover == 1).all()

    def test_leaf_kinds_consistent(self):
        """Low-rank leaves are admissible, dense leaves have a leaf cluster."""
        options = HOptions(eta=2.0, n_min=8)
        bt = plane_block_tree(Grid2D(12).coordinates(), options)
        assert bt.count(LOWRANK) > 0
        for leaf in bt.leaves():
            if leaf.kind == LOWRANK:
                assert is_admissible(leaf.row, leaf.col, options.eta)
            else:
                assert leaf.kind == DENSE
                assert leaf.row.is_leaf or leaf.col.is_leaf

    def test_subdivided_has_four_children(self):
        """Inner blocks split into (r0c0, r0c1, r1c0, r1c1)."""
        bt = plane_block_tree(Grid2D(8).coordinates(), HOptions(n_min=8))
        root = bt.root
        assert root.kind == SUBDIVIDED
        r0, r1 = root.row.children
        c0, c1 = root.col.children
        assert [(b.row, b.col) for b in root.children] == [(r0, c0), (r0, c1), (r1, c0), (r1, c1)]

    def test_weak_has_fewer_leaves(self):
        """Weak admissibility never produces more leaves than strong admissibility."""
        points = Grid2D(16).coordinates()
        strong = plane_block_tree(points, HOptions(eta=2.0, n_min=8))
        weak = plane_block_tree(points, HOptions(eta=WEAK, n_min=8))
        assert len(weak.leaves()) <= len(strong.leaves())

    def test_larger_eta_gives_coarser_partition(self):
        """Leaf count and depth never grow as eta increases."""
        points = Grid2D(16).coordinates()
        trees = [plane_block_tree(points, HOptions(eta=eta, n_min=8))
                 for eta in (0.5, 1.0, 2.0, 4.0, 16.0, WEAK)]
        leaves = [len(bt.leaves()) for bt in trees]
        depths = [bt.depth() for bt in trees]
        assert leaves == sorted(leaves, reverse=True)
        assert depths == sorted(depths, reverse=True)
        assert leaves[-1] < leaves[0]

    def test_weak_on_even_plane_is_hodlr(self):
        """On a 16 x 16 plane every off-diagonal sibling pair is a low-rank leaf."""
        bt = plane_block_tree(Grid2D(16).coordinates(), HOptions(eta=WEAK, n_min=16))
        assert [b.kind for b in bt.root.children] == [SUBDIVIDED, LOWRANK, LOWRANK, SUBDIVIDED]
        for node in bt.walk():
            if node.kind != SUBDIVIDED:
                continue
            assert node.children[1].kind == LOWRANK
            assert node.children[2].kind == LOWRANK
            assert node.children[0].kind != LOWRANK
            assert node.children[3].kind != LOWRANK
        assert bt.count(DENSE) == 16
        assert bt.count(LOWRANK) == 2 * bt.count(SUBDIVIDED) == 30

    def test_weak_on_odd_plane_splits_a_column(self):
        """On a 15 x 15 plane the root halves share a grid column, so weak admits nothing there."""
        bt = plane_block_tree(Grid2D(15).coordinates(), HOptions(eta=WEAK, n_min=16))
        assert bt.root.row.children[0].distance(bt.root.row.children[1]) == 0.0
        assert all(b.kind == SUBDIVIDED for b in bt.root.children)

    def test_line_with_unit_eta(self):
        """On 128 points of a line with eta = 1, blocks touching the diagonal are dense 8 x 8 leaves."""
        points = np.linspace(0.0, 1.0, 128)[:, None]
        tree = build_cluster_tree(points, 8)
        bt = build_block_tree(tree, tree, HOptions(eta=1.0, n_min=8))
        for leaf in bt.leaves():
            touches = leaf.row.lo <= leaf.col.hi and leaf.col.lo <= leaf.row.hi
            if touches:
                assert leaf.kind == DENSE
            if leaf.kind == DENSE:
                assert leaf.shape[0] <= 8 and leaf.shape[1] <= 8
            else:
                assert is_admissible(leaf.row, leaf.col, 1.0)

    def test_different_n_min_rejected(self):
        """Row and column trees must share n_min."""
        points = Grid2D(6).coordinates()
        with pytest.raises(TreeMismatchError):
            build_block_tree(build_cluster_tree(points, 4), build_cluster_tree(points, 8), HOptions())

    def test_dense_only_is_single_leaf(self):
        """The dense-only preset stores one dense block."""
        bt = plane_block_tree(Grid2D(6).coordinates(), HOptions.dense_only())
        assert bt.root.kind == DENSE


class TestAssembly:
    """Test filling block trees from entry sources."""

    def test_dense_source_roundtrip(self, kernel_hmatrix):
        """The H-matrix reproduces its dense source to the truncation accuracy."""
        h, kernel = kernel_hmatrix
        assert _rel(densify(h), kernel) <= 1e-5

    def test_leafwise_error_bound(self, kernel_hmatrix):
        """Every factored leaf meets the block-wise relative accuracy."""
        h, kernel = kernel_hmatrix
        errors = leafwise_errors(kernel, h)
        assert errors
        for _, err, norm in errors:
            assert err <= 1e-6 * norm * (1 + 1e-8) + 1e-14

    def test_sparse_source_is_exact(self):
        """A sparse operator assembles exactly at eps = 0."""
        a = plane_operator_2d(8)
        h = assemble(a, plane_block_tree(Grid2D(8).coordinates(), HOptions(epsilon=0.0, n_min=8)))
        np.testing.assert_allclose(h.to_dense(), a.toarray(), atol=1e-10)

    def test_callable_source(self):
        """Oracle sources receive original indices."""
        points = Grid2D(6).coordinates()
        source = lambda rows, cols: 1.0 / (1.0 + np.abs(rows - cols))
        h = assemble(source, plane_block_tree(points, HOptions(epsilon=0.0, n_min=4)))
        i, j = np.meshgrid(np.arange(36), np.arange(36), indexing="ij")
        np.testing.assert_allclose(h.to_dense(), source(i, j), atol=1e-12)

    def test_shape_mismatch(self):
        """Sources of the wrong size are rejected."""
        bt = plane_block_tree(Grid2D(4).coordinates(), HOptions(n_min=4))
        with pytest.raises(ShapeMismatchError):
            assemble(np.eye(10), bt)

    def test_non_finite_source(self):
        """Non-finite entries are rejected."""
        bt = plane_block_tree(Grid2D(4).coordinates(), HOptions(n_min=4))
        a = np.eye(16)
        a[3, 3] = np.inf
        with pytest.raises(InvalidInputError):
            assemble(a, bt)

    def test_footprint_formula(self, kernel_hmatrix):
        """Footprint sums 8mn per dense leaf and 8k(m+n) per factored leaf."""
        h, _ = kernel_hmatrix
        expected = 0
        for block, payload in h.leaves():
            m, n = block.shape
            if isinstance(payload, LowRankBlock):
                expected += 8 * payload.rank * (m + n)
            else:
                assert isinstance(payload, DenseBlock)
                expected += 8 * m * n
        assert footprint(h) == expected
        assert footprint(h) < 8 * 256 * 256

    def test_rank_stats(self, kernel_hmatrix):
        """Rank statistics cover the factored leaves."""
        h, _ = kernel_hmatrix
        max_rank, avg_rank = rank_stats(h)
        assert max_rank >= 1
        assert 0 < avg_rank <= max_rank


class TestMatvec:
    """Test products with vectors."""

    def test_matvec_matches_dense(self, kernel_hmatrix, rng):
        """h_matvec in the original ordering matches the dense product."""
        h, kernel = kernel_hmatrix
        x = rng.standard_normal(256)
        np.testing.assert_allclose(h_matvec(h, x), kernel @ x, rtol=1e-5, atol=1e-5)

    def test_matvec_columns(self, kernel_hmatrix, rng):
        """Blocks of columns are multiplied column by column."""
        h, _ = kernel_hmatrix
        x = rng.standard_normal((256, 3))
        y = h.matvec(x)
        for j in range(3):
            np.testing.assert_allclose(y[:, j], h.matvec(x[:, j]))

    def test_rmatvec_is_transpose(self, kernel_hmatrix, rng):
        """rmatvec applies the transpose in cluster ordering."""
        h, _ = kernel_hmatrix
        x = rng.standard_normal(256)
        np.testing.assert_allclose(h.rmatvec(x), h.clustered_dense().T @ x, atol=1e-10)

    def test_wrong_length(self, kernel_hmatrix):
        """Vectors of the wrong length are rejected."""
        h, _ = kernel_hmatrix
        with pytest.raises(ShapeMismatchError):
            h_matvec(h, np.ones(10))


class TestArithmetic:
    """Test truncated addition, multiplication, scaling and inversion."""

    def test_add(self, kernel_hmatrix):
        """alpha A + beta B matches the dense combination."""
        h, kernel = kernel_hmatrix
        out = h_add(h, h, 1e-8, alpha=2.0, beta=-0.5)
        assert _rel(out.to_dense(), 1.5 * kernel) <= 1e-5

    def test_add_cancellation(self, kernel_hmatrix):
        """A - A has rank-0 factored leaves."""
        h, _ = kernel_hmatrix
        out = h_add(h, h, 1e-8, beta=-1.0)
        assert rank_stats(out)[0] == 0

    def test_mul(self, kernel_hmatrix):
        """A @ A matches the dense product."""
        h, kernel = kernel_hmatrix
        out = h_mul(h, h, 1e-8)
        assert _rel(out.to_dense(), kernel @ kernel) <= 1e-5

    def test_mul_on_weak_tree(self):
        """Products accumulate every term of a factored leaf before truncating."""
        a = plane_operator_2d(16)
        bt = plane_block_tree(Grid2D(16).coordinates(), HOptions(epsilon=1e-10, eta=WEAK, n_min=16))
        h = assemble(a, bt)
        dense = a.toarray()
        out = h_mul(h, h)
        assert _rel(out.to_dense(), h.to_dense() @ h.to_dense()) <= 1e-8
        assert _rel(out.to_dense(), dense @ dense) <= 1e-8
        inverse = h_invert(h)
        assert identity_residual(a, inverse) <= 1e-5

    def test_mul_different_trees(self):
        """Products of H-matrices on different block trees are rejected."""
        a = plane_operator_2d(6)
        points = Grid2D(6).coordinates()
        h1 = assemble(a, plane_block_tree(points, HOptions(n_min=4)))
        h2 = assemble(a, plane_block_tree(points, HOptions(n_min=8)))
        with pytest.raises(TreeMismatchError):
            h_mul(h1, h2)
        with pytest.raises(TreeMismatchError):
            h_add(h1, h2)

    def test_scale(self, kernel_hmatrix):
        """Scalar and diagonal scalings match their dense counterparts."""
        h, kernel = kernel_hmatrix
        d = np.linspace(1.0, 2.0, 256)
        np.testing.assert_allclose(h_scale(h, -3.0).to_dense(), -3.0 * h.to_dense())
        np.testing.assert_allclose(h_scale_rows(h, d).to_dense(), d[:, None] * h.to_dense(), atol=1e-12)
        np.testing.assert_allclose(h_scale_cols(h, d).to_dense(), h.to_dense() * d[None, :], atol=1e-12)

    def test_scale_wrong_length(self, kernel_hmatrix):
        """Diagonals must match the matrix size."""
        h, _ = kernel_hmatrix
        with pytest.raises(ShapeMismatchError):
            h_scale_rows(h, np.ones(3))

    def test_invert_plane_operator(self):
        """The H-inverse of a 2D plane operator is accurate at tight tolerance."""
        a = plane_operator_2d(16)
        h = assemble(a, plane_block_tree(Grid2D(16).coordinates(), HOptions(epsilon=1e-10, n_min=16)))
        inverse = h_invert(h)
        assert identity_residual(a, inverse) <= 1e-5
        dense_residual = np.linalg.norm(a.toarray() @ inverse.to_dense() - np.eye(256))
        assert identity_residual(a, inverse, chunk=50) == pytest.approx(dense_residual, rel=1e-6)

    def test_invert_dense_only_is_exact(self):
        """A single dense leaf inverts exactly."""
        a = plane_operator_2d(5)
        h = assemble(a, plane_block_tree(Grid2D(5).coordinates(), HOptions.dense_only()))
        np.testing.assert_allclose(h_invert(h).to_dense(), np.linalg.inv(a.toarray()), rtol=1e-10)

    def test_invert_singular(self):
        """A singular diagonal leaf raises with its index range."""
        points = Grid2D(4).coordinates()
        h = assemble(sp.csr_matrix((16, 16)), plane_block_tree(points, HOptions(n_min=4)))
        with pytest.raises(SingularPivotError) as excinfo:
            h_invert(h)
        assert excinfo.value.index_range is not None

    def test_recompress_loosens(self, kernel_hmatrix):
        """Recompression at a looser tolerance does not raise ranks."""
        h, kernel = kernel_hmatrix
        loose = h_recompress(h, 1e-2)
        assert rank_stats(loose)[0] <= rank_stats(h)[0]
        assert _rel(loose.to_dense(), kernel) <= 2e-2

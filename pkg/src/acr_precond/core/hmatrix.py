"""Hierarchical matrices over geometric cluster trees.

Cluster trees bisect a point set along the longer bounding-box axis, block trees pair
clusters under the admissibility condition min(diam) <= eta * dist, and H-matrices store
dense or factored payloads on the block tree leaves. All arithmetic preserves the block
structure of its operands and re-truncates every factored leaf.

Internally every H-matrix works in cluster ordering (the permutation produced by the
cluster tree). The public helpers `h_matvec` and `densify` translate to the original
ordering of the points.
"""

from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import structlog

from ..config import HOptions
from ..exceptions import (
    InvalidInputError,
    ShapeMismatchError,
    SingularPivotError,
    TreeMismatchError,
)
from .lowrank import (
    Block,
    DenseBlock,
    LowRankBlock,
    recompress,
    recompress_many,
    recompress_sum,
    restrict,
    truncated_svd,
)

logger = structlog.get_logger()

SUBDIVIDED = "subdivided"
LOWRANK = "lowrank"
DENSE = "dense"

EntrySource = Union[np.ndarray, sp.spmatrix, Callable[[np.ndarray, np.ndarray], Any]]


class ClusterNode:
    """A contiguous interval [lo, hi) of the permuted points with its bounding box."""

    __slots__ = ("index", "lo", "hi", "box_min", "box_max", "children")

    def __init__(self, index: int, lo: int, hi: int, box_min: np.ndarray, box_max: np.ndarray):
        self.index = index
        self.lo = lo
        self.hi = hi
        self.box_min = box_min
        self.box_max = box_max
        self.children: Tuple["ClusterNode", ...] = ()

    @property
    def size(self) -> int:
        return self.hi - self.lo

    @property
    def is_leaf(self) -> bool:
        return not self.children

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.box_max - self.box_min))

    def distance(self, other: "ClusterNode") -> float:
        """Euclidean distance between the two bounding boxes."""
        gap = np.maximum(0.0, np.maximum(self.box_min - other.box_max, other.box_min - self.box_max))
        return float(np.linalg.norm(gap))

    def __repr__(self) -> str:
        return f"ClusterNode(index={self.index}, range=[{self.lo}, {self.hi}), leaf={self.is_leaf})"


class ClusterTree:
    """Binary cluster tree of a point set.

    ``perm[p]`` is the original index of the point at cluster position ``p``.
    """

    def __init__(self, root: ClusterNode, perm: np.ndarray, nodes: List[ClusterNode], n_min: int):
        self.root = root
        self.perm = perm
        self.nodes = nodes
        self.n_min = n_min
        self.inverse_perm = np.empty_like(perm)
        self.inverse_perm[perm] = np.arange(perm.size)

    @property
    def size(self) -> int:
        return self.root.size

    def leaves(self) -> List[ClusterNode]:
        return [node for node in self.nodes if node.is_leaf]

    def depth(self) -> int:
        def _depth(node: ClusterNode) -> int:
            return 0 if node.is_leaf else 1 + max(_depth(c) for c in node.children)
        return _depth(self.root)

    def indices(self, node: ClusterNode) -> np.ndarray:
        """Original point indices owned by a node."""
        return self.perm[node.lo:node.hi]

    def same_as(self, other: "ClusterTree") -> bool:
        if self is other:
            return True
        return (
            self.n_min == other.n_min
            and len(self.nodes) == len(other.nodes)
            and np.array_equal(self.perm, other.perm)
            and all(a.lo == b.lo and a.hi == b.hi for a, b in zip(self.nodes, other.nodes))
        )


def build_cluster_tree(points: np.ndarray, n_min: int) -> ClusterTree:
    """Recursive bisection of a point set.

    Each node is split along the longer axis of its bounding box at ceil(count/2) after
    sorting by (coordinate, original index). Nodes with at most n_min points are leaves.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise InvalidInputError("cluster tree needs at least one point", argument="points")
    if n_min < 1:
        raise InvalidInputError(f"n_min must be >= 1, got {n_min}", argument="n_min")

    perm = np.arange(pts.shape[0])
    nodes: List[ClusterNode] = []

    def _build(lo: int, hi: int) -> ClusterNode:
        member = pts[perm[lo:hi]]
        node = ClusterNode(len(nodes), lo, hi, member.min(axis=0), member.max(axis=0))
        nodes.append(node)
        count = hi - lo
        if count <= n_min:
            return node
        axis = int(np.argmax(node.box_max - node.box_min))
        segment = perm[lo:hi]
        order = np.lexsort((segment, pts[segment, axis]))
        perm[lo:hi] = segment[order]
        mid = lo + (count + 1) // 2
        node.children = (_build(lo, mid), _build(mid, hi))
        return node

    root = _build(0, pts.shape[0])
    tree = ClusterTree(root, perm, nodes, n_min)
    logger.debug("Built cluster tree", points=pts.shape[0], nodes=len(nodes), depth=tree.depth())
    return tree


def is_admissible(tau: ClusterNode, sigma: ClusterNode, eta: Union[float, str]) -> bool:
    """Standard admissibility min(diam(tau), diam(sigma)) <= eta * dist(tau, sigma).

    Touching or overlapping clusters are never admissible; the weak sentinel admits
    every pair at positive distance.
    """
    dist = tau.distance(sigma)
    if dist <= 0.0:
        return False
    if eta == "weak":
        return True
    return min(tau.diameter, sigma.diameter) <= float(eta) * dist


class BlockNode:
    """A pair of clusters and how the block is stored."""

    __slots__ = ("row", "col", "kind", "children")

    def __init__(self, row: ClusterNode, col: ClusterNode, kind: str,
                 children: Tuple["BlockNode", ...] = ()):
        self.row = row
        self.col = col
        self.kind = kind
        self.children = children

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.row.size, self.col.size)

    @property
    def is_leaf(self) -> bool:
        return self.kind != SUBDIVIDED

    def __repr__(self) -> str:
        return (f"BlockNode([{self.row.lo}, {self.row.hi}) x [{self.col.lo}, {self.col.hi}), "
                f"kind={self.kind})")


class BlockTree:
    """Block cluster tree over a pair of cluster trees."""

    def __init__(self, root: BlockNode, row_tree: ClusterTree, col_tree: ClusterTree, options: HOptions):
        self.root = root
        self.row_tree = row_tree
        self.col_tree = col_tree
        self.options = options
        self._signature: Optional[Tuple] = None

    def walk(self) -> Iterator[BlockNode]:
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def leaves(self) -> List[BlockNode]:
        return [node for node in self.walk() if node.is_leaf]

    def count(self, kind: str) -> int:
        return sum(1 for node in self.walk() if node.kind == kind)

    def depth(self) -> int:
        def _depth(node: BlockNode) -> int:
            return 0 if node.is_leaf else 1 + max(_depth(c) for c in node.children)
        return _depth(self.root)

    @property
    def signature(self) -> Tuple:
        if self._signature is None:
            self._signature = tuple(
                (b.row.lo, b.row.hi, b.col.lo, b.col.hi, b.kind) for b in self.walk()
            )
        return self._signature

    def same_as(self, other: "BlockTree") -> bool:
        if self is other:
            return True
        return (
            self.signature == other.signature
            and self.row_tree.same_as(other.row_tree)
            and self.col_tree.same_as(other.col_tree)
        )


def build_block_tree(row_tree: ClusterTree, col_tree: ClusterTree, options: HOptions) -> BlockTree:
    """Descend from (root, root): admissible pairs become low-rank leaves, inadmissible pairs
    with a leaf cluster become dense leaves, everything else is split into its 2x2 children."""
    if row_tree.n_min != col_tree.n_min:
        raise TreeMismatchError("row and column trees were built with different n_min")

    def _build(tau: ClusterNode, sigma: ClusterNode) -> BlockNode:
        if is_admissible(tau, sigma, options.eta):
            return BlockNode(tau, sigma, LOWRANK)
        if tau.is_leaf or sigma.is_leaf:
            return BlockNode(tau, sigma, DENSE)
        children = tuple(_build(t, s) for t in tau.children for s in sigma.children)
        return BlockNode(tau, sigma, SUBDIVIDED, children)

    tree = BlockTree(_build(row_tree.root, col_tree.root), row_tree, col_tree, options)
    logger.debug(
        "Built block tree",
        options=options.label(),
        lowrank_leaves=tree.count(LOWRANK),
        dense_leaves=tree.count(DENSE),
        depth=tree.depth(),
    )
    return tree


class HNode:
    """A block of an H-matrix: either a leaf payload or four children."""

    __slots__ = ("block", "payload", "children")

    def __init__(self, block: BlockNode, payload: Optional[Block] = None,
                 children: Tuple["HNode", ...] = ()):
        self.block = block
        self.payload = payload
        self.children = children

    @property
    def is_leaf(self) -> bool:
        return self.payload is not None

    @property
    def shape(self) -> Tuple[int, int]:
        return self.block.shape

    def leaves(self) -> Iterator["HNode"]:
        stack = [self]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                yield node
            else:
                stack.extend(reversed(node.children))


class HMatrix:
    """Immutable H-matrix on a block tree."""

    def __init__(self, block_tree: BlockTree, root: HNode):
        self.block_tree = block_tree
        self.root = root
        self._flat: Optional[List[Tuple[int, int, int, int, Block]]] = None

    @property
    def row_tree(self) -> ClusterTree:
        return self.block_tree.row_tree

    @property
    def col_tree(self) -> ClusterTree:
        return self.block_tree.col_tree

    @property
    def options(self) -> HOptions:
        return self.block_tree.options

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.row_tree.size, self.col_tree.size)

    def leaves(self) -> List[Tuple[BlockNode, Block]]:
        return [(node.block, node.payload) for node in self.root.leaves()]

    def _flat_leaves(self) -> List[Tuple[int, int, int, int, Block]]:
        if self._flat is None:
            self._flat = [
                (b.row.lo, b.row.hi, b.col.lo, b.col.hi, payload) for b, payload in self.leaves()
            ]
        return self._flat

    def matvec(self, x: np.ndarray) -> np.ndarray:
        """y = H x in cluster ordering; x may be a vector or a block of columns."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] != self.shape[1]:
            raise ShapeMismatchError("vector length does not match H-matrix columns",
                                     expected=(self.shape[1],), actual=x.shape)
        y = np.zeros((self.shape[0],) + x.shape[1:])
        for r0, r1, c0, c1, payload in self._flat_leaves():
            if isinstance(payload, LowRankBlock):
                if payload.rank:
                    y[r0:r1] += payload.u @ (payload.v.T @ x[c0:c1])
            else:
                y[r0:r1] += payload.values @ x[c0:c1]
        return y

    def rmatvec(self, x: np.ndarray) -> np.ndarray:
        """y = H^T x in cluster ordering."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] != self.shape[0]:
            raise ShapeMismatchError("vector length does not match H-matrix rows",
                                     expected=(self.shape[0],), actual=x.shape)
        y = np.zeros((self.shape[1],) + x.shape[1:])
        for r0, r1, c0, c1, payload in self._flat_leaves():
            if isinstance(payload, LowRankBlock):
                if payload.rank:
                    y[c0:c1] += payload.v @ (payload.u.T @ x[r0:r1])
            else:
                y[c0:c1] += payload.values.T @ x[r0:r1]
        return y

    def clustered_dense(self) -> np.ndarray:
        return _node_dense(self.root)

    def to_dense(self) -> np.ndarray:
        """Dense matrix in the original ordering."""
        clustered = _node_dense(self.root)
        out = np.empty_like(clustered)
        out[np.ix_(self.row_tree.perm, self.col_tree.perm)] = clustered
        return out

    def footprint(self) -> int:
        return sum(payload.nbytes() for _, payload in self.leaves())

    def rank_stats(self) -> Tuple[int, float]:
        ranks = [p.rank for _, p in self.leaves() if isinstance(p, LowRankBlock)]
        if not ranks:
            return 0, 0.0
        return max(ranks), float(np.mean(ranks))

    def __repr__(self) -> str:
        return f"HMatrix(shape={self.shape}, options={self.options.label()})"


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------

def _block_reader(source: EntrySource, row_tree: ClusterTree, col_tree: ClusterTree
                  ) -> Callable[[BlockNode], np.ndarray]:
    """Return a function giving the dense values of a block in cluster ordering."""
    if sp.issparse(source):
        permuted = sp.csr_matrix(source)[row_tree.perm][:, col_tree.perm].tocsr()

        def _read(b: BlockNode) -> np.ndarray:
            return permuted[b.row.lo:b.row.hi, b.col.lo:b.col.hi].toarray()
        return _read

    if isinstance(source, np.ndarray):
        permuted = np.asarray(source, dtype=np.float64)[np.ix_(row_tree.perm, col_tree.perm)]

        def _read(b: BlockNode) -> np.ndarray:
            return permuted[b.row.lo:b.row.hi, b.col.lo:b.col.hi]
        return _read

    if callable(source):
        def _read(b: BlockNode) -> np.ndarray:
            rows = row_tree.indices(b.row)[:, None]
            cols = col_tree.indices(b.col)[None, :]
            values = np.asarray(source(rows, cols), dtype=np.float64)
            return np.broadcast_to(values, (rows.shape[0], cols.shape[1])).copy()
        return _read

    raise InvalidInputError(f"unsupported entry source {type(source).__name__}", argument="source")


def assemble(source: EntrySource, block_tree: BlockTree, options: Optional[HOptions] = None) -> HMatrix:
    """Fill a block tree from an entry source.

    The source is a dense array, a sparse matrix or a vectorized oracle f(rows, cols)
    taking broadcastable index arrays in the original ordering. Dense leaves are copied
    exactly, low-rank leaves are materialized and truncated at options.epsilon.
    """
    opts = options or block_tree.options
    expected = (block_tree.row_tree.size, block_tree.col_tree.size)
    shape = getattr(source, "shape", None)
    if shape is not None and tuple(shape) != expected:
        raise ShapeMismatchError("entry source does not match the block tree",
                                 expected=expected, actual=tuple(shape))
    read = _block_reader(source, block_tree.row_tree, block_tree.col_tree)

    def _fill(b: BlockNode) -> HNode:
        if b.kind == SUBDIVIDED:
            return HNode(b, children=tuple(_fill(c) for c in b.children))
        values = read(b)
        if not np.isfinite(values).all():
            raise InvalidInputError(
                f"non-finite entries in block [{b.row.lo}, {b.row.hi}) x [{b.col.lo}, {b.col.hi})",
                argument="source",
            )
        if b.kind == DENSE:
            return HNode(b, DenseBlock(values))
        return HNode(b, truncated_svd(values, opts.epsilon))

    return HMatrix(block_tree, _fill(block_tree.root))


def h_matvec(h: HMatrix, x: np.ndarray) -> np.ndarray:
    """y = H x in the original ordering."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != h.shape[1]:
        raise ShapeMismatchError("vector length does not match H-matrix columns",
                                 expected=(h.shape[1],), actual=x.shape)
    y = h.matvec(x[h.col_tree.perm])
    out = np.empty_like(y)
    out[h.row_tree.perm] = y
    return out


def densify(h: HMatrix) -> np.ndarray:
    return h.to_dense()


def footprint(h: HMatrix) -> int:
    """Bytes of stored payloads: 8mn per dense leaf, 8k(m+n) per factored leaf."""
    return h.footprint()


def rank_stats(h: HMatrix) -> Tuple[int, float]:
    """(max rank, average rank) over low-rank leaves; (0, 0.0) without any."""
    return h.rank_stats()


# ---------------------------------------------------------------------------
# Node kernels (cluster-local ordering)
# ---------------------------------------------------------------------------

def _node_dense(node: HNode) -> np.ndarray:
    if node.is_leaf:
        return np.array(node.payload.to_dense(), dtype=np.float64)
    b = node.block
    out = np.zeros(b.shape)
    for child in node.children:
        cb = child.block
        out[cb.row.lo - b.row.lo:cb.row.hi - b.row.lo,
            cb.col.lo - b.col.lo:cb.col.hi - b.col.lo] = _node_dense(child)
    return out


def _node_matmat(node: HNode, x: np.ndarray) -> np.ndarray:
    """node @ x with x of shape (cols, k)."""
    if node.is_leaf:
        payload = node.payload
        if isinstance(payload, LowRankBlock):
            return payload.u @ (payload.v.T @ x)
        return payload.values @ x
    b = node.block
    out = np.zeros((b.row.size, x.shape[1]))
    for child in node.children:
        cb = child.block
        out[cb.row.lo - b.row.lo:cb.row.hi - b.row.lo] += _node_matmat(
            child, x[cb.col.lo - b.col.lo:cb.col.hi - b.col.lo])
    return out


def _node_rmatmat(node: HNode, x: np.ndarray) -> np.ndarray:
    """node^T @ x with x of shape (rows, k)."""
    if node.is_leaf:
        payload = node.payload
        if isinstance(payload, LowRankBlock):
            return payload.v @ (payload.u.T @ x)
        return payload.values.T @ x
    b = node.block
    out = np.zeros((b.col.size, x.shape[1]))
    for child in node.children:
        cb = child.block
        out[cb.col.lo - b.col.lo:cb.col.hi - b.col.lo] += _node_rmatmat(
            child, x[cb.row.lo - b.row.lo:cb.row.hi - b.row.lo])
    return out


def _scatter(piece: Block, target: BlockNode, sink: Dict[int, List[Block]]) -> None:
    """Split a dense or factored block down to the leaves of target and queue the parts."""
    if target.kind != SUBDIVIDED:
        sink.setdefault(id(target), []).append(piece)
        return
    for child in target.children:
        rows = slice(child.row.lo - target.row.lo, child.row.hi - target.row.lo)
        cols = slice(child.col.lo - target.col.lo, child.col.hi - target.col.lo)
        _scatter(restrict(piece, rows, cols), child, sink)


def _collect(target: BlockNode, sink: Dict[int, List[Block]], eps: float) -> HNode:
    """Sum the queued parts of every leaf of target; factored leaves are truncated once."""
    if target.kind == SUBDIVIDED:
        return HNode(target, children=tuple(_collect(c, sink, eps) for c in target.children))
    pieces = sink.get(id(target), [])
    if target.kind == DENSE:
        values = np.zeros(target.shape)
        for piece in pieces:
            values += piece.to_dense()
        return HNode(target, DenseBlock(values))
    return HNode(target, recompress_many(pieces, target.shape, eps))


def _scale_node(node: HNode, alpha: float) -> HNode:
    if node.is_leaf:
        payload = node.payload
        if isinstance(payload, LowRankBlock):
            return HNode(node.block, LowRankBlock(alpha * payload.u, payload.v))
        return HNode(node.block, DenseBlock(alpha * payload.values))
    return HNode(node.block, children=tuple(_scale_node(c, alpha) for c in node.children))


def _scale_sides_node(node: HNode, left: Optional[np.ndarray], right: Optional[np.ndarray]) -> HNode:
    """diag(left) @ node @ diag(right) with cluster-local diagonals."""
    if node.is_leaf:
        payload = node.payload
        if isinstance(payload, LowRankBlock):
            u = payload.u if left is None else left[:, None] * payload.u
            v = payload.v if right is None else right[:, None] * payload.v
            return HNode(node.block, LowRankBlock(u, v))
        values = payload.values
        if left is not None:
            values = left[:, None] * values
        if right is not None:
            values = values * right[None, :]
        return HNode(node.block, DenseBlock(values))
    b = node.block
    children = []
    for child in node.children:
        cb = child.block
        cl = None if left is None else left[cb.row.lo - b.row.lo:cb.row.hi - b.row.lo]
        cr = None if right is None else right[cb.col.lo - b.col.lo:cb.col.hi - b.col.lo]
        children.append(_scale_sides_node(child, cl, cr))
    return HNode(b, children=tuple(children))


def _add_nodes(x: HNode, y: HNode, eps: float, alpha: float = 1.0, beta: float = 1.0) -> HNode:
    """alpha * x + beta * y for nodes on the same block."""
    if x.block.kind == SUBDIVIDED:
        return HNode(x.block, children=tuple(
            _add_nodes(cx, cy, eps, alpha, beta) for cx, cy in zip(x.children, y.children)))
    px, py = x.payload, y.payload
    if x.block.kind == DENSE:
        return HNode(x.block, DenseBlock(alpha * px.to_dense() + beta * py.to_dense()))
    lx = LowRankBlock(alpha * px.u, px.v)
    ly = LowRankBlock(beta * py.u, py.v)
    return HNode(x.block, recompress_sum(lx, ly, eps))


def _leaf_product(a: HNode, b: HNode, alpha: float) -> Block:
    """alpha * a @ b where a or b is a leaf, or the target block is."""
    pa, pb = a.payload, b.payload
    if isinstance(pa, LowRankBlock):
        return LowRankBlock(alpha * pa.u, _node_rmatmat(b, pa.v))
    if isinstance(pb, LowRankBlock):
        return LowRankBlock(alpha * _node_matmat(a, pb.u), pb.v)
    if isinstance(pa, DenseBlock):
        if pa.rows <= pa.cols:
            return DenseBlock(alpha * _node_rmatmat(b, pa.values.T).T)
        return LowRankBlock(alpha * pa.values, _node_rmatmat(b, np.eye(pa.cols)))
    if isinstance(pb, DenseBlock):
        if pb.cols <= pb.rows:
            return DenseBlock(alpha * _node_matmat(a, pb.values))
        return LowRankBlock(alpha * _node_matmat(a, np.eye(pb.rows)), pb.values.T)
    return DenseBlock(alpha * _node_matmat(a, _node_dense(b)))


def _queue_products(a: HNode, b: HNode, target: BlockNode, alpha: float,
                    sink: Dict[int, List[Block]]) -> None:
    if (not a.is_leaf) and (not b.is_leaf) and target.kind == SUBDIVIDED:
        for i in range(2):
            for j in range(2):
                t = target.children[2 * i + j]
                for m in range(2):
                    _queue_products(a.children[2 * i + m], b.children[2 * m + j], t, alpha, sink)
        return
    _scatter(_leaf_product(a, b, alpha), target, sink)


def _queue_node(node: HNode, target: BlockNode, sink: Dict[int, List[Block]]) -> None:
    if node.is_leaf:
        _scatter(node.payload, target, sink)
        return
    for child, t in zip(node.children, target.children):
        _queue_node(child, t, sink)


def _mul_nodes(a: HNode, b: HNode, target: BlockNode, eps: float,
               alpha: float = 1.0, addend: Optional[HNode] = None) -> HNode:
    """Truncated addend + alpha * a @ b stored in the structure of target.

    All product terms landing on a target leaf are queued first and summed with one
    truncation per factored leaf.
    """
    sink: Dict[int, List[Block]] = {}
    if addend is not None:
        _queue_node(addend, target, sink)
    _queue_products(a, b, target, alpha, sink)
    return _collect(target, sink, eps)


def _invert_node(node: HNode, eps: float) -> HNode:
    b = node.block
    if node.is_leaf:
        values = node.payload.to_dense()
        try:
            inverse = scipy.linalg.inv(values, check_finite=False)
        except (np.linalg.LinAlgError, ValueError) as e:
            raise SingularPivotError(f"diagonal block is singular: {e}",
                                     index_range=(b.row.lo, b.row.hi))
        if not np.isfinite(inverse).all():
            raise SingularPivotError("diagonal block inverse is not finite",
                                     index_range=(b.row.lo, b.row.hi))
        if b.kind == LOWRANK:
            return HNode(b, truncated_svd(inverse, eps))
        return HNode(b, DenseBlock(inverse))

    a11, a12, a21, a22 = node.children
    a11_inv = _invert_node(a11, eps)
    t12 = _mul_nodes(a11_inv, a12, a12.block, eps)
    t21 = _mul_nodes(a21, a11_inv, a21.block, eps)
    schur = _mul_nodes(a21, t12, a22.block, eps, alpha=-1.0, addend=a22)
    x22 = _invert_node(schur, eps)
    x12 = _mul_nodes(t12, x22, a12.block, eps, alpha=-1.0)
    x21 = _mul_nodes(x22, t21, a21.block, eps, alpha=-1.0)
    x11 = _mul_nodes(x12, t21, a11.block, eps, alpha=-1.0, addend=a11_inv)
    return HNode(b, children=(x11, x12, x21, x22))


# ---------------------------------------------------------------------------
# Public arithmetic
# ---------------------------------------------------------------------------

def _require_same_tree(a: HMatrix, b: HMatrix, operation: str) -> None:
    if not a.block_tree.same_as(b.block_tree):
        raise TreeMismatchError(f"{operation} needs operands on the same block tree")


def _eps(a: HMatrix, eps: Optional[float]) -> float:
    value = a.options.epsilon if eps is None else eps
    if value < 0:
        raise InvalidInputError(f"tolerance must be non-negative, got {value}", argument="eps")
    return value


def h_add(a: HMatrix, b: HMatrix, eps: Optional[float] = None,
          alpha: float = 1.0, beta: float = 1.0) -> HMatrix:
    """Truncated alpha*A + beta*B."""
    _require_same_tree(a, b, "h_add")
    return HMatrix(a.block_tree, _add_nodes(a.root, b.root, _eps(a, eps), alpha, beta))


def h_mul(a: HMatrix, b: HMatrix, eps: Optional[float] = None) -> HMatrix:
    """Truncated product A @ B on the shared block tree."""
    _require_same_tree(a, b, "h_mul")
    if not a.row_tree.same_as(a.col_tree):
        raise TreeMismatchError("h_mul needs square H-matrices with one cluster tree")
    return HMatrix(a.block_tree, _mul_nodes(a.root, b.root, a.block_tree.root, _eps(a, eps)))


def h_invert(a: HMatrix, eps: Optional[float] = None) -> HMatrix:
    """Approximate inverse by recursive 2x2 block inversion in Schur-complement form.

    No pivoting across blocks; a singular diagonal leaf raises SingularPivotError with
    its index range in cluster ordering.
    """
    if not a.row_tree.same_as(a.col_tree):
        raise ShapeMismatchError("h_invert needs a square H-matrix", actual=a.shape)
    return HMatrix(a.block_tree, _invert_node(a.root, _eps(a, eps)))


def h_scale(a: HMatrix, alpha: float) -> HMatrix:
    return HMatrix(a.block_tree, _scale_node(a.root, alpha))


def _cluster_diagonal(d: np.ndarray, tree: ClusterTree, name: str) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    if d.shape != (tree.size,):
        raise ShapeMismatchError(f"{name} diagonal does not match the H-matrix",
                                 expected=(tree.size,), actual=d.shape)
    return d[tree.perm]


def h_scale_rows(a: HMatrix, d: np.ndarray) -> HMatrix:
    """diag(d) @ A with d in the original ordering."""
    left = _cluster_diagonal(d, a.row_tree, "row")
    return HMatrix(a.block_tree, _scale_sides_node(a.root, left, None))


def h_scale_cols(a: HMatrix, d: np.ndarray) -> HMatrix:
    """A @ diag(d) with d in the original ordering."""
    right = _cluster_diagonal(d, a.col_tree, "column")
    return HMatrix(a.block_tree, _scale_sides_node(a.root, None, right))


def h_recompress(a: HMatrix, eps: float) -> HMatrix:
    """Re-truncate every factored leaf at eps."""
    def _walk(node: HNode) -> HNode:
        if node.is_leaf:
            if isinstance(node.payload, LowRankBlock):
                return HNode(node.block, recompress(node.payload, eps))
            return node
        return HNode(node.block, children=tuple(_walk(c) for c in node.children))
    return HMatrix(a.block_tree, _walk(a.root))


def plane_block_tree(points: np.ndarray, options: HOptions) -> BlockTree:
    """Square block tree over one point set, shared by every block of a plane."""
    tree = build_cluster_tree(points, options.n_min)
    return build_block_tree(tree, tree, options)


def identity_residual(a: Union[np.ndarray, sp.spmatrix], inverse: HMatrix,
                      chunk: int = 256) -> float:
    """||A X - I||_F for an approximate inverse X, evaluated block of columns by block of columns."""
    n = inverse.shape[0]
    total = 0.0
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        e = np.zeros((n, stop - start))
        e[np.arange(start, stop), np.arange(stop - start)] = 1.0
        x = h_matvec(inverse, e)
        r = a @ x - e
        total += float(np.sum(np.asarray(r) ** 2))
    return float(np.sqrt(total))


def leafwise_errors(source: np.ndarray, h: HMatrix) -> List[Tuple[BlockNode, float, float]]:
    """(block, ||block - leaf||_F, ||block||_F) for every factored leaf against a dense reference."""
    permuted = np.asarray(source, dtype=np.float64)[np.ix_(h.row_tree.perm, h.col_tree.perm)]
    out = []
    for block, payload in h.leaves():
        if isinstance(payload, LowRankBlock):
            ref = permuted[block.row.lo:block.row.hi, block.col.lo:block.col.hi]
            out.append((block, float(np.linalg.norm(ref - payload.to_dense())),
                        float(np.linalg.norm(ref))))
    return out


__all__: Sequence[str] = [
    "ClusterNode", "ClusterTree", "BlockNode", "BlockTree", "HNode", "HMatrix",
    "SUBDIVIDED", "LOWRANK", "DENSE",
    "build_cluster_tree", "is_admissible", "build_block_tree", "assemble", "plane_block_tree",
    "h_matvec", "densify", "footprint", "rank_stats",
    "h_add", "h_mul", "h_invert", "h_scale", "h_scale_rows", "h_scale_cols", "h_recompress",
    "identity_residual", "leafwise_errors",
]

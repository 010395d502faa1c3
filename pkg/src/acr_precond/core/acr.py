"""Block cyclic reduction with H-matrix blocks.

At every level the rows in odd 1-based positions of the surviving set (red rows) are
eliminated and the even rows (black rows) absorb their contributions:

    D'_j = D_j - L_j inv(D_{j-1}) U_{j-1} - U_j inv(D_{j+1}) L_{j+1}
    L'_j = -L_j inv(D_{j-1}) L_{j-1}
    U'_j = -U_j inv(D_{j+1}) U_{j+1}

The black rows form the next, half-sized block tridiagonal system. Once at most
``coarse_rows`` rows survive they are solved with a dense LU factorization.

The same elimination runs on H-matrix blocks (the preconditioner) or on exact dense
blocks (the reference solver); only the block algebra differs.
"""

import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import structlog

from ..config import HOptions
from ..exceptions import ShapeMismatchError, SingularPivotError
from ..workers import ProgressCallback, run_concurrently
from .hmatrix import (
    BlockTree,
    HMatrix,
    assemble,
    h_add,
    h_invert,
    h_mul,
    h_scale,
    h_scale_cols,
    h_scale_rows,
    plane_block_tree,
)
from .lowrank import LowRankBlock
from .problems import BlockTridiagonalSystem

logger = structlog.get_logger()


@dataclass(frozen=True, eq=False)
class DiagonalBlock:
    """Diagonal coupling block, stored exactly.

    ``values`` is in the original plane ordering, ``clustered`` in the ordering the
    solver works in.
    """

    values: np.ndarray
    clustered: np.ndarray

    def nbytes(self) -> int:
        return 8 * self.values.size


Coupling = Union[DiagonalBlock, HMatrix, np.ndarray]


def _is_diagonal(block: sp.spmatrix) -> bool:
    coo = sp.coo_matrix(block)
    return bool(np.all(coo.row == coo.col))


class _HAlgebra:
    """Blocks stored as H-matrices on one shared plane block tree."""

    def __init__(self, block_tree: BlockTree, eps: float):
        self.block_tree = block_tree
        self.eps = eps
        self.perm = block_tree.row_tree.perm

    def diagonal(self, block: sp.spmatrix) -> HMatrix:
        return assemble(block, self.block_tree)

    def coupling(self, block: Optional[sp.spmatrix]) -> Optional[Coupling]:
        if block is None:
            return None
        if _is_diagonal(block):
            d = np.asarray(block.diagonal(), dtype=np.float64)
            return DiagonalBlock(d, d[self.perm])
        return assemble(block, self.block_tree)

    def invert(self, d: HMatrix) -> HMatrix:
        return h_invert(d, self.eps)

    def triple(self, a: Coupling, inverse: HMatrix, b: Coupling) -> HMatrix:
        """a @ inverse @ b, truncated."""
        if isinstance(b, DiagonalBlock):
            right = h_scale_cols(inverse, b.values)
        else:
            right = h_mul(inverse, b, self.eps)
        if isinstance(a, DiagonalBlock):
            return h_scale_rows(right, a.values)
        return h_mul(a, right, self.eps)

    def subtract(self, d: HMatrix, t: HMatrix) -> HMatrix:
        return h_add(d, t, self.eps, beta=-1.0)

    def negate(self, t: HMatrix) -> HMatrix:
        return h_scale(t, -1.0)

    def dense(self, block: Coupling) -> np.ndarray:
        if isinstance(block, DiagonalBlock):
            return np.diag(block.clustered)
        return block.clustered_dense()

    @staticmethod
    def apply(block: Coupling, x: np.ndarray) -> np.ndarray:
        if isinstance(block, DiagonalBlock):
            return block.clustered[:, None] * x
        return block.matvec(x)

    @staticmethod
    def nbytes(block: Coupling) -> int:
        if isinstance(block, DiagonalBlock):
            return block.nbytes()
        return block.footprint()

    @staticmethod
    def ranks(block: Coupling) -> List[int]:
        if isinstance(block, DiagonalBlock):
            return []
        return [p.rank for _, p in block.leaves() if isinstance(p, LowRankBlock)]


class _DenseAlgebra:
    """Exact dense blocks."""

    def __init__(self, block_size: int):
        self.perm = np.arange(block_size)

    @staticmethod
    def diagonal(block: sp.spmatrix) -> np.ndarray:
        return np.asarray(block.toarray(), dtype=np.float64)

    @staticmethod
    def coupling(block: Optional[sp.spmatrix]) -> Optional[np.ndarray]:
        return None if block is None else np.asarray(block.toarray(), dtype=np.float64)

    @staticmethod
    def invert(d: np.ndarray) -> np.ndarray:
        try:
            inverse = scipy.linalg.inv(d, check_finite=False)
        except (np.linalg.LinAlgError, ValueError) as e:
            raise SingularPivotError(f"diagonal block is singular: {e}", index_range=(0, d.shape[0]))
        if not np.isfinite(inverse).all():
            raise SingularPivotError("diagonal block inverse is not finite", index_range=(0, d.shape[0]))
        return inverse

    @staticmethod
    def triple(a: np.ndarray, inverse: np.ndarray, b: np.ndarray) -> np.ndarray:
        return a @ (inverse @ b)

    @staticmethod
    def subtract(d: np.ndarray, t: np.ndarray) -> np.ndarray:
        return d - t

    @staticmethod
    def negate(t: np.ndarray) -> np.ndarray:
        return -t

    @staticmethod
    def dense(block: np.ndarray) -> np.ndarray:
        return block

    @staticmethod
    def apply(block: np.ndarray, x: np.ndarray) -> np.ndarray:
        return block @ x

    @staticmethod
    def nbytes(block: np.ndarray) -> int:
        return 8 * block.size

    @staticmethod
    def ranks(block: np.ndarray) -> List[int]:
        return []


@dataclass
class SolveStats:
    """Per-level setup statistics."""

    level: int
    rows: int
    eliminated: int
    max_rank: int
    avg_rank: float
    bytes: int
    seconds: float

    def as_row(self) -> Dict[str, Any]:
        return {
            "level": self.level,
            "rows": self.rows,
            "eliminated": self.eliminated,
            "max_rank": self.max_rank,
            "avg_rank": round(self.avg_rank, 3),
            "bytes": self.bytes,
            "seconds": self.seconds,
        }


@dataclass
class CRLevel:
    """Blocks frozen when one level was eliminated.

    ``lower``/``upper`` hold the couplings of every row active at this level to its
    previous/next active neighbor (None at the ends).
    """

    index: int
    active: List[int]
    red: List[int]
    black: List[int]
    inverses: Dict[int, Any] = field(default_factory=dict)
    lower: Dict[int, Optional[Any]] = field(default_factory=dict)
    upper: Dict[int, Optional[Any]] = field(default_factory=dict)

    def stored_blocks(self) -> List[Any]:
        blocks = list(self.inverses.values())
        blocks += [b for b in self.lower.values() if b is not None]
        blocks += [b for b in self.upper.values() if b is not None]
        return blocks


@dataclass
class CoarseSolve:
    """Dense LU of the surviving block tridiagonal system."""

    rows: List[int]
    lu: Tuple[np.ndarray, np.ndarray]

    def nbytes(self) -> int:
        return 8 * self.lu[0].size


class ACRPreconditioner:
    """Archive of a cyclic reduction elimination; ``apply`` runs the substitutions."""

    def __init__(self, n_blocks: int, block_size: int, algebra: Any, levels: List[CRLevel],
                 coarse: CoarseSolve, stats: List[SolveStats], options: Optional[HOptions]):
        self.n_blocks = n_blocks
        self.block_size = block_size
        self.algebra = algebra
        self.levels = levels
        self.coarse = coarse
        self.stats = stats
        self.options = options

    @property
    def size(self) -> int:
        return self.n_blocks * self.block_size

    @property
    def level_count(self) -> int:
        """Elimination levels plus the coarse solve."""
        return len(self.levels) + 1

    @property
    def coarse_bytes(self) -> int:
        return self.coarse.nbytes()

    def footprint(self) -> int:
        """Bytes of every stored block plus the coarse factors.

        The per-level stats count stored blocks only, so this is the sum of their bytes plus
        coarse_bytes.
        """
        total = self.coarse_bytes
        for level in self.levels:
            total += sum(self.algebra.nbytes(b) for b in level.stored_blocks())
        return total

    def dense_footprint(self) -> int:
        """Bytes the same stored blocks would take as dense matrices."""
        per_block = 8 * self.block_size * self.block_size
        count = sum(len(level.stored_blocks()) for level in self.levels)
        return count * per_block + self.coarse.nbytes()

    def rank_stats(self) -> Tuple[int, float]:
        ranks: List[int] = []
        for level in self.levels:
            for block in level.stored_blocks():
                ranks.extend(self.algebra.ranks(block))
        if not ranks:
            return 0, 0.0
        return max(ranks), float(np.mean(ranks))

    def elimination_order(self) -> List[int]:
        order: List[int] = []
        for level in self.levels:
            order.extend(level.red)
        return order + list(self.coarse.rows)

    def check_structure(self) -> bool:
        """Eliminated sets partition the rows and every level is block tridiagonal."""
        if sorted(self.elimination_order()) != list(range(self.n_blocks)):
            return False
        expected_active = list(range(self.n_blocks))
        for level in self.levels:
            if level.active != expected_active:
                return False
            if level.red != level.active[0::2] or level.black != level.active[1::2]:
                return False
            last = len(level.active) - 1
            for p, row in enumerate(level.active):
                if (level.lower.get(row) is None) != (p == 0):
                    return False
                if (level.upper.get(row) is None) != (p == last):
                    return False
            expected_active = level.black
        return expected_active == list(self.coarse.rows)

    def apply(self, f: np.ndarray) -> np.ndarray:
        """Forward elimination of the right-hand side, coarse solve, back substitution.

        f is a vector of length n_blocks * block_size or a matrix with one right-hand side
        per column.
        """
        f = np.asarray(f, dtype=np.float64)
        if f.shape[0] != self.size or f.ndim > 2:
            raise ShapeMismatchError("right-hand side length does not match the preconditioner",
                                     expected=(self.size,), actual=f.shape)
        single = f.ndim == 1
        k = 1 if single else f.shape[1]
        perm = self.algebra.perm
        planes = f.reshape(self.n_blocks, self.block_size, k)[:, perm, :]
        apply = self.algebra.apply

        rhs: Dict[int, np.ndarray] = {row: planes[row] for row in range(self.n_blocks)}
        saved: List[Dict[int, np.ndarray]] = []
        for level in self.levels:
            red_rhs = {i: rhs[i] for i in level.red}
            reduced = {i: apply(level.inverses[i], red_rhs[i]) for i in level.red}
            next_rhs = {}
            for p in range(1, len(level.active), 2):
                j = level.active[p]
                fj = rhs[j].copy()
                fj -= apply(level.lower[j], reduced[level.active[p - 1]])
                if p + 1 < len(level.active):
                    fj -= apply(level.upper[j], reduced[level.active[p + 1]])
                next_rhs[j] = fj
            saved.append(red_rhs)
            rhs = next_rhs

        x: Dict[int, np.ndarray] = {}
        coarse_rhs = np.concatenate([rhs[r] for r in self.coarse.rows], axis=0)
        coarse_x = scipy.linalg.lu_solve(self.coarse.lu, coarse_rhs, check_finite=False)
        for q, row in enumerate(self.coarse.rows):
            x[row] = coarse_x[q * self.block_size:(q + 1) * self.block_size]

        for level, red_rhs in zip(reversed(self.levels), reversed(saved)):
            last = len(level.active) - 1
            for p in range(0, len(level.active), 2):
                i = level.active[p]
                r = red_rhs[i].copy()
                if p > 0:
                    r -= apply(level.lower[i], x[level.active[p - 1]])
                if p < last:
                    r -= apply(level.upper[i], x[level.active[p + 1]])
                x[i] = apply(level.inverses[i], r)

        out = np.empty((self.n_blocks, self.block_size, k))
        out[:, perm, :] = np.stack([x[row] for row in range(self.n_blocks)])
        out = out.reshape(self.size, k)
        return out[:, 0] if single else out

    def __call__(self, f: np.ndarray) -> np.ndarray:
        return self.apply(f)

    def __repr__(self) -> str:
        label = self.options.label() if self.options is not None else "exact"
        return f"ACRPreconditioner(blocks={self.n_blocks}, levels={self.level_count}, options={label})"


def _eliminate(system: BlockTridiagonalSystem, algebra: Any, coarse_rows: int = 1,
               max_workers: int = 1, progress_callback: Optional[ProgressCallback] = None
               ) -> Tuple[List[CRLevel], CoarseSolve, List[SolveStats]]:
    n = system.n_blocks
    diag: Dict[int, Any] = {}
    lower: Dict[int, Any] = {}
    upper: Dict[int, Any] = {}
    active = list(range(n))
    for i in active:
        lower[i] = algebra.coupling(system.lower[i])
        upper[i] = algebra.coupling(system.upper[i])

    levels: List[CRLevel] = []
    stats: List[SolveStats] = []
    while len(active) > max(1, coarse_rows):
        start = time.perf_counter()
        index = len(levels)
        level = CRLevel(index, list(active), active[0::2], active[1::2],
                        lower={i: lower[i] for i in active}, upper={i: upper[i] for i in active})

        for i in active:
            if i not in diag:
                diag[i] = algebra.diagonal(system.diag[i])

        def _invert_task(i: int):
            def _task():
                try:
                    return algebra.invert(diag[i])
                except SingularPivotError as e:
                    raise SingularPivotError(str(e.args[0]) if e.args else "singular block",
                                             level=index, block_index=i,
                                             index_range=e.index_range) from e
            return _task

        inverses = run_concurrently([_invert_task(i) for i in level.red], max_workers=max_workers,
                                    progress_callback=progress_callback, name=f"level {index} inversions")
        level.inverses = dict(zip(level.red, inverses))

        def _update_task(p: int):
            def _task():
                j = active[p]
                prev_red = active[p - 1]
                inv_prev = level.inverses[prev_red]
                d = algebra.subtract(diag[j], algebra.triple(lower[j], inv_prev, upper[prev_red]))
                new_lower = None
                if lower[prev_red] is not None:
                    new_lower = algebra.negate(algebra.triple(lower[j], inv_prev, lower[prev_red]))
                new_upper = None
                if p + 1 < len(active):
                    next_red = active[p + 1]
                    inv_next = level.inverses[next_red]
                    d = algebra.subtract(d, algebra.triple(upper[j], inv_next, lower[next_red]))
                    if upper[next_red] is not None:
                        new_upper = algebra.negate(algebra.triple(upper[j], inv_next, upper[next_red]))
                return d, new_lower, new_upper
            return _task

        updates = run_concurrently([_update_task(p) for p in range(1, len(active), 2)],
                                   max_workers=max_workers, progress_callback=progress_callback,
                                   name=f"level {index} updates")
        for i in level.red:
            diag.pop(i, None)
        for j, (d, new_lower, new_upper) in zip(level.black, updates):
            diag[j] = d
            lower[j] = new_lower
            upper[j] = new_upper

        levels.append(level)
        blocks = level.stored_blocks()
        ranks = [r for b in blocks for r in algebra.ranks(b)]
        stat = SolveStats(
            level=index,
            rows=len(level.active),
            eliminated=len(level.red),
            max_rank=max(ranks) if ranks else 0,
            avg_rank=float(np.mean(ranks)) if ranks else 0.0,
            bytes=sum(algebra.nbytes(b) for b in blocks),
            seconds=time.perf_counter() - start,
        )
        stats.append(stat)
        logger.info("ACR level eliminated", level=index, rows=stat.rows, max_rank=stat.max_rank,
                    bytes=stat.bytes, seconds=round(stat.seconds, 4))
        active = level.black

    coarse = _coarse_solve(active, diag, lower, upper, algebra, system, len(levels))
    return levels, coarse, stats


def _coarse_solve(active: List[int], diag: Dict[int, Any], lower: Dict[int, Any],
                  upper: Dict[int, Any], algebra: Any, system: BlockTridiagonalSystem,
                  level_index: int) -> CoarseSolve:
    m = system.block_size
    q = len(active)
    dense = np.zeros((q * m, q * m))
    for p, row in enumerate(active):
        block = diag[row] if row in diag else algebra.diagonal(system.diag[row])
        dense[p * m:(p + 1) * m, p * m:(p + 1) * m] = algebra.dense(block)
        if p > 0:
            dense[p * m:(p + 1) * m, (p - 1) * m:p * m] = algebra.dense(lower[row])
        if p + 1 < q:
            dense[p * m:(p + 1) * m, (p + 1) * m:(p + 2) * m] = algebra.dense(upper[row])
    if not np.isfinite(dense).all():
        raise SingularPivotError("coarse system has non-finite entries", level=level_index,
                                 block_index=active[0])
    with np.errstate(all="ignore"):
        lu = scipy.linalg.lu_factor(dense, check_finite=False)
    pivots = np.abs(np.diag(lu[0]))
    if (pivots == 0).any() or not np.isfinite(lu[0]).all():
        raise SingularPivotError("coarse system is singular", level=level_index, block_index=active[0])
    return CoarseSolve(list(active), lu)


def acr_setup(system: BlockTridiagonalSystem, options: HOptions, coarse_rows: int = 1,
              max_workers: int = 1, progress_callback: Optional[ProgressCallback] = None
              ) -> ACRPreconditioner:
    """Eliminate the system with H-matrix blocks built at the given options."""
    start = time.perf_counter()
    block_tree = plane_block_tree(system.plane_points, options)
    algebra = _HAlgebra(block_tree, options.epsilon)
    levels, coarse, stats = _eliminate(system, algebra, coarse_rows, max_workers, progress_callback)
    preconditioner = ACRPreconditioner(system.n_blocks, system.block_size, algebra, levels,
                                       coarse, stats, options)
    logger.info("ACR setup complete", blocks=system.n_blocks, levels=preconditioner.level_count,
                options=options.label(), bytes=preconditioner.footprint(),
                seconds=round(time.perf_counter() - start, 4))
    return preconditioner


def acr_apply(preconditioner: ACRPreconditioner, f: np.ndarray) -> np.ndarray:
    return preconditioner.apply(f)


def exact_factorization(system: BlockTridiagonalSystem, coarse_rows: int = 1) -> ACRPreconditioner:
    """Cyclic reduction with exact dense blocks."""
    algebra = _DenseAlgebra(system.block_size)
    levels, coarse, stats = _eliminate(system, algebra, coarse_rows)
    return ACRPreconditioner(system.n_blocks, system.block_size, algebra, levels, coarse, stats, None)


def exact_cr_solve(system: BlockTridiagonalSystem, f: Optional[np.ndarray] = None) -> np.ndarray:
    """Reference solve by classical cyclic reduction; f defaults to the system right-hand side."""
    rhs = system.rhs if f is None else f
    return exact_factorization(system).apply(rhs)


def red_black_permutation(n: int) -> np.ndarray:
    """Order in which cyclic reduction eliminates n block rows (coarse rows last)."""
    order: List[int] = []
    active = list(range(n))
    while len(active) > 1:
        order.extend(active[0::2])
        active = active[1::2]
    return np.asarray(order + active, dtype=int)


def expected_level_count(n: int) -> int:
    """ceil(log2(n + 1)) levels when reducing to a single row."""
    return int(np.ceil(np.log2(n + 1)))


__all__: Sequence[str] = [
    "ACRPreconditioner", "CRLevel", "CoarseSolve", "DiagonalBlock", "SolveStats",
    "acr_setup", "acr_apply", "exact_cr_solve", "exact_factorization",
    "red_black_permutation", "expected_level_count",
]

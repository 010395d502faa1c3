"""Dense kernels and rank-revealing truncation for H-matrix leaves.

A low-rank block stores factors U (rows x k) and V (cols x k) with block ~ U V^T.
Truncation keeps the smallest rank k whose Frobenius tail of discarded singular values
is at most eps times the Frobenius norm of the block. Singular values are absorbed into U.
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg

from ..exceptions import InvalidInputError, ShapeMismatchError

_MACHINE_EPS = np.finfo(np.float64).eps


@dataclass(frozen=True, eq=False)
class DenseBlock:
    """Dense leaf payload."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ShapeMismatchError("dense block must be two-dimensional", actual=values.shape)
        object.__setattr__(self, "values", values)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def to_dense(self) -> np.ndarray:
        return self.values

    def nbytes(self) -> int:
        return 8 * self.rows * self.cols


@dataclass(frozen=True, eq=False)
class LowRankBlock:
    """Factored leaf payload, block ~ u @ v.T."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self) -> None:
        u = np.asarray(self.u, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if u.ndim != 2 or v.ndim != 2 or u.shape[1] != v.shape[1]:
            raise ShapeMismatchError(
                "low-rank factors must be rows x k and cols x k",
                actual=(u.shape, v.shape),
            )
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "LowRankBlock":
        return cls(np.zeros((rows, 0)), np.zeros((cols, 0)))

    @property
    def rows(self) -> int:
        return self.u.shape[0]

    @property
    def cols(self) -> int:
        return self.v.shape[0]

    @property
    def rank(self) -> int:
        return self.u.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.rows, self.cols)

    def to_dense(self) -> np.ndarray:
        return self.u @ self.v.T

    def nbytes(self) -> int:
        return 8 * self.rank * (self.rows + self.cols)

    def frobenius_norm(self) -> float:
        """||u v^T||_F without forming the product."""
        if self.rank == 0:
            return 0.0
        gram = (self.u.T @ self.u) * (self.v.T @ self.v)
        return float(np.sqrt(max(gram.sum(), 0.0)))


Block = Union[DenseBlock, LowRankBlock]


def _svd(a: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    try:
        return scipy.linalg.svd(a, full_matrices=False, lapack_driver="gesdd", check_finite=False)
    except np.linalg.LinAlgError:
        return scipy.linalg.svd(a, full_matrices=False, lapack_driver="gesvd", check_finite=False)


def truncation_rank(s: np.ndarray, eps: float, floor: float = 0.0) -> int:
    """Smallest k with sqrt(sum_{i>=k} s_i^2) <= eps * ||s||_2.

    Singular values at or below floor count as zero.
    """
    if s.size == 0:
        return 0
    total = float(np.dot(s, s))
    if total == 0.0:
        return 0
    tail = np.append(np.cumsum((s * s)[::-1])[::-1], 0.0)
    k = int(np.argmax(tail <= (eps * eps) * total))
    if floor > 0.0:
        k = min(k, int(np.count_nonzero(s > floor)))
    return k


def truncated_svd(a: Union[DenseBlock, np.ndarray], eps: float) -> LowRankBlock:
    """Truncated SVD of a dense block at relative Frobenius tolerance eps.

    eps = 0 keeps every nonzero singular value.
    """
    if eps < 0:
        raise InvalidInputError(f"tolerance must be non-negative, got {eps}", argument="eps")
    values = a.values if isinstance(a, DenseBlock) else np.asarray(a, dtype=np.float64)
    if values.ndim != 2 or values.size == 0:
        raise InvalidInputError("block must be a nonempty matrix", argument="a")
    if not np.isfinite(values).all():
        raise InvalidInputError("block contains non-finite entries", argument="a")

    rows, cols = values.shape
    if not values.any():
        return LowRankBlock.zeros(rows, cols)

    u, s, vt = _svd(values)
    k = truncation_rank(s, eps)
    return LowRankBlock(u[:, :k] * s[:k], vt[:k].T.copy())


def _truncate_factors(u: np.ndarray, v: np.ndarray, eps: float, scale: float) -> LowRankBlock:
    """Re-truncate u v^T by orthogonalizing both factors and cutting the small core SVD.

    scale is the magnitude of the operands; singular values below rounding level relative to
    it are dropped so that exact cancellation yields rank 0. Near-total cancellation, where the
    sum is itself at rounding level of scale, also yields rank 0 and the relative eps bound
    against the sum does not hold there.
    """
    rows, cols = u.shape[0], v.shape[0]
    if u.shape[1] == 0:
        return LowRankBlock.zeros(rows, cols)
    qu, ru = scipy.linalg.qr(u, mode="economic", check_finite=False)
    qv, rv = scipy.linalg.qr(v, mode="economic", check_finite=False)
    w, s, zt = _svd(ru @ rv.T)
    floor = _MACHINE_EPS * max(rows, cols, u.shape[1]) * scale
    k = truncation_rank(s, eps, floor=floor)
    return LowRankBlock(qu @ (w[:, :k] * s[:k]), qv @ zt[:k].T)


def recompress(block: LowRankBlock, eps: float) -> LowRankBlock:
    """Re-truncate a single factored block to tolerance eps."""
    if block.rank == 0:
        return block
    if block.rank >= min(block.rows, block.cols) and eps == 0:
        return block
    return _truncate_factors(block.u, block.v, eps, block.frobenius_norm())


def recompress_sum(b1: LowRankBlock, b2: LowRankBlock, eps: float) -> LowRankBlock:
    """Truncated sum of two factored blocks.

    The stacked factors [U1 U2], [V1 V2] are orthogonalized and the small core is
    truncated, so the result rank never exceeds rank(b1) + rank(b2).
    """
    if b1.shape != b2.shape:
        raise ShapeMismatchError("cannot add blocks of different shapes",
                                 expected=b1.shape, actual=b2.shape)
    if b2.rank == 0:
        return recompress(b1, eps)
    if b1.rank == 0:
        return recompress(b2, eps)
    u = np.hstack([b1.u, b2.u])
    v = np.hstack([b1.v, b2.v])
    scale = b1.frobenius_norm() + b2.frobenius_norm()
    return _truncate_factors(u, v, eps, scale)


def restrict(block: Block, row_slice: slice, col_slice: slice) -> Block:
    """Sub-block of a payload; factored blocks stay factored."""
    if isinstance(block, LowRankBlock):
        return LowRankBlock(block.u[row_slice], block.v[col_slice])
    return DenseBlock(block.values[row_slice, col_slice])


def recompress_many(blocks: Sequence[Block], shape: Tuple[int, int], eps: float) -> LowRankBlock:
    """Truncated sum of any number of payloads with a single re-truncation.

    Dense terms are summed and factored together, factored terms are stacked, and the
    stacked factors are truncated once. With eps = 0 factors of rank at most half the
    smaller dimension are returned without recompression.
    """
    rows, cols = shape
    dense: Optional[np.ndarray] = None
    us, vs = [], []
    scale = 0.0
    for block in blocks:
        if block.shape != (rows, cols):
            raise ShapeMismatchError("cannot add blocks of different shapes",
                                     expected=(rows, cols), actual=block.shape)
        if isinstance(block, LowRankBlock):
            if block.rank:
                us.append(block.u)
                vs.append(block.v)
                scale += block.frobenius_norm()
        elif dense is None:
            dense = np.array(block.values, dtype=np.float64)
        else:
            dense += block.values
    if dense is not None and dense.any():
        factored = truncated_svd(dense, 0.0)
        us.append(factored.u)
        vs.append(factored.v)
        scale += float(np.linalg.norm(dense))
    if not us:
        return LowRankBlock.zeros(rows, cols)
    u = us[0] if len(us) == 1 else np.hstack(us)
    v = vs[0] if len(vs) == 1 else np.hstack(vs)
    if eps == 0 and u.shape[1] <= min(rows, cols) // 2:
        return LowRankBlock(u, v)
    return _truncate_factors(u, v, eps, scale)

"""Structured-grid discretizations of the three test families.

Unknowns live on the interior nodes of the unit cube (Dirichlet boundary eliminated),
h = 1/(n+1), ordered lexicographically with x fastest and z slowest so that each block
row of the assembled system is one plane of constant z.
"""

from dataclasses import dataclass, field
from functools import lru_cache
from typing import ClassVar, Dict, List, Optional, Tuple, Union

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import structlog
from scipy.spatial.distance import cdist

from ..config import ProblemKind, ProblemParams
from ..exceptions import FieldGenerationError, InvalidInputError, ShapeMismatchError

logger = structlog.get_logger()

# Minimum of the waveguide velocity, reached on the axis x = y = 0.5.
WAVEGUIDE_C_MIN = 0.75

ArrayLike = Union[float, np.ndarray]


@dataclass(frozen=True)
class StructuredGrid:
    """n points per dimension on the interior of the unit box."""

    n: int

    dim: ClassVar[int] = 3

    def __post_init__(self) -> None:
        if self.n < 2:
            raise InvalidInputError(f"grid needs n >= 2, got {self.n}", argument="n")

    @property
    def h(self) -> float:
        return 1.0 / (self.n + 1)

    @property
    def size(self) -> int:
        return self.n ** self.dim

    @property
    def plane_size(self) -> int:
        return self.n * self.n

    @property
    def shape(self) -> Tuple[int, ...]:
        return (self.n,) * self.dim

    def axis_coordinates(self) -> np.ndarray:
        return self.h * np.arange(1, self.n + 1)

    def coordinates(self) -> np.ndarray:
        """Node coordinates, one row (x, y, z) per unknown in system ordering."""
        t = self.axis_coordinates()
        mesh = np.meshgrid(*([t] * self.dim), indexing="ij")
        # array axes are (z, y, x) for 3D; reverse so column 0 is x
        return np.stack([m.ravel() for m in reversed(mesh)], axis=1)


@dataclass(frozen=True)
class Grid3D(StructuredGrid):
    """n^3 interior nodes of the unit cube."""

    dim: ClassVar[int] = 3

    def plane_points(self) -> np.ndarray:
        """(x, y) coordinates of one plane, in plane ordering."""
        return Grid2D(self.n).coordinates()


@dataclass(frozen=True)
class Grid2D(StructuredGrid):
    """n^2 interior nodes of the unit square; one plane of a Grid3D."""

    dim: ClassVar[int] = 2


@dataclass(frozen=True, eq=False)
class CoefficientField:
    """Per-node samples of kappa, the velocity c or the flow b."""

    grid: StructuredGrid
    values: np.ndarray
    kind: str = "kappa"
    seed: Optional[int] = None
    contrast: float = 0.0

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        expected = (self.grid.size, 3) if self.kind == "flow" else (self.grid.size,)
        if values.shape != expected:
            raise ShapeMismatchError(f"{self.kind} field does not match the grid",
                                     expected=expected, actual=values.shape)
        if not np.isfinite(values).all():
            raise InvalidInputError(f"{self.kind} field has non-finite samples", argument="values")
        if self.kind != "flow" and (values <= 0).any():
            raise InvalidInputError(f"{self.kind} field must be strictly positive", argument="values")
        object.__setattr__(self, "values", values)

    def as_array(self) -> np.ndarray:
        """Samples shaped (z, y, x) for scalar fields."""
        return self.values.reshape(self.grid.shape)

    def observed_contrast(self) -> float:
        return float(np.log10(self.values.max() / self.values.min()))


class BlockTridiagonalSystem:
    """Block tridiagonal system A u = f with one block row per plane.

    ``lower[i]`` couples row i to row i-1 and ``upper[i]`` couples row i to row i+1;
    the entries outside the range are None.
    """

    def __init__(self, diag: List[sp.spmatrix], lower: List[Optional[sp.spmatrix]],
                 upper: List[Optional[sp.spmatrix]], rhs: np.ndarray, symmetric: bool = False,
                 plane_points: Optional[np.ndarray] = None, kind: str = "custom"):
        n = len(diag)
        if n < 1 or len(lower) != n or len(upper) != n:
            raise ShapeMismatchError("diagonal, lower and upper lists must have equal length")
        if lower[0] is not None or upper[-1] is not None:
            raise ShapeMismatchError("end rows cannot couple outside the system")
        m = diag[0].shape[0]
        for i in range(n):
            blocks = [diag[i]] + [b for b in (lower[i], upper[i]) if b is not None]
            for block in blocks:
                if block.shape != (m, m):
                    raise ShapeMismatchError(f"block row {i} has a nonconforming block",
                                             expected=(m, m), actual=block.shape)
        rhs = np.asarray(rhs, dtype=np.float64)
        if rhs.shape != (n * m,):
            raise ShapeMismatchError("right-hand side does not match the system",
                                     expected=(n * m,), actual=rhs.shape)

        self.diag = [sp.csr_matrix(b) for b in diag]
        self.lower = [None if b is None else sp.csr_matrix(b) for b in lower]
        self.upper = [None if b is None else sp.csr_matrix(b) for b in upper]
        self.rhs = rhs
        self.symmetric = symmetric
        self.kind = kind
        if plane_points is None:
            plane_points = np.arange(m, dtype=np.float64)[:, None]
        self.plane_points = np.asarray(plane_points, dtype=np.float64)
        self._sparse: Optional[sp.csr_matrix] = None

    @property
    def n_blocks(self) -> int:
        return len(self.diag)

    @property
    def block_size(self) -> int:
        return self.diag[0].shape[0]

    @property
    def size(self) -> int:
        return self.n_blocks * self.block_size

    @classmethod
    def from_sparse(cls, a: Union[sp.spmatrix, np.ndarray], block_size: int,
                    rhs: Optional[np.ndarray] = None, symmetric: Optional[bool] = None,
                    plane_points: Optional[np.ndarray] = None, kind: str = "custom"
                    ) -> "BlockTridiagonalSystem":
        """Slice a matrix with block tridiagonal structure into its blocks."""
        a = sp.csr_matrix(a)
        size = a.shape[0]
        if a.shape[1] != size or block_size < 1 or size % block_size:
            raise ShapeMismatchError("matrix is not square or not divisible into blocks",
                                     actual=a.shape)
        coo = a.tocoo()
        if coo.nnz and np.abs(coo.row // block_size - coo.col // block_size).max() > 1:
            raise InvalidInputError("matrix couples blocks that are not neighbors", argument="a")
        n = size // block_size

        def _block(i: int, j: int) -> sp.csr_matrix:
            return a[i * block_size:(i + 1) * block_size, j * block_size:(j + 1) * block_size]

        diag = [_block(i, i) for i in range(n)]
        lower = [None] + [_block(i, i - 1) for i in range(1, n)]
        upper = [_block(i, i + 1) for i in range(n - 1)] + [None]
        if symmetric is None:
            symmetric = (a - a.T).count_nonzero() == 0
        if rhs is None:
            rhs = np.ones(size)
        return cls(diag, lower, upper, rhs, symmetric=symmetric, plane_points=plane_points, kind=kind)

    def to_sparse(self) -> sp.csr_matrix:
        if self._sparse is None:
            n = self.n_blocks
            grid: List[List[Optional[sp.spmatrix]]] = [[None] * n for _ in range(n)]
            for i in range(n):
                grid[i][i] = self.diag[i]
                if i > 0:
                    grid[i][i - 1] = self.lower[i]
                if i < n - 1:
                    grid[i][i + 1] = self.upper[i]
            self._sparse = sp.bmat(grid, format="csr")
        return self._sparse

    def matvec(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] != self.size:
            raise ShapeMismatchError("vector length does not match the system",
                                     expected=(self.size,), actual=x.shape)
        return self.to_sparse() @ x

    def with_rhs(self, rhs: np.ndarray) -> "BlockTridiagonalSystem":
        """Same operator, different right-hand side."""
        other = BlockTridiagonalSystem(self.diag, self.lower, self.upper, rhs,
                                       symmetric=self.symmetric, plane_points=self.plane_points,
                                       kind=self.kind)
        other._sparse = self._sparse
        return other

    def __repr__(self) -> str:
        return (f"BlockTridiagonalSystem(kind={self.kind}, blocks={self.n_blocks}, "
                f"block_size={self.block_size}, symmetric={self.symmetric})")


# ---------------------------------------------------------------------------
# Discretization kernels
# ---------------------------------------------------------------------------

def harmonic_mean(k1: ArrayLike, k2: ArrayLike) -> ArrayLike:
    """2 k1 k2 / (k1 + k2) for strictly positive inputs."""
    a = np.asarray(k1, dtype=np.float64)
    b = np.asarray(k2, dtype=np.float64)
    if (a <= 0).any() or (b <= 0).any():
        raise InvalidInputError("harmonic mean needs strictly positive values", argument="k")
    out = 2.0 * a * b / (a + b)
    return float(out) if out.ndim == 0 else out


def _axis_slices(ndim: int, axis: int) -> Tuple[Tuple[slice, ...], Tuple[slice, ...]]:
    lo = [slice(None)] * ndim
    hi = [slice(None)] * ndim
    lo[axis] = slice(None, -1)
    hi[axis] = slice(1, None)
    return tuple(lo), tuple(hi)


def _diffusion_operator(kappa: np.ndarray, h: float) -> sp.csr_matrix:
    """-div(kappa grad u) with harmonic face coefficients on a Dirichlet grid of any dimension.

    Boundary faces take the coefficient of the adjacent interior node.
    """
    shape = kappa.shape
    nd = kappa.ndim
    index = np.arange(kappa.size).reshape(shape)
    diagonal = np.zeros(shape)
    rows, cols, vals = [], [], []
    inv_h2 = 1.0 / (h * h)
    for axis in range(nd):
        lo, hi = _axis_slices(nd, axis)
        face = harmonic_mean(kappa[lo], kappa[hi]) * inv_h2
        p, q, f = index[lo].ravel(), index[hi].ravel(), np.ravel(face)
        rows += [p, q]
        cols += [q, p]
        vals += [-f, -f]
        diagonal[lo] += face
        diagonal[hi] += face
        for end in (0, -1):
            edge = [slice(None)] * nd
            edge[axis] = end
            diagonal[tuple(edge)] += kappa[tuple(edge)] * inv_h2
    rows.append(index.ravel())
    cols.append(index.ravel())
    vals.append(diagonal.ravel())
    size = kappa.size
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size)
    ).tocsr()


def _upwind_convection(b: np.ndarray, shape: Tuple[int, ...], h: float) -> sp.csr_matrix:
    """First-order upwind b . grad u; b has one column per coordinate (x first)."""
    nd = len(shape)
    index = np.arange(int(np.prod(shape))).reshape(shape)
    rows, cols, vals = [], [], []
    diagonal = np.zeros(shape)
    for component in range(nd):
        axis = nd - 1 - component
        bd = b[:, component].reshape(shape)
        diagonal += np.abs(bd) / h
        lo, hi = _axis_slices(nd, axis)
        forward = bd[hi] > 0
        rows.append(index[hi][forward])
        cols.append(index[lo][forward])
        vals.append(-bd[hi][forward] / h)
        backward = bd[lo] < 0
        rows.append(index[lo][backward])
        cols.append(index[hi][backward])
        vals.append(bd[lo][backward] / h)
    rows.append(index.ravel())
    cols.append(index.ravel())
    vals.append(diagonal.ravel())
    size = index.size
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size)
    ).tocsr()


def _kappa_array(grid: StructuredGrid, kappa: Optional[CoefficientField]) -> np.ndarray:
    if kappa is None:
        return np.ones(grid.shape)
    if kappa.grid.n != grid.n or kappa.grid.dim != grid.dim:
        raise ShapeMismatchError("coefficient field belongs to another grid")
    return kappa.as_array()


def poisson_system(grid: Grid3D, kappa: Optional[CoefficientField] = None,
                   rhs: Optional[np.ndarray] = None) -> BlockTridiagonalSystem:
    """7-point -div(kappa grad u) = 1 with u = 0 on the boundary."""
    a = _diffusion_operator(_kappa_array(grid, kappa), grid.h)
    f = np.ones(grid.size) if rhs is None else rhs
    return BlockTridiagonalSystem.from_sparse(
        a, grid.plane_size, rhs=f, symmetric=True, plane_points=grid.plane_points(), kind="poisson")


def plane_operator_2d(n: int, kappa: Optional[np.ndarray] = None) -> sp.csr_matrix:
    """5-point variable-coefficient operator of one n x n plane."""
    grid = Grid2D(n)
    k = np.ones(grid.shape) if kappa is None else np.asarray(kappa, dtype=np.float64).reshape(grid.shape)
    return _diffusion_operator(k, grid.h)


def flow_eval(x: np.ndarray, a: float = 1.0) -> np.ndarray:
    """Recirculating flow b(x) with vortex parameter a; x has shape (..., 3)."""
    x = np.asarray(x, dtype=np.float64)
    w = a * 2.0 * np.pi
    px, py, pz = x[..., 0], x[..., 1], x[..., 2]
    sx, cx = np.sin(w * px), np.cos(w * px)
    sy, cy = np.sin(w * (0.125 + py)), np.cos(w * (0.125 + py))
    sz8, cz8 = np.sin(w * (0.125 + pz)), np.cos(w * (0.125 + pz))
    sz, cz = np.sin(w * pz), np.cos(w * pz)
    return np.stack([
        sx * sy + sz8 * sx,
        cx * cy + cy * cz,
        cx * cz8 + sy * sz,
    ], axis=-1)


def flow_divergence(x: np.ndarray, a: float = 1.0, step: float = 1e-5) -> np.ndarray:
    """Central-difference divergence of the flow at points x of shape (m, 3)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    div = np.zeros(x.shape[0])
    for d in range(3):
        e = np.zeros(3)
        e[d] = step
        div += (flow_eval(x + e, a)[:, d] - flow_eval(x - e, a)[:, d]) / (2.0 * step)
    return div


def flow_field(grid: Grid3D, a: float = 1.0) -> CoefficientField:
    return CoefficientField(grid, flow_eval(grid.coordinates(), a), kind="flow")


def convdiff_system(grid: Grid3D, kappa: Optional[CoefficientField] = None, alpha: float = 0.0,
                    a: float = 1.0, rhs: Optional[np.ndarray] = None) -> BlockTridiagonalSystem:
    """-div(kappa grad u) + alpha b . grad u = 1 with first-order upwind convection."""
    if alpha < 0:
        raise InvalidInputError(f"convection strength must be >= 0, got {alpha}", argument="alpha")
    if alpha == 0:
        system = poisson_system(grid, kappa, rhs=rhs)
        system.kind = "convdiff"
        return system
    diffusion = _diffusion_operator(_kappa_array(grid, kappa), grid.h)
    convection = _upwind_convection(flow_eval(grid.coordinates(), a), grid.shape, grid.h)
    f = np.ones(grid.size) if rhs is None else rhs
    return BlockTridiagonalSystem.from_sparse(
        (diffusion + alpha * convection).tocsr(), grid.plane_size, rhs=f, symmetric=False,
        plane_points=grid.plane_points(), kind="convdiff")


def cell_peclet(alpha: float, grid: Grid3D, a: float = 1.0, kappa_min: float = 1.0) -> float:
    """alpha * max|b_i| * h / (2 kappa_min) over the grid nodes."""
    bmax = float(np.abs(flow_eval(grid.coordinates(), a)).max())
    return alpha * bmax * grid.h / (2.0 * kappa_min)


def alpha_for_cell_peclet(peclet: float, grid: Grid3D, a: float = 1.0, kappa_min: float = 1.0) -> float:
    """Convection strength giving the requested cell Peclet number."""
    unit = cell_peclet(1.0, grid, a, kappa_min)
    return peclet / unit


def velocity_eval(x: np.ndarray) -> np.ndarray:
    """Waveguide velocity c(x) = 1.25 (1 - 0.4 exp(-32 ((x-0.5)^2 + (y-0.5)^2)))."""
    x = np.asarray(x, dtype=np.float64)
    r2 = (x[..., 0] - 0.5) ** 2 + (x[..., 1] - 0.5) ** 2
    return 1.25 * (1.0 - 0.4 * np.exp(-32.0 * r2))


def exact_helmholtz_solution(grid: Grid3D) -> np.ndarray:
    """u = sin(pi x) sin(pi y) sin(pi z) sampled at the nodes."""
    return np.prod(np.sin(np.pi * grid.coordinates()), axis=1)


def helmholtz_system(grid: Grid3D, frequency: float = 0.0,
                     rhs: Optional[np.ndarray] = None) -> BlockTridiagonalSystem:
    """-lap u - (2 pi f)^2 / c^2 u = g with the forcing g of the manufactured solution."""
    if frequency < 0:
        raise InvalidInputError(f"frequency must be >= 0, got {frequency}", argument="frequency")
    coords = grid.coordinates()
    laplacian = _diffusion_operator(np.ones(grid.shape), grid.h)
    shift = (2.0 * np.pi * frequency) ** 2 / velocity_eval(coords) ** 2
    a = (laplacian - sp.diags(shift)).tocsr() if frequency > 0 else laplacian
    if rhs is None:
        u = exact_helmholtz_solution(grid)
        rhs = 3.0 * np.pi ** 2 * u - shift * u
    return BlockTridiagonalSystem.from_sparse(
        a, grid.plane_size, rhs=rhs, symmetric=True, plane_points=grid.plane_points(), kind="helmholtz")


def points_per_wavelength(frequency: float, h: float, c_min: float = WAVEGUIDE_C_MIN) -> float:
    if frequency <= 0:
        return float("inf")
    return c_min / (frequency * h)


def frequency_for_ppw(ppw: float, h: float, c_min: float = WAVEGUIDE_C_MIN) -> float:
    if ppw <= 0:
        raise InvalidInputError(f"points per wavelength must be positive, got {ppw}", argument="ppw")
    return c_min / (ppw * h)


# ---------------------------------------------------------------------------
# Gaussian random fields
# ---------------------------------------------------------------------------

@lru_cache(maxsize=4)
def _covariance_factor(n: int, dim: int, correlation_length: float, max_tries: int) -> np.ndarray:
    grid = Grid3D(n) if dim == 3 else Grid2D(n)
    coords = grid.coordinates()
    cov = np.exp(-cdist(coords, coords) / correlation_length)
    jitter = 0.0
    for attempt in range(1, max_tries + 1):
        try:
            factor = scipy.linalg.cholesky(cov + jitter * np.eye(cov.shape[0]), lower=True,
                                           check_finite=False)
            if jitter:
                logger.warning("Covariance needed jitter", jitter=jitter, attempts=attempt)
            return factor
        except np.linalg.LinAlgError:
            jitter = 1e-10 if jitter == 0.0 else jitter * 100.0
    raise FieldGenerationError(
        f"covariance of {coords.shape[0]} nodes is not positive definite", attempts=max_tries)


class GaussianFieldSampler:
    """Zero-mean, unit-variance Gaussian samples with covariance exp(-|x - y| / lambda).

    Grids up to ``max_dense_nodes`` use a Cholesky factor of the dense covariance;
    larger grids use random Fourier features whose frequencies follow the multivariate
    Cauchy spectral density of the exponential kernel.
    """

    def __init__(self, grid: StructuredGrid, correlation_length: float, max_dense_nodes: int = 8000,
                 n_features: int = 4096, max_tries: int = 4):
        if correlation_length <= 0:
            raise InvalidInputError("correlation length must be positive", argument="correlation_length")
        self.grid = grid
        self.correlation_length = float(correlation_length)
        self.dense = grid.size <= max_dense_nodes
        self.n_features = n_features
        self.max_tries = max_tries

    def sample(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        if self.dense:
            factor = _covariance_factor(self.grid.n, self.grid.dim, self.correlation_length,
                                        self.max_tries)
            return factor @ rng.standard_normal(factor.shape[0])
        dim = self.grid.dim
        g = rng.standard_normal((self.n_features, dim))
        w = rng.chisquare(1, size=self.n_features)
        omega = g / (self.correlation_length * np.sqrt(w))[:, None]
        phase = rng.uniform(0.0, 2.0 * np.pi, size=self.n_features)
        coords = self.grid.coordinates()
        z = np.zeros(coords.shape[0])
        for start in range(0, self.n_features, 256):
            stop = start + 256
            z += np.cos(coords @ omega[start:stop].T + phase[start:stop]).sum(axis=1)
        return np.sqrt(2.0 / self.n_features) * z


def rescale_contrast(z: np.ndarray, contrast_orders: float) -> np.ndarray:
    """kappa = 10^(c (t - 1/2)) with t the min-max normalized sample, so log10(max/min) = c."""
    spread = float(z.max() - z.min())
    if contrast_orders == 0 or spread == 0.0:
        return np.ones_like(z)
    t = (z - z.min()) / spread
    return 10.0 ** (contrast_orders * (t - 0.5))


def gaussian_random_field(grid: StructuredGrid, correlation_length: Optional[float] = None,
                          contrast_orders: float = 0.0, seed: int = 0,
                          max_dense_nodes: int = 8000) -> CoefficientField:
    """Log-normal permeability with exponential covariance and an exact contrast.

    The correlation length defaults to 3h.
    """
    if contrast_orders < 0:
        raise InvalidInputError("contrast must be >= 0", argument="contrast_orders")
    if contrast_orders == 0:
        return CoefficientField(grid, np.ones(grid.size), kind="kappa", seed=seed, contrast=0.0)
    lam = 3.0 * grid.h if correlation_length is None else correlation_length
    sampler = GaussianFieldSampler(grid, lam, max_dense_nodes=max_dense_nodes)
    z = sampler.sample(seed)
    kappa = rescale_contrast(z, contrast_orders)
    logger.debug("Sampled random field", n=grid.n, dim=grid.dim, seed=seed,
                 contrast=contrast_orders, dense=sampler.dense)
    return CoefficientField(grid, kappa, kind="kappa", seed=seed, contrast=contrast_orders)


# ---------------------------------------------------------------------------
# Problem assembly from parameters
# ---------------------------------------------------------------------------

@dataclass
class Problem:
    """A generated system together with the fields that produced it."""

    kind: str
    grid: Grid3D
    params: ProblemParams
    system: BlockTridiagonalSystem
    fields: Dict[str, CoefficientField] = field(default_factory=dict)

    @property
    def label(self) -> str:
        p = self.params
        extra = {
            "poisson": f"contrast={p.contrast:g},seed={p.seed}",
            "convdiff": f"alpha={p.alpha:g},a={p.vortices:g},contrast={p.contrast:g}",
            "helmholtz": f"f={p.frequency:g}",
        }[self.kind]
        return f"{self.kind}(n={self.grid.n},{extra})"


def _rhs(params: ProblemParams, size: int) -> Optional[np.ndarray]:
    if params.rhs == "ones":
        return np.ones(size)
    if params.rhs == "random":
        return np.random.default_rng(params.rhs_seed).standard_normal(size)
    return None


def build_problem(kind: ProblemKind, n: int, params: Optional[ProblemParams] = None) -> Problem:
    """Generate one seeded test problem."""
    params = params or ProblemParams()
    grid = Grid3D(n)
    rhs = _rhs(params, grid.size)
    fields: Dict[str, CoefficientField] = {}

    if kind == "helmholtz":
        fields["velocity"] = CoefficientField(grid, velocity_eval(grid.coordinates()), kind="velocity")
        system = helmholtz_system(grid, params.frequency, rhs=rhs)
    else:
        kappa = gaussian_random_field(grid, params.correlation_cells * grid.h, params.contrast,
                                      params.seed)
        fields["kappa"] = kappa
        if kind == "poisson":
            system = poisson_system(grid, kappa, rhs=rhs)
        elif kind == "convdiff":
            fields["flow"] = flow_field(grid, params.vortices)
            system = convdiff_system(grid, kappa, params.alpha, params.vortices, rhs=rhs)
        else:
            raise InvalidInputError(f"unknown problem kind {kind!r}", argument="kind")

    logger.info("Generated problem", kind=kind, n=n, unknowns=grid.size)
    return Problem(kind, grid, params, system, fields)

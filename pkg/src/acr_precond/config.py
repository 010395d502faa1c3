"""Configuration models for H-matrix options, Krylov solvers and benchmark sweeps using Pydantic."""

from pathlib import Path
from typing import List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

WEAK = "weak"

ProblemKind = Literal["poisson", "convdiff", "helmholtz"]

# Iteration caps used when no Krylov options are given.
POISSON_MAX_ITERS = 100
DEFAULT_MAX_ITERS = 100_000


class HOptions(BaseModel):
    """Construction options of an H-matrix: truncation accuracy, admissibility and leaf size."""

    model_config = ConfigDict(frozen=True)

    epsilon: float = Field(default=1e-2, ge=0.0, description="Block-wise relative truncation accuracy")
    eta: Union[float, Literal["weak"]] = Field(default=2.0, description="Admissibility weight or 'weak'")
    n_min: int = Field(default=32, ge=1, description="Leaf size threshold")

    @field_validator("eta", mode="before")
    @classmethod
    def normalize_eta(cls, v):
        """Accept numbers, numeric strings and any casing of 'weak'."""
        if isinstance(v, str):
            if v.strip().lower() == WEAK:
                return WEAK
            try:
                v = float(v)
            except ValueError:
                raise ValueError(f"eta must be a number or '{WEAK}', got {v!r}")
        if isinstance(v, (int, float)) and v < 0:
            raise ValueError("eta must be non-negative")
        return v

    @property
    def is_weak(self) -> bool:
        """True for the weak admissibility sentinel."""
        return self.eta == WEAK

    @classmethod
    def dense_only(cls) -> "HOptions":
        """Exact options: no truncation and every block kept as a single dense leaf."""
        return cls(epsilon=0.0, eta=0.0, n_min=2**31 - 1)

    def label(self) -> str:
        """Short label used in tables and file names."""
        eta = self.eta if self.is_weak else f"{self.eta:g}"
        return f"eps={self.epsilon:g},eta={eta},nmin={self.n_min}"


def eta_presets(n: int) -> dict:
    """Strong, intermediate and weak-like admissibility weights for a grid of n points per side."""
    return {"strong": 2.0, "intermediate": n / 2.0, "weak": 2.0 * n}


class KrylovOptions(BaseModel):
    """Krylov solver options."""

    model_config = ConfigDict(frozen=True)

    tol: float = Field(default=1e-8, gt=0.0, description="Relative residual target")
    max_iters: int = Field(default=DEFAULT_MAX_ITERS, ge=1)
    restart: int = Field(default=30, ge=1, description="GMRES restart length")
    side: Literal["left"] = "left"

    @classmethod
    def default_for(cls, kind: str) -> "KrylovOptions":
        """Iteration cap of 100 for Poisson runs, 100000 otherwise."""
        if kind == "poisson":
            return cls(max_iters=POISSON_MAX_ITERS)
        return cls(max_iters=DEFAULT_MAX_ITERS)


class ProblemParams(BaseModel):
    """Parameters of one generated problem."""

    model_config = ConfigDict(frozen=True)

    contrast: float = Field(default=0.0, ge=0.0, description="Orders of magnitude of coefficient contrast")
    correlation_cells: float = Field(default=3.0, gt=0.0, description="Correlation length in grid spacings")
    seed: int = Field(default=0, ge=0)
    alpha: float = Field(default=0.0, ge=0.0, description="Convection strength")
    vortices: float = Field(default=1.0, gt=0.0, description="Vortex parameter a of the recirculating flow")
    frequency: float = Field(default=0.0, ge=0.0, description="Helmholtz frequency in Hz")
    rhs: Literal["problem", "ones", "random"] = "problem"
    rhs_seed: int = Field(default=0, ge=0)


class BenchConfig(BaseModel):
    """Complete benchmark sweep configuration."""

    problem: ProblemKind = "poisson"
    n: int = Field(default=15, ge=2, description="Grid points per dimension")
    options: List[HOptions] = Field(default_factory=lambda: [HOptions()], min_length=1)
    problems: List[ProblemParams] = Field(default_factory=lambda: [ProblemParams()], min_length=1)
    solver: Optional[Literal["cg", "gmres"]] = None
    preconditioner: Literal["acr", "none"] = "acr"
    krylov: Optional[KrylovOptions] = None
    coarse_rows: int = Field(default=1, ge=1)
    fallback_to_gmres: bool = True
    apply_repeats: int = Field(default=3, ge=1)
    concurrent: bool = False
    max_workers: int = Field(default=2, ge=1)
    setup_workers: int = Field(default=1, ge=1)
    output: Optional[Path] = None
    history_dir: Optional[Path] = None

    @model_validator(mode="after")
    def fill_defaults_and_check(self) -> "BenchConfig":
        """Pick solver and iteration caps per problem kind and reject mismatched parameters."""
        if self.solver is None:
            self.solver = "cg" if self.problem == "poisson" else "gmres"
        if self.krylov is None:
            self.krylov = KrylovOptions.default_for(self.problem)
        for params in self.problems:
            if self.problem != "helmholtz" and params.frequency > 0:
                raise ValueError(f"frequency is only valid for helmholtz problems, not {self.problem}")
            if self.problem != "convdiff" and params.alpha > 0:
                raise ValueError(f"alpha is only valid for convdiff problems, not {self.problem}")
            if self.problem == "helmholtz" and params.contrast > 0:
                raise ValueError("helmholtz problems use the waveguide velocity, contrast must be 0")
        return self

    def sweep_points(self) -> List[tuple]:
        """Cartesian product of problem parameters and H options, problems outermost."""
        return [(params, opts) for params in self.problems for opts in self.options]

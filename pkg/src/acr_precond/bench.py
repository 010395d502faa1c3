"""Benchmark harness: sweep points, records and the plane-inverse tuning study."""

import math
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import psutil
import structlog
from pydantic import BaseModel, ConfigDict, Field

from .config import BenchConfig, HOptions, ProblemParams
from .core.acr import acr_setup
from .core.hmatrix import assemble, h_invert, identity_residual, plane_block_tree
from .core.krylov import KrylovResult, solve_with_fallback
from .core.problems import Grid2D, build_problem, gaussian_random_field, plane_operator_2d
from .exceptions import ErrorContext, ErrorFactory
from .exports import write_csv, write_history_csv
from .utils import median_seconds, save_json_file
from .workers import ProgressCallback, run_concurrently

logger = structlog.get_logger()

RECORD_COLUMNS = [
    "problem", "n", "unknowns", "epsilon", "eta", "n_min",
    "contrast", "seed", "alpha", "vortices", "frequency",
    "solver", "preconditioner", "setup_seconds", "apply_seconds",
    "iterations", "converged", "max_rank", "avg_rank", "footprint_bytes", "dense_bytes",
    "levels", "final_relres", "rss_bytes", "error_kind", "error_message",
]


class BenchRecord(BaseModel):
    """One sweep point."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    problem: str
    n: int
    unknowns: int
    epsilon: float
    eta: Union[float, str]
    n_min: int
    contrast: float = 0.0
    seed: int = 0
    alpha: float = 0.0
    vortices: float = 1.0
    frequency: float = 0.0
    solver: str = "cg"
    preconditioner: str = "acr"
    setup_seconds: float = 0.0
    apply_seconds: float = 0.0
    iterations: int = 0
    converged: bool = False
    max_rank: int = 0
    avg_rank: float = 0.0
    footprint_bytes: int = 0
    dense_bytes: int = 0
    levels: int = 0
    final_relres: float = float("nan")
    rss_bytes: int = 0
    error_kind: Optional[str] = None
    error_message: Optional[str] = None
    history: List[float] = Field(default_factory=list, exclude=True)
    solution: Optional[Any] = Field(default=None, exclude=True, repr=False)

    @property
    def ok(self) -> bool:
        return self.error_kind is None

    def as_row(self) -> Dict[str, Any]:
        return {key: getattr(self, key) for key in RECORD_COLUMNS}


def rss_bytes() -> int:
    """Resident memory of this process."""
    return int(psutil.Process().memory_info().rss)


def run_point(config: BenchConfig, params: ProblemParams, options: HOptions) -> BenchRecord:
    """Generate, set up and solve one sweep point; failures are recorded, never raised."""
    record = BenchRecord(
        problem=config.problem, n=config.n, unknowns=config.n ** 3,
        epsilon=options.epsilon, eta=options.eta, n_min=options.n_min,
        contrast=params.contrast, seed=params.seed, alpha=params.alpha,
        vortices=params.vortices, frequency=params.frequency,
        solver=config.solver, preconditioner=config.preconditioner,
    )
    log = logger.bind(problem=config.problem, n=config.n, options=options.label())
    try:
        problem = build_problem(config.problem, config.n, params)
        system = problem.system
        b = system.rhs
        apply_m = None
        if config.preconditioner == "acr":
            start = time.perf_counter()
            preconditioner = acr_setup(system, options, coarse_rows=config.coarse_rows,
                                       max_workers=config.setup_workers)
            record.setup_seconds = time.perf_counter() - start
            record.apply_seconds = median_seconds(lambda: preconditioner.apply(b), config.apply_repeats)
            record.max_rank, record.avg_rank = preconditioner.rank_stats()
            record.footprint_bytes = preconditioner.footprint()
            record.dense_bytes = preconditioner.dense_footprint()
            record.levels = preconditioner.level_count
            apply_m = preconditioner.apply
        record.rss_bytes = rss_bytes()

        result: KrylovResult = solve_with_fallback(
            system.matvec, apply_m, b, config.krylov, method=config.solver,
            fallback=config.fallback_to_gmres)
        record.solver = result.method
        record.iterations = result.iterations
        record.converged = result.converged
        record.history = list(result.history)
        record.solution = result.x
        record.final_relres = result.relative_residual(system.matvec, b)
        log.info("Sweep point finished", iterations=result.iterations, converged=result.converged,
                 relres=record.final_relres)
    except Exception as e:
        error = ErrorFactory.from_exception(e, ErrorContext(operation="run_point",
                                                            problem_kind=config.problem))
        record.error_kind = error.get_error_code()
        record.error_message = error.user_message
        log.error("Sweep point failed", error=error.user_message, error_kind=record.error_kind)
    return record


def run_benchmark(config: BenchConfig, progress_callback: Optional[ProgressCallback] = None
                  ) -> List[BenchRecord]:
    """Run every sweep point (problems outermost) and write the configured outputs."""
    points = config.sweep_points()
    logger.info("Starting sweep", problem=config.problem, n=config.n, points=len(points))
    tasks = [lambda params=params, opts=opts: run_point(config, params, opts) for params, opts in points]
    workers = config.max_workers if config.concurrent else 1
    records = run_concurrently(tasks, max_workers=workers, progress_callback=progress_callback,
                               name="sweep points")

    if config.output is not None:
        write_csv(config.output, [r.as_row() for r in records], RECORD_COLUMNS)
        save_json_file(config.output.with_suffix(".json"), config.model_dump(mode="json"))
    if config.history_dir is not None:
        for index, record in enumerate(records):
            if record.history:
                write_history_csv(_history_result(record),
                                  Path(config.history_dir) / f"history_{index:03d}.csv")
    failed = sum(1 for r in records if not r.ok)
    logger.info("Sweep finished", points=len(records), failed=failed)
    return records


def _history_result(record: BenchRecord) -> KrylovResult:
    return KrylovResult(x=np.empty(0), iterations=record.iterations, converged=record.converged,
                        history=record.history, final_relres=record.final_relres, method=record.solver)


def plane_inverse_study(n: int, contrast: float = 4.0, epsilon: float = 1e-2,
                        etas: Sequence[Union[float, str]] = (2.0, 32.0, 64.0, 128.0, "weak"),
                        seed: int = 0, n_min: int = 32) -> List[Dict[str, Any]]:
    """H-inverse of the 2D variable-coefficient plane operator for a range of eta.

    Reports bytes, ranks and ||A inv(A) - I||_F per eta.
    """
    grid = Grid2D(n)
    kappa = gaussian_random_field(grid, 3.0 * grid.h, contrast, seed)
    a = plane_operator_2d(n, kappa.values)
    rows = []
    for eta in etas:
        options = HOptions(epsilon=epsilon, eta=eta, n_min=n_min)
        start = time.perf_counter()
        h = assemble(a, plane_block_tree(grid.coordinates(), options))
        inverse = h_invert(h)
        seconds = time.perf_counter() - start
        max_rank, avg_rank = inverse.rank_stats()
        rows.append({
            "eta": options.eta,
            "bytes": inverse.footprint(),
            "max_rank": max_rank,
            "avg_rank": avg_rank,
            "identity_error": identity_residual(a, inverse),
            "seconds": seconds,
        })
        logger.info("Plane inverse built", n=n, eta=options.eta, bytes=rows[-1]["bytes"],
                    max_rank=max_rank, error=rows[-1]["identity_error"])
    return rows


def complexity_estimates(unknowns: int, rank: float) -> Dict[str, float]:
    """Model costs: setup k^2 N log^2 N, apply k N log N, memory k N log N (log base 2)."""
    log_n = math.log2(unknowns)
    return {
        "setup": rank * rank * unknowns * log_n * log_n,
        "apply": rank * unknowns * log_n,
        "memory": rank * unknowns * log_n,
    }

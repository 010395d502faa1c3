"""Core numerical modules: low-rank kernels, H-matrices, problems, cyclic reduction, Krylov solvers."""

from .acr import ACRPreconditioner, acr_apply, acr_setup, exact_cr_solve
from .hmatrix import HMatrix, assemble, build_block_tree, build_cluster_tree, h_invert, h_matvec
from .krylov import KrylovResult, cg, gmres, solve_with_fallback
from .planning import ParallelPlan, comm_volume, plane_assignment
from .problems import BlockTridiagonalSystem, Grid3D, build_problem

__all__ = [
    "ACRPreconditioner",
    "acr_apply",
    "acr_setup",
    "exact_cr_solve",
    "HMatrix",
    "assemble",
    "build_block_tree",
    "build_cluster_tree",
    "h_invert",
    "h_matvec",
    "KrylovResult",
    "cg",
    "gmres",
    "solve_with_fallback",
    "ParallelPlan",
    "comm_volume",
    "plane_assignment",
    "BlockTridiagonalSystem",
    "Grid3D",
    "build_problem",
]

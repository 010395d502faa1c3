"""ACR preconditioner - H-matrix accelerated cyclic reduction with a benchmark CLI."""

__version__ = "0.1.0"
__description__ = "Accelerated cyclic reduction preconditioner for 3D elliptic PDEs with a benchmark CLI"

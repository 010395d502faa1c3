"""Preconditioned conjugate gradients and left-preconditioned restarted GMRES.

Operators and preconditioners are plain callables x -> y; sparse matrices, dense arrays
and objects with a ``matvec`` method are wrapped by `as_operator`.
"""

from dataclasses import dataclass, field
from typing import Any, Callable, List, Optional

import numpy as np
import scipy.linalg
import structlog

from ..config import KrylovOptions
from ..exceptions import KrylovBreakdownError, ShapeMismatchError

logger = structlog.get_logger()

Operator = Callable[[np.ndarray], np.ndarray]

_EPS = np.finfo(np.float64).eps


def as_operator(a: Any) -> Operator:
    """Wrap a matrix-like object as a callable."""
    if a is None:
        return lambda x: x
    if hasattr(a, "matvec") and not hasattr(a, "toarray"):
        return a.matvec
    if callable(a):
        return a
    return lambda x: a @ x


@dataclass
class KrylovResult:
    """Outcome of one Krylov solve.

    ``history`` has iterations + 1 entries of relative residual norms: true residuals for
    CG, preconditioned residuals relative to ||M b|| for GMRES. ``final_relres`` is the
    true relative residual of ``x``.
    """

    x: np.ndarray
    iterations: int
    converged: bool
    history: List[float] = field(default_factory=list)
    final_relres: float = float("nan")
    method: str = "cg"

    def relative_residual(self, apply_a: Any, b: np.ndarray) -> float:
        """||b - A x|| / ||b|| recomputed from the stored solution."""
        b = np.asarray(b, dtype=np.float64)
        bnorm = np.linalg.norm(b)
        r = np.linalg.norm(b - as_operator(apply_a)(self.x))
        return float(r / bnorm) if bnorm > 0 else float(r)


def _check_rhs(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 1:
        raise ShapeMismatchError("right-hand side must be a vector", actual=b.shape)
    return b


def cg(apply_a: Any, apply_m: Any, b: np.ndarray, opts: Optional[KrylovOptions] = None,
       x0: Optional[np.ndarray] = None) -> KrylovResult:
    """Preconditioned conjugate gradients stopping on the true relative residual.

    Raises KrylovBreakdownError when p^T A p <= 0 or r^T M r <= 0.
    """
    opts = opts or KrylovOptions()
    b = _check_rhs(b)
    a_op, m_op = as_operator(apply_a), as_operator(apply_m)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return KrylovResult(np.zeros_like(b), 0, True, [0.0], 0.0, "cg")

    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - a_op(x)
    history = [float(np.linalg.norm(r)) / bnorm]
    if history[0] <= opts.tol:
        return KrylovResult(x, 0, True, history, history[0], "cg")

    z = m_op(r)
    rz = float(r @ z)
    if not rz > 0:
        raise KrylovBreakdownError("preconditioner is not positive on the residual", iteration=0)
    p = z.copy()
    converged = False
    iteration = 0
    for iteration in range(1, opts.max_iters + 1):
        q = a_op(p)
        pq = float(p @ q)
        if not (pq > 0 and np.isfinite(pq)):
            raise KrylovBreakdownError(f"p^T A p = {pq:.3e}", iteration=iteration)
        alpha = rz / pq
        x += alpha * p
        r -= alpha * q
        relres = float(np.linalg.norm(r)) / bnorm
        if relres <= opts.tol:
            r = b - a_op(x)
            relres = float(np.linalg.norm(r)) / bnorm
            if relres <= opts.tol:
                history.append(relres)
                converged = True
                break
        history.append(relres)
        z = m_op(r)
        rz_next = float(r @ z)
        if not (rz_next > 0 and np.isfinite(rz_next)):
            raise KrylovBreakdownError(f"r^T M r = {rz_next:.3e}", iteration=iteration)
        p = z + (rz_next / rz) * p
        rz = rz_next

    final = float(np.linalg.norm(b - a_op(x))) / bnorm
    logger.debug("CG finished", iterations=iteration, converged=converged, relres=final)
    return KrylovResult(x, iteration, converged, history, final, "cg")


def gmres(apply_a: Any, apply_m: Any, b: np.ndarray, opts: Optional[KrylovOptions] = None,
          x0: Optional[np.ndarray] = None) -> KrylovResult:
    """Left-preconditioned restarted GMRES with modified Gram-Schmidt and Givens rotations.

    Convergence is decided on the true relative residual, checked at every restart and at
    termination; the inner target on the preconditioned residual is tightened when the two
    disagree.
    """
    opts = opts or KrylovOptions()
    b = _check_rhs(b)
    a_op, m_op = as_operator(apply_a), as_operator(apply_m)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return KrylovResult(np.zeros_like(b), 0, True, [0.0], 0.0, "gmres")

    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    mb_norm = float(np.linalg.norm(m_op(b)))
    if mb_norm == 0.0:
        raise KrylovBreakdownError("preconditioner maps the right-hand side to zero", iteration=0)

    r = m_op(b - a_op(x))
    beta = float(np.linalg.norm(r))
    history = [beta / mb_norm]
    true_relres = float(np.linalg.norm(b - a_op(x))) / bnorm
    if true_relres <= opts.tol:
        return KrylovResult(x, 0, True, history, true_relres, "gmres")

    target = opts.tol
    iterations = 0
    converged = False
    n = b.size
    while iterations < opts.max_iters and beta > 0.0:
        m = min(opts.restart, opts.max_iters - iterations)
        basis = np.zeros((m + 1, n))
        hess = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        basis[0] = r / beta
        g[0] = beta
        k = 0
        for j in range(m):
            w = m_op(a_op(basis[j]))
            w_norm = float(np.linalg.norm(w))
            for i in range(j + 1):
                hess[i, j] = w @ basis[i]
                w -= hess[i, j] * basis[i]
            h_next = float(np.linalg.norm(w))
            hess[j + 1, j] = h_next

            for i in range(j):
                t = cs[i] * hess[i, j] + sn[i] * hess[i + 1, j]
                hess[i + 1, j] = -sn[i] * hess[i, j] + cs[i] * hess[i + 1, j]
                hess[i, j] = t
            denom = np.hypot(hess[j, j], hess[j + 1, j])
            if denom == 0.0:
                raise KrylovBreakdownError("Hessenberg column vanished", iteration=iterations + 1)
            cs[j] = hess[j, j] / denom
            sn[j] = hess[j + 1, j] / denom
            hess[j, j] = denom
            hess[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]

            iterations += 1
            k = j + 1
            history.append(abs(g[j + 1]) / mb_norm)
            if h_next <= 10.0 * _EPS * w_norm:
                break
            basis[j + 1] = w / h_next
            if history[-1] <= target:
                break

        y = scipy.linalg.solve_triangular(hess[:k, :k], g[:k], check_finite=False)
        x += basis[:k].T @ y
        true_relres = float(np.linalg.norm(b - a_op(x))) / bnorm
        if true_relres <= opts.tol:
            converged = True
            break
        if history[-1] <= target:
            target = max(min(target, history[-1] * opts.tol / true_relres), _EPS)
        r = m_op(b - a_op(x))
        beta = float(np.linalg.norm(r))

    logger.debug("GMRES finished", iterations=iterations, converged=converged, relres=true_relres)
    return KrylovResult(x, iterations, converged, history, true_relres, "gmres")


def solve_with_fallback(apply_a: Any, apply_m: Any, b: np.ndarray,
                        opts: Optional[KrylovOptions] = None, method: str = "cg",
                        fallback: bool = True) -> KrylovResult:
    """Run CG or GMRES; a CG breakdown switches to GMRES when fallback is set."""
    if method == "gmres":
        return gmres(apply_a, apply_m, b, opts)
    try:
        return cg(apply_a, apply_m, b, opts)
    except KrylovBreakdownError as e:
        if not fallback:
            raise
        logger.warning("CG breakdown, switching to GMRES", iteration=e.iteration, error=str(e))
        result = gmres(apply_a, apply_m, b, opts)
        result.method = "gmres-fallback"
        return result

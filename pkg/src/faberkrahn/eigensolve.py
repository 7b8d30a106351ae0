"""Ground state of the pencil ``K u = lambda M u`` restricted to a support."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .discretize import EmptySupportError, restrict_to_support


class ConvergenceError(RuntimeError):
    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class SpectralPair:
    """First Dirichlet eigenpair; ``u`` is on the full grid, zero off the support."""

    lam: float
    u: np.ndarray
    residual: float
    iterations: int
    support: np.ndarray


def _start_vector(n, seed):
    rng = np.random.default_rng(seed)
    return 0.5 + rng.random(n)


def _jacobi_cg_solver(A, rtol):
    d = A.diagonal()
    P = spla.LinearOperator(A.shape, matvec=lambda x: x / d, dtype=float)

    def solve(b, x0=None):
        x, info = spla.cg(A, b, x0=x0, rtol=rtol, atol=0.0, M=P, maxiter=20 * A.shape[0])
        if info != 0:
            raise ConvergenceError(f"inner CG did not converge (info={info})")
        return x

    return solve


def inverse_iteration(K, M, tol=1e-6, max_iter=500, seed=0, inner="direct", x0=None):
    """Smallest eigenpair of the SPD pencil ``(K, diag(M))``.

    Stops when the relative eigenvalue change is below ``tol`` and the
    residual ``||K u - lam M u||_{M^-1}`` is below ``tol * lam * ||u||_M``.
    Returns ``(lam, u, residual, iterations)`` with ``u^T M u = 1``.
    """
    n = M.size
    # singular pencils (no Dirichlet face anywhere) get a tiny positive shift
    rowsum = np.abs(np.asarray(K.sum(axis=1)).ravel()).sum()
    scale = float(K.diagonal().sum() / M.sum())
    shift = 0.0 if rowsum > 1e-12 * K.diagonal().sum() else 1e-8 * scale
    A = (K + shift * sp.diags(M)).tocsc()
    # with lam ~ 0 the residual is measured against the operator scale instead
    floor = 1e-4 * scale if shift > 0 else 0.0
    if inner == "direct":
        lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                       options={"SymmetricMode": True})
        solve = lambda b, x0=None: lu.solve(b)  # noqa: E731
    elif inner == "cg":
        solve = _jacobi_cg_solver(A.tocsr(), rtol=min(1e-3 * tol, 1e-10))
    else:
        raise ValueError(f"unknown inner solver {inner!r}")

    x = _start_vector(n, seed) if x0 is None else np.asarray(x0, float).copy()
    x /= np.sqrt(x @ (M * x))
    lam = float(x @ (K @ x))
    best = (np.inf, lam, x)
    for it in range(1, max_iter + 1):
        y = solve(M * x, x)
        y /= np.sqrt(y @ (M * y))
        new = float(y @ (K @ y))
        r = K @ y - new * (M * y)
        res = float(np.sqrt(r @ (r / M)))
        if res < best[0]:
            best = (res, new, y)
        change = abs(new - lam) / max(abs(new), floor, 1e-300)
        lam, x = new, y
        if change < tol and res < tol * max(lam, floor):
            break
    else:
        raise ConvergenceError(
            f"inverse iteration stalled after {max_iter} steps (best residual {best[0]:.3e})",
            best=best)
    return lam, x, res, it


def smallest_eigenpair(ops, support=None, tol=1e-6, seed=0, max_iter=500, inner="direct",
                       order=None, guess=None):
    """First Dirichlet eigenpair on ``support`` (a full-grid indicator).

    ``ops`` is the full-grid pair; with ``support=None`` the whole grid is
    used. The eigenvector is made nonnegative and normalised to
    ``int u^2 dvol = 1``. ``guess`` is an optional full-grid start field
    (e.g. the ground state of a nearby support); it is floored at a small
    positive value so that no start entry vanishes.
    """
    grid = ops.grid
    if support is None:
        support = np.ones(grid.size, bool)
    mask = np.asarray(support, bool).ravel()
    if not mask.any():
        raise EmptySupportError("empty support")
    if not tol > 0:
        raise ValueError("tol must be positive")
    sub = restrict_to_support(ops, mask, order=order)
    x0 = None
    if guess is not None:
        x0 = np.abs(np.asarray(guess, float).ravel()[sub.index])
        top = x0.max()
        if not np.isfinite(top) or top == 0.0:
            x0 = None
        else:
            x0 = x0 + 1e-3 * top
    lam, x, res, it = inverse_iteration(sub.K, sub.M, tol=tol, max_iter=max_iter, seed=seed,
                                        inner=inner, x0=x0)
    # ground state is sign-definite; fix the sign on the largest entry
    k = int(np.argmax(np.abs(x)))
    if x[k] < 0:
        x = -x
    x = np.abs(x)
    x /= np.sqrt(x @ (sub.M * x))
    lam = float(x @ (sub.K @ x))
    u = sub.to_grid(x)
    return SpectralPair(lam=lam, u=u, residual=res, iterations=it, support=mask.reshape(grid.shape))


def rayleigh_quotient(ops, v, support=None):
    """``v^T K v / v^T M v``.

    With ``support`` given, ``ops`` is the full pair and ``v`` a full-grid
    field; the quotient uses the Dirichlet operator on that support.
    """
    if support is not None:
        ops = restrict_to_support(ops, support)
        v = np.asarray(v, float).ravel()[ops.index]
    v = np.asarray(v, float).ravel()
    den = float(v @ (ops.M * v))
    if den == 0.0:
        raise ValueError("zero field has no Rayleigh quotient")
    return float(v @ (ops.K @ v)) / den

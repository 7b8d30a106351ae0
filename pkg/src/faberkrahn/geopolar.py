"""Spectral Dirichlet eigenvalues of geodesic balls on surfaces of revolution.

Around a centre point the metric is written in geodesic polar coordinates,
``d rho^2 + G(rho, alpha)^2 d alpha^2``, where ``G`` is the Jacobi field
along the geodesic leaving at angle ``alpha`` (``G'' = -K G``, ``G(0) = 0``,
``G'(0) = 1``). The Laplace-Beltrami operator becomes

    u_rr + (G_r / G) u_r + u_aa / G^2 - (G_a / G^3) u_a

and is discretised with Chebyshev collocation on ``rho in [-r, r]`` (the
point ``(-rho, alpha)`` is identified with ``(rho, alpha + pi)``, which
removes the coordinate singularity at the centre) and Fourier collocation in
``alpha``. The error decays spectrally, which is what resolves eigenvalue
gaps far below any grid discretisation error.

Supported geometries are the built-in charts, all of the form
``du^2 + f(u)^2 dv^2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.integrate import solve_ivp
from scipy.optimize import brentq


@dataclass(frozen=True)
class RevolutionProfile:
    """``ds^2 = du^2 + f(u)^2 dv^2`` with ``f``, ``f'`` and ``f''`` in closed form."""

    f: object
    df: object
    d2f: object

    def curvature(self, u):
        return -self.d2f(u) / self.f(u)


def revolution_profile(chart):
    """Profile and chart-to-``(u, v)`` map for a built-in chart.

    Returns ``(profile, to_uv)``.
    """
    kind = chart.kind
    c = chart.scale
    if kind == "catenoid":
        a = chart.params["neck"]
        prof = RevolutionProfile(
            f=lambda u: c * np.sqrt((u / c) ** 2 + a * a),
            df=lambda u: (u / c) / np.sqrt((u / c) ** 2 + a * a),
            d2f=lambda u: a * a / (c * ((u / c) ** 2 + a * a) ** 1.5),
        )
        return prof, lambda x: (c * x[1], x[0])
    if kind == "sphere":
        R = chart.params["R"] * c
        prof = RevolutionProfile(
            f=lambda u: R * np.sin(u / R),
            df=lambda u: np.cos(u / R),
            d2f=lambda u: -np.sin(u / R) / R,
        )
        return prof, lambda x: (R * x[0], x[1])
    if kind == "flat_torus":
        prof = RevolutionProfile(f=lambda u: c + 0.0 * u, df=lambda u: 0.0 * u,
                                 d2f=lambda u: 0.0 * u)
        return prof, lambda x: (c * x[0], x[1])
    raise ValueError(f"no closed-form revolution profile for chart kind {kind!r}")


def _ray_rhs(prof):
    def rhs(s, z):
        u, v, du, dv, J, dJ, area = z
        f, fp = prof.f(u), prof.df(u)
        return [du, dv, f * fp * dv * dv, -2.0 * fp / f * du * dv,
                dJ, prof.d2f(u) / f * J, J]

    return rhs


@dataclass
class PolarRays:
    """Geodesics and Jacobi fields leaving the centre at equispaced angles."""

    alpha: np.ndarray
    sols: list
    r_max: float

    def G(self, rho):
        """``(G, G_rho)`` at radii ``rho`` (rows) and every angle (columns)."""
        rho = np.atleast_1d(rho)
        out = np.array([s.sol(rho)[4:6] for s in self.sols])  # (n_alpha, 2, n_rho)
        return out[:, 0, :].T, out[:, 1, :].T

    def volume(self, r):
        areas = np.array([s.sol(r)[6] for s in self.sols])
        return float(areas.mean() * 2 * math.pi)


def trace_rays(prof, uv0, n_alpha, r_max, rtol=1e-12):
    u0, v0 = uv0
    f0 = float(prof.f(u0))
    alpha = 2 * math.pi * np.arange(n_alpha) / n_alpha
    rhs = _ray_rhs(prof)
    sols = []
    for a in alpha:
        z0 = [u0, v0, math.sin(a), math.cos(a) / f0, 0.0, 1.0, 0.0]
        sol = solve_ivp(rhs, (0.0, r_max), z0, method="DOP853", rtol=rtol, atol=1e-14,
                        dense_output=True)
        if not sol.success:
            raise RuntimeError(f"geodesic integration failed: {sol.message}")
        sols.append(sol)
    return PolarRays(alpha=alpha, sols=sols, r_max=r_max)


def cheb(N):
    """Chebyshev points ``cos(pi j / N)`` and the differentiation matrix."""
    x = np.cos(np.pi * np.arange(N + 1) / N)
    c = np.ones(N + 1)
    c[0] = c[-1] = 2.0
    c *= (-1.0) ** np.arange(N + 1)
    X = np.tile(x, (N + 1, 1)).T
    dX = X - X.T
    D = np.outer(c, 1.0 / c) / (dX + np.eye(N + 1))
    D -= np.diag(D.sum(axis=1))
    return D, x


def fourier_diff(M):
    """First and second Fourier differentiation matrices on ``M`` equispaced points."""
    k = np.fft.fftfreq(M, d=1.0 / M)
    k1 = 1j * k
    if M % 2 == 0:
        k1[M // 2] = 0.0
    eye = np.eye(M)
    F = np.fft.fft(eye, axis=0)
    D1 = np.real(np.fft.ifft(k1[:, None] * F, axis=0))
    D2 = np.real(np.fft.ifft((-(k**2))[:, None] * F, axis=0))
    return D1, D2


@dataclass(frozen=True)
class PolarEigen:
    lam: float
    radius: float
    volume: float
    n_rho: int
    n_alpha: int


def polar_operator(rays, r, n_rho):
    """Dense matrix of ``-Delta`` on ``{rho < r}`` with Dirichlet data, unknowns ``(rho_i > 0, alpha_k)``."""
    if n_rho % 2 == 0:
        raise ValueError("n_rho must be odd so that the centre is not a collocation point")
    M = rays.alpha.size
    if M % 2:
        raise ValueError("n_alpha must be even")
    D, x = cheb(n_rho)
    rho = r * x
    D1 = D / r
    D2 = D1 @ D1
    H = (n_rho - 1) // 2
    pos = np.arange(1, H + 1)
    neg = n_rho - pos  # rho_neg[i] = -rho_pos[i]
    G, Gr = rays.G(rho[pos])  # (H, M)
    FA1, FA2 = fourier_diff(M)
    Ga = G @ FA1.T
    P = np.roll(np.eye(M), M // 2, axis=1)  # (P u)_k = u_{k + M/2}
    I_M = np.eye(M)
    I_H = np.eye(H)
    d2 = np.kron(D2[np.ix_(pos, pos)], I_M) + np.kron(D2[np.ix_(pos, neg)], P)
    d1 = np.kron(D1[np.ix_(pos, pos)], I_M) + np.kron(D1[np.ix_(pos, neg)], P)
    a = (Gr / G).ravel()
    b = (1.0 / G**2).ravel()
    c = (-Ga / G**3).ravel()
    L = d2 + a[:, None] * d1 + b[:, None] * np.kron(I_H, FA2) + c[:, None] * np.kron(I_H, FA1)
    return -L


def smallest_real_eigenvalue(A):
    w = sla.eigvals(A)
    real = w[np.abs(w.imag) < 1e-8 * np.maximum(1.0, np.abs(w.real))].real
    if real.size == 0:
        raise RuntimeError("no real eigenvalue found")
    return float(real.min())


def ball_eigenvalue(chart, x0, m, n_rho=31, n_alpha=32, r_guess=None):
    """First Dirichlet eigenvalue of the geodesic ball of volume ``m`` about ``x0``.

    ``x0`` is a chart point; the ball must not reach a pole or a conjugate
    point. Returns a :class:`PolarEigen`.
    """
    prof, to_uv = revolution_profile(chart)
    uv0 = to_uv(x0)
    if r_guess is None:
        r_guess = math.sqrt(m / math.pi)
    r_max = 1.6 * r_guess
    rays = None
    for _ in range(6):
        rays = trace_rays(prof, uv0, n_alpha, r_max)
        if rays.volume(r_max) > m:
            break
        r_max *= 1.6
    else:
        raise ValueError("could not bracket the ball radius")
    r = brentq(lambda s: rays.volume(s) - m, 1e-6 * r_max, r_max, xtol=1e-15, rtol=1e-15)
    lam = smallest_real_eigenvalue(polar_operator(rays, r, n_rho))
    return PolarEigen(lam=lam, radius=r, volume=rays.volume(r), n_rho=n_rho, n_alpha=n_alpha)


def converged_ball_eigenvalue(chart, x0, m, levels=((21, 16), (31, 24), (41, 32))):
    """``ball_eigenvalue`` at increasing resolution; returns ``(finest, spread)``.

    ``spread`` is the change between the two finest levels, a practical
    error bound for a spectrally converging sequence.
    """
    vals = [ball_eigenvalue(chart, x0, m, n_rho=nr, n_alpha=na) for nr, na in levels]
    return vals[-1], abs(vals[-1].lam - vals[-2].lam)

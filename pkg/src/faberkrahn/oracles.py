"""Independent reference values for the flat disk and simple model problems.

The disk eigenpair comes from shooting on the radial equation
``y'' + y'/s + mu y = 0``, ``y(0) = 1``, ``y'(0) = 0`` on the unit radius;
no Bessel-function tables are used.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

_S0 = 1e-3


def _radial(mu, with_mass=False):
    # series start off the singular point s = 0
    y0 = 1 - mu * _S0**2 / 4 + mu**2 * _S0**4 / 64
    dy0 = -mu * _S0 / 2 + mu**2 * _S0**3 / 16
    m0 = _S0**2 / 2  # int_0^s y^2 s ds with y ~ 1

    def rhs(s, z):
        y, dy = z[0], z[1]
        out = [dy, -dy / s - mu * y]
        if with_mass:
            out.append(y * y * s)
        return out

    z0 = [y0, dy0] + ([m0] if with_mass else [])
    sol = solve_ivp(rhs, (_S0, 1.0), z0, method="DOP853", rtol=1e-13, atol=1e-15)
    return sol.y[:, -1]


@dataclass(frozen=True)
class DiskGroundState:
    j01: float
    boundary_slope: float  # y'(1) of the profile with y(0) = 1
    mass: float  # int_0^1 y(s)^2 s ds


@functools.lru_cache(maxsize=1)
def disk_ground_state():
    mu = brentq(lambda m: _radial(m)[0], 4.0, 8.0, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    y1, dy1, mass = _radial(mu, with_mass=True)
    return DiskGroundState(j01=math.sqrt(mu), boundary_slope=float(dy1), mass=float(mass))


def bessel_j01():
    """First zero of J0 from the shooting oracle."""
    return disk_ground_state().j01


def disk_eigenvalue(m):
    """First Dirichlet eigenvalue of the flat disk of area ``m``."""
    return math.pi * bessel_j01() ** 2 / m


def disk_multiplier(m):
    """``|u'(R)|^2`` of the L2-normalised disk ground state of area ``m``.

    With ``u(r) = A y(r/R)`` and ``int u^2 = 1`` one has
    ``A^2 = 1/(2 pi R^2 mass)`` and ``u'(R) = A y'(1)/R``.
    """
    gs = disk_ground_state()
    R2 = m / math.pi
    A2 = 1.0 / (2 * math.pi * R2 * gs.mass)
    return A2 * gs.boundary_slope**2 / R2


def square_eigenvalue(a):
    """``2 pi^2 / a^2`` for the ``a x a`` square."""
    return 2 * math.pi**2 / a**2


def interval_multiplier(a):
    """``u'(0)^2`` for ``u = sqrt(2/a) sin(pi x/a)`` on ``(0, a)``."""
    return 2 * math.pi**2 / a**3

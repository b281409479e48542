"""Quadrature on the reference triangle and the reference interval."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import factorial

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

# Temam form on P2+bubble velocities has integrand degree 3 + 2 + 3 = 8; the
# skew-symmetry identities only hold to roundoff when this is integrated exactly.
DEFAULT_DEGREE = 8


@dataclass(frozen=True)
class QuadratureRule:
    """Points on the reference triangle (0,0), (1,0), (0,1) and positive weights."""

    points: np.ndarray
    weights: np.ndarray
    degree: int

    def __len__(self):
        return len(self.weights)


@lru_cache(maxsize=None)
def triangle_rule(degree: int = DEFAULT_DEGREE) -> QuadratureRule:
    """Collapsed (conical product) Gauss rule exact for total degree ``degree``.

    Gauss-Jacobi(1, 0) in the collapsed direction absorbs the Duffy Jacobian,
    so all weights are positive and all points are interior.
    """
    n = max(1, (degree + 2) // 2)
    t, wt = roots_jacobi(n, 1.0, 0.0)
    s, ws = roots_legendre(n)
    u = 0.5 * (1.0 + t)
    v = 0.5 * (1.0 + s)
    U, V = np.meshgrid(u, v, indexing="ij")
    W = np.outer(wt, ws) / 8.0
    points = np.stack([U.ravel(), ((1.0 - U) * V).ravel()], axis=1)
    return QuadratureRule(points, W.ravel(), degree)


@lru_cache(maxsize=None)
def interval_rule(degree: int = 7) -> QuadratureRule:
    """Gauss-Legendre on [0, 1]; points stored as shape (n,)."""
    n = max(1, (degree + 2) // 2)
    s, w = roots_legendre(n)
    return QuadratureRule(0.5 * (1.0 + s), 0.5 * w, degree)


def monomial_integral(a: int, b: int) -> float:
    """Exact integral of x^a y^b over the reference triangle."""
    return factorial(a) * factorial(b) / factorial(a + b + 2)

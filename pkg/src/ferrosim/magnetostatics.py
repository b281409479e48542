"""Scalar-potential magnetostatics and the reduced-model magnetizing field."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import forms
from .linalg import Factorization, bordered
from .spaces import SpaceSet


@dataclass(frozen=True)
class PotentialSolve:
    potential: np.ndarray  # X_h coefficients, zero mean
    field: np.ndarray  # M_h coefficients of grad(potential)
    residual: float = 0.0


def potential_factorization(sp: SpaceSet) -> Factorization:
    """Neumann Laplacian on X_h bordered by the zero-mean constraint."""
    key = ("potential_lu",)
    if key not in sp.cache:
        K = forms.stiffness_matrix(sp, sp.potential)
        m = forms.mean_functional(sp, sp.potential)
        sp.cache[key] = Factorization(bordered(K, m), "potential problem")
    return sp.cache[key]


def solve_potential(sp: SpaceSet, M, h_a_q) -> PotentialSolve:
    """Solve (grad Phi, grad X) = (h_a - M, grad X) with mean(Phi) = 0.

    ``h_a_q`` is the applied field sampled at cell quadrature points (C, nq, 2);
    ``M`` is a magnetization coefficient vector.
    """
    M = np.asarray(M, dtype=float)
    if M.shape != (sp.magnetization.ndofs,):
        raise ValueError(f"M: expected {sp.magnetization.ndofs} coefficients, got {M.shape}")
    h_a_q = np.asarray(h_a_q, dtype=float)
    Mq = sp.eval(sp.magnetization, M)
    b = forms.gradient_load(sp, h_a_q - Mq)
    lu = potential_factorization(sp)
    x = lu.solve(np.append(b, 0.0))
    phi = x[:-1]
    return PotentialSolve(phi, sp.gradient_to_magnetization(phi), lu.last_residual)


def simplified_field(sp: SpaceSet, h_a) -> np.ndarray:
    """Elementwise P1 interpolant of the applied field in M_h.

    ``h_a`` maps points (N, 2) to field values (N, 2).  Vertex values are
    shared by all cells around a vertex, so the result has no jumps wherever
    the field is evaluated consistently.
    """
    vals = np.asarray(h_a(sp.mesh.vertices), dtype=float)
    return sp.magnetization_from_vertices(vals[sp.mesh.cells])

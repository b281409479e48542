"""Sparse direct solvers with residual contracts.

All systems are factorized with SuperLU.  A factorization is reused for every
right-hand side that shares the matrix (the Cahn-Hilliard block for a whole
run, the Stokes block for every Picard iterate of a step).
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .errors import NumericalFailure

RESIDUAL_TOL = 1e-10  # single source of truth for all linear-solve contracts


def _inf_norm(A) -> float:
    return float(abs(A).sum(axis=1).max()) if A.shape[0] else 0.0


class Factorization:
    """LU factorization of a square sparse matrix with a checked ``solve``."""

    def __init__(self, A, label: str = "system", tol: float = RESIDUAL_TOL):
        A = sps.csc_matrix(A)
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"{label}: matrix must be square, got {A.shape}")
        self.A = A
        self.label = label
        self.tol = tol
        self.norm = _inf_norm(A)
        try:
            self.lu = spla.splu(A)
        except RuntimeError as exc:  # SuperLU reports exact singularity this way
            raise NumericalFailure(f"{label}: singular factorization ({exc})") from exc
        self.last_residual = 0.0

    def solve(self, b) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        x = self.lu.solve(b)
        r = self.A @ x - b
        scale = self.norm * np.max(np.abs(x), initial=0.0) + np.max(np.abs(b), initial=0.0)
        res = np.max(np.abs(r), initial=0.0)
        self.last_residual = res / scale if scale > 0 else res
        if not np.all(np.isfinite(x)) or res > self.tol * scale:
            raise NumericalFailure(
                f"{self.label}: residual {res:.3e} exceeds {self.tol:g} x scale {scale:.3e}",
                residual=self.last_residual,
            )
        return x


def solve_direct(A, b, tol: float = RESIDUAL_TOL) -> np.ndarray:
    """Solve A x = b; guarantees |Ax - b| <= tol (|A||x| + |b|) in the max norm."""
    return Factorization(A, "direct solve", tol).solve(b)


def bordered(K, m) -> sps.csc_matrix:
    """[[K, m], [m^T, 0]]: one scalar multiplier enforcing m @ x = 0."""
    m = sps.csr_matrix(np.asarray(m, dtype=float).reshape(1, -1))
    return sps.bmat([[K, m.T], [m, None]], format="csc")


class SaddleSolver:
    """Factorized Stokes-type system with constrained velocity dofs.

        A U - B^T P = f,   B U = g,   mean . P = 0

    ``free`` selects unconstrained velocity dofs; constrained ones are zero.
    The pressure is determined up to the constant mode ``constant`` (the
    coefficient vector of the function 1, with B^T constant = 0).  Instead of
    bordering the matrix with the dense mean row, one pressure dof is pinned
    and its (redundant) constraint row dropped; the mean is removed
    afterwards.  A dense border row multiplies the LU fill several times.
    """

    def __init__(self, A, B, mean, free=None, tol: float = RESIDUAL_TOL, constant=None,
                 pin: int = 0):
        A = sps.csr_matrix(A)
        B = sps.csr_matrix(B)
        n = A.shape[0]
        self.n_u = n
        self.n_p = B.shape[0]
        self.free = np.arange(n) if free is None else np.asarray(free)
        self.mean = np.asarray(mean, dtype=float)
        self.constant = np.ones(self.n_p) if constant is None else np.asarray(constant, float)
        self.keep = np.delete(np.arange(self.n_p), pin)
        self.pin = pin
        self.tol = tol
        Af = A[self.free][:, self.free]
        Bk = B[self.keep][:, self.free]
        self.A, self.B = A, B
        K = sps.bmat([[Af, -Bk.T], [Bk, None]], format="csc")
        self.nf = len(self.free)
        self.fact = Factorization(K, "saddle-point system", tol)

    def solve(self, f, g=None):
        f = np.asarray(f, dtype=float)
        rhs = np.zeros(self.nf + self.n_p - 1)
        rhs[: self.nf] = f[self.free]
        if g is not None:
            g = np.asarray(g, dtype=float)
            if abs(self.constant @ g) > self.tol * (np.abs(g).sum() + 1e-300):
                raise ValueError("divergence data incompatible with the pressure null space")
            rhs[self.nf:] = g[self.keep]
        x = self.fact.solve(rhs)
        U = np.zeros(self.n_u)
        U[self.free] = x[: self.nf]
        P = np.zeros(self.n_p)
        P[self.keep] = x[self.nf:]
        shift = self.mean @ self.constant
        for _ in range(2):  # second pass removes the roundoff of the first
            P -= (self.mean @ P) / shift * self.constant
        return U, P

    @property
    def last_residual(self) -> float:
        return self.fact.last_residual


def solve_saddle(A, B, f, mean, g=None, free=None, tol: float = RESIDUAL_TOL):
    """One-shot saddle-point solve; returns (U, P) with mean.P = 0."""
    return SaddleSolver(A, B, mean, free, tol).solve(f, g)


def solve_preconditioned(A, b, precond, tol: float = RESIDUAL_TOL, label: str = "system",
                         x0=None, fallback: bool = True):
    """GMRES with a user preconditioner, held to the same residual contract as
    the direct path.  Falls back to a direct factorization if the contract fails.

    Returns (x, relative residual, iterations).
    """
    A = sps.csr_matrix(A)
    b = np.asarray(b, dtype=float)
    n = A.shape[0]
    M = spla.LinearOperator((n, n), matvec=precond, dtype=float)
    count = [0]

    def cb(_):
        count[0] += 1

    with np.errstate(all="ignore"):  # breakdown is caught by the residual check below
        x, _ = spla.gmres(A, b, x0=x0, rtol=1e-13, atol=0.0, restart=60, maxiter=20, M=M,
                          callback=cb, callback_type="pr_norm")
    norm = _inf_norm(A)
    scale = norm * np.max(np.abs(x), initial=0.0) + np.max(np.abs(b), initial=0.0)
    res = np.max(np.abs(A @ x - b), initial=0.0)
    rel = res / scale if scale > 0 else res
    if np.all(np.isfinite(x)) and res <= tol * scale:
        return x, rel, count[0]
    if not fallback:
        raise NumericalFailure(f"{label}: iterative residual {rel:.3e} above {tol:g}", rel)
    fact = Factorization(A, label, tol)
    return fact.solve(b), fact.last_residual, -1

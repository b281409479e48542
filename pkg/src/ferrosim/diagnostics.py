"""Energy ledger, Kelly indicator, interface geometry and Rosensweig estimates.

Every integral uses the same quadrature as the assembly, so the discrete
energy identities hold up to solver tolerance rather than quadrature error.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import partial

import numpy as np
from scipy.signal import find_peaks

from . import forms
from .constitutive import (DipoleConfig, ModelParams, boussinesq_force, double_well,
                           susceptibility, viscosity)
from .spaces import SpaceSet
from .stepper import State, applied_at_quad

LEDGER_FIELDS = ("step", "t", "E", "kinetic", "magnetic", "field", "interfacial", "well",
                 "D_n", "D_p", "F", "residual")

_einsum = partial(np.einsum, optimize=True)  # contraction order matters for 3+ operands


@dataclass(frozen=True)
class EnergyBreakdown:
    kinetic: float
    magnetic: float
    field: float
    interfacial: float
    well: float

    @property
    def total(self) -> float:
        return self.kinetic + self.magnetic + self.field + self.interfacial + self.well


@dataclass(frozen=True)
class StepLedger:
    step: int
    t: float
    energy: EnergyBreakdown
    D_n: float
    D_p: float
    F: float
    residual: float

    @property
    def E(self) -> float:
        return self.energy.total

    def row(self) -> dict:
        e = asdict(self.energy)
        return {"step": self.step, "t": self.t, "E": self.E, **e, "D_n": self.D_n,
                "D_p": self.D_p, "F": self.F, "residual": self.residual}


def _sq(sp: SpaceSet, q) -> float:
    """||f||^2 for f sampled at quadrature points, scalar (C, nq) or vector (C, nq, k)."""
    q = np.asarray(q)
    if q.ndim == 3:
        q = _einsum("cqk,cqk->cq", q, q)
    else:
        q = q * q
    return forms.integrate(sp, q)


def _dot(sp: SpaceSet, a, b) -> float:
    return forms.integrate(sp, _einsum("cqk,cqk->cq", a, b))


def total_energy(sp: SpaceSet, state: State, params: ModelParams, mode: str = "full"
                 ) -> EnergyBreakdown:
    """Kinetic, magnetic, demagnetizing-field, interfacial and double-well energies."""
    mu0, lam, eps = params.mu0, params.lam, params.epsilon
    F, _ = double_well(sp.eval(sp.phase, state.phi))
    field = 0.0
    if mode == "full" and state.Phi is not None:
        field = 0.5 * mu0 * _sq(sp, sp.eval_grad(sp.potential, state.Phi))
    return EnergyBreakdown(
        kinetic=0.5 * _sq(sp, sp.eval(sp.velocity, state.U)),
        magnetic=0.5 * mu0 * _sq(sp, sp.eval(sp.magnetization, state.M)),
        field=field,
        interfacial=0.5 * lam * _sq(sp, sp.eval_grad(sp.phase, state.phi)),
        well=lam / eps**2 * forms.integrate(sp, F),
    )


def step_ledger(sp: SpaceSet, prev: State, new: State, params: ModelParams,
                dipoles: DipoleConfig, mode: str = "full", step: int = 0,
                upwind: bool = False, dt: float | None = None) -> StepLedger:
    """Energy balance of one step: R = E_old + dt F - E - D_n - dt D_p.

    Full mode uses the stability estimate with the (1 - chi0/4) magnetization
    factor and the applied-field forcing; simplified mode uses the exact
    per-step balance of the reduced scheme, whose remainder is the
    nonnegative phase-field stabilization slack.  In both modes the work of
    gravity (f_g(phi_old), U) is part of F.
    """
    dt = params.dt if dt is None else dt
    mu0, T, lam, eps, gamma = (params.mu0, params.relaxation_time, params.lam,
                               params.epsilon, params.gamma)
    E_old = total_energy(sp, prev, params, mode).total
    E = total_energy(sp, new, params, mode)

    dU = sp.eval(sp.velocity, new.U - prev.U)
    dM = sp.eval(sp.magnetization, new.M - prev.M)
    dgphi = sp.eval_grad(sp.phase, new.phi - prev.phi)
    D_n = 0.5 * _sq(sp, dU) + 0.5 * mu0 * _sq(sp, dM) + 0.5 * lam * _sq(sp, dgphi)

    phi_old_q = sp.eval(sp.phase, prev.phi)
    gU = sp.eval_grad(sp.velocity, new.U)
    TU = 0.5 * (gU + np.swapaxes(gU, -1, -2))
    nu = viscosity(phi_old_q, params)
    D_visc = forms.integrate(sp, nu * _einsum("cqab,cqab->cq", TU, TU))
    D_ch = lam * gamma / eps * _sq(sp, sp.eval_grad(sp.chempot, new.psi))
    Mq = sp.eval(sp.magnetization, new.M)
    Hq = sp.eval(sp.magnetization, new.H)
    kappa = susceptibility(phi_old_q, params)
    work_g = _dot(sp, boussinesq_force(phi_old_q, params), sp.eval(sp.velocity, new.U))

    upw_MM = upw_MH = 0.0
    if upwind:
        upw_MM = mu0 * forms.upwind_stab(sp, new.U, new.M, new.M)
        upw_MH = mu0 * forms.upwind_stab(sp, new.U, new.M, new.H)

    if mode == "full":
        dPhi = sp.eval_grad(sp.potential, new.Phi - prev.Phi)
        D_n += 0.5 * mu0 * _sq(sp, dPhi)
        gPhi = sp.eval_grad(sp.potential, new.Phi)
        D_p = (mu0 / T * (1 - params.chi0 / 4) * _sq(sp, Mq) + mu0 / (2 * T) * _sq(sp, gPhi)
               + D_visc + D_ch + upw_MM)
        ha = applied_at_quad(sp, dipoles, new.t)
        ha_old = applied_at_quad(sp, dipoles, new.t - dt)
        F = (mu0 / T * _sq(sp, ha) + mu0 * T * _sq(sp, (ha - ha_old) / dt) + work_g + upw_MH)
    else:
        kH = kappa[..., None] * Hq
        D_p = (mu0 / T * _sq(sp, Mq) + mu0 / T * _dot(sp, kH, Hq) + D_visc + D_ch + upw_MM)
        F = (mu0 / T * _dot(sp, kH, Mq) + mu0 / dt * _dot(sp, dM, Hq)
             + mu0 / T * _dot(sp, Mq, Hq) + work_g + upw_MH)
    R = E_old + dt * F - E.total - D_n - dt * D_p
    return StepLedger(step, new.t, E, D_n, D_p, F, R)


def phase_mass(sp: SpaceSet, phi) -> float:
    return float(forms.mean_functional(sp, sp.phase) @ phi)


# -- Kelly indicator -------------------------------------------------------------

def kelly_indicator(sp: SpaceSet, phi) -> np.ndarray:
    """eta_T = sqrt(h_T * int_{dT} |[d phi / dn]|^2) with h_T the longest edge.

    Each internal face integral enters both adjacent cells; boundary faces
    carry no jump.
    """
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (sp.phase.ndofs,):
        raise ValueError(f"phi: expected {sp.phase.ndofs} coefficients, got {phi.shape}")
    m = sp.mesh
    inner = m.internal_faces
    go = sp.eval_face_grad(sp.phase, phi, "owner")[inner]
    gn = sp.eval_face_grad(sp.phase, phi, "neighbor")[inner]
    jump = _einsum("fqa,fa->fq", go - gn, m.normals[inner])
    face_int = np.sum(sp.face_w[inner] * jump**2, axis=1)
    acc = (np.bincount(m.face_owner[inner], face_int, minlength=m.n_cells)
           + np.bincount(m.face_neighbor[inner], face_int, minlength=m.n_cells))
    return np.sqrt(m.diameters() * acc)


# -- interface geometry -----------------------------------------------------------

@dataclass(frozen=True)
class InterfaceProfile:
    x: np.ndarray
    heights: np.ndarray  # NaN where a column has no sign change
    peak_count: int
    peaks: np.ndarray

    @property
    def present(self) -> np.ndarray:
        return ~np.isnan(self.heights)


def interface_profile(sp: SpaceSet, phi, n_samples: int = 101, prominence: float | None = None,
                      epsilon: float = 0.01, n_vertical: int = 400, bisections: int = 40
                      ) -> InterfaceProfile:
    """Height of the lowest phi = 0 crossing in each of ``n_samples`` columns."""
    x0, x1, y0, y1 = sp.mesh.rect
    xs = np.linspace(x0, x1, n_samples)
    ys = np.linspace(y0, y1, n_vertical)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    vals = sp.eval_at(sp.phase, phi, np.stack([X.ravel(), Y.ravel()], 1)).reshape(X.shape)
    sign = np.signbit(vals)
    change = sign[:, 1:] != sign[:, :-1]
    has = change.any(axis=1)
    k = np.argmax(change, axis=1)
    lo = ys[k].copy()
    hi = ys[np.minimum(k + 1, n_vertical - 1)].copy()
    cols = np.flatnonzero(has)
    f_lo = vals[cols, k[cols]]
    for _ in range(bisections):
        mid = 0.5 * (lo[cols] + hi[cols])
        fm = sp.eval_at(sp.phase, phi, np.stack([xs[cols], mid], 1))
        same = np.signbit(fm) == np.signbit(f_lo)
        lo[cols] = np.where(same, mid, lo[cols])
        f_lo = np.where(same, fm, f_lo)
        hi[cols] = np.where(same, hi[cols], mid)
    heights = np.full(n_samples, np.nan)
    heights[cols] = 0.5 * (lo[cols] + hi[cols])
    prom = 2.0 * epsilon if prominence is None else prominence
    filled = np.where(has, heights, np.nanmin(heights) if has.any() else 0.0)
    peaks, _ = find_peaks(filled, prominence=prom)
    return InterfaceProfile(xs, heights, len(peaks), peaks)


# -- Rosensweig linear theory ------------------------------------------------------

@dataclass(frozen=True)
class RosensweigPrediction:
    wavelength: float
    critical_magnetization: float
    gravity_estimate: float | None


def rosensweig_predictions(sigma: float, delta_rho: float, chi0: float, mu0: float,
                           g: float | None = None, wavelength: float | None = None
                           ) -> RosensweigPrediction:
    """Critical wavelength, critical magnetization and gravity estimate (order of magnitude).

    If ``wavelength`` is given, gravity is estimated from it and then used for
    the other two quantities; otherwise ``g`` is required.
    """
    for name, v in (("sigma", sigma), ("delta_rho", delta_rho), ("mu0", mu0)):
        if not v > 0:
            raise ValueError(f"{name} must be positive, got {v}")
    if chi0 < 0:
        raise ValueError(f"chi0 must be nonnegative, got {chi0}")
    g_est = None
    if wavelength is not None:
        if not wavelength > 0:
            raise ValueError(f"wavelength must be positive, got {wavelength}")
        g_est = 4 * np.pi**2 * sigma / (wavelength**2 * delta_rho)
        g = g_est if g is None else g
    if g is None or not g > 0:
        raise ValueError(f"gravity must be positive, got {g}")
    lam_c = 2 * np.pi * np.sqrt(sigma / (g * delta_rho))
    m_c2 = (2 / mu0) * ((2 + chi0) / (1 + chi0)) * np.sqrt(g * delta_rho * sigma)
    return RosensweigPrediction(float(lam_c), float(np.sqrt(m_c2)), g_est)

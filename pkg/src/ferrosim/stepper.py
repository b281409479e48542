"""Time stepping: one backward-Euler step solved by Picard iteration.

Each Picard sweep runs the three decoupled linear solves in the order
phase field -> magnetization (and potential) -> velocity/pressure, starting
from the previous step's velocity.  The phase-field matrix is constant for a
run and the Stokes matrix is constant within a step, so both are factorized
once and reused.  The magnetization block changes with the transported
velocity and is solved iteratively around a per-step preconditioner.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import scipy.sparse as sps

from . import forms
from .constitutive import DipoleConfig, ModelParams, applied_field, double_well
from .errors import ConfigError, NumericalFailure, PicardNonconvergence
from .linalg import Factorization, SaddleSolver, bordered, solve_preconditioned
from .magnetostatics import simplified_field, solve_potential
from .spaces import SpaceSet

log = logging.getLogger(__name__)

MODES = ("full", "simplified")


@dataclass
class State:
    t: float
    phi: np.ndarray
    psi: np.ndarray
    M: np.ndarray
    U: np.ndarray
    P: np.ndarray
    Phi: Optional[np.ndarray] = None  # full mode only
    H: Optional[np.ndarray] = None  # effective field used in the step that produced the state

    def copy(self) -> "State":
        cp = lambda a: None if a is None else np.array(a, copy=True)  # noqa: E731
        return State(self.t, cp(self.phi), cp(self.psi), cp(self.M), cp(self.U), cp(self.P),
                     cp(self.Phi), cp(self.H))


@dataclass(frozen=True)
class PicardSettings:
    tol: float = 1e-8
    max_iter: int = 25
    # increments below this absolute size count as converged; without it a field
    # that is zero up to roundoff never reaches a relative tolerance
    abs_floor: float = 1e-13
    halve_dt: bool = False
    max_halvings: int = 4

    def __post_init__(self):
        if not self.tol > 0:
            raise ConfigError(f"must be positive, got {self.tol}", "picard.tol")
        if self.max_iter < 1:
            raise ConfigError(f"must be at least 1, got {self.max_iter}", "picard.max_iter")
        if self.abs_floor < 0:
            raise ConfigError(f"must be nonnegative, got {self.abs_floor}", "picard.abs_floor")


@dataclass
class PicardReport:
    iterations: int = 0
    increments: List[float] = field(default_factory=list)
    field_increments: List[dict] = field(default_factory=list)
    residuals: dict = field(default_factory=lambda: {"ch": [], "mag": [], "stokes": []})
    converged: bool = False

    @property
    def final_increment(self) -> float:
        return self.increments[-1] if self.increments else float("nan")

    @property
    def monotone(self) -> bool:
        inc = self.increments
        return all(b <= a for a, b in zip(inc, inc[1:]))


# -- subsystem solves -------------------------------------------------------------

def ch_matrix(sp: SpaceSet, params: ModelParams) -> sps.csr_matrix:
    """Block matrix of the linearized phase-field / chemical-potential system."""
    Mx = forms.mass_matrix(sp, sp.phase)
    K = forms.stiffness_matrix(sp, sp.phase)
    dt, eps, eta = params.dt, params.epsilon, params.eta
    return sps.bmat([[Mx, -dt * params.gamma * K], [eps * K + Mx / eta, Mx]], format="csr")


def ch_rhs(sp: SpaceSet, phi_old, U, params: ModelParams) -> np.ndarray:
    """Right-hand side for the unknowns (phi - phi_old, psi).

    Solving for the increment keeps roundoff relative to the (small) change
    rather than to phi itself; psi would otherwise inherit that roundoff
    amplified by 1/eta and pass it on to the capillary force.
    """
    K = forms.stiffness_matrix(sp, sp.phase)
    _, f = double_well(sp.eval(sp.phase, phi_old))
    v, _ = sp.tab(sp.phase.element)
    fload = forms.assemble_vector(sp.phase.cell_dofs,
                                  np.einsum("cq,qi,cq->ci", sp.wdet, v, f), sp.phase.ndofs)
    r1 = params.dt * forms.phase_convection_load(sp, U, phi_old)
    r2 = -fload / params.epsilon - params.epsilon * (K @ phi_old)
    return np.concatenate([r1, r2])


def _ch_factorization(sp: SpaceSet, params: ModelParams) -> Factorization:
    key = ("ch_lu", params.dt, params.gamma, params.epsilon, params.eta)
    if key not in sp.cache:
        sp.cache[key] = Factorization(ch_matrix(sp, params), "phase-field system")
    return sp.cache[key]


def solve_ch_subsystem(sp: SpaceSet, phi_old, U, params: ModelParams):
    """Return (phi, psi, relative residual) for a given transport velocity U."""
    lu = _ch_factorization(sp, params)
    x = lu.solve(ch_rhs(sp, phi_old, U, params))
    n = sp.phase.ndofs
    return phi_old + x[:n], x[n:], lu.last_residual


def applied_at_quad(sp: SpaceSet, dipoles: DipoleConfig, t: float) -> np.ndarray:
    key = ("h_a_q", dipoles, float(t))
    if key not in sp.cache:
        if len([k for k in sp.cache if isinstance(k, tuple) and k[0] == "h_a_q"]) > 8:
            for k in [k for k in sp.cache if isinstance(k, tuple) and k[0] == "h_a_q"]:
                del sp.cache[k]
        sp.cache[key] = applied_field(sp.xq, t, dipoles)[0]
    return sp.cache[key]


def reduced_field(sp: SpaceSet, dipoles: DipoleConfig, t: float) -> np.ndarray:
    return simplified_field(sp, lambda x: applied_field(x, t, dipoles)[0])


def mag_full_matrix(sp: SpaceSet, U, phi_old, params: ModelParams, upwind: bool = False):
    """Coupled magnetization / potential system with the potential mean multiplier.

    Unknown order (M, Phi, multiplier).  The magnetization rows hold
    (1 + dt/T)(M, Z) + dt b_m(U, M, Z) - (dt/T)(kappa grad Phi, Z); the potential
    rows hold (M, grad X) + (grad Phi, grad X).
    """
    dt, T = params.dt, params.relaxation_time
    Mm = forms.mass_matrix(sp, sp.magnetization)
    C = forms.mag_convection_matrix(sp, U, upwind=1.0 if upwind else 0.0)
    Kk = forms.kappa_gradient_matrix(sp, phi_old, params)
    G = forms.gradient_coupling_matrix(sp)
    K = forms.stiffness_matrix(sp, sp.potential)
    m = sps.csr_matrix(forms.mean_functional(sp, sp.potential).reshape(1, -1))
    return sps.bmat(
        [[(1 + dt / T) * Mm + dt * C, -(dt / T) * Kk, None],
         [G, K, m.T],
         [None, m, None]],
        format="csc",
    )


def _dg_mass_inverse(sp: SpaceSet) -> sps.csr_matrix:
    """Inverse of the M_h mass matrix, which is block diagonal with one 3x3 block per cell."""
    key = ("mass_inv", "magnetization")
    if key not in sp.cache:
        inv = np.linalg.inv(forms.mass_local(sp, sp.pressure))
        C = sp.mesh.n_cells
        scalar = sps.bsr_matrix((inv, np.arange(C), np.arange(C + 1)),
                                shape=(3 * C, 3 * C)).tocsr()
        sp.cache[key] = sps.block_diag([scalar] * sp.magnetization.ncomp, format="csr")
    return sp.cache[key]


class MagnetizationSolver:
    """Magnetization (and potential) solves for one time step.

    Everything except the transport term depends only on phi_old, so it is set
    up once per step.  The system is solved by GMRES preconditioned with the
    exact inverse of the convection-free operator: the mass block is inverted
    cellwise and the potential Schur complement K + (dt/T) G D^-1 K_kappa,
    which keeps the P2 stencil, is factorized once.  Iterates that miss the
    residual contract fall back to a direct factorization.
    """

    def __init__(self, sp: SpaceSet, phi_old, t: float, mode: str, params: ModelParams,
                 dipoles: DipoleConfig, upwind: bool = False):
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}", "mode")
        if mode == "full" and params.chi0 > 4:
            raise ConfigError(f"full mode requires chi0 <= 4, got {params.chi0}", "chi0")
        self.sp, self.mode, self.params, self.upwind = sp, mode, params, upwind
        dt, T = params.dt, params.relaxation_time
        self.nM = sp.magnetization.ndofs
        self.Mm = forms.mass_matrix(sp, sp.magnetization)
        self.D = (1 + dt / T) * self.Mm
        self.Dinv = _dg_mass_inverse(sp) / (1 + dt / T)
        self.x = None
        if mode == "full":
            nX = sp.potential.ndofs
            self.nX = nX
            self.Kk = forms.kappa_gradient_matrix(sp, phi_old, params)
            self.G = forms.gradient_coupling_matrix(sp)
            self.K = forms.stiffness_matrix(sp, sp.potential)
            self.m = sps.csr_matrix(forms.mean_functional(sp, sp.potential).reshape(1, -1))
            S = self.K + (dt / T) * (self.G @ self.Dinv @ self.Kk)
            self.schur = Factorization(bordered(S, self.m.toarray().ravel()),
                                       "potential Schur complement")
            self.b2 = forms.gradient_load(sp, applied_at_quad(sp, dipoles, t))
            self.H = None
        else:
            self.H = reduced_field(sp, dipoles, t)
            self.reaction = (dt / T) * (forms.magnetization_reaction_matrix(sp, phi_old, params)
                                        @ self.H)

    def _operator(self, U):
        dt, T = self.params.dt, self.params.relaxation_time
        C = forms.mag_convection_matrix(self.sp, U, upwind=1.0 if self.upwind else 0.0)
        if self.mode == "simplified":
            return self.D + dt * C
        return sps.bmat([[self.D + dt * C, -(dt / T) * self.Kk, None],
                         [self.G, self.K, self.m.T],
                         [None, self.m, None]], format="csr")

    def _precondition(self, r):
        if self.mode == "simplified":
            return self.Dinv @ r
        c = self.params.dt / self.params.relaxation_time
        nM, nX = self.nM, self.nX
        r1, r2 = r[:nM], r[nM:]
        rhs = r2.copy()
        rhs[:nX] -= self.G @ (self.Dinv @ r1)
        y = self.schur.lu.solve(rhs)
        M = self.Dinv @ (r1 + c * (self.Kk @ y[:nX]))
        return np.concatenate([M, y])

    def solve(self, M_old, U):
        """Return (M, Phi or None, H, relative residual)."""
        rhs = self.Mm @ M_old
        if self.mode == "simplified":
            rhs = rhs + self.reaction
        else:
            rhs = np.concatenate([rhs, self.b2, [0.0]])
        x, res, _ = solve_preconditioned(self._operator(U), rhs, self._precondition,
                                         label="magnetization system", x0=self.x)
        self.x = x
        if self.mode == "simplified":
            return x, None, self.H, res
        Phi = x[self.nM:self.nM + self.nX]
        return x[:self.nM], Phi, self.sp.gradient_to_magnetization(Phi), res


def solve_mag_subsystem(sp: SpaceSet, M_old, U, phi_old, t: float, mode: str,
                        params: ModelParams, dipoles: DipoleConfig, upwind: bool = False):
    """Return (M, Phi or None, H, relative residual) at time ``t``."""
    return MagnetizationSolver(sp, phi_old, t, mode, params, dipoles, upwind).solve(M_old, U)


def stokes_solver(sp: SpaceSet, U_old, phi_old, params: ModelParams) -> SaddleSolver:
    A = (forms.mass_matrix(sp, sp.velocity) / params.dt
         + forms.temam_matrix(sp, U_old)
         + forms.dissipation_matrix(sp, phi_old, params))
    return SaddleSolver(A, forms.divergence_matrix(sp), forms.mean_functional(sp, sp.pressure),
                        sp.velocity.free)


def stokes_rhs_fixed(sp: SpaceSet, U_old, phi_old, params: ModelParams) -> np.ndarray:
    """Load terms that do not change during the Picard iteration of a step."""
    return (forms.mass_matrix(sp, sp.velocity) @ U_old / params.dt
            + forms.gravity_load(sp, phi_old, params))


def stokes_rhs_coupled(sp: SpaceSet, phi_old, psi, M, H, params: ModelParams) -> np.ndarray:
    """Kelvin and capillary loads, which follow the Picard iterates."""
    return forms.kelvin_load(sp, H, M, params.mu0) + forms.capillary_load(sp, phi_old, psi, params)


def stokes_rhs(sp: SpaceSet, U_old, phi_old, psi, M, H, params: ModelParams) -> np.ndarray:
    return (stokes_rhs_fixed(sp, U_old, phi_old, params)
            + stokes_rhs_coupled(sp, phi_old, psi, M, H, params))


def solve_stokes_subsystem(sp: SpaceSet, U_old, phi_old, psi, M, H, params: ModelParams,
                           solver: SaddleSolver | None = None):
    """Return (U, P, relative residual)."""
    solver = solver or stokes_solver(sp, U_old, phi_old, params)
    U, P = solver.solve(stokes_rhs(sp, U_old, phi_old, psi, M, H, params))
    return U, P, solver.last_residual


# -- initialization -----------------------------------------------------------------

def flat_interface(depth: float, epsilon: float):
    """Equilibrium tanh profile: +1 (ferrofluid) below ``depth``, -1 above."""
    def phi0(x):
        return np.tanh((depth - x[:, 1]) / (np.sqrt(2.0) * epsilon))
    return phi0


def initial_state(sp: SpaceSet, params: ModelParams, dipoles: DipoleConfig, mode: str,
                  phi0=None, depth: float = 0.2, M0=None, U0=None, t0: float = 0.0) -> State:
    """Nodal interpolation of the initial data; the potential solves its own equation."""
    phi = sp.interpolate(sp.phase, phi0 or flat_interface(depth, params.epsilon))
    M = np.zeros(sp.magnetization.ndofs) if M0 is None else np.asarray(M0, dtype=float)
    U = np.zeros(sp.velocity.ndofs) if U0 is None else sp.interpolate(sp.velocity, U0)
    state = State(t0, phi, np.zeros(sp.chempot.ndofs), M, U, np.zeros(sp.pressure.ndofs))
    if mode == "full":
        pot = solve_potential(sp, M, applied_at_quad(sp, dipoles, t0))
        state.Phi, state.H = pot.potential, pot.field
    else:
        state.H = reduced_field(sp, dipoles, t0)
    return state


# -- the step -----------------------------------------------------------------------

def _rel(new, old):
    d = float(np.linalg.norm(new - old))
    return d / (float(np.linalg.norm(new)) + 1e-30), d


class Stepper:
    """Advances a State by one time step of the chosen scheme."""

    def __init__(self, sp: SpaceSet, params: ModelParams, dipoles: DipoleConfig,
                 mode: str = "full", picard: PicardSettings = PicardSettings(),
                 upwind: bool = False, freeze_velocity: bool = False,
                 freeze_magnetization: bool = False):
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}", "mode")
        params.validate(mode)
        self.sp = sp
        self.params = params
        self.dipoles = dipoles
        self.mode = mode
        self.picard = picard
        self.upwind = upwind
        # test hooks: hold U (or M) at zero to isolate the phase-field dynamics
        self.freeze_velocity = freeze_velocity
        self.freeze_magnetization = freeze_magnetization
        self._mag_solver = None

    def _mag(self, state: State, U, t):
        sp, p = self.sp, self.params
        if self.freeze_magnetization:
            M = np.zeros(sp.magnetization.ndofs)
            if self.mode == "full":
                pot = solve_potential(sp, M, applied_at_quad(sp, self.dipoles, t))
                return M, pot.potential, pot.field, pot.residual
            return M, None, reduced_field(sp, self.dipoles, t), 0.0
        if self._mag_solver is None:
            self._mag_solver = MagnetizationSolver(sp, state.phi, t, self.mode, p, self.dipoles,
                                                   self.upwind)
        return self._mag_solver.solve(state.M, U)

    def advance(self, state: State, params: ModelParams | None = None):
        """One step; returns (new State, PicardReport)."""
        p = params or self.params
        if p is not self.params:
            saved, self.params = self.params, p
            try:
                return self.advance(state)
            finally:
                self.params = saved
        sp, cfg = self.sp, self.picard
        t = state.t + p.dt
        report = PicardReport()
        self._mag_solver = None
        stokes = None if self.freeze_velocity else stokes_solver(sp, state.U, state.phi, p)
        if stokes is not None:
            # By linearity the step-constant loads (inertia, gravity) are solved once.
            # Re-adding them to the coupled loads every sweep would inject roundoff of
            # the large hydrostatic load into U and stall the increments near 1e-6.
            U_fix, P_fix = stokes.solve(stokes_rhs_fixed(sp, state.U, state.phi, p))
        U = state.U.copy()
        prev_phi, prev_M = state.phi, state.M
        for it in range(1, cfg.max_iter + 1):
            phi, psi, r_ch = solve_ch_subsystem(sp, state.phi, U, p)
            M, Phi, H, r_mag = self._mag(state, U, t)
            if stokes is None:
                U_new, P, r_st = np.zeros_like(U), np.zeros(sp.pressure.ndofs), 0.0
            else:
                U_var, P_var = stokes.solve(stokes_rhs_coupled(sp, state.phi, psi, M, H, p))
                U_new, P = U_fix + U_var, P_fix + P_var
                r_st = stokes.last_residual
            incs = {"phi": _rel(phi, prev_phi), "M": _rel(M, prev_M), "U": _rel(U_new, U)}
            combined = max(v[0] for v in incs.values())
            report.iterations = it
            report.increments.append(combined)
            report.field_increments.append({k: v[0] for k, v in incs.items()})
            report.residuals["ch"].append(r_ch)
            report.residuals["mag"].append(r_mag)
            report.residuals["stokes"].append(r_st)
            prev_phi, prev_M, U = phi, M, U_new
            small = all(v[1] <= max(cfg.tol * np.linalg.norm(f), cfg.abs_floor)
                        for v, f in zip(incs.values(), (phi, M, U_new)))
            if combined <= cfg.tol or small:
                report.converged = True
                new = State(t, phi, psi, M, U_new, P, Phi, H)
                return new, report
        raise PicardNonconvergence(
            f"Picard iteration did not reach tol {cfg.tol:g} in {cfg.max_iter} iterations at "
            f"t = {t:.6g} (last increment {report.final_increment:.3e})", report)

    def advance_adaptive(self, state: State):
        """Advance to state.t + dt, halving dt on nonconvergence when enabled.

        Returns (new State, list of (dt used, PicardReport, State after the sub-step)).
        """
        try:
            new, rep = self.advance(state)
            return new, [(self.params.dt, rep, new)]
        except (PicardNonconvergence, NumericalFailure):
            if not self.picard.halve_dt:
                raise
        reports = []
        for level in range(1, self.picard.max_halvings + 1):
            sub = self.params.with_(dt=self.params.dt / 2**level)
            try:
                cur = state
                out = []
                for _ in range(2**level):
                    cur, rep = self.advance(cur, sub)
                    out.append((sub.dt, rep, cur))
                log.warning("step at t=%.6g needed dt halved %d times", state.t, level)
                return cur, reports + out
            except (PicardNonconvergence, NumericalFailure):
                continue
        raise PicardNonconvergence(
            f"Picard iteration failed at t = {state.t:.6g} even after {self.picard.max_halvings} "
            "dt halvings", None)


def advance_step(sp: SpaceSet, state: State, params: ModelParams, dipoles: DipoleConfig,
                 mode: str = "full", picard: PicardSettings = PicardSettings(),
                 upwind: bool = False):
    """Functional form of ``Stepper.advance``."""
    return Stepper(sp, params, dipoles, mode, picard, upwind).advance(state)

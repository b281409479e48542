import numpy as np
import pytest

from ferrosim import forms
from ferrosim.constitutive import DipoleConfig, ModelParams, double_well
from ferrosim.diagnostics import (interface_profile, kelly_indicator, rosensweig_predictions,
                                  step_ledger, total_energy)
from ferrosim.mesh import build_rectangle_mesh, refine
from ferrosim.spaces import SpaceSet
from ferrosim.stepper import State, Stepper, initial_state

from conftest import random_field
from test_forms import Oracle

NO_FIELD = DipoleConfig()


def random_state(sp, rng, t=0.0):
    # nodal phi within +-0.5 keeps the P2 field inside the polynomial branch of
    # the double well, where the quadrature is exact
    M = rng.standard_normal(sp.magnetization.ndofs)
    return State(t=t, phi=rng.uniform(-0.5, 0.5, sp.phase.ndofs),
                 psi=rng.standard_normal(sp.chempot.ndofs), M=M, H=M.copy(),
                 U=random_field(sp, sp.velocity, rng), P=np.zeros(sp.pressure.ndofs),
                 Phi=rng.standard_normal(sp.potential.ndofs))


def rest_state(sp, phi=1.0):
    z = lambda s: np.zeros(s.ndofs)  # noqa: E731
    return State(0.0, np.full(sp.phase.ndofs, phi), z(sp.chempot), z(sp.magnetization),
                 z(sp.velocity), z(sp.pressure), z(sp.potential), z(sp.magnetization))


@pytest.fixture(scope="module")
def pool():
    return SpaceSet(build_rectangle_mesh(2, 2, (0.0, 1.0, 0.0, 0.6)))


# -- energy ---------------------------------------------------------------------------

def test_energy_of_pure_phase_at_rest_is_zero(pool, params):
    e = total_energy(pool, rest_state(pool), params)
    assert 0.0 <= e.total <= 1e-28  # roundoff of the basis partition of unity


def test_well_energy_of_zero_phase(pool):
    p = ModelParams(lam=0.05, epsilon=0.01)
    e = total_energy(pool, rest_state(pool, 0.0), p)
    assert e.well == pytest.approx(75.0, rel=1e-12)
    assert e.kinetic == e.magnetic == e.field == e.interfacial == 0.0


def test_energy_matches_high_order_oracle(pool, params, rng):
    o = Oracle(pool)
    p = params
    for _ in range(5):
        s = random_state(pool, rng)
        e = total_energy(pool, s, p, "full")

        def sq(space, c, v, grad=False):
            val, g = o.cell(space, v, c)
            q = g if grad else val
            return np.sum(q.reshape(len(o.w), -1) ** 2, axis=1)

        kin = 0.5 * o.volume(lambda c: sq(pool.velocity, c, s.U))
        mag = 0.5 * p.mu0 * o.volume(lambda c: sq(pool.magnetization, c, s.M))
        fld = 0.5 * p.mu0 * o.volume(lambda c: sq(pool.potential, c, s.Phi, True))
        itf = 0.5 * p.lam * o.volume(lambda c: sq(pool.phase, c, s.phi, True))
        well = p.lam / p.epsilon**2 * o.volume(
            lambda c: double_well(o.cell(pool.phase, s.phi, c)[0])[0])
        ref = kin + mag + fld + itf + well
        assert e.total == pytest.approx(ref, rel=1e-12)
        for a, b in ((e.kinetic, kin), (e.magnetic, mag), (e.field, fld),
                     (e.interfacial, itf), (e.well, well)):
            assert a == pytest.approx(b, rel=1e-12)
        assert min(e.kinetic, e.magnetic, e.field, e.interfacial, e.well) >= 0
    assert total_energy(pool, s, p, "simplified").field == 0.0


def test_ledger_at_rest_is_zero(pool, params):
    s = rest_state(pool)
    new = s.copy()
    new.t = params.dt
    row = step_ledger(pool, s, new, params, NO_FIELD, "full")
    assert row.D_n == row.D_p == row.F == row.residual == 0.0
    assert row.E <= 1e-28


def test_ledger_terms_match_matrix_quadratics(pool, params, rng):
    p = params.with_(gravity=(0.0, 0.0))
    a, b = random_state(pool, rng), random_state(pool, rng, t=p.dt)
    row = step_ledger(pool, a, b, p, NO_FIELD, "full")

    def quad(A, v):
        return float(v @ (A @ v))

    dU, dM, dphi, dPhi = b.U - a.U, b.M - a.M, b.phi - a.phi, b.Phi - a.Phi
    Mv = forms.mass_matrix(pool, pool.velocity)
    Mm = forms.mass_matrix(pool, pool.magnetization)
    Kp = forms.stiffness_matrix(pool, pool.phase)
    Kx = forms.stiffness_matrix(pool, pool.potential)
    Kc = forms.stiffness_matrix(pool, pool.chempot)
    D_n = 0.5 * (quad(Mv, dU) + p.mu0 * quad(Mm, dM) + p.lam * quad(Kp, dphi)
                 + p.mu0 * quad(Kx, dPhi))
    T = p.relaxation_time
    D_p = (p.mu0 / T * (1 - p.chi0 / 4) * quad(Mm, b.M) + p.mu0 / (2 * T) * quad(Kx, b.Phi)
           + quad(forms.dissipation_matrix(pool, a.phi, p), b.U)
           + p.lam * p.gamma / p.epsilon * quad(Kc, b.psi))
    assert row.D_n == pytest.approx(D_n, rel=1e-12)
    assert row.D_p == pytest.approx(D_p, rel=1e-12)
    assert row.F == 0.0
    E_old = total_energy(pool, a, p).total
    assert row.residual == pytest.approx(E_old - row.E - D_n - p.dt * D_p, rel=1e-12)


def test_pure_dissipation_run_is_nonincreasing(params):
    sp = SpaceSet(refine(build_rectangle_mesh(4, 3, (0, 1, 0, 0.6)), 1))
    p = params.with_(gravity=(0.0, 0.0), epsilon=0.05, eta=0.05, dt=1e-3)

    def phi0(x):
        return np.tanh((0.3 + 0.08 * np.cos(2 * np.pi * x[:, 0]) - x[:, 1]) / (np.sqrt(2) * 0.05))

    rng = np.random.default_rng(7)
    state = initial_state(sp, p, NO_FIELD, "full", phi0=phi0,
                          M0=rng.standard_normal(sp.magnetization.ndofs))
    state.U = random_field(sp, sp.velocity, rng, 0.1)
    E0 = total_energy(sp, state, p).total
    stepper = Stepper(sp, p, NO_FIELD, "full")
    prev = E0
    for _ in range(5):
        new, _ = stepper.advance(state)
        E = total_energy(sp, new, p).total
        assert E <= prev + 1e-8 * E0
        assert step_ledger(sp, state, new, p, NO_FIELD).residual >= -1e-8 * E0
        prev, state = E, new


# -- Kelly indicator ------------------------------------------------------------------

def test_kelly_of_global_linear_is_zero(sp8):
    phi = sp8.interpolate(sp8.phase, lambda x: 0.3 + 2 * x[:, 0] - x[:, 1])
    assert np.abs(kelly_indicator(sp8, phi)).max() <= 1e-12


def test_kelly_homogeneity(sp8, rng):
    phi = rng.standard_normal(sp8.phase.ndofs)
    eta = kelly_indicator(sp8, phi)
    assert np.all(eta >= 0)
    assert np.allclose(kelly_indicator(sp8, 2 * phi), 2 * eta, rtol=1e-12, atol=0)


def test_kelly_two_cell_hat(mesh2):
    # max(x - y, 0) is the hat of vertex (1, 0); its normal derivative jumps by
    # sqrt(2) across the diagonal of length sqrt(2), so eta^2 = sqrt(2) * 2 sqrt(2)
    sp = SpaceSet(mesh2)
    phi = sp.interpolate(sp.phase, lambda x: np.maximum(x[:, 0] - x[:, 1], 0.0))
    assert np.allclose(kelly_indicator(sp, phi), [2.0, 2.0], rtol=1e-12)


def test_kelly_rejects_wrong_size(sp8):
    with pytest.raises(ValueError):
        kelly_indicator(sp8, np.zeros(3))


# -- interface geometry ---------------------------------------------------------------

@pytest.fixture(scope="module")
def fine_pool():
    return SpaceSet(refine(build_rectangle_mesh(10, 6, (0, 1, 0, 0.6)), 2))


def test_flat_interface_profile(fine_pool):
    eps = 0.02
    phi = fine_pool.interpolate(
        fine_pool.phase, lambda x: np.tanh((0.2 - x[:, 1]) / (np.sqrt(2) * eps)))
    prof = interface_profile(fine_pool, phi, epsilon=eps)
    assert prof.present.all()
    assert np.abs(prof.heights - 0.2).max() <= 1e-3
    assert prof.peak_count == 0


def test_sine_interface_has_four_peaks(fine_pool):
    eps = 0.02
    phi = fine_pool.interpolate(fine_pool.phase, lambda x: np.tanh(
        (0.2 + 0.05 * np.sin(8 * np.pi * x[:, 0]) - x[:, 1]) / (np.sqrt(2) * eps)))
    prof = interface_profile(fine_pool, phi, epsilon=eps)
    assert prof.peak_count == 4
    assert np.allclose(prof.x[prof.peaks], [1 / 16, 5 / 16, 9 / 16, 13 / 16], atol=0.011)


def test_monotone_interface_has_no_peaks(fine_pool):
    eps = 0.02
    phi = fine_pool.interpolate(fine_pool.phase, lambda x: np.tanh(
        (0.1 + 0.3 * x[:, 0] - x[:, 1]) / (np.sqrt(2) * eps)))
    assert interface_profile(fine_pool, phi, epsilon=eps).peak_count == 0


def test_columns_without_crossing_are_absent(fine_pool):
    phi = fine_pool.interpolate(fine_pool.phase, lambda x: np.where(
        x[:, 0] < 0.5, np.tanh((0.2 - x[:, 1]) / 0.03), 1.0))
    prof = interface_profile(fine_pool, phi, n_samples=11)
    assert prof.present[:5].all() and not prof.present[6:].any()


# -- Rosensweig estimates -------------------------------------------------------------

def test_gravity_estimate_and_inverse():
    est = rosensweig_predictions(5.0, 0.1, 0.5, 1.0, wavelength=0.25)
    assert 2.8e4 <= est.gravity_estimate <= 3.4e4
    assert est.gravity_estimate == pytest.approx(3.158e4, rel=1e-3)
    back = rosensweig_predictions(5.0, 0.1, 0.5, 1.0, g=est.gravity_estimate)
    assert abs(back.wavelength - 0.25) <= 1e-12


def test_critical_magnetization():
    est = rosensweig_predictions(5.0, 0.1, 0.5, 1.0, g=31583.0)
    assert est.critical_magnetization == pytest.approx(20.5, abs=0.05)
    assert est.gravity_estimate is None


@pytest.mark.parametrize("kw", [dict(sigma=0.0), dict(delta_rho=-1.0), dict(mu0=0.0),
                                dict(chi0=-0.1), dict(g=None), dict(g=-1.0),
                                dict(wavelength=0.0)])
def test_rosensweig_rejects_bad_inputs(kw):
    args = dict(sigma=5.0, delta_rho=0.1, chi0=0.5, mu0=1.0, g=3e4)
    args.update(kw)
    with pytest.raises(ValueError):
        rosensweig_predictions(**args)

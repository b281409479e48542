import numpy as np
import pytest

from ferrosim import forms
from ferrosim.constitutive import Dipole, DipoleConfig, applied_field
from ferrosim.magnetostatics import simplified_field, solve_potential
from ferrosim.mesh import build_rectangle_mesh, refine
from ferrosim.spaces import SpaceSet


def linear_field(x):
    return np.stack([1.0 + 2.0 * x[..., 0] - x[..., 1], 0.5 - x[..., 0] + 3.0 * x[..., 1]], -1)


def test_zero_rhs_when_m_matches_field(sp8):
    M = sp8.magnetization_from_vertices(linear_field(sp8.mesh.vertices)[sp8.mesh.cells])
    out = solve_potential(sp8, M, linear_field(sp8.xq))
    assert np.abs(out.potential).max() < 1e-13
    assert np.abs(out.field).max() < 1e-12


def test_constant_field_without_magnetization(sp8):
    """With M = 0 the Neumann data carries h_a.n, so grad(Phi) reproduces h_a itself."""
    ha = np.broadcast_to([3.0, -1.0], sp8.xq.shape)
    out = solve_potential(sp8, np.zeros(sp8.magnetization.ndofs), ha)
    assert np.allclose(sp8.eval(sp8.magnetization, out.field), ha, atol=1e-12)
    x = sp8.p2_nodes()
    lin = 3.0 * x[:, 0] - x[:, 1]
    lin -= forms.mean_functional(sp8, sp8.potential) @ lin / sp8.mesh.area
    assert np.allclose(out.potential, lin, atol=1e-12)


def test_matches_dense_oracle_and_energy_identity(sp8, rng):
    K = forms.stiffness_matrix(sp8, sp8.potential).toarray()
    m = forms.mean_functional(sp8, sp8.potential)
    n = len(m)
    Kb = np.zeros((n + 1, n + 1))
    Kb[:n, :n], Kb[:n, n], Kb[n, :n] = K, m, m
    for _ in range(10):
        M = rng.standard_normal(sp8.magnetization.ndofs)
        ha = rng.standard_normal(sp8.xq.shape)
        out = solve_potential(sp8, M, ha)
        b = forms.gradient_load(sp8, ha - sp8.eval(sp8.magnetization, M))
        ref = np.linalg.solve(Kb, np.append(b, 0.0))[:n]
        assert np.linalg.norm(out.potential - ref) <= 1e-10 * np.linalg.norm(ref)
        assert abs(m @ out.potential) <= 1e-12 * np.abs(ref).max()
        g = sp8.eval_grad(sp8.potential, out.potential)
        lhs = forms.integrate(sp8, np.einsum("cqa,cqa->cq", g, g))
        rhs = forms.integrate(sp8, np.einsum("cqa,cqa->cq",
                                             ha - sp8.eval(sp8.magnetization, M), g))
        assert lhs == pytest.approx(rhs, rel=1e-10)
        # H is exactly grad(Phi) and does not see the mean
        assert np.allclose(sp8.eval(sp8.magnetization, out.field), g, atol=1e-12)
        shifted = sp8.gradient_to_magnetization(out.potential + 5.0)
        assert np.abs(shifted - out.field).max() <= 1e-12 * np.abs(out.field).max()


def test_size_mismatch(sp8):
    with pytest.raises(ValueError):
        solve_potential(sp8, np.zeros(5), np.zeros(sp8.xq.shape))


def _max_jump(sp, H):
    inner = sp.mesh.internal_faces
    o = sp.eval_face(sp.magnetization, H, "owner")[inner]
    n = sp.eval_face(sp.magnetization, H, "neighbor")[inner]
    return np.abs(o - n).max()


def test_simplified_field_reproduces_linear_fields(sp8):
    for fn in (lambda x: np.broadcast_to([1.0, 0.0], x.shape), linear_field):
        H = simplified_field(sp8, fn)
        assert np.allclose(sp8.eval(sp8.magnetization, H), fn(sp8.xq), atol=1e-13)
        assert _max_jump(sp8, H) <= 1e-12


def test_simplified_field_is_continuous_for_dipole_fields():
    """Vertex interpolation shares values between neighbors, so no face ever jumps."""
    cfg = DipoleConfig(tuple(Dipole((x, -15.0), (0.0, 1.0), 6000.0)
                             for x in (-0.5, 0.0, 0.5, 1.0, 1.5)), t_ramp=1.6)
    base = build_rectangle_mesh(10, 6, (0, 1, 0, 0.6))
    for k in range(3):
        sp = SpaceSet(refine(base, k))
        H = simplified_field(sp, lambda x: applied_field(x, 1.6, cfg)[0])
        assert _max_jump(sp, H) <= 1e-12 * np.abs(H).max()

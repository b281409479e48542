import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ferrosim.mesh import build_rectangle_mesh, refine, uniform_refine
from ferrosim.spaces import (ELEMENTS, SpaceSet, build_spaces, check_gradient_inclusion,
                             infsup_constant)

from conftest import cell_values, to_ref


def test_dimensions_two_cells(mesh2):
    sp = build_spaces(mesh2)
    assert sp.magnetization.ndofs == 12
    assert sp.pressure.ndofs == 6
    assert sp.phase.ndofs == 9 == sp.chempot.ndofs == sp.potential.ndofs
    m = mesh2
    assert sp.velocity.ndofs == 2 * (m.n_vertices + m.n_faces + m.n_cells)


def test_dimensions_pool_mesh():
    m = build_rectangle_mesh(10, 6, (0, 1, 0, 0.6))
    sp = build_spaces(m)
    assert sp.pressure.ndofs == 360
    assert sp.magnetization.ndofs == 6 * m.n_cells
    assert sp.phase.ndofs == m.n_vertices + m.n_faces


def test_magnetization_is_pressure_squared(sp8):
    assert np.array_equal(sp8.magnetization.cell_dofs, sp8.pressure.cell_dofs)
    assert sp8.magnetization.element is sp8.pressure.element
    assert sp8.magnetization.ncomp == 2


def test_velocity_boundary_constraints(sp8):
    m = sp8.mesh
    U = sp8.velocity
    bverts = m.boundary_vertices()
    bedges = m.n_vertices + np.flatnonzero(m.boundary)
    expect = np.sort(np.concatenate([np.concatenate([bverts, bedges]) + c * U.n_scalar
                                     for c in range(2)]))
    assert np.array_equal(np.sort(U.constrained), expect)
    assert U.n_free == U.ndofs - len(expect)


def test_dof_maps_injective_and_shared(sp8, rng):
    for space in (sp8.phase, sp8.velocity, sp8.pressure):
        for row in space.cell_dofs:
            assert len(set(row)) == len(row)
    # a continuous field agrees on both sides of every internal face
    phi = rng.standard_normal(sp8.phase.ndofs)
    m = sp8.mesh
    for f in m.internal_faces:
        pts = m.vertices[m.faces[f]]
        pts = np.vstack([pts, pts.mean(axis=0), 0.3 * pts[0] + 0.7 * pts[1]])
        a = cell_values(sp8, sp8.phase, phi, m.face_owner[f], to_ref(sp8, m.face_owner[f], pts))
        b = cell_values(sp8, sp8.phase, phi, m.face_neighbor[f],
                        to_ref(sp8, m.face_neighbor[f], pts))
        assert np.allclose(a, b, atol=1e-13)


def test_elements_partition_unity_and_nodality():
    ref = np.random.default_rng(1).uniform(0, 0.5, (20, 2))
    for name in ("P1", "P2"):  # the bubble is an extra function on top of P2
        v = ELEMENTS[name].values(ref)
        g = ELEMENTS[name].grads(ref)
        assert np.allclose(v.sum(axis=1), 1.0, atol=1e-14)
        assert np.allclose(g.sum(axis=1), 0.0, atol=1e-13)
    nodes = np.array([[0, 0], [1, 0], [0, 1], [0.5, 0.5], [0, 0.5], [0.5, 0]], float)
    assert np.allclose(ELEMENTS["P2"].values(nodes), np.eye(6), atol=1e-15)
    # bubble normalized to one at the centroid, zero at the P2 nodes
    bub = ELEMENTS["P2B"].values(np.vstack([nodes, [[1 / 3, 1 / 3]]]))[:, 6]
    assert np.allclose(bub, [0, 0, 0, 0, 0, 0, 1], atol=1e-15)


def test_interpolation_reproduces_quadratics(sp_small):
    f = lambda x: 1 + 2 * x[:, 0] - x[:, 1] + 3 * x[:, 0] * x[:, 1] - x[:, 1] ** 2  # noqa: E731
    phi = sp_small.interpolate(sp_small.phase, f)
    pts = np.random.default_rng(2).uniform([0, 0], [1, 0.6], (100, 2))
    assert np.allclose(sp_small.eval_at(sp_small.phase, phi, pts), f(pts), atol=1e-13)


def test_gradient_inclusion_examples(sp8):
    assert check_gradient_inclusion(sp8, np.zeros(sp8.potential.ndofs)) == 0.0
    phi = sp8.interpolate(sp8.potential, lambda x: x[:, 0] ** 2)
    g = np.sqrt(np.sum(sp8.wdet[..., None] * sp8.eval_grad(sp8.potential, phi) ** 2))
    assert check_gradient_inclusion(sp8, phi) <= 1e-12 * g
    with pytest.raises(ValueError):
        check_gradient_inclusion(sp8, np.zeros(3))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gradient_inclusion_random(seed):
    sp = _sp_pool()
    c = np.random.default_rng(seed).standard_normal(sp.potential.ndofs)
    g = np.sqrt(np.sum(sp.wdet[..., None] * sp.eval_grad(sp.potential, c) ** 2))
    assert check_gradient_inclusion(sp, c) <= 1e-12 * g


def test_gradient_to_magnetization_is_exact(sp_small, rng):
    c = rng.standard_normal(sp_small.potential.ndofs)
    H = sp_small.gradient_to_magnetization(c)
    assert np.allclose(sp_small.eval(sp_small.magnetization, H),
                       sp_small.eval_grad(sp_small.potential, c), atol=1e-12)


_SP = {}


def _sp_pool():
    if "pool" not in _SP:
        _SP["pool"] = SpaceSet(uniform_refine(build_rectangle_mesh(3, 2, (0, 1, 0, 0.6))))
    return _SP["pool"]


def test_infsup_positive_on_8_cells(mesh8):
    assert infsup_constant(SpaceSet(mesh8)) > 0.1


def test_infsup_stable_under_refinement():
    base = build_rectangle_mesh(2, 2)
    betas = [infsup_constant(SpaceSet(refine(base, k))) for k in range(3)]
    assert min(betas) > 0
    assert (max(betas) - min(betas)) / max(betas) < 0.2


@pytest.mark.parametrize("kind", ["P1", "P2"])
def test_infsup_negative_control(kind):
    """Unenriched velocities leave spurious pressure modes: beta collapses."""
    base = build_rectangle_mesh(2, 2)
    stable = infsup_constant(SpaceSet(refine(base, 2)))
    betas = [infsup_constant(SpaceSet(refine(base, k), velocity_kind=kind)) for k in range(3)]
    assert betas[-1] < 1e-6 * stable


def test_infsup_needs_two_cells():
    from ferrosim.mesh import _from_cells
    m = _from_cells(np.array([[0.0, 0], [1, 0], [0, 1]]), np.array([[0, 1, 2]]), (0, 1, 0, 1))
    with pytest.raises(ValueError):
        infsup_constant(SpaceSet(m))


def test_eval_at_outside_is_nan(sp8):
    v = sp8.eval_at(sp8.phase, np.ones(sp8.phase.ndofs), np.array([[2.0, 2.0], [0.5, 0.5]]))
    assert np.isnan(v[0]) and v[1] == pytest.approx(1.0)

"""Finite element spaces, DOF maps and cached tabulations.

Local basis functions are written in barycentric coordinates
l0 = 1 - x - y, l1 = x, l2 = y on the reference triangle.  Local P2 DOFs are
ordered (v0, v1, v2, e0, e1, e2) where edge ``i`` is opposite vertex ``i``;
the enriched element appends the cell bubble 27*l0*l1*l2, normalized to one
at the centroid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial

import numpy as np
import scipy.linalg as sla

from .errors import NumericalFailure
from .mesh import Mesh
from .quadrature import DEFAULT_DEGREE, QuadratureRule, interval_rule, triangle_rule

_DLAM = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])

_einsum = partial(np.einsum, optimize=True)  # contraction order matters for 3+ operands


def _barycentric(ref):
    ref = np.asarray(ref, dtype=float)
    return np.stack([1.0 - ref[..., 0] - ref[..., 1], ref[..., 0], ref[..., 1]], axis=-1)


class Element:
    """Scalar Lagrange-type element on the reference triangle."""

    name = ""
    n_local = 0

    def values(self, ref):
        raise NotImplementedError

    def grads(self, ref):
        raise NotImplementedError


class P1(Element):
    name = "P1"
    n_local = 3

    def values(self, ref):
        return _barycentric(ref)

    def grads(self, ref):
        shape = np.shape(ref)[:-1]
        return np.broadcast_to(_DLAM, shape + (3, 2)).copy()


class P2(Element):
    name = "P2"
    n_local = 6

    def values(self, ref):
        lam = _barycentric(ref)
        out = np.empty(lam.shape[:-1] + (6,))
        for i in range(3):
            j, k = (i + 1) % 3, (i + 2) % 3
            out[..., i] = lam[..., i] * (2.0 * lam[..., i] - 1.0)
            out[..., 3 + i] = 4.0 * lam[..., j] * lam[..., k]
        return out

    def grads(self, ref):
        lam = _barycentric(ref)
        out = np.empty(lam.shape[:-1] + (6, 2))
        for i in range(3):
            j, k = (i + 1) % 3, (i + 2) % 3
            out[..., i, :] = (4.0 * lam[..., i, None] - 1.0) * _DLAM[i]
            out[..., 3 + i, :] = 4.0 * (lam[..., k, None] * _DLAM[j] + lam[..., j, None] * _DLAM[k])
        return out


class P2Bubble(P2):
    name = "P2B"
    n_local = 7

    def values(self, ref):
        lam = _barycentric(ref)
        out = np.empty(lam.shape[:-1] + (7,))
        out[..., :6] = P2.values(self, ref)
        out[..., 6] = 27.0 * lam[..., 0] * lam[..., 1] * lam[..., 2]
        return out

    def grads(self, ref):
        lam = _barycentric(ref)
        out = np.empty(lam.shape[:-1] + (7, 2))
        out[..., :6, :] = P2.grads(self, ref)
        l0, l1, l2 = lam[..., 0, None], lam[..., 1, None], lam[..., 2, None]
        out[..., 6, :] = 27.0 * (l1 * l2 * _DLAM[0] + l0 * l2 * _DLAM[1] + l0 * l1 * _DLAM[2])
        return out


ELEMENTS = {cls.name: cls() for cls in (P1, P2, P2Bubble)}


@dataclass(frozen=True, eq=False)
class FunctionSpace:
    """A (possibly vector valued) space built from one scalar element.

    Vector coefficients are stored component-major: dof ``c * n_scalar + s``.
    ``constrained`` lists vector dofs pinned to zero (Dirichlet boundary).
    """

    name: str
    element: Element
    cell_dofs: np.ndarray
    n_scalar: int
    ncomp: int = 1
    continuous: bool = True
    constrained: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def ndofs(self) -> int:
        return self.ncomp * self.n_scalar

    @property
    def n_local(self) -> int:
        return self.ncomp * self.element.n_local

    @property
    def vector_cell_dofs(self) -> np.ndarray:
        """(C, ncomp * n_local) global dofs, local order component-major."""
        return np.concatenate(
            [self.cell_dofs + c * self.n_scalar for c in range(self.ncomp)], axis=1
        )

    @property
    def free(self) -> np.ndarray:
        mask = np.ones(self.ndofs, dtype=bool)
        mask[self.constrained] = False
        return np.flatnonzero(mask)

    @property
    def n_free(self) -> int:
        return self.ndofs - len(self.constrained)

    def local(self, coeffs) -> np.ndarray:
        """Cellwise coefficients, shape (C, n_local) or (C, ncomp, n_local)."""
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (self.ndofs,):
            raise ValueError(
                f"{self.name}: expected {self.ndofs} coefficients, got shape {coeffs.shape}"
            )
        if self.ncomp == 1:
            return coeffs[self.cell_dofs]
        return coeffs.reshape(self.ncomp, self.n_scalar)[:, self.cell_dofs].transpose(1, 0, 2)

    def zeros(self) -> np.ndarray:
        return np.zeros(self.ndofs)


def _p2_dofs(mesh: Mesh) -> np.ndarray:
    return np.concatenate([mesh.cells, mesh.n_vertices + mesh.cell_faces], axis=1)


def continuous_space(mesh: Mesh, kind: str = "P2", name: str = "", ncomp: int = 1,
                     clamp_boundary: bool = False) -> FunctionSpace:
    nv, ne, nc = mesh.n_vertices, mesh.n_faces, mesh.n_cells
    if kind == "P1":
        dofs, n = mesh.cells.copy(), nv
        bnd = mesh.boundary_vertices()
    elif kind == "P2":
        dofs, n = _p2_dofs(mesh), nv + ne
        bnd = np.concatenate([mesh.boundary_vertices(), nv + np.flatnonzero(mesh.boundary)])
    elif kind == "P2B":
        dofs = np.concatenate([_p2_dofs(mesh), (nv + ne + np.arange(nc))[:, None]], axis=1)
        n = nv + ne + nc
        bnd = np.concatenate([mesh.boundary_vertices(), nv + np.flatnonzero(mesh.boundary)])
    else:
        raise ValueError(f"unknown element kind {kind!r}")
    constrained = np.zeros(0, dtype=np.int64)
    if clamp_boundary:
        constrained = np.sort(np.concatenate([bnd + c * n for c in range(ncomp)]))
    return FunctionSpace(name or kind, ELEMENTS[kind], dofs, n, ncomp, True, constrained)


def discontinuous_p1(mesh: Mesh, name: str = "DG1", ncomp: int = 1) -> FunctionSpace:
    dofs = np.arange(3 * mesh.n_cells).reshape(-1, 3)
    return FunctionSpace(name, ELEMENTS["P1"], dofs, 3 * mesh.n_cells, ncomp, False)


class SpaceSet:
    """The six discrete spaces on one mesh plus geometric tabulations.

    phase, chempot and potential are continuous P2; magnetization is
    discontinuous P1 (2-vector) with the same layout per component as the
    discontinuous P1 pressure; velocity is P2 enriched with the cubic bubble,
    clamped to zero on the boundary.
    """

    def __init__(self, mesh: Mesh, degree: int = DEFAULT_DEGREE, velocity_kind: str = "P2B"):
        self.mesh = mesh
        self.quad: QuadratureRule = triangle_rule(degree)
        self.face_quad: QuadratureRule = interval_rule(7)
        self.phase = continuous_space(mesh, "P2", "phase")
        self.chempot = continuous_space(mesh, "P2", "chempot")
        self.potential = continuous_space(mesh, "P2", "potential")
        self.magnetization = discontinuous_p1(mesh, "magnetization", ncomp=2)
        self.pressure = discontinuous_p1(mesh, "pressure")
        self.velocity = continuous_space(mesh, velocity_kind, "velocity", ncomp=2,
                                         clamp_boundary=True)
        self._tab = {}
        self._ftab = {}
        self.cache = {}

        p = mesh.vertices[mesh.cells]
        self.x0 = p[:, 0]
        J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)  # columns = edges
        self.J = J
        self.detJ = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        self.Jinv = np.linalg.inv(J)
        self.wdet = self.detJ[:, None] * self.quad.weights[None, :]
        self.xq = self.x0[:, None, :] + _einsum("cab,qb->cqa", J, self.quad.points)

        f = mesh.faces
        s = self.face_quad.points
        pa = mesh.vertices[f[:, 0]]
        pb = mesh.vertices[f[:, 1]]
        self.xf = pa[:, None, :] + s[None, :, None] * (pb - pa)[:, None, :]
        self.face_w = mesh.face_lengths()[:, None] * self.face_quad.weights[None, :]

    # -- tabulation -----------------------------------------------------
    def tab(self, element: Element):
        """(values (nq, nloc), physical gradients (C, nq, nloc, 2)) at cell quadrature."""
        if element.name not in self._tab:
            v = element.values(self.quad.points)
            g = element.grads(self.quad.points)
            G = _einsum("qia,cab->cqib", g, self.Jinv)
            self._tab[element.name] = (v, G)
        return self._tab[element.name]

    def ref_grads(self, element: Element) -> np.ndarray:
        """Reference-cell gradients (nq, nloc, 2) at cell quadrature points."""
        key = ("ref_grads", element.name)
        if key not in self.cache:
            self.cache[key] = element.grads(self.quad.points)
        return self.cache[key]

    def face_ref(self, side: str):
        cells = self.side_cells(side)
        safe = np.maximum(cells, 0)
        rel = self.xf - self.x0[safe][:, None, :]
        return _einsum("fab,fqb->fqa", self.Jinv[safe], rel)

    def side_cells(self, side: str) -> np.ndarray:
        return self.mesh.face_owner if side == "owner" else self.mesh.face_neighbor

    def face_tab(self, element: Element, side: str):
        """(values (F, nqf, nloc), physical gradients (F, nqf, nloc, 2)) on faces.

        Neighbor-side entries of boundary faces are meaningless and must be masked.
        """
        key = (element.name, side)
        if key not in self._ftab:
            ref = self.face_ref(side)
            cells = np.maximum(self.side_cells(side), 0)
            v = element.values(ref)
            g = element.grads(ref)
            G = _einsum("fqia,fab->fqib", g, self.Jinv[cells])
            self._ftab[key] = (v, G)
        return self._ftab[key]

    # -- evaluation -----------------------------------------------------
    def eval(self, space: FunctionSpace, coeffs) -> np.ndarray:
        """Values at cell quadrature points: (C, nq) or (C, nq, ncomp)."""
        v, _ = self.tab(space.element)
        loc = space.local(coeffs)
        if space.ncomp == 1:
            return loc @ v.T
        return np.swapaxes(loc @ v.T, 1, 2)

    def eval_grad(self, space: FunctionSpace, coeffs) -> np.ndarray:
        """Gradients at cell quadrature points: (C, nq, 2) or (C, nq, ncomp, 2)."""
        # affine cells: contract with reference gradients, then map by J^-1
        g = self.ref_grads(space.element)
        loc = space.local(coeffs)
        if space.ncomp == 1:
            return np.tensordot(loc, g, axes=(1, 1)) @ self.Jinv
        ref = np.tensordot(loc, g, axes=(2, 1))  # (C, k, q, b)
        return np.swapaxes(ref @ self.Jinv[:, None], 1, 2)

    def eval_face(self, space: FunctionSpace, coeffs, side: str) -> np.ndarray:
        v, _ = self.face_tab(space.element, side)
        cells = np.maximum(self.side_cells(side), 0)
        loc = space.local(coeffs)[cells]
        if space.ncomp == 1:
            return _einsum("fi,fqi->fq", loc, v)
        return _einsum("fki,fqi->fqk", loc, v)

    def eval_face_grad(self, space: FunctionSpace, coeffs, side: str) -> np.ndarray:
        _, G = self.face_tab(space.element, side)
        cells = np.maximum(self.side_cells(side), 0)
        loc = space.local(coeffs)[cells]
        if space.ncomp == 1:
            return _einsum("fi,fqia->fqa", loc, G)
        return _einsum("fki,fqia->fqka", loc, G)

    def eval_at(self, space: FunctionSpace, coeffs, points) -> np.ndarray:
        """Point evaluation at arbitrary physical points (NaN outside the mesh)."""
        cells, ref = self.mesh.locator().locate(points)
        safe = np.maximum(cells, 0)
        v = space.element.values(ref)  # (N, nloc)
        loc = space.local(coeffs)[safe]
        if space.ncomp == 1:
            out = _einsum("ni,ni->n", loc, v)
            out[cells < 0] = np.nan
        else:
            out = _einsum("nki,ni->nk", loc, v)
            out[cells < 0] = np.nan
        return out

    # -- interpolation --------------------------------------------------
    def p2_nodes(self) -> np.ndarray:
        m = self.mesh
        mid = 0.5 * (m.vertices[m.faces[:, 0]] + m.vertices[m.faces[:, 1]])
        return np.concatenate([m.vertices, mid])

    def interpolate(self, space: FunctionSpace, func) -> np.ndarray:
        """Nodal interpolation of ``func(points (N, 2)) -> (N,) or (N, ncomp)``."""
        if space.element.name in ("P2", "P2B"):
            nodes = self.p2_nodes()
        elif space.continuous:
            nodes = self.mesh.vertices
        else:
            nodes = self.mesh.vertices[self.mesh.cells].reshape(-1, 2)
        vals = np.asarray(func(nodes), dtype=float).reshape(len(nodes), -1)
        if vals.shape[1] != space.ncomp:
            raise ValueError(f"{space.name}: function returned {vals.shape[1]} components")
        out = np.zeros((space.ncomp, space.n_scalar))
        n = len(nodes)
        out[:, :n] = vals.T
        if space.element.name == "P2B":
            m = self.mesh
            centroid = m.vertices[m.cells].mean(axis=1)
            target = np.asarray(func(centroid), dtype=float).reshape(m.n_cells, -1)
            p2 = ELEMENTS["P2"].values(np.array([1 / 3, 1 / 3]))
            dofs = self.velocity.cell_dofs[:, :6] if space is self.velocity else space.cell_dofs[:, :6]
            at_centroid = _einsum("kci,i->ck", out[:, dofs], p2)
            out[:, n:] = (target - at_centroid).T
        out = out.ravel()
        out[space.constrained] = 0.0
        return out

    def gradient_to_magnetization(self, coeffs) -> np.ndarray:
        """Exact representation of the elementwise gradient of a P2 field in M_h.

        The gradient of a P2 function is affine on each cell, so its values at the
        three vertices are its discontinuous P1 coefficients.
        """
        el = self.potential.element
        verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        g = el.grads(verts)  # (3 vertices, 6, 2)
        loc = self.potential.local(coeffs)
        grad = _einsum("ci,vib,cba->cva", loc, g, self.Jinv)  # (C, 3, 2)
        return grad.transpose(2, 0, 1).ravel()

    def magnetization_from_vertices(self, vals) -> np.ndarray:
        """M_h coefficients from per-cell vertex values of shape (C, 3, 2)."""
        return np.asarray(vals, dtype=float).transpose(2, 0, 1).ravel()


def build_spaces(mesh: Mesh) -> SpaceSet:
    return SpaceSet(mesh)


def check_gradient_inclusion(spaces: SpaceSet, coeffs) -> float:
    """L2 distance between grad(Phi_h) and its cellwise L2 projection onto M_h."""
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape != (spaces.potential.ndofs,):
        raise ValueError(f"coeffs: expected {spaces.potential.ndofs} entries, got {coeffs.shape}")
    g = spaces.eval_grad(spaces.potential, coeffs)  # (C, nq, 2)
    v, _ = spaces.tab(spaces.pressure.element)
    mass = _einsum("cq,qi,qj->cij", spaces.wdet, v, v)
    rhs = _einsum("cq,qi,cqa->cia", spaces.wdet, v, g)
    proj = _einsum("qi,cia->cqa", v, np.linalg.solve(mass, rhs))
    return float(np.sqrt(np.sum(spaces.wdet[..., None] * (g - proj) ** 2)))


def infsup_constant(spaces: SpaceSet) -> float:
    """Discrete inf-sup constant of the (velocity, pressure) pair.

    Square root of the smallest eigenvalue of B A^-1 B^T p = beta^2 M_p p on
    pressures orthogonal to constants, with A the vector Laplacian on the
    constrained velocity space.  Any spurious pressure mode beyond the
    constants shows up as beta ~ 0.  Dense, so meant for small test meshes.
    """
    if spaces.mesh.n_cells < 2:
        raise ValueError("inf-sup check needs at least 2 cells")
    U, P = spaces.velocity, spaces.pressure
    n = U.n_scalar
    _, GU = spaces.tab(U.element)
    vP, _ = spaces.tab(P.element)
    kloc = _einsum("cq,cqia,cqja->cij", spaces.wdet, GU, GU)
    K = np.zeros((n, n))
    d = U.cell_dofs
    np.add.at(K, (d[:, :, None], d[:, None, :]), kloc)
    A = np.kron(np.eye(U.ncomp), K)
    B = np.zeros((P.ndofs, U.ndofs))
    for a in range(2):
        bloc = _einsum("cq,qi,cqj->cij", spaces.wdet, vP, GU[..., a])
        np.add.at(B, (P.cell_dofs[:, :, None], (d + a * n)[:, None, :]), bloc)
    Mp = np.zeros((P.ndofs, P.ndofs))
    np.add.at(Mp, (P.cell_dofs[:, :, None], P.cell_dofs[:, None, :]),
              _einsum("cq,qi,qj->cij", spaces.wdet, vP, vP))
    free = U.free
    Bf = B[:, free]
    try:
        S = Bf @ sla.solve(A[np.ix_(free, free)], Bf.T, assume_a="pos")
    except (sla.LinAlgError, ValueError) as exc:
        raise NumericalFailure(f"velocity stiffness is singular ({exc})") from exc
    # basis of the Mp-orthogonal complement of the constants
    ones = np.ones(P.ndofs)
    Q, _ = np.linalg.qr(np.column_stack([Mp @ ones, np.eye(P.ndofs)]))
    Z = Q[:, 1:P.ndofs]
    lam = sla.eigh(Z.T @ S @ Z, Z.T @ Mp @ Z, eigvals_only=True)
    return float(np.sqrt(max(lam[0], 0.0)))

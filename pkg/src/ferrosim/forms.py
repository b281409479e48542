"""Assembly of the bilinear and trilinear forms and load vectors.

Matrices are assembled from dense cell (and face) blocks into CSR.  The
sparsity pattern of every distinct (rows, cols) layout is computed once and
cached on the SpaceSet, so reassembly is a single ``np.bincount``.

Convention for trilinear forms with a frozen first argument:
``A[i, j] = b(U, basis_j, basis_i)`` so that ``b(U, V, W) = W @ A @ V``.
Face jumps are owner minus neighbor, averages are arithmetic means and the
face normal points from owner to neighbor.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial

import numpy as np
import scipy.sparse as sps

from .constitutive import ModelParams, boussinesq_force, susceptibility, viscosity
from .spaces import FunctionSpace, SpaceSet

_einsum = partial(np.einsum, optimize=True)  # contraction order matters for 3+ operands


@dataclass(frozen=True)
class AssembledOperator:
    matrix: sps.csr_matrix
    row_space: str
    col_space: str

    @property
    def shape(self):
        return self.matrix.shape


# -- generic assembly --------------------------------------------------------

def _pattern(rows, cols, shape):
    keys = (rows.astype(np.int64) * shape[1] + cols).ravel()
    uniq, inverse = np.unique(keys, return_inverse=True)
    r = uniq // shape[1]
    c = uniq % shape[1]
    indptr = np.zeros(shape[0] + 1, dtype=np.int64)
    np.cumsum(np.bincount(r, minlength=shape[0]), out=indptr[1:])
    return indptr, c.astype(np.int32), inverse.ravel(), len(uniq)


def assemble(sp: SpaceSet, blocks, shape, key=None) -> sps.csr_matrix:
    """Sum dense local blocks into a CSR matrix.

    ``blocks`` is a sequence of (row_dofs (n, a), col_dofs (n, b), values (n, a, b)).
    """
    vals = np.concatenate([np.asarray(v, dtype=float).ravel() for _, _, v in blocks])
    pat = sp.cache.get(("pattern", key)) if key is not None else None
    if pat is None:
        rows = np.concatenate([np.repeat(r[:, :, None], c.shape[1], axis=2).ravel()
                               for r, c, _ in blocks])
        cols = np.concatenate([np.repeat(c[:, None, :], r.shape[1], axis=1).ravel()
                               for r, c, _ in blocks])
        pat = _pattern(rows, cols, shape)
        if key is not None:
            sp.cache[("pattern", key)] = pat
    indptr, indices, inverse, nnz = pat
    data = np.bincount(inverse, weights=vals, minlength=nnz)
    return sps.csr_matrix((data, indices, indptr), shape=shape)


def assemble_vector(dofs, local, n) -> np.ndarray:
    return np.bincount(np.asarray(dofs).ravel(), weights=np.asarray(local).ravel(), minlength=n)


def _vector_block(scalar_block, ncomp=2):
    """Expand a (C, n, n) scalar block to the component-diagonal (C, 2n, 2n) block."""
    C, a, b = scalar_block.shape
    out = np.zeros((C, ncomp * a, ncomp * b))
    for k in range(ncomp):
        out[:, k * a:(k + 1) * a, k * b:(k + 1) * b] = scalar_block
    return out


def _check(space: FunctionSpace, v, label):
    v = np.asarray(v, dtype=float)
    if v.shape != (space.ndofs,):
        raise ValueError(f"{label}: expected {space.ndofs} coefficients for {space.name}, "
                         f"got shape {v.shape}")
    return v


# -- mass and stiffness --------------------------------------------------------

def mass_local(sp: SpaceSet, space: FunctionSpace, weight=None):
    v, _ = sp.tab(space.element)
    w = sp.wdet if weight is None else sp.wdet * weight
    return _einsum("cq,qi,qj->cij", w, v, v)


def mass_matrix(sp: SpaceSet, space: FunctionSpace, weight=None) -> sps.csr_matrix:
    """Mass matrix, optionally weighted by a function sampled at quadrature points."""
    cache_key = ("mass", space.name) if weight is None else None
    if cache_key and cache_key in sp.cache:
        return sp.cache[cache_key]
    loc = mass_local(sp, space, weight)
    if space.ncomp > 1:
        loc = _vector_block(loc, space.ncomp)
    d = space.vector_cell_dofs
    A = assemble(sp, [(d, d, loc)], (space.ndofs, space.ndofs), key=("sq", space.name))
    if cache_key:
        sp.cache[cache_key] = A
    return A


def stiffness_matrix(sp: SpaceSet, space: FunctionSpace) -> sps.csr_matrix:
    key = ("stiff", space.name)
    if key not in sp.cache:
        _, G = sp.tab(space.element)
        loc = _einsum("cq,cqia,cqja->cij", sp.wdet, G, G)
        d = space.cell_dofs
        sp.cache[key] = assemble(sp, [(d, d, loc)], (space.ndofs, space.ndofs),
                                 key=("sq", space.name))
    return sp.cache[key]


def integrate(sp: SpaceSet, values) -> float:
    """Integral of a function sampled at cell quadrature points (C, nq)."""
    return float(np.sum(sp.wdet * values))


def l2_inner(sp: SpaceSet, space: FunctionSpace, a, b) -> float:
    va = sp.eval(space, a)
    vb = sp.eval(space, b)
    if space.ncomp > 1:
        return integrate(sp, _einsum("cqk,cqk->cq", va, vb))
    return integrate(sp, va * vb)


def mean_functional(sp: SpaceSet, space: FunctionSpace) -> np.ndarray:
    """Vector m with m @ coeffs = integral of the (scalar) field."""
    key = ("meanvec", space.name)
    if key not in sp.cache:
        v, _ = sp.tab(space.element)
        loc = _einsum("cq,qi->ci", sp.wdet, v)
        sp.cache[key] = assemble_vector(space.cell_dofs, loc, space.ndofs)
    return sp.cache[key]


# -- convection ------------------------------------------------------------------

def _velocity_at_quad(sp: SpaceSet, U):
    Uq = sp.eval(sp.velocity, U)  # (C, nq, 2)
    gU = sp.eval_grad(sp.velocity, U)  # (C, nq, 2, 2)
    return Uq, gU[..., 0, 0] + gU[..., 1, 1]


def _convection_local(sp: SpaceSet, space: FunctionSpace, U):
    """Scalar blocks of  int (U.grad N_j) N_i + 1/2 div U N_j N_i."""
    Uq, divU = _velocity_at_quad(sp, U)
    v, G = sp.tab(space.element)
    adv = _einsum("cqa,cqja->cqj", Uq, G)
    return (_einsum("cq,qi,cqj->cij", sp.wdet, v, adv)
            + 0.5 * _einsum("cq,cq,qi,qj->cij", sp.wdet, divU, v, v))


def temam_matrix(sp: SpaceSet, U) -> sps.csr_matrix:
    """A[i, j] = b_h(U, basis_j, basis_i) on the velocity space."""
    U = _check(sp.velocity, U, "U")
    loc = _vector_block(_convection_local(sp, sp.velocity, U))
    d = sp.velocity.vector_cell_dofs
    n = sp.velocity.ndofs
    return assemble(sp, [(d, d, loc)], (n, n), key=("sq", "velocity"))


def _face_normal_velocity(sp: SpaceSet, U):
    """U.n_F at face quadrature points (U is continuous, so the owner trace suffices)."""
    Uf = sp.eval_face(sp.velocity, U, "owner")  # (F, nqf, 2)
    return _einsum("fqa,fa->fq", Uf, sp.mesh.normals)


def _internal_face_blocks(sp: SpaceSet, space: FunctionSpace, weight_fn):
    """Scalar face blocks on internal faces for a discontinuous space.

    ``weight_fn(vo, vn)`` gets owner/neighbor trace tables of the faces and
    returns the (F, 2n, 2n) block in (owner locals, neighbor locals) order.
    """
    inner = sp.mesh.internal_faces
    vo, _ = sp.face_tab(space.element, "owner")
    vn, _ = sp.face_tab(space.element, "neighbor")
    dofs = np.concatenate([space.cell_dofs[sp.mesh.face_owner[inner]],
                           space.cell_dofs[sp.mesh.face_neighbor[inner]]], axis=1)
    return inner, dofs, weight_fn(inner, vo[inner], vn[inner])


def _jump_tables(vo, vn):
    """Signed traces: jump [N_j] and average {N_i} tables, (F, nqf, 2n)."""
    jump = np.concatenate([vo, -vn], axis=2)
    avg = 0.5 * np.concatenate([vo, vn], axis=2)
    return jump, avg


def _mag_face_local(sp: SpaceSet, U, space):
    Un = _face_normal_velocity(sp, U)

    def weight(inner, vo, vn):
        jump, avg = _jump_tables(vo, vn)
        w = sp.face_w[inner] * Un[inner]
        return -_einsum("fq,fqi,fqj->fij", w, avg, jump)

    return _internal_face_blocks(sp, space, weight)


def _mag_blocks(sp: SpaceSet, U, upwind: float = 0.0):
    """Component-wise blocks of b_m(U, basis_j, basis_i) (+ upwind s_h) for M_h."""
    space = sp.pressure  # M_h = [P_h]^2 with identical local layout
    vol = _convection_local(sp, space, U)
    inner, fdofs, face = _mag_face_local(sp, U, space)
    if upwind:
        face = face + upwind * _upwind_face_local(sp, U, space)[2]
    return [(space.cell_dofs, space.cell_dofs, vol), (fdofs, fdofs, face)]


def mag_convection_matrix(sp: SpaceSet, U, upwind: float = 0.0) -> sps.csr_matrix:
    """A[i, j] = b_m(U, basis_j, basis_i) on M_h, optionally plus upwind * s_h."""
    U = _check(sp.velocity, U, "U")
    scalar = assemble(sp, _mag_blocks(sp, U, upwind), (sp.pressure.ndofs,) * 2,
                      key=("magconv", "pressure"))
    return sps.block_diag([scalar, scalar], format="csr")


def _upwind_face_local(sp: SpaceSet, U, space):
    Un = np.abs(_face_normal_velocity(sp, U))

    def weight(inner, vo, vn):
        jump, _ = _jump_tables(vo, vn)
        return 0.5 * _einsum("fq,fqi,fqj->fij", sp.face_w[inner] * Un[inner], jump, jump)

    return _internal_face_blocks(sp, space, weight)


def upwind_matrix(sp: SpaceSet, U) -> sps.csr_matrix:
    U = _check(sp.velocity, U, "U")
    _, fdofs, face = _upwind_face_local(sp, U, sp.pressure)
    scalar = assemble(sp, [(fdofs, fdofs, face)], (sp.pressure.ndofs,) * 2,
                      key=("upwind", "pressure"))
    return sps.block_diag([scalar, scalar], format="csr")


def trilinear_ns(sp: SpaceSet, U, V, W) -> float:
    """b_h(U, V, W) = int (U.grad)V.W + 1/2 div(U) V.W."""
    U, V, W = (_check(sp.velocity, a, n) for a, n in ((U, "U"), (V, "V"), (W, "W")))
    Uq, divU = _velocity_at_quad(sp, U)
    Vq = sp.eval(sp.velocity, V)
    gV = sp.eval_grad(sp.velocity, V)
    Wq = sp.eval(sp.velocity, W)
    integrand = (_einsum("cqa,cqka,cqk->cq", Uq, gV, Wq)
                 + 0.5 * divU * _einsum("cqk,cqk->cq", Vq, Wq))
    return integrate(sp, integrand)


def _mag_jump_avg(sp: SpaceSet, V, W):
    M = sp.magnetization
    inner = sp.mesh.internal_faces
    Vo = sp.eval_face(M, V, "owner")[inner]
    Vn = sp.eval_face(M, V, "neighbor")[inner]
    Wo = sp.eval_face(M, W, "owner")[inner]
    Wn = sp.eval_face(M, W, "neighbor")[inner]
    return inner, Vo - Vn, 0.5 * (Wo + Wn)


def trilinear_mag(sp: SpaceSet, U, V, W) -> float:
    """Discontinuous convection form b_m(U, V, W) on M_h, including face terms."""
    U = _check(sp.velocity, U, "U")
    V = _check(sp.magnetization, V, "V")
    W = _check(sp.magnetization, W, "W")
    M = sp.magnetization
    Uq, divU = _velocity_at_quad(sp, U)
    Vq = sp.eval(M, V)
    gV = sp.eval_grad(M, V)
    Wq = sp.eval(M, W)
    vol = integrate(sp, _einsum("cqa,cqka,cqk->cq", Uq, gV, Wq)
                    + 0.5 * divU * _einsum("cqk,cqk->cq", Vq, Wq))
    inner, jV, aW = _mag_jump_avg(sp, V, W)
    Un = _face_normal_velocity(sp, U)[inner]
    face = np.sum(sp.face_w[inner] * Un * _einsum("fqk,fqk->fq", jV, aW))
    return vol - face


def upwind_stab(sp: SpaceSet, U, M, Z) -> float:
    """s_h(U, M, Z) = 1/2 sum_F int |U.n| [M].[Z]."""
    U = _check(sp.velocity, U, "U")
    M = _check(sp.magnetization, M, "M")
    Z = _check(sp.magnetization, Z, "Z")
    inner, jM, _ = _mag_jump_avg(sp, M, M)
    _, jZ, _ = _mag_jump_avg(sp, Z, Z)
    Un = np.abs(_face_normal_velocity(sp, U)[inner])
    return 0.5 * float(np.sum(sp.face_w[inner] * Un * _einsum("fqk,fqk->fq", jM, jZ)))


# -- Stokes blocks ------------------------------------------------------------

def dissipation_matrix(sp: SpaceSet, phi_old, params: ModelParams) -> sps.csr_matrix:
    """(nu(phi_old) T(U), T(V)) with T the symmetric gradient."""
    phi_old = _check(sp.phase, phi_old, "phi_old")
    nu = viscosity(sp.eval(sp.phase, phi_old), params)
    _, G = sp.tab(sp.velocity.element)
    w = sp.wdet * nu
    lap = _einsum("cq,cqia,cqja->cij", w, G, G)
    cross = _einsum("cq,cqia,cqjb->cabij", w, G, G)  # d_a N_i d_b N_j
    n = G.shape[2]
    loc = np.zeros((sp.mesh.n_cells, 2 * n, 2 * n))
    for a in range(2):  # test component
        for b in range(2):  # trial component
            blk = 0.5 * cross[:, b, a]  # d_b N_i * d_a N_j
            if a == b:
                blk = blk + 0.5 * lap
            loc[:, a * n:(a + 1) * n, b * n:(b + 1) * n] = blk
    d = sp.velocity.vector_cell_dofs
    N = sp.velocity.ndofs
    return assemble(sp, [(d, d, loc)], (N, N), key=("sq", "velocity"))


def divergence_matrix(sp: SpaceSet) -> sps.csr_matrix:
    """B[q, j] = (q, div basis_j), pressure rows and velocity columns."""
    key = ("div",)
    if key not in sp.cache:
        vq, _ = sp.tab(sp.pressure.element)
        _, G = sp.tab(sp.velocity.element)
        loc = np.concatenate([_einsum("cq,qi,cqj->cij", sp.wdet, vq, G[..., a])
                              for a in range(2)], axis=2)
        sp.cache[key] = assemble(sp, [(sp.pressure.cell_dofs, sp.velocity.vector_cell_dofs, loc)],
                                 (sp.pressure.ndofs, sp.velocity.ndofs), key=("div",))
    return sp.cache[key]


def gradient_coupling_matrix(sp: SpaceSet, weight=None) -> sps.csr_matrix:
    """G[i, j] = (weight * basis_j, grad X_i): potential rows, magnetization columns."""
    vM, _ = sp.tab(sp.pressure.element)
    _, GX = sp.tab(sp.potential.element)
    w = sp.wdet if weight is None else sp.wdet * weight
    loc = np.concatenate([_einsum("cq,cqi,qj->cij", w, GX[..., a], vM) for a in range(2)],
                         axis=2)
    return assemble(sp, [(sp.potential.cell_dofs, sp.magnetization.vector_cell_dofs, loc)],
                    (sp.potential.ndofs, sp.magnetization.ndofs), key=("gradcouple",))


# -- loads ---------------------------------------------------------------------

def _velocity_load(sp: SpaceSet, fq):
    """L_i = (f, basis_i) for a vector field sampled at quadrature points (C, nq, 2)."""
    v, _ = sp.tab(sp.velocity.element)
    loc = np.concatenate([_einsum("cq,qi,cq->ci", sp.wdet, v, fq[..., a]) for a in range(2)],
                         axis=1)
    L = assemble_vector(sp.velocity.vector_cell_dofs, loc, sp.velocity.ndofs)
    return L


def kelvin_load(sp: SpaceSet, H, M, mu0: float = 1.0) -> np.ndarray:
    """L with L @ V = mu0 * b_m(V, H, M) for every velocity field V."""
    H = _check(sp.magnetization, H, "H")
    M = _check(sp.magnetization, M, "M")
    S = sp.magnetization
    Hq = sp.eval(S, H)
    gH = sp.eval_grad(S, H)  # (C, nq, k, a)
    Mq = sp.eval(S, M)
    v, G = sp.tab(sp.velocity.element)
    adv = _einsum("cqka,cqk->cqa", gH, Mq)  # sum_k d_a H_k M_k
    dot = _einsum("cqk,cqk->cq", Hq, Mq)
    loc = np.concatenate(
        [_einsum("cq,qi,cq->ci", sp.wdet, v, adv[..., a])
         + 0.5 * _einsum("cq,cqi,cq->ci", sp.wdet, G[..., a], dot) for a in range(2)],
        axis=1)
    L = assemble_vector(sp.velocity.vector_cell_dofs, loc, sp.velocity.ndofs)

    inner, jH, aM = _mag_jump_avg(sp, H, M)
    if len(inner):
        vf, _ = sp.face_tab(sp.velocity.element, "owner")
        s = sp.face_w[inner] * _einsum("fqk,fqk->fq", jH, aM)
        n = sp.mesh.normals[inner]
        floc = np.concatenate([-_einsum("fq,fqi,f->fi", s, vf[inner], n[:, a])
                               for a in range(2)], axis=1)
        fd = sp.velocity.vector_cell_dofs[sp.mesh.face_owner[inner]]
        L += assemble_vector(fd, floc, sp.velocity.ndofs)
    return mu0 * L


def capillary_load(sp: SpaceSet, phi, psi, params: ModelParams) -> np.ndarray:
    """L with L @ V = (lambda/epsilon) (phi grad psi, V)."""
    phi = _check(sp.phase, phi, "phi")
    psi = _check(sp.chempot, psi, "psi")
    f = sp.eval(sp.phase, phi)[..., None] * sp.eval_grad(sp.chempot, psi)
    return (params.lam / params.epsilon) * _velocity_load(sp, f)


def gravity_load(sp: SpaceSet, phi, params: ModelParams) -> np.ndarray:
    """L with L @ V = (f_g(phi), V)."""
    phi = _check(sp.phase, phi, "phi")
    return _velocity_load(sp, boussinesq_force(sp.eval(sp.phase, phi), params))


def phase_convection_load(sp: SpaceSet, U, phi_old) -> np.ndarray:
    """L_i = (U phi_old, grad X_i) on the phase space."""
    U = _check(sp.velocity, U, "U")
    phi_old = _check(sp.phase, phi_old, "phi_old")
    flux = sp.eval(sp.velocity, U) * sp.eval(sp.phase, phi_old)[..., None]
    _, G = sp.tab(sp.phase.element)
    loc = _einsum("cq,cqia,cqa->ci", sp.wdet, G, flux)
    return assemble_vector(sp.phase.cell_dofs, loc, sp.phase.ndofs)


def gradient_load(sp: SpaceSet, fq, space: FunctionSpace | None = None) -> np.ndarray:
    """L_i = (f, grad X_i) for a vector field sampled at quadrature points."""
    space = space or sp.potential
    _, G = sp.tab(space.element)
    loc = _einsum("cq,cqia,cqa->ci", sp.wdet, G, fq)
    return assemble_vector(space.cell_dofs, loc, space.ndofs)


def vector_load(sp: SpaceSet, space: FunctionSpace, fq) -> np.ndarray:
    """L_i = (f, basis_i) for vector spaces; f sampled at quadrature points (C, nq, 2)."""
    v, _ = sp.tab(space.element)
    loc = np.concatenate([_einsum("cq,qi,cq->ci", sp.wdet, v, fq[..., a]) for a in range(2)],
                         axis=1)
    return assemble_vector(space.vector_cell_dofs, loc, space.ndofs)


def magnetization_reaction_matrix(sp: SpaceSet, phi_old, params: ModelParams):
    """(kappa(phi_old) Z_j, Z_i) on M_h."""
    kappa = susceptibility(sp.eval(sp.phase, phi_old), params)
    return mass_matrix(sp, sp.magnetization, weight=kappa)


def kappa_gradient_matrix(sp: SpaceSet, phi_old, params: ModelParams) -> sps.csr_matrix:
    """K[i, j] = (kappa(phi_old) grad X_j, Z_i): magnetization rows, potential columns."""
    kappa = susceptibility(sp.eval(sp.phase, phi_old), params)
    return gradient_coupling_matrix(sp, weight=kappa).T.tocsr()

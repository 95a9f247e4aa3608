"""Cell-local HHO operators.

Local unknowns of a cell T are ordered as the cell block followed by one
block per face of T (in the cell's face order).  Inside each block the
layout is component-major: index ``i * nb + a`` for component ``i`` and
scalar basis function ``a``.  Reconstructed gradients use the layout
``(i * d + j) * nk + m`` for the (i, j) entry and basis function ``m``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .approximation import (
    PolyBasis,
    QuadRule,
    basis_size,
    make_cell_basis,
    make_cell_quadrature,
    make_face_basis,
    make_face_quadrature,
)
from .mesh import Cell, Face, Mesh


class HHOError(ValueError):
    pass


EQUAL_ORDER = "equal_order"
MIXED_ORDER = "mixed_order"


def check_degrees(k: int, l: int, experimental: bool = False) -> str:
    """Validate (k, l) and return the matching stabilization variant."""
    if k < 0 or l < 0:
        raise HHOError(f"degrees must be non-negative, got k={k}, l={l}")
    if l not in (k, k + 1):
        raise HHOError(f"cell degree l must be k or k+1, got k={k}, l={l}")
    if k == 0:
        if l != 1:
            raise HHOError("the lowest-order variant k=0 requires l=1")
        if not experimental:
            raise HHOError("k=0 is experimental (rigid rotations are not in the face space); "
                           "enable the experimental flag to use it")
    return EQUAL_ORDER if l == k else MIXED_ORDER


@dataclass(frozen=True)
class CellContext:
    """Geometry, bases and quadrature needed to build the operators of one cell."""

    cell_id: int
    dim: int
    k: int
    l: int
    cell_basis: PolyBasis          # degree max(l, k+1); lower degrees are prefixes
    face_bases: tuple[PolyBasis, ...]
    cell_rule: QuadRule
    face_rules: tuple[QuadRule, ...]
    normals: np.ndarray            # (nfaces, d) outward unit normals
    face_diameters: np.ndarray
    face_ids: tuple[int, ...]
    cell: Cell = field(repr=False)
    faces: tuple[Face, ...] = field(repr=False)

    @property
    def n_faces(self) -> int:
        return len(self.face_bases)

    @property
    def nk(self) -> int:
        return basis_size(self.dim, self.k)

    @property
    def nl(self) -> int:
        return basis_size(self.dim, self.l)

    @property
    def nk1(self) -> int:
        return basis_size(self.dim, self.k + 1)

    @property
    def nbf(self) -> int:
        return basis_size(self.dim - 1, self.k)

    @property
    def n_cell_dofs(self) -> int:
        return self.dim * self.nl

    @property
    def n_face_dofs(self) -> int:
        return self.dim * self.nbf

    @property
    def ndof(self) -> int:
        return self.n_cell_dofs + self.n_faces * self.n_face_dofs

    def face_offset(self, f: int) -> int:
        return self.n_cell_dofs + f * self.n_face_dofs


def cell_context(mesh: Mesh, cell_id: int, k: int, l: int, order: int | None = None) -> CellContext:
    """Bases and rules for one cell.  ``order`` defaults to 2·max(l, k+1)."""
    cell = mesh.cells[cell_id]
    top = max(l, k + 1)
    q = 2 * top if order is None else order
    faces = [mesh.faces[f] for f in cell.face_ids]
    return CellContext(
        cell_id=cell_id,
        dim=mesh.dimension,
        k=k,
        l=l,
        cell_basis=make_cell_basis(cell, top),
        face_bases=tuple(make_face_basis(f, k) for f in faces),
        cell_rule=make_cell_quadrature(cell, q),
        face_rules=tuple(make_face_quadrature(f, q) for f in faces),
        normals=mesh.outward_normals(cell_id),
        face_diameters=np.array([f.diameter for f in faces]),
        face_ids=cell.face_ids,
        cell=cell,
        faces=tuple(faces),
    )


def _solve_spd(mat: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    try:
        chol = np.linalg.cholesky(mat)
    except np.linalg.LinAlgError as exc:
        raise HHOError(f"singular {what} mass matrix") from exc
    return np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))


def _mass(phi_a: np.ndarray, phi_b: np.ndarray, w: np.ndarray) -> np.ndarray:
    return phi_a.T @ (w[:, None] * phi_b)


def gradient_reconstruction(ctx: CellContext) -> np.ndarray:
    """Matrix G mapping local dofs to the coefficients of the reconstructed gradient.

    G(v) in P^k(T; R^{dxd}) solves, for every tensor polynomial tau of degree k,
    (G(v), tau)_T = (grad v_T, tau)_T + sum_F (v_F - v_T, tau n_TF)_F.
    """
    d, nk, nl, nbf = ctx.dim, ctx.nk, ctx.nl, ctx.nbf
    rule = ctx.cell_rule
    phi = ctx.cell_basis.eval(rule.points)
    dphi = ctx.cell_basis.grad(rule.points)
    mk = _mass(phi[:, :nk], phi[:, :nk], rule.weights)
    # scalar blocks: cell part per direction j, face part per (face, j)
    cell_block = np.einsum("q,qm,qaj->jma", rule.weights, phi[:, :nk], dphi[:, :nl])
    face_blocks = []
    for f, (fb, fr) in enumerate(zip(ctx.face_bases, ctx.face_rules)):
        phit = ctx.cell_basis.eval(fr.points)
        psi = fb.eval(fr.points)
        trace = _mass(phit[:, :nk], phit[:, :nl], fr.weights)
        cross = _mass(phit[:, :nk], psi, fr.weights)
        n = ctx.normals[f]
        cell_block -= n[:, None, None] * trace[None]
        face_blocks.append(n[:, None, None] * cross[None])
    cell_block = _solve_spd(mk, cell_block.transpose(1, 0, 2).reshape(nk, -1), "cell").reshape(nk, d, nl)
    G = np.zeros((d * d * nk, ctx.ndof))
    for i in range(d):
        for j in range(d):
            rows = slice((i * d + j) * nk, (i * d + j + 1) * nk)
            G[rows, i * nl:(i + 1) * nl] = cell_block[:, j, :]
            for f, fblk in enumerate(face_blocks):
                off = ctx.face_offset(f) + i * nbf
                G[rows, off:off + nbf] = _solve_spd(mk, fblk[j], "cell")
    return G


def displacement_reconstruction(ctx: CellContext, G: np.ndarray | None = None) -> np.ndarray:
    """Matrix D mapping local dofs to coefficients of D(v) in P^{k+1}(T; R^d).

    (grad D(v), grad q)_T = (G(v), grad q)_T for all q of degree k+1, closed by
    the mean-value condition on v_T.
    """
    if G is None:
        G = gradient_reconstruction(ctx)
    d, nk, nk1, nl = ctx.dim, ctx.nk, ctx.nk1, ctx.nl
    rule = ctx.cell_rule
    phi = ctx.cell_basis.eval(rule.points)
    dphi = ctx.cell_basis.grad(rule.points)
    w = rule.weights
    stiff = np.einsum("q,qaj,qbj->ab", w, dphi[:, :nk1], dphi[:, :nk1])
    mean = w @ phi[:, :nk1]
    couple = np.einsum("q,qaj,qm->jam", w, dphi[:, :nk1], phi[:, :nk])  # (d, nk1, nk)
    border = np.zeros((nk1 + 1, nk1 + 1))
    border[:nk1, :nk1] = stiff
    border[:nk1, nk1] = mean
    border[nk1, :nk1] = mean
    D = np.zeros((d * nk1, ctx.ndof))
    cell_mean = w @ phi[:, :nl]
    for i in range(d):
        rhs = np.zeros((nk1 + 1, ctx.ndof))
        for j in range(d):
            rhs[:nk1] += couple[j] @ G[(i * d + j) * nk:(i * d + j + 1) * nk]
        rhs[nk1, i * nl:(i + 1) * nl] = cell_mean
        try:
            sol = np.linalg.solve(border, rhs)
        except np.linalg.LinAlgError as exc:
            raise HHOError("displacement reconstruction: Neumann system is singular") from exc
        D[i * nk1:(i + 1) * nk1] = sol[:nk1]
    return D


def stabilization(ctx: CellContext, variant: str | None = None,
                  D: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Face stabilization S (stacked per face) and its unit-beta form Z.

    equal_order (l = k):  S_F(v) = Pi_F(v_F - v_T - (D(v) - Pi^k_T D(v)))
    mixed_order (l = k+1): S_F(v) = Pi_F(v_F - v_T)
    Z = sum_F (1/h_F) S_F^T M_F S_F.
    """
    expected = EQUAL_ORDER if ctx.l == ctx.k else MIXED_ORDER
    variant = expected if variant is None else variant
    if variant not in (EQUAL_ORDER, MIXED_ORDER):
        raise HHOError(f"unknown stabilization variant {variant!r}")
    if variant != expected:
        raise HHOError(f"{variant} stabilization needs l = {'k' if variant == EQUAL_ORDER else 'k+1'}"
                       f" (got k={ctx.k}, l={ctx.l})")
    d, nk, nk1, nl, nbf = ctx.dim, ctx.nk, ctx.nk1, ctx.nl, ctx.nbf
    if variant == EQUAL_ORDER:
        if D is None:
            D = displacement_reconstruction(ctx)
        rule = ctx.cell_rule
        phi = ctx.cell_basis.eval(rule.points)
        mk = _mass(phi[:, :nk], phi[:, :nk], rule.weights)
        proj_t = _solve_spd(mk, _mass(phi[:, :nk], phi[:, :nk1], rule.weights), "cell")
        # (I - Pi^k_T) on P^{k+1}, expressed in P^{k+1} coefficients
        high = np.eye(nk1)
        high[:nk] -= proj_t
    nF = ctx.n_face_dofs
    S = np.zeros((ctx.n_faces * nF, ctx.ndof))
    Z = np.zeros((ctx.ndof, ctx.ndof))
    for f, (fb, fr) in enumerate(zip(ctx.face_bases, ctx.face_rules)):
        psi = fb.eval(fr.points)
        phit = ctx.cell_basis.eval(fr.points)
        mf = _mass(psi, psi, fr.weights)
        proj_f = _solve_spd(mf, _mass(psi, phit, fr.weights), "face")  # (nbf, top)
        off = ctx.face_offset(f)
        Sf = np.zeros((nF, ctx.ndof))
        for i in range(d):
            rows = slice(i * nbf, (i + 1) * nbf)
            Sf[rows, off + i * nbf:off + (i + 1) * nbf] = np.eye(nbf)
            Sf[rows, i * nl:(i + 1) * nl] -= proj_f[:, :nl]
            if variant == EQUAL_ORDER:
                Sf[rows] -= proj_f[:, :nk1] @ (high @ D[i * nk1:(i + 1) * nk1])
        S[f * nF:(f + 1) * nF] = Sf
        Mf = np.kron(np.eye(d), mf)
        Z += Sf.T @ Mf @ Sf / ctx.face_diameters[f]
    return S, 0.5 * (Z + Z.T)


def reduction(ctx: CellContext, field: Callable[[np.ndarray], np.ndarray],
              order: int | None = None) -> np.ndarray:
    """Local dofs (Pi^l_T v, Pi^k_F v) of a vector field v: (n, d) -> (n, d)."""
    d, nl, nbf = ctx.dim, ctx.nl, ctx.nbf
    out = np.zeros(ctx.ndof)
    if order is None:
        crule, frules = ctx.cell_rule, ctx.face_rules
    else:
        crule = make_cell_quadrature(ctx.cell, order)
        frules = [make_face_quadrature(f, order) for f in ctx.faces]
    phi = ctx.cell_basis.eval(crule.points)[:, :nl]
    vals = np.asarray(field(crule.points), float)
    mass = _mass(phi, phi, crule.weights)
    out[:d * nl] = _solve_spd(mass, phi.T @ (crule.weights[:, None] * vals), "cell").T.ravel()
    for f, (fb, fr) in enumerate(zip(ctx.face_bases, frules)):
        psi = fb.eval(fr.points)
        fv = np.asarray(field(fr.points), float)
        coef = _solve_spd(_mass(psi, psi, fr.weights), psi.T @ (fr.weights[:, None] * fv), "face")
        off = ctx.face_offset(f)
        out[off:off + d * nbf] = coef.T.ravel()
    return out


def seminorm_matrix(ctx: CellContext) -> np.ndarray:
    """Gram matrix N of the discrete strain seminorm: |v|^2 = v^T N v."""
    d, nl, nbf = ctx.dim, ctx.nl, ctx.nbf
    rule = ctx.cell_rule
    dphi = ctx.cell_basis.grad(rule.points)[:, :nl]
    stiff = np.einsum("q,qaj,qbj->ab", rule.weights, dphi, dphi)
    N = np.zeros((ctx.ndof, ctx.ndof))
    N[:d * nl, :d * nl] = np.kron(np.eye(d), stiff)
    for f, (fb, fr) in enumerate(zip(ctx.face_bases, ctx.face_rules)):
        jump = np.hstack([-ctx.cell_basis.eval(fr.points)[:, :nl], fb.eval(fr.points)])
        m = _mass(jump, jump, fr.weights) / ctx.face_diameters[f]
        off = ctx.face_offset(f)
        for i in range(d):
            idx = np.r_[i * nl + np.arange(nl), off + i * nbf + np.arange(nbf)]
            N[np.ix_(idx, idx)] += m
    return 0.5 * (N + N.T)


def strain_seminorm(ctx: CellContext, v: np.ndarray, N: np.ndarray | None = None) -> float:
    """(||grad v_T||^2 + sum_F h_F^-1 ||v_T - v_F||_F^2)^(1/2)."""
    if N is None:
        N = seminorm_matrix(ctx)
    return float(np.sqrt(max(v @ N @ v, 0.0)))


@dataclass(frozen=True)
class LocalOperators:
    ctx: CellContext
    variant: str
    G: np.ndarray
    D: np.ndarray
    S: np.ndarray
    Z: np.ndarray
    extra: dict = field(default_factory=dict, repr=False)

    @property
    def ndof(self) -> int:
        return self.ctx.ndof

    def gradient_at(self, points: np.ndarray) -> np.ndarray:
        """Values of G(.) at points: array (n, d, d, ndof)."""
        d, nk = self.ctx.dim, self.ctx.nk
        phi = self.ctx.cell_basis.eval(points)[:, :nk]
        Gr = self.G.reshape(d, d, nk, -1)
        return np.einsum("qm,ijmn->qijn", phi, Gr)

    def gradient_coefficients(self, v: np.ndarray) -> np.ndarray:
        """Coefficients (d, d, nk) of G(v)."""
        d, nk = self.ctx.dim, self.ctx.nk
        return (self.G @ v).reshape(d, d, nk)


def build_local_operators(mesh: Mesh, cell_id: int, k: int, l: int, variant: str | None = None,
                          experimental: bool = False, order: int | None = None) -> LocalOperators:
    expected = check_degrees(k, l, experimental)
    ctx = cell_context(mesh, cell_id, k, l, order)
    G = gradient_reconstruction(ctx)
    D = displacement_reconstruction(ctx, G)
    S, Z = stabilization(ctx, variant or expected, D)
    return LocalOperators(ctx, variant or expected, G, D, S, Z)

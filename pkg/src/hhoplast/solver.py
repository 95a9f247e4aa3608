"""Global HHO problem: assembly, static condensation, Newton iterations, load stepping.

Global unknowns are split into a cell part, shape (n_cells, d * nl), and a
face part of length n_faces * d * nbf laid out as ``f * nF + c * nbf + m``
(face, component, basis function).  Local face blocks use the same layout,
so a cell's face dofs are contiguous slices of the face vector.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .approximation import basis_size, make_cell_quadrature, make_face_basis, make_face_quadrature
from .hho_core import LocalOperators, build_local_operators
from .material import MaterialError, MaterialPointState, ModelResponse
from .mesh import Mesh

log = logging.getLogger(__name__)

VectorField = Callable[[np.ndarray, float], np.ndarray]


class SolverError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# load program

@dataclass(frozen=True)
class DirichletBC:
    """Prescribed displacement components on faces tagged ``tag``.

    ``value(x, t)`` returns (n, d) displacements; only ``components`` are imposed.
    """

    tag: str
    components: tuple[int, ...]
    value: VectorField | None = None

    def evaluate(self, x: np.ndarray, t: float) -> np.ndarray:
        if self.value is None:
            return np.zeros_like(x)
        return np.asarray(self.value(x, t), dtype=float).reshape(x.shape)


@dataclass(frozen=True)
class NeumannBC:
    """Dead traction ``traction(x, t)`` (n, d) on faces tagged ``tag``."""

    tag: str
    traction: VectorField


@dataclass(frozen=True)
class PressureBC:
    """Pressure ``pressure(t)`` acting against the outward normal of tagged faces.

    With ``follower`` the load follows the deformed face (computed from the face
    unknowns); otherwise it is a dead load on the reference face.
    """

    tag: str
    pressure: Callable[[float], float]
    follower: bool = False


@dataclass
class LoadProgram:
    times: np.ndarray
    dirichlet: list[DirichletBC] = field(default_factory=list)
    neumann: list[NeumannBC] = field(default_factory=list)
    pressure: list[PressureBC] = field(default_factory=list)
    body_force: VectorField | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if self.times.ndim != 1 or len(self.times) < 1 or self.times[0] != 0.0:
            raise ValueError("load program times must start at t=0")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("load program times must be strictly increasing")

    @classmethod
    def uniform(cls, n_steps: int, t_end: float = 1.0, **kw) -> "LoadProgram":
        return cls(np.linspace(0.0, t_end, n_steps + 1), **kw)


@dataclass(frozen=True)
class SolverOptions:
    rtol: float = 1e-6
    atol: float = 1e-10
    max_iter: int = 25
    max_cuts: int = 4
    divergence_factor: float = 1e8


# ---------------------------------------------------------------------------
# discretization

@dataclass
class _Group:
    cells: np.ndarray          # (nc,)
    GQ: np.ndarray             # (nc, nq*d*d, ndof) gradient values at behavior points
    W: np.ndarray              # (nc, nq)
    Z: np.ndarray              # (nc, ndof, ndof) unit-beta stabilization
    face_dofs: np.ndarray      # (nc, nfd) global face dof ids
    qp: np.ndarray             # (nc, nq) global quadrature point ids
    load_phi: np.ndarray       # (nc, nqL, nl) cell basis at load points
    load_w: np.ndarray         # (nc, nqL)
    load_x: np.ndarray         # (nc, nqL, d)

    @property
    def ndof(self) -> int:
        return self.GQ.shape[-1]


@dataclass
class Solution:
    cell: np.ndarray   # (n_cells, nT)
    face: np.ndarray   # (n_face_dofs,)

    def copy(self) -> "Solution":
        return Solution(self.cell.copy(), self.face.copy())


class Discretization:
    """HHO(k; l) space on a mesh with a material model and stabilization beta0."""

    def __init__(self, mesh: Mesh, k: int, l: int, model, beta0: float = 1.0,
                 k_Q: int | None = None, experimental: bool = False):
        self.mesh, self.k, self.l, self.model = mesh, k, l, model
        self.beta0 = float(beta0)
        self.d = d = mesh.dimension
        self.k_Q = 2 * k if k_Q is None else int(k_Q)
        if self.k_Q < 2 * k:
            raise ValueError(f"behavior quadrature order k_Q={self.k_Q} must be >= 2k={2 * k}")
        self.ops: list[LocalOperators] = [build_local_operators(mesh, c, k, l, experimental=experimental)
                                          for c in range(mesh.n_cells)]
        self.nl = basis_size(d, l)
        self.nbf = basis_size(d - 1, k)
        self.nT = d * self.nl
        self.nF = d * self.nbf
        self.n_face_dofs = mesh.n_faces * self.nF
        self.face_bases = [make_face_basis(f, k) for f in mesh.faces]
        self.face_rules = [make_face_quadrature(f, 2 * k + 2) for f in mesh.faces]
        self.face_mass = [self._face_mass(i) for i in range(mesh.n_faces)]
        self.behavior_rules = [make_cell_quadrature(c, self.k_Q) for c in mesh.cells]
        self.qp_offsets = np.concatenate([[0], np.cumsum([r.size for r in self.behavior_rules])])
        self.n_qp = int(self.qp_offsets[-1])
        self._build_groups()

    @property
    def beta(self) -> float:
        return 2.0 * self.model.params.mu * self.beta0

    def _face_mass(self, f: int) -> np.ndarray:
        psi = self.face_bases[f].eval(self.face_rules[f].points)
        return psi.T @ (self.face_rules[f].weights[:, None] * psi)

    def _build_groups(self):
        d = self.d
        keys: dict[tuple[int, int], list[int]] = {}
        for c, op in enumerate(self.ops):
            keys.setdefault((op.ndof, self.behavior_rules[c].size), []).append(c)
        load_order = 2 * max(self.l, self.k + 1) + 2
        self.groups: list[_Group] = []
        self.cell_group = np.zeros((self.mesh.n_cells, 2), dtype=int)
        for (ndof, nq), cells in sorted(keys.items()):
            GQ, W, Z, FD, QP, LP, LW, LX = [], [], [], [], [], [], [], []
            for c in cells:
                op, rule = self.ops[c], self.behavior_rules[c]
                GQ.append(op.gradient_at(rule.points).reshape(nq * d * d, ndof))
                W.append(rule.weights)
                Z.append(op.Z)
                FD.append(np.concatenate([np.arange(f * self.nF, (f + 1) * self.nF)
                                          for f in self.mesh.cells[c].face_ids]))
                QP.append(np.arange(self.qp_offsets[c], self.qp_offsets[c + 1]))
                lr = make_cell_quadrature(self.mesh.cells[c], load_order)
                LP.append(op.ctx.cell_basis.eval(lr.points)[:, :self.nl])
                LW.append(lr.weights)
                LX.append(lr.points)
            # load rules may differ in size inside a group; pad with zero weights
            nqL = max(len(w) for w in LW)
            pad = lambda a, shape: np.concatenate([a, np.zeros((nqL - len(a),) + shape)])  # noqa: E731
            g = _Group(np.array(cells), np.array(GQ), np.array(W), np.array(Z), np.array(FD),
                       np.array(QP), np.array([pad(a, (self.nl,)) for a in LP]),
                       np.array([pad(a, ()) for a in LW]), np.array([pad(a, (d,)) for a in LX]))
            gi = len(self.groups)
            self.groups.append(g)
            for pos, c in enumerate(cells):
                self.cell_group[c] = (gi, pos)
        # sparsity pattern of the condensed face system
        rows, cols = [], []
        for g in self.groups:
            fd = g.face_dofs
            rows.append(np.repeat(fd, fd.shape[1], axis=1).ravel())
            cols.append(np.tile(fd, (1, fd.shape[1])).ravel())
        self._coo_rows = np.concatenate(rows)
        self._coo_cols = np.concatenate(cols)

    # -- helpers -----------------------------------------------------------
    def zero_solution(self) -> Solution:
        return Solution(np.zeros((self.mesh.n_cells, self.nT)), np.zeros(self.n_face_dofs))

    def initial_states(self) -> MaterialPointState:
        return self.model.initial_state(self.n_qp)

    def local_dofs(self, u: Solution, g: _Group) -> np.ndarray:
        return np.concatenate([u.cell[g.cells], u.face[g.face_dofs]], axis=1)

    def cell_local_dofs(self, u: Solution, c: int) -> np.ndarray:
        g, pos = self.cell_group[c]
        return self.local_dofs(u, self.groups[g])[pos]

    def gradients(self, u: Solution, g: _Group) -> np.ndarray:
        v = self.local_dofs(u, g)
        nc, nq = g.W.shape
        return np.einsum("cpn,cn->cp", g.GQ, v).reshape(nc, nq, self.d, self.d)

    def face_dof_slice(self, f: int) -> slice:
        return slice(f * self.nF, (f + 1) * self.nF)

    def project_on_face(self, f: int, func: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        """Coefficients (d, nbf) of the L2 projection of a vector field on face f."""
        rule = self.face_rules[f]
        psi = self.face_bases[f].eval(rule.points)
        vals = np.asarray(func(rule.points), float).reshape(len(rule.points), self.d)
        return np.linalg.solve(self.face_mass[f], psi.T @ (rule.weights[:, None] * vals)).T


# ---------------------------------------------------------------------------
# assembly

@dataclass
class GroupAssembly:
    K: np.ndarray        # (nc, ndof, ndof)
    r: np.ndarray        # (nc, ndof) internal minus body-force terms
    fint: np.ndarray     # (nc, ndof) internal forces only
    response: ModelResponse


def _respond(disc: Discretization, g: _Group, states: MaterialPointState,
             grad_old: np.ndarray, grad_new: np.ndarray) -> ModelResponse:
    nc, nq = g.W.shape
    d = disc.d
    st = states.take(g.qp.ravel())
    return disc.model.respond(st, grad_old.reshape(nc * nq, d, d), grad_new.reshape(nc * nq, d, d))


def assemble_group(disc: Discretization, g: _Group, u: Solution, u_old: Solution,
                   states: MaterialPointState, t: float, body_force: VectorField | None) -> GroupAssembly:
    """Local tangents and residuals for every cell of a group."""
    d = disc.d
    nc, nq = g.W.shape
    resp = _respond(disc, g, states, disc.gradients(u_old, g), disc.gradients(u, g))
    v = disc.local_dofs(u, g)
    P = resp.P.reshape(nc, nq * d * d)
    A = resp.A.reshape(nc, nq, d * d, d * d)
    wq = np.repeat(g.W, d * d, axis=1)                       # (nc, nq*d*d)
    GQw = g.GQ * wq[:, :, None]
    fint = np.einsum("cpn,cp->cn", GQw, P)
    AG = np.einsum("cqab,cqbn->cqan", A, g.GQ.reshape(nc, nq, d * d, -1)).reshape(nc, nq * d * d, -1)
    K = np.einsum("cpn,cpm->cnm", GQw, AG, optimize=True)
    beta = disc.beta
    K = K + beta * g.Z
    fint = fint + beta * np.einsum("cnm,cm->cn", g.Z, v)
    r = fint.copy()
    if body_force is not None:
        fx = np.asarray(body_force(g.load_x.reshape(-1, d), t), float).reshape(nc, -1, d)
        load = np.einsum("cq,cqa,cqi->cia", g.load_w, g.load_phi, fx).reshape(nc, -1)
        r[:, :disc.nT] -= load
    return GroupAssembly(K, r, fint, resp)


def assemble_cell(disc: Discretization, cell_id: int, u: Solution, u_old: Solution,
                  states: MaterialPointState, t: float = 0.0,
                  body_force: VectorField | None = None) -> tuple[np.ndarray, np.ndarray, ModelResponse]:
    """(K_T, R_T, material response) for a single cell."""
    gi, pos = disc.cell_group[cell_id]
    g = disc.groups[gi]
    sub = _Group(g.cells[pos:pos + 1], g.GQ[pos:pos + 1], g.W[pos:pos + 1], g.Z[pos:pos + 1],
                 g.face_dofs[pos:pos + 1], g.qp[pos:pos + 1], g.load_phi[pos:pos + 1],
                 g.load_w[pos:pos + 1], g.load_x[pos:pos + 1])
    ga = assemble_group(disc, sub, u, u_old, states, t, body_force)
    return ga.K[0], ga.r[0], ga.response


class SingularCellBlock(SolverError):
    pass


def static_condensation(K: np.ndarray, r: np.ndarray, n_cell: int, cells: Sequence[int] | None = None):
    """Eliminate cell unknowns from batched local systems K x = -r.

    Returns the face Schur complements, condensed right-hand sides (for -r)
    and recovery data for :func:`recover_cell_dofs`.
    """
    K = np.asarray(K)
    r = np.asarray(r)
    single = K.ndim == 2
    if single:
        K, r = K[None], r[None]
    Ktt, Ktf = K[:, :n_cell, :n_cell], K[:, :n_cell, n_cell:]
    Kft, Kff = K[:, n_cell:, :n_cell], K[:, n_cell:, n_cell:]
    rhs = np.concatenate([Ktf, r[:, :n_cell, None]], axis=2)
    try:
        sol = np.linalg.solve(Ktt, rhs)
    except np.linalg.LinAlgError:
        sol = None
    if sol is None or not np.all(np.isfinite(sol)):
        for i in range(len(Ktt)):
            if np.linalg.matrix_rank(Ktt[i]) < n_cell:
                name = cells[i] if cells is not None else i
                raise SingularCellBlock(f"cell {name}: singular cell-cell block in static condensation")
        raise SingularCellBlock("singular cell-cell block in static condensation")
    X, y = sol[:, :, :-1], sol[:, :, -1]
    Kc = Kff - Kft @ X
    rc = -(r[:, n_cell:] - np.einsum("cft,ct->cf", Kft, y))
    recovery = (X, y)
    if single:
        return Kc[0], rc[0], (X[0], y[0])
    return Kc, rc, recovery


def recover_cell_dofs(recovery, delta_face: np.ndarray) -> np.ndarray:
    """Cell increments from face increments: dT = -(Ktt^-1 r_T) - Ktt^-1 Ktf dF."""
    X, y = recovery
    if X.ndim == 2:
        return -y - X @ delta_face
    return -y - np.einsum("ctf,cf->ct", X, delta_face)


# ---------------------------------------------------------------------------
# boundary data

def _tagged_faces(mesh: Mesh, tag: str) -> list[int]:
    faces = mesh.faces_with_tag(tag)
    if not faces:
        raise SolverError(f"no boundary faces carry the tag {tag!r}")
    return faces


@dataclass
class _BoundaryData:
    fixed: np.ndarray     # bool mask over face dofs
    values: np.ndarray    # imposed values (valid where fixed)


def dirichlet_data(disc: Discretization, program: LoadProgram, t: float) -> _BoundaryData:
    fixed = np.zeros(disc.n_face_dofs, dtype=bool)
    values = np.zeros(disc.n_face_dofs)
    nbf = disc.nbf
    for bc in program.dirichlet:
        for f in _tagged_faces(disc.mesh, bc.tag):
            coef = disc.project_on_face(f, lambda x: bc.evaluate(x, t))
            base = f * disc.nF
            for c in bc.components:
                idx = slice(base + c * nbf, base + (c + 1) * nbf)
                fixed[idx] = True
                values[idx] = coef[c]
    return _BoundaryData(fixed, values)


_LEVI = np.zeros((3, 3, 3))
for _i, _j, _k in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
    _LEVI[_i, _j, _k], _LEVI[_i, _k, _j] = 1.0, -1.0


def external_face_loads(disc: Discretization, program: LoadProgram, t: float,
                        u: Solution | None = None) -> tuple[np.ndarray, tuple | None]:
    """Face load vector and, for follower pressure, its stiffness (rows, cols, vals)."""
    fext = np.zeros(disc.n_face_dofs)
    d, nbf = disc.d, disc.nbf
    for bc in program.neumann:
        for f in _tagged_faces(disc.mesh, bc.tag):
            rule = disc.face_rules[f]
            psi = disc.face_bases[f].eval(rule.points)
            tr = np.asarray(bc.traction(rule.points, t), float).reshape(-1, d)
            fext[disc.face_dof_slice(f)] += (psi.T @ (rule.weights[:, None] * tr)).T.ravel()
    rows, cols, vals = [], [], []
    for bc in program.pressure:
        p = float(bc.pressure(t))
        for f in _tagged_faces(disc.mesh, bc.tag):
            face = disc.mesh.faces[f]
            rule = disc.face_rules[f]
            basis = disc.face_bases[f]
            psi = basis.eval(rule.points)
            sl = disc.face_dof_slice(f)
            if not bc.follower or u is None:
                fext[sl] += (-p * np.outer(face.normal, psi.T @ rule.weights)).ravel()
                continue
            dpsi = basis.grad(rule.points)                      # (nq, nbf, d-1)
            uf = u.face[sl].reshape(d, nbf)
            tang = face.tangents                                # (d-1, d)
            a = tang[None] + np.einsum("cm,qmj->qjc", uf, dpsi)  # (nq, d-1, d)
            if d == 3:
                nda = np.cross(a[:, 0], a[:, 1])
                # d(a1 x a2)_i / du[c, m] = eps_icj a2_j dpsi1_m + eps_ijc a1_j dpsi2_m
                dn = (np.einsum("icj,qj,qm->qicm", _LEVI, a[:, 1], dpsi[:, :, 0])
                      + np.einsum("ijc,qj,qm->qicm", _LEVI, a[:, 0], dpsi[:, :, 1]))
            else:
                nda = np.column_stack([a[:, 0, 1], -a[:, 0, 0]])
                rot = np.array([[0.0, 1.0], [-1.0, 0.0]])       # rot(v) = (v_y, -v_x)
                dn = np.einsum("ic,qm->qicm", rot, dpsi[:, :, 0])
            fext[sl] += (-p * np.einsum("q,qm,qi->im", rule.weights, psi, nda)).ravel()
            # stiffness contribution of -f_ext: +p * d(int psi n da)/du
            kf = p * np.einsum("q,qn,qicm->incm", rule.weights, psi, dn).reshape(d * nbf, d * nbf)
            idx = np.arange(sl.start, sl.stop)
            rows.append(np.repeat(idx, len(idx)))
            cols.append(np.tile(idx, len(idx)))
            vals.append(kf.ravel())
    stiff = None
    if rows:
        stiff = (np.concatenate(rows), np.concatenate(cols), np.concatenate(vals))
    return fext, stiff


# ---------------------------------------------------------------------------
# global evaluation

@dataclass
class GlobalState:
    u: Solution
    groups: list[GroupAssembly]
    residual_cell: np.ndarray
    residual_face: np.ndarray
    fint_face: np.ndarray
    fint_norm: float
    fext_face: np.ndarray
    load_stiffness: tuple | None
    states: MaterialPointState


def evaluate(disc: Discretization, u: Solution, u_old: Solution, committed: MaterialPointState,
             program: LoadProgram, t: float) -> GlobalState:
    res_cell = np.zeros_like(u.cell)
    fint_cell = np.zeros_like(u.cell)
    res_face = np.zeros(disc.n_face_dofs)
    fint_face = np.zeros(disc.n_face_dofs)
    Ep = np.array(committed.E_p, copy=True)
    p = np.array(committed.p, copy=True)
    gas = []
    nT = disc.nT
    for g in disc.groups:
        ga = assemble_group(disc, g, u, u_old, committed, t, program.body_force)
        gas.append(ga)
        res_cell[g.cells] = ga.r[:, :nT]
        fint_cell[g.cells] = ga.fint[:, :nT]
        np.add.at(res_face, g.face_dofs, ga.r[:, nT:])
        np.add.at(fint_face, g.face_dofs, ga.fint[:, nT:])
        qp = g.qp.ravel()
        Ep[qp] = ga.response.state.E_p
        p[qp] = ga.response.state.p
    fext, kload = external_face_loads(disc, program, t, u)
    res_face -= fext
    fint_norm = float(np.sqrt(np.sum(fint_cell ** 2) + np.sum(fint_face ** 2)))
    return GlobalState(u, gas, res_cell, res_face, fint_face, fint_norm, fext, kload,
                       MaterialPointState(Ep, p))


def residual_norm(gs: GlobalState, fixed: np.ndarray) -> float:
    return float(np.sqrt(np.sum(gs.residual_cell ** 2) + np.sum(gs.residual_face[~fixed] ** 2)))


def global_tangent(disc: Discretization, gs: GlobalState) -> sp.csr_matrix:
    """Monolithic tangent on (cell dofs, face dofs), for verification on small problems."""
    nT, ncell = disc.nT, disc.mesh.n_cells
    n = ncell * nT + disc.n_face_dofs
    rows, cols, vals = [], [], []
    for g, ga in zip(disc.groups, gs.groups):
        ids = np.concatenate([(g.cells[:, None] * nT + np.arange(nT)[None]), ncell * nT + g.face_dofs], axis=1)
        m = ids.shape[1]
        rows.append(np.repeat(ids, m, axis=1).ravel())
        cols.append(np.tile(ids, (1, m)).ravel())
        vals.append(ga.K.ravel())
    if gs.load_stiffness is not None:
        r, c, v = gs.load_stiffness
        rows.append(r + ncell * nT)
        cols.append(c + ncell * nT)
        vals.append(v)
    return sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(n, n)).tocsr()


def global_residual(disc: Discretization, gs: GlobalState) -> np.ndarray:
    return np.concatenate([gs.residual_cell.ravel(), gs.residual_face])


def solution_from_vector(disc: Discretization, x: np.ndarray) -> Solution:
    n = disc.mesh.n_cells * disc.nT
    return Solution(x[:n].reshape(disc.mesh.n_cells, disc.nT).copy(), x[n:].copy())


def solution_to_vector(u: Solution) -> np.ndarray:
    return np.concatenate([u.cell.ravel(), u.face])


def sparse_solve(A: sp.csc_matrix, b: np.ndarray, rtol: float = 1e-8) -> np.ndarray:
    """Solve A x = b for the symmetric condensed matrix.

    A symmetric-mode factorization (minimum degree on A + A^T, diagonal
    pivots) keeps the fill low.  If it breaks down or the residual is poor
    the system is refactored with COLAMD and partial pivoting.
    """
    try:
        lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options={"SymmetricMode": True})
        x = lu.solve(b)
        if np.all(np.isfinite(x)) and np.linalg.norm(A @ x - b) <= rtol * np.linalg.norm(b):
            return x
    except RuntimeError:
        pass
    try:
        return spla.splu(A, permc_spec="COLAMD").solve(b)
    except RuntimeError as exc:
        raise SolverError(f"sparse factorization failed: {exc}") from exc


def condensed_increment(disc: Discretization, gs: GlobalState, fixed: np.ndarray,
                        prescribed: np.ndarray | None = None) -> Solution:
    """Newton increment through static condensation and a sparse face solve.

    ``prescribed`` holds face increments imposed on the ``fixed`` dofs (the
    Dirichlet increment of a new load step); by default they are zero.
    """
    nT = disc.nT
    vals, recs, rhs = [], [], np.zeros(disc.n_face_dofs)
    for g, ga in zip(disc.groups, gs.groups):
        r = ga.r.copy()
        r[:, :nT] = gs.residual_cell[g.cells]
        Kc, rc, rec = static_condensation(ga.K, r, nT, g.cells)
        vals.append(Kc.ravel())
        recs.append(rec)
        np.add.at(rhs, g.face_dofs, rc)
    rows, cols = disc._coo_rows, disc._coo_cols
    data = np.concatenate(vals)
    if gs.load_stiffness is not None:
        lr, lc, lv = gs.load_stiffness
        rows, cols, data = np.concatenate([rows, lr]), np.concatenate([cols, lc]), np.concatenate([data, lv])
    # external loads enter the face residual only
    rhs += gs.fext_face
    n = disc.n_face_dofs
    K = sp.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()
    free = np.flatnonzero(~fixed)
    Kff = K[free][:, free]
    delta_face = np.zeros(n)
    if prescribed is not None:
        delta_face[fixed] = prescribed[fixed]
        rhs = rhs - K @ delta_face
    if len(free):
        delta_face[free] = sparse_solve(Kff.tocsc(), rhs[free])
        if not np.all(np.isfinite(delta_face)):
            raise SolverError("linear solve produced non-finite values (singular condensed system)")
    delta_cell = np.zeros_like(gs.u.cell)
    for g, rec in zip(disc.groups, recs):
        delta_cell[g.cells] = recover_cell_dofs(rec, delta_face[g.face_dofs])
    return Solution(delta_cell, delta_face)


def condensed_matrix(disc: Discretization, gs: GlobalState) -> sp.csr_matrix:
    vals = []
    for ga in gs.groups:
        Kc, _, _ = static_condensation(ga.K, ga.r, disc.nT)
        vals.append(Kc.ravel())
    n = disc.n_face_dofs
    return sp.coo_matrix((np.concatenate(vals), (disc._coo_rows, disc._coo_cols)), shape=(n, n)).tocsr()


# ---------------------------------------------------------------------------
# Newton

@dataclass
class NewtonReport:
    residuals: list[float]
    converged: bool
    iterations: int
    fint_norm: float = 0.0
    theta_min: float = float("nan")
    message: str = ""


def newton_solve(disc: Discretization, program: LoadProgram, t: float, u_prev: Solution,
                 committed: MaterialPointState, options: SolverOptions = SolverOptions()):
    """Solve one load step; returns (u, trial states, report, last evaluation).

    Every iteration re-integrates the constitutive law from the committed
    states of the previous step.  The first iteration starts from the
    previous solution and imposes the Dirichlet increment through the
    linearized system, so the new boundary values enter with the tangent of
    the last converged state.  The stopping rule is
    ||R|| <= rtol * ||F_int|| + atol over all non-Dirichlet dofs.
    """
    bd = dirichlet_data(disc, program, t)
    u = u_prev.copy()
    jump = np.zeros_like(u.face)
    jump[bd.fixed] = bd.values[bd.fixed] - u.face[bd.fixed]
    prescribed = jump if np.any(jump != 0.0) else None
    residuals: list[float] = []
    reference = None
    iterations = 0
    gs = None
    try:
        while True:
            gs = evaluate(disc, u, u_prev, committed, program, t)
            rn = residual_norm(gs, bd.fixed)
            residuals.append(rn)
            if not np.isfinite(rn):
                return u, None, NewtonReport(residuals, False, iterations, gs.fint_norm,
                                             message="non-finite residual"), gs
            if prescribed is None:
                if rn <= options.rtol * gs.fint_norm + options.atol:
                    return u, gs.states, NewtonReport(residuals, True, iterations, gs.fint_norm), gs
                if iterations >= options.max_iter:
                    return u, None, NewtonReport(residuals, False, iterations, gs.fint_norm,
                                                 message="maximum number of iterations reached"), gs
                if reference is None:
                    reference = max(rn, 1e-300)
                elif rn > options.divergence_factor * reference:
                    return u, None, NewtonReport(residuals, False, iterations, gs.fint_norm,
                                                 message="residual diverged"), gs
            du = condensed_increment(disc, gs, bd.fixed, prescribed)
            prescribed = None
            u.cell += du.cell
            u.face += du.face
            iterations += 1
    except (MaterialError, SolverError, np.linalg.LinAlgError) as exc:
        return u, None, NewtonReport(residuals, False, iterations, gs.fint_norm if gs else 0.0,
                                     message=f"{type(exc).__name__}: {exc}"), gs


# ---------------------------------------------------------------------------
# tractions, reactions, energy, diagnostics

def cell_traction_residual_route(disc: Discretization, ga: GroupAssembly, g: _Group, pos: int) -> list[np.ndarray]:
    """Face tractions M_F^-1 r_{T,F} from the local internal force vector."""
    c = g.cells[pos]
    out = []
    nT, nF = disc.nT, disc.nF
    for j, f in enumerate(disc.mesh.cells[c].face_ids):
        block = ga.fint[pos, nT + j * nF:nT + (j + 1) * nF].reshape(disc.d, disc.nbf)
        out.append(np.linalg.solve(disc.face_mass[f], block.T).T)
    return out


def compute_tractions(disc: Discretization, u: Solution, P_qp: np.ndarray) -> dict[tuple[int, int], np.ndarray]:
    """Discrete tractions on every (cell, face) pair as face coefficients (d, nbf).

    T_{T,F} = Pi_F(Pi^k_{T,Q}(P) n_TF) + beta * S_F^*(gamma S(u)), where S^*
    is the adjoint of the stabilization with respect to the face mass.
    ``P_qp`` holds the first Piola-Kirchhoff tensor at every behavior point.
    """
    d, nbf, k = disc.d, disc.nbf, disc.k
    beta = disc.beta
    nk = basis_size(d, k)
    out = {}
    for c, op in enumerate(disc.ops):
        ctx = op.ctx
        rule = disc.behavior_rules[c]
        phi = ctx.cell_basis.eval(rule.points)[:, :nk]
        gram = phi.T @ (rule.weights[:, None] * phi)
        Pq = P_qp[disc.qp_offsets[c]:disc.qp_offsets[c + 1]].reshape(-1, d * d)
        Pcoef = np.linalg.solve(gram, phi.T @ (rule.weights[:, None] * Pq))   # (nk, d*d)
        v = disc.cell_local_dofs(u, c)
        Sv = op.S @ v
        nF = disc.nF
        for j, f in enumerate(ctx.face_ids):
            frule = disc.face_rules[f]
            psi = disc.face_bases[f].eval(frule.points)
            phif = ctx.cell_basis.eval(frule.points)[:, :nk]
            Pn = (phif @ Pcoef).reshape(-1, d, d) @ ctx.normals[j]
            coef = np.linalg.solve(disc.face_mass[f], psi.T @ (frule.weights[:, None] * Pn)).T
            # adjoint of S restricted to the dofs of face j
            cols = slice(ctx.face_offset(j), ctx.face_offset(j) + nF)
            stab = np.zeros(nF)
            for jj, ff in enumerate(ctx.face_ids):
                Sblk = op.S[jj * nF:(jj + 1) * nF, cols]
                Mjj = np.kron(np.eye(d), disc.face_mass[ff])
                stab += Sblk.T @ (Mjj @ Sv[jj * nF:(jj + 1) * nF]) / ctx.face_diameters[jj]
            Mf = np.kron(np.eye(d), disc.face_mass[f])
            coef = coef + beta * np.linalg.solve(Mf, stab).reshape(d, nbf)
            out[(c, j)] = coef
    return out


def reactions(disc: Discretization, gs: GlobalState, tag: str) -> np.ndarray:
    """Resultant internal force on the faces tagged ``tag`` (integral of the traction)."""
    total = np.zeros(disc.d)
    for f in disc.mesh.faces_with_tag(tag):
        blk = gs.fint_face[disc.face_dof_slice(f)].reshape(disc.d, disc.nbf)
        total += blk[:, 0]   # first face basis function is the constant 1
    return total


def eval_discrete_energy(disc: Discretization, u: Solution, u_old: Solution,
                         committed: MaterialPointState, program: LoadProgram, t: float) -> float:
    """Incremental pseudo-energy minus the work of dead loads plus the stabilization energy."""
    total = 0.0
    for g in disc.groups:
        nc, nq = g.W.shape
        go = disc.gradients(u_old, g)
        new = _respond(disc, g, committed, go, disc.gradients(u, g))
        old = _respond(disc, g, committed, go, go)
        total += float(np.sum(g.W.ravel() * (new.psi - old.psi)))
        v = disc.local_dofs(u, g)
        total += 0.5 * disc.beta * float(np.einsum("cn,cnm,cm->", v, g.Z, v))
        if program.body_force is not None:
            fx = np.asarray(program.body_force(g.load_x.reshape(-1, disc.d), t), float).reshape(nc, -1, disc.d)
            load = np.einsum("cq,cqa,cqi->cia", g.load_w, g.load_phi, fx).reshape(nc, -1)
            total -= float(np.sum(load * u.cell[g.cells]))
    dead = LoadProgram(program.times, neumann=program.neumann,
                       pressure=[PressureBC(b.tag, b.pressure, False) for b in program.pressure if not b.follower])
    fext, _ = external_face_loads(disc, dead, t)
    total -= float(fext @ u.face)
    return total


def symmetric_basis(d: int) -> np.ndarray:
    """Orthonormal basis (d*d, d(d+1)/2) of symmetric d x d tensors."""
    cols = []
    for i in range(d):
        for j in range(i, d):
            e = np.zeros((d, d))
            if i == j:
                e[i, i] = 1.0
            else:
                e[i, j] = e[j, i] = np.sqrt(0.5)
            cols.append(e.ravel())
    return np.array(cols).T


def pointwise_theta(A: np.ndarray) -> np.ndarray:
    """Smallest eigenvalue of each modulus restricted to symmetric tensors."""
    dd = A.shape[-1]
    d = int(round(np.sqrt(dd)))
    B = symmetric_basis(d)
    As = 0.5 * (A + np.swapaxes(A, -1, -2))
    red = np.swapaxes(B, 0, 1) @ As @ B
    return np.linalg.eigvalsh(red)[..., 0]


THETA_BIN_EDGES_GPA = (-6.0, -1.0, -0.5, 0.0, 0.5, 1.0, 5.0, 150.0, 170.0)


@dataclass
class CoercivityDiagnostic:
    theta: np.ndarray          # per quadrature point, stress units of the model
    theta_min: float
    edges: tuple[float, ...]   # histogram edges in the chosen reporting scale
    counts: np.ndarray
    below: int
    above: int


def coercivity_diagnostic(A: np.ndarray, scale: float = 1e3,
                          edges: Sequence[float] = THETA_BIN_EDGES_GPA) -> CoercivityDiagnostic:
    """theta_min over the quadrature points and a histogram of theta / scale.

    With moduli in MPa the default ``scale`` reports in GPa.
    """
    theta = pointwise_theta(np.asarray(A))
    vals = theta / scale
    e = np.asarray(edges, float)
    counts = np.zeros(len(e) - 1, dtype=int)
    for i in range(len(e) - 1):
        lo, hi = e[i], e[i + 1]
        counts[i] = int(np.sum((vals >= lo) & (vals <= hi))) if i == 0 else int(np.sum((vals > lo) & (vals <= hi)))
    return CoercivityDiagnostic(theta, float(theta.min()) if theta.size else float("nan"), tuple(e),
                                counts, int(np.sum(vals < e[0])), int(np.sum(vals > e[-1])))


def moduli(gs: GlobalState) -> np.ndarray:
    return np.concatenate([ga.response.A for ga in gs.groups])


def stresses_by_qp(disc: Discretization, gs: GlobalState) -> np.ndarray:
    """First Piola-Kirchhoff tensors (n_qp, d, d) ordered by global quadrature point."""
    out = np.zeros((disc.n_qp, disc.d, disc.d))
    for g, ga in zip(disc.groups, gs.groups):
        out[g.qp.ravel()] = ga.response.P
    return out


def full_stresses_by_qp(disc: Discretization, gs: GlobalState) -> np.ndarray:
    out = np.zeros((disc.n_qp, 3, 3))
    for g, ga in zip(disc.groups, gs.groups):
        out[g.qp.ravel()] = ga.response.full_P
    return out


def gradients_by_qp(disc: Discretization, u: Solution) -> np.ndarray:
    out = np.zeros((disc.n_qp, disc.d, disc.d))
    for g in disc.groups:
        out[g.qp.ravel()] = disc.gradients(u, g).reshape(-1, disc.d, disc.d)
    return out


# ---------------------------------------------------------------------------
# load stepping

@dataclass
class StepRecord:
    step: int
    time: float
    iterations: int
    residuals: list[float]
    reactions: dict[str, np.ndarray]
    theta_min: float
    energy: float
    cuts: int = 0


@dataclass
class TimeStepHistory:
    records: list[StepRecord]
    solutions: list[Solution]
    states: list[MaterialPointState]
    converged: bool
    failure: str = ""
    failed_attempts: int = 0
    failed_iterations: int = 0
    last_evaluation: GlobalState | None = None

    @property
    def total_iterations(self) -> int:
        return sum(r.iterations for r in self.records)

    @property
    def final_time(self) -> float:
        return self.records[-1].time if self.records else 0.0


def run_load_program(disc: Discretization, program: LoadProgram, options: SolverOptions = SolverOptions(),
                     reaction_tags: Sequence[str] = (), keep_solutions: bool = True,
                     on_step: Callable[[StepRecord, GlobalState], None] | None = None) -> TimeStepHistory:
    """March through the program's pseudo-times with step halving on Newton failure."""
    u = disc.zero_solution()
    states = disc.initial_states()
    zero_rx = {tag: np.zeros(disc.d) for tag in reaction_tags}
    first = StepRecord(0, 0.0, 0, [], zero_rx, float("nan"), 0.0)
    hist = TimeStepHistory([first], [u.copy()] if keep_solutions else [], [states], True)
    t_prev = 0.0
    step = 0
    for target in program.times[1:]:
        cuts = 0
        h = target - t_prev
        while t_prev < target:
            t_try = target if t_prev + h >= target * (1 - 1e-14) else t_prev + h
            u_new, new_states, report, gs = newton_solve(disc, program, t_try, u, states, options)
            if not report.converged:
                hist.failed_attempts += 1
                hist.failed_iterations += report.iterations
                log.info("t=%.6g: Newton failed after %d iterations (%s)", t_try, report.iterations, report.message)
                cuts += 1
                h *= 0.5
                if cuts > options.max_cuts:
                    hist.converged = False
                    hist.failure = f"no convergence at t={t_try:.6g} after {options.max_cuts} step cuts: {report.message}"
                    return hist
                continue
            step += 1
            theta = coercivity_diagnostic(moduli(gs)).theta_min
            energy = eval_discrete_energy(disc, u_new, u, states, program, t_try)
            rec = StepRecord(step, float(t_try), report.iterations, report.residuals,
                             {tag: reactions(disc, gs, tag) for tag in reaction_tags}, theta, energy, cuts)
            hist.records.append(rec)
            if keep_solutions:
                hist.solutions.append(u_new.copy())
            hist.states.append(new_states)
            hist.last_evaluation = gs
            if on_step is not None:
                on_step(rec, gs)
            u, states, t_prev = u_new, new_states, t_try
            log.info("step %d t=%.6g iterations=%d theta_min=%.4g", step, t_try, report.iterations, theta)
    return hist

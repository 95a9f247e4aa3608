"""Independent reference computations shared by the test modules."""

import numpy as np

from hhoplast.approximation import (
    l2_project,
    make_cell_basis,
    make_cell_quadrature,
    make_face_basis,
    make_face_quadrature,
)
from hhoplast.hho_core import reduction
from hhoplast.mesh import build_structured_mesh, mesh_from_elements, mesh_from_polygons

UNIT2 = [[0.0, 0.0], [1.0, 1.0]]
UNIT3 = [[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]

# high enough that smooth-field quadrature errors sit far below 1e-11
HIGH_ORDER = {2: 20, 3: 14}


def single_cells():
    """One representative cell of every supported shape, as (name, mesh, cell id)."""
    quad = mesh_from_polygons(np.array([[0, 0], [1.1, 0.1], [1.0, 0.9], [-0.1, 1.2]]), [(0, 1, 2, 3)])
    tri = mesh_from_polygons(np.array([[0, 0], [1.0, 0.2], [0.3, 0.9]]), [(0, 1, 2)])
    pent = mesh_from_polygons(np.array([[0, 0], [1, 0], [1.3, 0.7], [0.5, 1.2], [-0.2, 0.6]]), [(0, 1, 2, 3, 4)])
    tet = mesh_from_elements(np.array([[0, 0, 0], [1, 0.1, 0], [0.2, 1, 0.1], [0.1, 0.2, 0.9]]), [(0, 1, 2, 3)], "tet")
    hexa = build_structured_mesh("hex", (1, 1, 1), UNIT3).transformed(
        lambda x: x @ np.array([[1.0, 0.2, 0.0], [0.0, 0.9, 0.1], [0.1, 0.0, 1.1]]))
    return [("quad", quad, 0), ("triangle", tri, 0), ("pentagon", pent, 0), ("tet", tet, 0), ("hex", hexa, 0)]


def random_smooth_fields(rng, d, count, modes=3):
    """``count`` vector fields sum_m c_m sin(a_m . x + b_m) with their gradients.

    Returns callables mapping (n, d) points to (n, d, count) values and
    (n, d, d, count) gradients.
    """
    A = rng.uniform(-2.0, 2.0, (count, modes, d))
    b = rng.uniform(0.0, 2 * np.pi, (count, modes))
    C = rng.standard_normal((count, modes, d))

    def field(x):
        return np.einsum("nfm,fmi->nif", np.sin(np.einsum("nj,fmj->nfm", x, A) + b), C)

    def grad(x):
        return np.einsum("nfm,fmi,fmj->nijf", np.cos(np.einsum("nj,fmj->nfm", x, A) + b), C, A)

    return field, grad


def interpolate(ops, field, order=None):
    """Local dofs of many fields at once: L2 projections on the cell (degree l) and faces (degree k)."""
    ctx = ops.ctx
    order = order or HIGH_ORDER[ctx.dim]
    d, nl, nbf = ctx.dim, ctx.nl, ctx.nbf
    crule = make_cell_quadrature(ctx.cell, order)
    vals = field(crule.points)
    count = vals.shape[-1]
    out = np.zeros((ctx.ndof, count))
    cell = l2_project(make_cell_basis(ctx.cell, ctx.l), vals, crule)          # (nl, d, count)
    out[:d * nl] = cell.transpose(1, 0, 2).reshape(d * nl, count)
    for f, face in enumerate(ctx.faces):
        frule = make_face_quadrature(face, order)
        coef = l2_project(make_face_basis(face, ctx.k), field(frule.points), frule)   # (nbf, d, count)
        off = ctx.face_offset(f)
        out[off:off + d * nbf] = coef.transpose(1, 0, 2).reshape(d * nbf, count)
    return out


def commuting_errors(ops, field, grad, order=None):
    """Relative L2 distances between G(I v) and the degree-k projection of grad v, per field."""
    ctx = ops.ctx
    order = order or HIGH_ORDER[ctx.dim]
    d, nk = ctx.dim, ctx.nk
    V = interpolate(ops, field, order)
    G = (ops.G @ V).reshape(d, d, nk, -1).transpose(2, 0, 1, 3)               # (nk, d, d, count)
    basis = make_cell_basis(ctx.cell, ctx.k)
    rule = make_cell_quadrature(ctx.cell, order)
    ref = l2_project(basis, grad, rule)
    gram = basis.eval(rule.points).T @ (rule.weights[:, None] * basis.eval(rule.points))
    diff = (G - ref).reshape(nk, d * d, -1)
    refr = ref.reshape(nk, d * d, -1)
    num = np.einsum("acf,ab,bcf->f", diff, gram, diff)
    den = np.einsum("acf,ab,bcf->f", refr, gram, refr)
    return np.sqrt(np.maximum(num, 0.0) / den)


def energy_error(disc, u, exact, gs):
    """Discrete energy norm sqrt(sum_T e^T K_T e) of the error against the reduction of the exact field."""
    total = 0.0
    for g, ga in zip(disc.groups, gs.groups):
        for pos, c in enumerate(g.cells):
            e = reduction(disc.ops[c].ctx, exact) - disc.cell_local_dofs(u, c)
            total += e @ ga.K[pos] @ e
    return float(np.sqrt(total))


def von_mises_bisection(E_new, Ep_old, p_old, params, tol=1e-15):
    """Scalar radial-return oracle: bisection on the plastic increment.

    Returns (T, p, E_p) for symmetric (3, 3) log strains.
    """
    mu, kappa = params.mu, params.kappa
    dev = lambda t: t - np.trace(t) / 3.0 * np.eye(3)  # noqa: E731
    s_tr = 2 * mu * dev(E_new - Ep_old)
    q_tr = np.sqrt(1.5) * np.linalg.norm(s_tr)
    vol = kappa * np.trace(E_new) * np.eye(3)

    def R(p):
        return (params.sigma_y0 + params.H * p
                + (params.sigma_yinf - params.sigma_y0) * (1.0 - np.exp(-params.delta * p)))

    if q_tr - R(p_old) <= 0:
        return vol + s_tr, p_old, Ep_old.copy()
    lo, hi = 0.0, q_tr / (3 * mu)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if q_tr - 3 * mu * mid - R(p_old + mid) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * max(hi, 1e-300):
            break
    dp = 0.5 * (lo + hi)
    n = 1.5 * s_tr / q_tr
    return vol + s_tr - 2 * mu * dp * n, p_old + dp, Ep_old + dp * n


def von_mises_bisection_batch(E_new, Ep_old, p_old, params, iterations=200):
    """Vectorized form of :func:`von_mises_bisection` for (n, 3, 3) inputs (plain bisection, no Newton)."""
    mu, kappa = params.mu, params.kappa
    tr = np.trace(E_new, axis1=1, axis2=2)
    Ee = E_new - Ep_old
    s_tr = 2 * mu * (Ee - np.trace(Ee, axis1=1, axis2=2)[:, None, None] * np.eye(3) / 3.0)
    q_tr = np.sqrt(1.5) * np.linalg.norm(s_tr, axis=(1, 2))
    vol = kappa * tr[:, None, None] * np.eye(3)

    def R(p):
        return (params.sigma_y0 + params.H * p
                + (params.sigma_yinf - params.sigma_y0) * (1.0 - np.exp(-params.delta * p)))

    plastic = q_tr - R(p_old) > 0
    lo, hi = np.zeros_like(q_tr), q_tr / (3 * mu)
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        up = q_tr - 3 * mu * mid - R(p_old + mid) > 0
        lo, hi = np.where(up, mid, lo), np.where(up, hi, mid)
    dp = np.where(plastic, 0.5 * (lo + hi), 0.0)
    n = 1.5 * s_tr / np.where(q_tr > 0, q_tr, 1.0)[:, None, None]
    flow = dp[:, None, None] * n
    return vol + s_tr - 2 * mu * flow, p_old + dp, Ep_old + flow

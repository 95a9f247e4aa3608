"""Polynomial bases, quadrature rules and L2 projections on cells and faces."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import comb
from typing import Callable

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from .mesh import Cell, Face


class QuadratureError(ValueError):
    pass


@dataclass(frozen=True)
class QuadRule:
    points: np.ndarray   # (n, d) physical coordinates
    weights: np.ndarray  # (n,) strictly positive, sum = entity measure
    order: int

    @property
    def size(self) -> int:
        return len(self.weights)

    def integrate(self, values: np.ndarray) -> np.ndarray:
        return np.tensordot(self.weights, values, axes=(0, 0))


# ---------------------------------------------------------------------------
# reference rules

@lru_cache(maxsize=None)
def gauss_segment(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre rule with ``n`` points on [0, 1]."""
    x, w = roots_legendre(n)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def _gauss_jacobi01(n: int, alpha: int) -> tuple[np.ndarray, np.ndarray]:
    """Rule on [0, 1] for the weight (1 - u)^alpha."""
    x, w = roots_jacobi(n, alpha, 0.0)
    return 0.5 * (x + 1.0), w / 2.0 ** (alpha + 1)


# Dunavant degree-4 rule with positive weights
_TRI4_A, _TRI4_WA = 0.44594849091596488632, 0.22338158967801146570
_TRI4_B, _TRI4_WB = 0.091576213509770743460, 0.10995174365532186764


@lru_cache(maxsize=None)
def simplex_rule(dim: int, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Barycentric points (n, dim+1) and weights summing to one on a reference simplex."""
    order = max(int(order), 0)
    if dim == 1:
        s, w = gauss_segment(max(1, (order + 2) // 2))
        return np.column_stack([1.0 - s, s]), w
    if dim == 2:
        if order <= 1:
            return np.full((1, 3), 1.0 / 3.0), np.ones(1)
        if order == 2:
            a, b = 1.0 / 6.0, 2.0 / 3.0
            bary = np.array([[b, a, a], [a, b, a], [a, a, b]])
            return bary, np.full(3, 1.0 / 3.0)
        if order <= 4:
            rows, weights = [], []
            for a, w in ((_TRI4_A, _TRI4_WA), (_TRI4_B, _TRI4_WB)):
                b = 1.0 - 2.0 * a
                rows += [[b, a, a], [a, b, a], [a, a, b]]
                weights += [w] * 3
            return np.array(rows), np.array(weights)
        n = (order + 2) // 2
        u, wu = _gauss_jacobi01(n, 1)
        v, wv = gauss_segment(n)
        U, V = np.meshgrid(u, v, indexing="ij")
        x, y = U.ravel(), (V * (1.0 - U)).ravel()
        w = np.outer(wu, wv).ravel() * 2.0
        return np.column_stack([1.0 - x - y, x, y]), w
    if dim == 3:
        if order <= 1:
            return np.full((1, 4), 0.25), np.ones(1)
        if order == 2:
            a, b = 0.1381966011250105, 0.5854101966249685
            bary = np.full((4, 4), a)
            np.fill_diagonal(bary, b)
            return bary, np.full(4, 0.25)
        n = (order + 2) // 2
        u, wu = _gauss_jacobi01(n, 2)
        v, wv = _gauss_jacobi01(n, 1)
        s, ws = gauss_segment(n)
        U, V, S = np.meshgrid(u, v, s, indexing="ij")
        x = U.ravel()
        y = (V * (1.0 - U)).ravel()
        z = (S * (1.0 - U) * (1.0 - V)).ravel()
        w = np.einsum("i,j,k->ijk", wu, wv, ws).ravel() * 6.0
        return np.column_stack([1.0 - x - y - z, x, y, z]), w
    raise QuadratureError(f"no simplex rule for dimension {dim}")


def _simplex_measure(vertices: np.ndarray) -> float:
    edges = vertices[1:] - vertices[0]
    gram = edges @ edges.T
    k = len(edges)
    return float(np.sqrt(max(np.linalg.det(gram), 0.0)) / np.prod(np.arange(1, k + 1)))


def rule_on_simplices(simplices: np.ndarray, order: int) -> QuadRule:
    """Concatenate a reference rule mapped onto every simplex (ns, m+1, d)."""
    m = simplices.shape[1] - 1
    bary, w = simplex_rule(m, order)
    pts, wts = [], []
    for s in simplices:
        meas = _simplex_measure(s)
        if meas <= 0.0:
            continue
        pts.append(bary @ s)
        wts.append(w * meas)
    return QuadRule(np.vstack(pts), np.concatenate(wts), order)


def _bilinear_rule(p: np.ndarray, order: int) -> QuadRule | None:
    """Tensor Gauss rule through the bilinear map of a quadrilateral (planar, 2D or 3D)."""
    n = (order + 3) // 2
    s, ws = gauss_segment(n)
    X, Y = np.meshgrid(s, s, indexing="ij")
    xi, eta = X.ravel(), Y.ravel()
    N = np.column_stack([(1 - xi) * (1 - eta), xi * (1 - eta), xi * eta, (1 - xi) * eta])
    dxi = np.column_stack([-(1 - eta), (1 - eta), eta, -eta]) @ p
    deta = np.column_stack([-(1 - xi), -xi, xi, (1 - xi)]) @ p
    if p.shape[1] == 2:
        jac = dxi[:, 0] * deta[:, 1] - dxi[:, 1] * deta[:, 0]
    else:
        jac = np.linalg.norm(np.cross(dxi, deta), axis=1)
    if np.any(jac <= 0.0):
        return None
    return QuadRule(N @ p, np.outer(ws, ws).ravel() * jac, order)


def _trilinear_rule(p: np.ndarray, order: int) -> QuadRule | None:
    n = (order + 4) // 2
    s, ws = gauss_segment(n)
    A, B, C = np.meshgrid(s, s, s, indexing="ij")
    a, b, c = A.ravel(), B.ravel(), C.ravel()
    corners = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
                        [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]], dtype=float)
    fa = lambda t, ci: t if ci else 1.0 - t  # noqa: E731
    da = lambda ci: 1.0 if ci else -1.0  # noqa: E731
    N = np.column_stack([fa(a, i) * fa(b, j) * fa(c, k) for i, j, k in corners])
    dN = np.stack([
        np.column_stack([da(i) * fa(b, j) * fa(c, k) for i, j, k in corners]),
        np.column_stack([fa(a, i) * da(j) * fa(c, k) for i, j, k in corners]),
        np.column_stack([fa(a, i) * fa(b, j) * da(k) for i, j, k in corners]),
    ], axis=1)  # (n, 3, 8)
    jac = np.linalg.det(dN @ p)
    if np.any(jac <= 0.0):
        return None
    return QuadRule(N @ p, np.einsum("i,j,k->ijk", ws, ws, ws).ravel() * jac, order)


def make_cell_quadrature(cell: Cell, order: int) -> QuadRule:
    """Rule exact up to total degree ``order`` with positive weights.

    Quadrilaterals and hexahedra use the mapped tensor Gauss rule; all other
    cells integrate over the sub-simplices stored on the cell.
    """
    if order < 0:
        raise QuadratureError("quadrature order must be >= 0")
    rule = None
    if cell.kind == "quad":
        rule = _bilinear_rule(cell.points, order)
    elif cell.kind == "hex":
        rule = _trilinear_rule(cell.points, order)
    if rule is None:
        rule = rule_on_simplices(cell.simplices, order)
    return rule


def make_face_quadrature(face: Face, order: int) -> QuadRule:
    if order < 0:
        raise QuadratureError("quadrature order must be >= 0")
    pts = face.points
    if len(pts) == 2 or len(pts) == 3:
        return rule_on_simplices(pts[None], order)
    if len(pts) == 4:
        rule = _bilinear_rule(pts, order)
        if rule is not None:
            return rule
    fan = np.array([[face.centroid, pts[i], pts[(i + 1) % len(pts)]] for i in range(len(pts))])
    return rule_on_simplices(fan, order)


# ---------------------------------------------------------------------------
# bases

@lru_cache(maxsize=None)
def monomial_exponents(dim: int, degree: int) -> np.ndarray:
    """Exponents of all monomials of total degree <= ``degree``, graded order.

    The list for degree k is a prefix of the list for degree k+1.
    """
    out = []
    for total in range(degree + 1):
        out.extend(_exponents_of_degree(dim, total))
    arr = np.array(out, dtype=int).reshape(-1, dim)
    arr.setflags(write=False)
    return arr


def _exponents_of_degree(dim: int, total: int) -> list[tuple[int, ...]]:
    if dim == 0:
        return [()] if total == 0 else []
    if dim == 1:
        return [(total,)]
    res = []
    for first in range(total, -1, -1):
        for rest in _exponents_of_degree(dim - 1, total - first):
            res.append((first,) + rest)
    return res


def basis_size(dim: int, degree: int) -> int:
    return comb(degree + dim, dim) if degree >= 0 else 0


@dataclass(frozen=True)
class PolyBasis:
    """Scalar scaled monomials ((x - center) / scale)^alpha.

    For faces, ``frame`` holds orthonormal tangent vectors and the monomials
    are taken in the face's local coordinates.
    """

    entity: str
    degree: int
    center: np.ndarray
    scale: float
    frame: np.ndarray | None = None

    @property
    def local_dim(self) -> int:
        return self.center.shape[0] if self.frame is None else self.frame.shape[0]

    @property
    def exponents(self) -> np.ndarray:
        return monomial_exponents(self.local_dim, self.degree)

    @property
    def size(self) -> int:
        return basis_size(self.local_dim, self.degree)

    def local_coords(self, x: np.ndarray) -> np.ndarray:
        y = (np.atleast_2d(x) - self.center) / self.scale
        return y if self.frame is None else y @ self.frame.T

    def eval(self, x: np.ndarray, degree: int | None = None) -> np.ndarray:
        """Values (n, size) at points ``x`` (n, d)."""
        exps = self.exponents if degree is None else monomial_exponents(self.local_dim, degree)
        y = self.local_coords(x)
        return np.prod(y[:, None, :] ** exps[None, :, :], axis=2)

    def grad(self, x: np.ndarray, degree: int | None = None) -> np.ndarray:
        """Gradients (n, size, d') with respect to the local coordinates' directions.

        For cell bases these are physical gradients; for face bases they are
        derivatives along the orthonormal tangent vectors of ``frame``.
        """
        exps = self.exponents if degree is None else monomial_exponents(self.local_dim, degree)
        y = self.local_coords(x)
        n, d = y.shape
        out = np.zeros((n, len(exps), d))
        for j in range(d):
            e = exps.copy()
            coef = e[:, j].astype(float)
            e[:, j] = np.maximum(e[:, j] - 1, 0)
            out[:, :, j] = coef * np.prod(y[:, None, :] ** e[None, :, :], axis=2) / self.scale
        return out


def make_cell_basis(cell: Cell, degree: int) -> PolyBasis:
    if degree < 0:
        raise ValueError("degree must be >= 0")
    return PolyBasis("cell", int(degree), np.asarray(cell.centroid, float), 0.5 * cell.diameter)


def make_face_basis(face: Face, degree: int) -> PolyBasis:
    if degree < 0:
        raise ValueError("degree must be >= 0")
    return PolyBasis("face", int(degree), np.asarray(face.centroid, float), 0.5 * face.diameter,
                     face.tangents)


def gram_matrix(basis: PolyBasis, rule: QuadRule, degree: int | None = None) -> np.ndarray:
    phi = basis.eval(rule.points, degree)
    return phi.T @ (rule.weights[:, None] * phi)


def l2_project(basis: PolyBasis, source: Callable[[np.ndarray], np.ndarray] | np.ndarray,
               rule: QuadRule, degree: int | None = None) -> np.ndarray:
    """Coefficients of the discrete L2 projection of ``source`` onto the basis.

    ``source`` is a callable on (n, d) points or an array of values at the
    rule points; trailing dimensions (vector / tensor fields) are projected
    componentwise and kept as trailing axes of the result.
    """
    values = source(rule.points) if callable(source) else np.asarray(source)
    values = np.asarray(values, dtype=float)
    phi = basis.eval(rule.points, degree)
    gram = phi.T @ (rule.weights[:, None] * phi)
    rhs = np.tensordot(phi * rule.weights[:, None], values, axes=(0, 0))
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError as exc:
        raise QuadratureError("singular Gram matrix: quadrature cannot resolve the basis") from exc
    shape = rhs.shape
    flat = rhs.reshape(shape[0], -1)
    sol = np.linalg.solve(chol.T, np.linalg.solve(chol, flat))
    return sol.reshape(shape)

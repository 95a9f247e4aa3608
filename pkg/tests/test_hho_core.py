import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st

from hhoplast.approximation import l2_project, make_cell_basis, make_cell_quadrature
from hhoplast.hho_core import (
    EQUAL_ORDER,
    MIXED_ORDER,
    HHOError,
    build_local_operators,
    check_degrees,
    reduction,
    seminorm_matrix,
    strain_seminorm,
)
from hhoplast.mesh import mesh_from_polygons

from oracles import commuting_errors, random_smooth_fields, single_cells

CELLS = single_cells()
VARIANTS = [(1, 1), (1, 2), (2, 2), (2, 3)]


def random_polynomial_field(rng, d, degree, center):
    """Vector field with random coefficients in the monomials of total degree <= degree."""
    exps = [e for e in np.ndindex(*(degree + 1,) * d) if sum(e) <= degree]
    coef = rng.standard_normal((len(exps), d))

    def field(x):
        y = x - center
        return np.stack([np.prod(y ** np.array(e), axis=1) for e in exps], axis=1) @ coef

    return field


def operators(name, k, l):
    _, mesh, c = next(item for item in CELLS if item[0] == name)
    return build_local_operators(mesh, c, k, l)


class TestDegrees:
    @pytest.mark.parametrize("k,l,variant", [(1, 1, EQUAL_ORDER), (1, 2, MIXED_ORDER), (2, 2, EQUAL_ORDER),
                                             (2, 3, MIXED_ORDER)])
    def test_valid_pairs(self, k, l, variant):
        assert check_degrees(k, l) == variant

    @pytest.mark.parametrize("k,l", [(1, 0), (1, 3), (2, 1), (-1, 0)])
    def test_invalid_pairs(self, k, l):
        with pytest.raises(HHOError):
            check_degrees(k, l)

    def test_lowest_order_needs_flag(self):
        with pytest.raises(HHOError, match="experimental"):
            check_degrees(0, 1)
        assert check_degrees(0, 1, experimental=True) == MIXED_ORDER
        with pytest.raises(HHOError):
            check_degrees(0, 0, experimental=True)


@pytest.mark.parametrize("name", [c[0] for c in CELLS])
@pytest.mark.parametrize("k,l", VARIANTS)
class TestLocalOperators:
    def test_commuting_property(self, name, k, l):
        ops = operators(name, k, l)
        field, grad = random_smooth_fields(np.random.default_rng(k + 10 * l), ops.ctx.dim, 20)
        assert commuting_errors(ops, field, grad).max() <= 1e-11

    def test_reconstruction_reproduces_polynomials(self, name, k, l):
        ops = operators(name, k, l)
        ctx = ops.ctx
        field = random_polynomial_field(np.random.default_rng(1), ctx.dim, k + 1, ctx.cell.centroid)
        v = reduction(ctx, field)
        rule = make_cell_quadrature(ctx.cell, 2 * (k + 1))
        exact = l2_project(ctx.cell_basis, field, rule, degree=k + 1)
        Dv = (ops.D @ v).reshape(ctx.dim, -1).T
        assert np.abs(Dv - exact).max() <= 1e-10 * np.abs(exact).max()

    def test_stabilization_vanishes_on_polynomials(self, name, k, l):
        ops = operators(name, k, l)
        ctx = ops.ctx
        field = random_polynomial_field(np.random.default_rng(2), ctx.dim, k + 1, ctx.cell.centroid)
        v = reduction(ctx, field)
        assert np.abs(ops.S @ v).max() <= 1e-11 * np.abs(v).max()
        assert abs(v @ ops.Z @ v) <= 1e-13 * np.abs(ops.Z).max() * (v @ v)

    def test_kernel_is_translations(self, name, k, l):
        ops = operators(name, k, l)
        d = ops.ctx.dim
        sv = np.linalg.svd(np.vstack([ops.G, ops.S]), compute_uv=False)
        assert int(np.sum(sv < 1e-10 * sv.max())) == d
        t = reduction(ops.ctx, lambda x: np.tile(np.arange(1.0, d + 1), (len(x), 1)))
        assert np.abs(ops.G @ t).max() < 1e-12 and np.abs(ops.S @ t).max() < 1e-12

    def test_stabilization_matrix_is_symmetric_psd(self, name, k, l):
        Z = operators(name, k, l).Z
        assert np.allclose(Z, Z.T, atol=1e-13 * np.abs(Z).max())
        assert np.linalg.eigvalsh(Z).min() > -1e-12 * np.abs(Z).max()

    def test_discrete_energy_controls_seminorm(self, name, k, l):
        # (G v, G v)_T + (Z v, v) >= c |v|^2 with c > 0 on the complement of constants
        ops = operators(name, k, l)
        ctx = ops.ctx
        d, nk = ctx.dim, ctx.nk
        phi = ctx.cell_basis.eval(ctx.cell_rule.points)[:, :nk]
        mass = phi.T @ (ctx.cell_rule.weights[:, None] * phi)
        A = ops.G.T @ np.kron(np.eye(d * d), mass) @ ops.G + ops.Z
        N = seminorm_matrix(ctx)
        # quotient out constants with an orthonormal complement basis
        consts = np.array([reduction(ctx, lambda x, i=i: np.eye(d)[i][None].repeat(len(x), 0)) for i in range(d)]).T
        Q = sla.null_space(consts.T)
        lam = sla.eigh(Q.T @ A @ Q, Q.T @ N @ Q, eigvals_only=True)
        assert lam.min() > 1e-3


class TestSeminorm:
    def test_zero_only_on_constants(self):
        ops = operators("pentagon", 1, 2)
        ctx = ops.ctx
        const = reduction(ctx, lambda x: np.tile([2.0, -1.0], (len(x), 1)))
        assert strain_seminorm(ctx, const) < 1e-6   # square root of a roundoff-level quadratic form
        linear = reduction(ctx, lambda x: x.copy())
        assert strain_seminorm(ctx, linear) > 0.1

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.floats(-0.2, 0.2), min_size=8, max_size=8), st.sampled_from(VARIANTS))
    def test_commuting_on_random_quads(self, shift, kl):
        pts = np.array([[0, 0], [1, 0], [1, 1], [0, 1.0]]) + np.array(shift).reshape(4, 2)
        mesh = mesh_from_polygons(pts, [(0, 1, 2, 3)])
        ops = build_local_operators(mesh, 0, *kl)
        field, grad = random_smooth_fields(np.random.default_rng(0), 2, 5)
        assert commuting_errors(ops, field, grad).max() <= 1e-11

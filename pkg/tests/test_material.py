import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from hhoplast.material import (
    MaterialError,
    MaterialParams,
    MaterialPointState,
    NonInvertibleDeformation,
    SmallStrainElastic,
    VonMisesLogStrain,
    finite_plasticity,
    helmholtz_energy,
    log_strain,
    small_plasticity,
    yield_function,
)

from oracles import von_mises_bisection

STEEL = MaterialParams(E=206900.0, nu=0.29, H=129.2, sigma_y0=450.0, sigma_yinf=715.0, delta=16.93)
PERFECT = MaterialParams(E=70000.0, nu=0.3, H=0.0, sigma_y0=250.0, sigma_yinf=250.0, delta=0.0)


def random_F(rng, n, gap=None):
    """Random deformation gradients near identity; ``gap`` forces two eigenvalues of C this close."""
    F = np.eye(3) + 0.15 * rng.standard_normal((n, 3, 3))
    if gap is not None:
        U, _, Vt = np.linalg.svd(F)
        s = np.array([1.2, 1.2 * np.sqrt(1.0 + gap), 0.8])
        F = np.einsum("nij,j,njk->nik", U, s, Vt)
    F[np.linalg.det(F) < 0] *= -1
    return F


def random_sym(rng, n, scale):
    X = scale * rng.standard_normal((n, 3, 3))
    return 0.5 * (X + X.transpose(0, 2, 1))


def fd_jacobian(fun, X, h):
    """Central differences of fun: (n, 3, 3) -> (n, 3, 3) along each of the nine entries."""
    n = len(X)
    J = np.zeros((n, 9, 9))
    for a in range(9):
        dX = np.zeros((n, 9))
        dX[:, a] = h
        dX = dX.reshape(n, 3, 3)
        J[:, :, a] = ((fun(X + dX) - fun(X - dX)) / (2 * h)).reshape(n, 9)
    return J


class TestParams:
    def test_derived_moduli(self):
        assert STEEL.mu == pytest.approx(206900.0 / 2.58)
        assert STEEL.kappa == pytest.approx(206900.0 / (3 * (1 - 0.58)))
        assert STEEL.yield_stress(0.0) == pytest.approx(450.0)
        assert STEEL.yield_stress(1e6) == pytest.approx(715.0 + 129.2 * 1e6)
        assert STEEL.hardening_slope(0.0) == pytest.approx(129.2 + 265.0 * 16.93)

    @pytest.mark.parametrize("change", [dict(nu=0.5), dict(nu=-1.0), dict(E=-1.0), dict(H=-1.0),
                                        dict(sigma_y0=0.0), dict(delta=-2.0)])
    def test_invalid_parameters_rejected(self, change):
        values = dict(E=1.0, nu=0.3, H=0.0, sigma_y0=1.0, sigma_yinf=1.0, delta=0.0) | change
        with pytest.raises(ValueError):
            MaterialParams(**values)


class TestLogStrain:
    def test_diagonal_stretch(self):
        F = np.diag([1.5, 0.8, 1.1])
        assert np.allclose(log_strain(F).E, np.diag(np.log([1.5, 0.8, 1.1])), atol=1e-15)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(3)
        F = random_F(rng, 20)
        Q = Rotation.random(20, random_state=4).as_matrix()
        assert np.allclose(log_strain(Q @ F).E, log_strain(F).E, atol=1e-12)

    def test_non_invertible_raises(self):
        F = np.stack([np.eye(3), np.diag([1.0, 1.0, -0.5])])
        with pytest.raises(NonInvertibleDeformation, match="index 1"):
            log_strain(F)
        assert issubclass(NonInvertibleDeformation, MaterialError)

    @pytest.mark.parametrize("gap", [None, 1e-4, 1e-7, 0.0])
    def test_derivatives_match_finite_differences(self, gap):
        rng = np.random.default_rng(5)
        F = random_F(rng, 40, gap)
        T = random_sym(rng, 40, 1.0)
        kin = log_strain(F)
        h = 1e-5
        P1_fd = fd_jacobian(lambda X: log_strain(X).E, F, h)
        assert np.abs(kin.P1 - P1_fd).max() <= 1e-7 * np.abs(P1_fd).max()
        # T : d2E/dF2 as the derivative of T : dE/dF
        first = lambda X: np.einsum("nij,nija->na", T, log_strain(X).P1.reshape(-1, 3, 3, 9)).reshape(-1, 3, 3)  # noqa: E731
        S, TP2 = kin.stress_contraction(T)
        TP2_fd = fd_jacobian(first, F, h)
        assert np.abs(TP2 - TP2_fd).max() <= 1e-6 * np.abs(TP2_fd).max()
        assert np.allclose(2 * F @ S, first(F), atol=1e-12)


class TestReturnMapping:
    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 100_000), scale=st.floats(1e-4, 2e-2))
    def test_matches_bisection_oracle(self, seed, scale):
        rng = np.random.default_rng(seed)
        Ep = _dev(random_sym(rng, 1, 0.01))[0]
        p_old = abs(rng.normal(0.0, 0.05))
        E = random_sym(rng, 1, scale)[0]
        res = small_plasticity(MaterialPointState(Ep[None], np.array([p_old])), np.zeros((1, 3, 3)), E[None], STEEL)
        T, p, Ep_new = von_mises_bisection(E, Ep, p_old, STEEL)
        assert np.allclose(res.T[0], T, rtol=0, atol=1e-9 * STEEL.sigma_y0)
        assert res.state.p[0] == pytest.approx(p, abs=1e-13)
        assert np.allclose(res.state.E_p[0], Ep_new, atol=1e-13)

    @pytest.mark.parametrize("params", [STEEL, PERFECT], ids=["voce", "perfect"])
    def test_kuhn_tucker_conditions_and_plastic_incompressibility(self, params):
        rng = np.random.default_rng(7)
        state = MaterialPointState.virgin(500)
        E = np.zeros((500, 3, 3))
        for _ in range(4):
            dE = random_sym(rng, 500, 3e-3)
            res = small_plasticity(state, E, dE, params)
            phi = yield_function(res.T, res.state.p, params)
            assert res.plastic.any() and (~res.plastic).any()
            assert phi.max() <= 1e-10 * params.sigma_y0
            assert res.plastic_multiplier.min() >= 0
            assert np.abs(res.plastic_multiplier * phi).max() <= 1e-12 * params.sigma_y0
            assert np.abs(np.trace(res.state.E_p, axis1=1, axis2=2)).max() <= 1e-15
            E, state = E + dE, res.state

    def test_elastic_points_use_elastic_modulus(self):
        res = small_plasticity(MaterialPointState.virgin(3), np.zeros((3, 3, 3)),
                               random_sym(np.random.default_rng(0), 3, 1e-5), STEEL)
        assert not res.plastic.any()
        assert np.allclose(res.C_ep, STEEL.elastic_modulus())

    @pytest.mark.parametrize("params", [STEEL, PERFECT], ids=["voce", "perfect"])
    def test_algorithmic_tangent_matches_finite_differences(self, params):
        rng = np.random.default_rng(11)
        state = MaterialPointState(_dev(random_sym(rng, 50, 2e-3)), np.abs(rng.normal(0, 0.01, 50)))
        E = random_sym(rng, 50, 2e-3)
        dE = random_sym(rng, 50, 4e-3)
        res = small_plasticity(state, E, dE, params)
        assert res.plastic.sum() > 10
        fd = fd_jacobian(lambda X: small_plasticity(state, E, X, params).T, dE, 1e-8)
        # compare on symmetric increments only
        sym = np.array([[0.5 * ((a == c) * (b == d) + (a == d) * (b == c)) for c in range(3) for d in range(3)]
                        for a in range(3) for b in range(3)])
        assert np.abs(res.C_ep @ sym - fd @ sym).max() <= 1e-5 * np.abs(res.C_ep).max()
        assert np.allclose(res.C_ep, res.C_ep.transpose(0, 2, 1))


class TestFiniteStrain:
    def test_nominal_tangent_matches_finite_differences(self):
        rng = np.random.default_rng(13)
        F0 = np.eye(3) + 2e-3 * rng.standard_normal((20, 3, 3))
        F1 = F0 + 1e-2 * rng.standard_normal((20, 3, 3))
        state = MaterialPointState.virgin(20)
        res = finite_plasticity(state, F0, F1, STEEL)
        assert res.plastic.sum() > 5
        A_fd = fd_jacobian(lambda X: finite_plasticity(state, F0, X, STEEL).P, F1, 1e-6)
        assert np.abs(res.A - A_fd).max() <= 1e-5 * np.abs(res.A).max()
        assert np.allclose(res.A, res.A.transpose(0, 2, 1))

    def test_objectivity(self):
        rng = np.random.default_rng(17)
        F0 = np.eye(3) + 1e-3 * rng.standard_normal((10, 3, 3))
        F1 = F0 + 2e-2 * rng.standard_normal((10, 3, 3))
        Q = Rotation.random(10, random_state=1).as_matrix()
        state = MaterialPointState.virgin(10)
        a = finite_plasticity(state, F0, F1, STEEL)
        b = finite_plasticity(state, Q @ F0, Q @ F1, STEEL)
        assert np.allclose(b.P, Q @ a.P, atol=1e-9 * np.abs(a.P).max())
        # the Kirchhoff stress P F^T is symmetric
        tau = a.P @ F1.transpose(0, 2, 1)
        assert np.allclose(tau, tau.transpose(0, 2, 1), atol=1e-9 * np.abs(tau).max())

    def test_small_strain_limit(self):
        rng = np.random.default_rng(19)
        g = 1e-7 * rng.standard_normal((5, 2, 2))
        big = VonMisesLogStrain(STEEL).respond(MaterialPointState.virgin(5), np.zeros_like(g), g)
        small = SmallStrainElastic(STEEL).respond(MaterialPointState.virgin(5), np.zeros_like(g), g)
        assert np.allclose(big.P, small.P, rtol=0, atol=1e-5 * np.abs(small.P).max())
        assert np.allclose(big.A, small.A, rtol=1e-5, atol=1e-5 * STEEL.mu)


class TestEnergy:
    def test_plastic_energy_derivative_is_yield_stress(self):
        p = np.array([0.0, 1e-7, 1e-6, 1e-3, 0.05, 0.4])
        h = 1e-9
        E0 = np.zeros((len(p), 3, 3))
        up = helmholtz_energy(MaterialPointState(E0, p + h), E0, STEEL)[1]
        dn = helmholtz_energy(MaterialPointState(E0, np.maximum(p - h, 0)), E0, STEEL)[1]
        width = (p + h) - np.maximum(p - h, 0)
        assert np.allclose((up - dn) / width, STEEL.yield_stress(p), rtol=1e-6)

    def test_elastic_energy_derivative_is_stress(self):
        rng = np.random.default_rng(23)
        E = random_sym(rng, 10, 1e-4)
        state = MaterialPointState.virgin(10)
        res = small_plasticity(state, np.zeros_like(E), E, PERFECT)
        assert not res.plastic.any()
        T = res.T
        h = 1e-7
        for a, b in [(0, 0), (0, 1), (2, 1)]:
            X = np.zeros((3, 3))
            X[a, b] += 0.5 * h
            X[b, a] += 0.5 * h
            fd = (helmholtz_energy(state, E + X, PERFECT)[0] - helmholtz_energy(state, E - X, PERFECT)[0]) / (2 * h)
            assert np.allclose(fd, T[:, a, b], rtol=1e-6)


def _dev(T):
    return T - np.trace(T, axis1=-2, axis2=-1)[..., None, None] * np.eye(3) / 3.0

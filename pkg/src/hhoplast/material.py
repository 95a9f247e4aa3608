"""Constitutive engine: von Mises plasticity with Voce hardening in logarithmic strain.

All functions are vectorized over a leading batch axis of material points.
Tensors are 3x3 even for plane-strain problems.  Fourth-order moduli are
stored as 9x9 matrices with the flat index ``3 * i + j`` for entry (i, j),
so that a modulus ``A`` acts on a tensor ``X`` as ``(A @ X.reshape(9))``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


class MaterialError(ArithmeticError):
    """Raised when a material point update cannot be carried out."""


class NonInvertibleDeformation(MaterialError):
    """det F <= 0: the Newton step was too large, the caller should cut the load step."""


I3 = np.eye(3)
I9 = np.eye(9)
IxI = np.outer(I3.ravel(), I3.ravel())
I_SYM = 0.5 * (np.einsum("ik,jl->ijkl", I3, I3) + np.einsum("il,jk->ijkl", I3, I3)).reshape(9, 9)
I_DEV = I_SYM - IxI / 3.0


@dataclass(frozen=True)
class MaterialParams:
    """Isotropic elasticity and von Mises yield with R(p) = s0 + H p + (sinf - s0)(1 - exp(-delta p))."""

    E: float
    nu: float
    H: float
    sigma_y0: float
    sigma_yinf: float
    delta: float

    def __post_init__(self):
        if not (self.E > 0 and -1.0 < self.nu < 0.5):
            raise ValueError(f"elastic moduli need E > 0 and -1 < nu < 0.5 (E={self.E}, nu={self.nu})")
        if not (self.mu > 0 and 3 * self.lam + 2 * self.mu > 0):
            raise ValueError(f"elastic moduli violate mu > 0, 3 lambda + 2 mu > 0 (E={self.E}, nu={self.nu})")
        if self.H < 0 or self.sigma_y0 <= 0 or self.sigma_yinf < 0 or self.delta < 0:
            raise ValueError("hardening parameters need H >= 0, sigma_y0 > 0, sigma_yinf >= 0, delta >= 0")

    @property
    def mu(self) -> float:
        return self.E / (2.0 * (1.0 + self.nu))

    @property
    def lam(self) -> float:
        return self.E * self.nu / ((1.0 + self.nu) * (1.0 - 2.0 * self.nu))

    @property
    def kappa(self) -> float:
        return self.lam + 2.0 * self.mu / 3.0

    def elastic_modulus(self) -> np.ndarray:
        return self.lam * IxI + 2.0 * self.mu * I_SYM

    def yield_stress(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return (self.sigma_y0 + self.H * p
                - (self.sigma_yinf - self.sigma_y0) * np.expm1(-self.delta * p))

    def hardening_slope(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return self.H + (self.sigma_yinf - self.sigma_y0) * self.delta * np.exp(-self.delta * p)


@dataclass(frozen=True)
class MaterialPointState:
    """Plastic log-strain E_p (..., 3, 3) and equivalent plastic strain p (...)."""

    E_p: np.ndarray
    p: np.ndarray

    @classmethod
    def virgin(cls, n: int | None = None) -> "MaterialPointState":
        if n is None:
            return cls(np.zeros((3, 3)), np.zeros(()))
        return cls(np.zeros((n, 3, 3)), np.zeros(n))

    def __len__(self) -> int:
        return len(self.p)

    def take(self, idx) -> "MaterialPointState":
        return MaterialPointState(self.E_p[idx], self.p[idx])


# ---------------------------------------------------------------------------
# logarithmic strain and its derivatives

def _f(lam):
    return 0.5 * np.log(lam)


def _first_divided_difference(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(f(a) - f(b)) / (a - b) for f = ln(.)/2, with the confluent limit 1/(2a)."""
    diff = a - b
    same = diff == 0.0
    safe = np.where(same, 1.0, diff)
    x = diff / b
    val = 0.5 * np.log1p(x) / safe
    return np.where(same, 0.5 / a, val)


def _second_divided_difference(a: np.ndarray, b: np.ndarray, c: np.ndarray,
                               series_tol: float = 1e-3) -> np.ndarray:
    """f[a, b, c] for f = ln(.)/2.

    Nearly coalescent triples use a Taylor series about the mean,
    sum_n f^(n+2)(m)/(n+2)! h_n(y) with y the deviations from the mean and
    h_n the complete homogeneous polynomials (computed by the Newton
    recurrence h_n = e1 h_(n-1) - e2 h_(n-2) + e3 h_(n-3) with e1 = 0).
    Otherwise the first differences are combined over the widest pair.
    """
    trip = np.stack(np.broadcast_arrays(a, b, c), axis=-1)
    s = np.sort(trip, axis=-1)
    lo, mid, hi = s[..., 0], s[..., 1], s[..., 2]
    m = (lo + mid + hi) / 3.0
    near = (hi - lo) <= series_tol * m
    y0, y1, y2 = lo - m, mid - m, hi - m
    e2 = y0 * y1 + y0 * y2 + y1 * y2
    e3 = y0 * y1 * y2
    h = [np.ones_like(m), np.zeros_like(m), -e2]
    for n in range(3, 8):
        h.append(-e2 * h[n - 2] + e3 * h[n - 3])
    series = np.zeros_like(m)
    inv = 1.0 / m
    for n in range(8):
        # f^(j)(m)/j! = (-1)^(j-1) / (2 j m^j) with j = n + 2
        series = series + (-1.0) ** (n + 1) / (2.0 * (n + 2)) * inv ** (n + 2) * h[n]
    gap = np.where(near, 1.0, hi - lo)
    direct = (_first_divided_difference(hi, mid) - _first_divided_difference(mid, lo)) / gap
    return np.where(near, series, direct)


_F2_TRIPLES = [(i, j, k) for i in range(3) for j in range(i, 3) for k in range(j, 3)]


def _second_difference_table(lam: np.ndarray) -> np.ndarray:
    """f[lam_i, lam_k, lam_j] for all index triples, shape (..., 3, 3, 3)."""
    out = np.empty(lam.shape[:-1] + (3, 3, 3))
    for i, j, k in _F2_TRIPLES:
        val = _second_divided_difference(lam[..., i], lam[..., j], lam[..., k])
        for p in {(i, j, k), (i, k, j), (j, i, k), (j, k, i), (k, i, j), (k, j, i)}:
            out[(Ellipsis,) + p] = val
    return out


@dataclass(frozen=True)
class LogStrainKinematics:
    """E = ln(C)/2 with C = F^T F, and derivative data.

    ``P1`` is dE/dF (9x9).  ``eig``, ``Q`` are the spectral data of C;
    ``dEdC`` is dE/dC and ``dCdF`` is dC/dF, both 9x9.
    """

    F: np.ndarray
    E: np.ndarray
    eig: np.ndarray
    Q: np.ndarray
    dEdC: np.ndarray
    dCdF: np.ndarray

    @property
    def P1(self) -> np.ndarray:
        return self.dEdC @ self.dCdF

    def stress_contraction(self, T: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(S, T : d2E/dF2) for symmetric T (..., 3, 3).

        S = T : dE/dC, so that T : dE/dF = 2 F S.  The second object is a
        9x9 matrix in F indices.
        """
        lam, Q = self.eig, self.Q
        That = np.einsum("...ai,...ab,...bj->...ij", Q, T, Q)
        f1 = _first_divided_difference(lam[..., :, None], lam[..., None, :])
        Shat = f1 * That
        S = np.einsum("...ia,...ab,...jb->...ij", Q, Shat, Q)
        f2 = _second_difference_table(lam)
        Hhat = np.zeros(lam.shape[:-1] + (3, 3, 3, 3))
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    w = That[..., i, j] * f2[..., i, k, j]
                    Hhat[..., i, k, k, j] += w
                    Hhat[..., k, j, i, k] += w
        R = _rotation_9(Q)
        Hhat = Hhat.reshape(lam.shape[:-1] + (9, 9))
        H = np.swapaxes(R, -1, -2) @ Hhat @ R
        D = self.dCdF
        geo = np.einsum("kK,...pq->...kpKq", I3, 2.0 * S).reshape(lam.shape[:-1] + (9, 9))
        TP2 = np.swapaxes(D, -1, -2) @ H @ D + geo
        return S, TP2


def _rotation_9(Q: np.ndarray) -> np.ndarray:
    """R with vec(Q^T X Q) = R vec(X)."""
    # R[(a,b),(c,d)] = Q[c,a] Q[d,b]
    R = np.einsum("...ca,...db->...abcd", Q, Q)
    return R.reshape(Q.shape[:-2] + (9, 9))


def _dCdF(F: np.ndarray) -> np.ndarray:
    # dC_mn/dF_kl = delta_nl F_km + delta_ml F_kn
    t = np.einsum("nl,...km->...mnkl", I3, F) + np.einsum("ml,...kn->...mnkl", I3, F)
    return t.reshape(F.shape[:-2] + (9, 9))


def log_strain(F: np.ndarray) -> LogStrainKinematics:
    """Logarithmic strain and first-derivative data for F (..., 3, 3) with det F > 0."""
    F = np.asarray(F, dtype=float)
    det = np.linalg.det(F)
    if np.any(~(det > 0.0)):
        bad = np.flatnonzero(~(np.atleast_1d(det) > 0.0))
        raise NonInvertibleDeformation(f"det F <= 0 at {len(bad)} point(s), first index {bad[0]}")
    C = np.swapaxes(F, -1, -2) @ F
    C = 0.5 * (C + np.swapaxes(C, -1, -2))
    lam, Q = np.linalg.eigh(C)
    E = np.einsum("...ia,...a,...ja->...ij", Q, _f(lam), Q)
    f1 = _first_divided_difference(lam[..., :, None], lam[..., None, :])
    R = _rotation_9(Q)
    diag = f1.reshape(lam.shape[:-1] + (9,))
    dEdC = np.swapaxes(R, -1, -2) @ (diag[..., :, None] * R)
    # C-derivative acts on symmetric increments; symmetrize so E-indices carry minor symmetry
    dEdC = 0.5 * (dEdC + dEdC @ _TRANSPOSE9)
    return LogStrainKinematics(F, E, lam, Q, dEdC, _dCdF(F))


_TRANSPOSE9 = np.eye(9)[[3 * (i % 3) + i // 3 for i in range(9)]]


# ---------------------------------------------------------------------------
# small-strain return mapping

def _dev(T):
    return T - np.trace(T, axis1=-2, axis2=-1)[..., None, None] * I3 / 3.0


def _norm(T):
    return np.sqrt(np.einsum("...ij,...ij->...", T, T))


def yield_function(T: np.ndarray, p: np.ndarray, params: MaterialParams) -> np.ndarray:
    """Phi(T, R(p)) = sqrt(3/2) |dev T| - R(p)."""
    return np.sqrt(1.5) * _norm(_dev(T)) - params.yield_stress(p)


@dataclass(frozen=True)
class ReturnMapResult:
    state: MaterialPointState
    T: np.ndarray
    C_ep: np.ndarray
    plastic_multiplier: np.ndarray
    plastic: np.ndarray


def _solve_consistency(q_tr, p, params: MaterialParams, tol: float, max_iter: int = 100):
    """Lambda >= 0 with q_tr - 3 mu Lambda - R(p + Lambda) = 0 (safeguarded Newton)."""
    mu3 = 3.0 * params.mu
    lo = np.zeros_like(q_tr)
    hi = q_tr / mu3
    lam = np.zeros_like(q_tr)
    active = np.ones(q_tr.shape, dtype=bool)
    for _ in range(max_iter):
        g = q_tr - mu3 * lam - params.yield_stress(p + lam)
        active = np.abs(g) > tol
        if not active.any():
            return lam
        lo = np.where(g > 0, lam, lo)
        hi = np.where(g < 0, lam, hi)
        dg = mu3 + params.hardening_slope(p + lam)
        step = lam + g / dg
        bad = ~((step > lo) & (step < hi))
        step = np.where(bad, 0.5 * (lo + hi), step)
        lam = np.where(active, step, lam)
    g = q_tr - mu3 * lam - params.yield_stress(p + lam)
    if np.any(np.abs(g) > tol):
        raise MaterialError("return mapping: consistency equation did not converge in "
                            f"{max_iter} iterations (max residual {np.abs(g).max():.3e})")
    return lam


def small_plasticity(state: MaterialPointState, E: np.ndarray, dE: np.ndarray,
                     params: MaterialParams, tol: float = 1e-12) -> ReturnMapResult:
    """Radial return for von Mises plasticity with Voce hardening.

    The trial stress is C : (E + dE - E_p).  Plastic points solve the scalar
    consistency equation to |Phi| <= tol * sigma_y0 and return the
    algorithmic tangent.
    """
    E = np.asarray(E, float)
    Ep, p = np.asarray(state.E_p, float), np.asarray(state.p, float)
    mu, lam_ = params.mu, params.lam
    Ee = E + dE - Ep
    tr = np.trace(Ee, axis1=-2, axis2=-1)
    T_tr = lam_ * tr[..., None, None] * I3 + 2.0 * mu * Ee
    s = _dev(T_tr)
    snorm = _norm(s)
    q_tr = np.sqrt(1.5) * snorm
    phi = q_tr - params.yield_stress(p)
    plastic = phi > 0.0
    shape = p.shape
    Lam = np.zeros(shape)
    if np.any(plastic):
        Lam_p = _solve_consistency(q_tr[plastic], p[plastic], params, tol * params.sigma_y0)
        Lam[plastic] = Lam_p
    n = np.where(plastic[..., None, None], s / np.where(snorm > 0, snorm, 1.0)[..., None, None], 0.0)
    flow = np.sqrt(1.5) * Lam[..., None, None] * n
    T = T_tr - 2.0 * mu * flow
    new_Ep = Ep + flow
    new_p = p + Lam
    C = np.broadcast_to(params.elastic_modulus(), shape + (9, 9)).copy()
    if np.any(plastic):
        qt = q_tr[plastic]
        ratio = 3.0 * mu * Lam[plastic] / qt
        th1 = 1.0 - ratio
        th2 = 3.0 * mu / (3.0 * mu + params.hardening_slope(new_p[plastic])) - ratio
        nv = n[plastic].reshape(-1, 9)
        C[plastic] = (params.kappa * IxI + 2.0 * mu * th1[:, None, None] * I_DEV
                      - 2.0 * mu * th2[:, None, None] * np.einsum("na,nb->nab", nv, nv))
    return ReturnMapResult(MaterialPointState(new_Ep, new_p), T, C, Lam, plastic)


# ---------------------------------------------------------------------------
# finite-strain wrapper

@dataclass(frozen=True)
class FiniteStrainResult:
    state: MaterialPointState
    P: np.ndarray       # first Piola-Kirchhoff (..., 3, 3)
    A: np.ndarray       # nominal tangent dP/dF (..., 9, 9)
    T: np.ndarray
    C_ep: np.ndarray
    E: np.ndarray
    plastic: np.ndarray


def finite_plasticity(state: MaterialPointState, F_old: np.ndarray, F_new: np.ndarray,
                      params: MaterialParams) -> FiniteStrainResult:
    """Geometric pre-processing, small-strain return mapping, geometric post-processing."""
    E_old = log_strain(F_old).E
    kin = log_strain(F_new)
    res = small_plasticity(state, E_old, kin.E - E_old, params)
    S, TP2 = kin.stress_contraction(res.T)
    P = 2.0 * np.asarray(F_new) @ S
    P1 = kin.P1
    A = np.swapaxes(P1, -1, -2) @ res.C_ep @ P1 + TP2
    A = 0.5 * (A + np.swapaxes(A, -1, -2))
    return FiniteStrainResult(res.state, P, A, res.T, res.C_ep, kin.E, res.plastic)


def helmholtz_energy(state: MaterialPointState, E: np.ndarray,
                     params: MaterialParams) -> tuple[np.ndarray, np.ndarray]:
    """Elastic and plastic parts of the free energy."""
    Ee = np.asarray(E, float) - np.asarray(state.E_p, float)
    tr = np.trace(Ee, axis1=-2, axis2=-1)
    psi_e = 0.5 * params.lam * tr ** 2 + params.mu * np.einsum("...ij,...ij->...", Ee, Ee)
    p = np.asarray(state.p, float)
    dp = params.delta * p
    small = dp < 1e-5
    # p - (1 - exp(-delta p)) / delta, with its series for small delta p
    safe_delta = params.delta if params.delta > 0 else 1.0
    sat = np.where(small, params.delta * p ** 2 / 2.0 - params.delta ** 2 * p ** 3 / 6.0
                   + params.delta ** 3 * p ** 4 / 24.0,
                   p + np.expm1(-dp) / safe_delta)
    psi_p = params.sigma_y0 * p + 0.5 * params.H * p ** 2 + (params.sigma_yinf - params.sigma_y0) * sat
    return psi_e, psi_p


# ---------------------------------------------------------------------------
# material models used by the solver

def embed_gradient(Fd: np.ndarray) -> np.ndarray:
    """Embed a (..., d, d) deformation gradient into 3x3 (plane strain: F33 = 1)."""
    d = Fd.shape[-1]
    if d == 3:
        return Fd
    F = np.broadcast_to(I3, Fd.shape[:-2] + (3, 3)).copy()
    F[..., :d, :d] = Fd
    return F


def in_plane_indices(d: int) -> np.ndarray:
    return np.array([3 * i + j for i in range(d) for j in range(d)])


@dataclass(frozen=True)
class ModelResponse:
    state: MaterialPointState
    P: np.ndarray        # (..., d, d)
    A: np.ndarray        # (..., d*d, d*d)
    psi: np.ndarray      # free energy density at the new state
    plastic: np.ndarray
    full_P: np.ndarray   # (..., 3, 3)


class VonMisesLogStrain:
    """Finite-strain von Mises plasticity in the logarithmic strain framework."""

    finite_strain = True

    def __init__(self, params: MaterialParams):
        self.params = params

    def initial_state(self, n: int) -> MaterialPointState:
        return MaterialPointState.virgin(n)

    def respond(self, state: MaterialPointState, grad_old: np.ndarray,
                grad_new: np.ndarray) -> ModelResponse:
        d = grad_new.shape[-1]
        F_old = embed_gradient(grad_old + np.eye(d))
        F_new = embed_gradient(grad_new + np.eye(d))
        res = finite_plasticity(state, F_old, F_new, self.params)
        idx = in_plane_indices(d)
        psi_e, psi_p = helmholtz_energy(res.state, res.E, self.params)
        return ModelResponse(res.state, res.P[..., :d, :d], res.A[..., idx[:, None], idx[None, :]],
                             psi_e + psi_p, res.plastic, res.P)


class SmallStrainElastic:
    """Linear isotropic elasticity in the displacement gradient (P = C : sym grad u)."""

    finite_strain = False

    def __init__(self, params: MaterialParams):
        self.params = params

    def initial_state(self, n: int) -> MaterialPointState:
        return MaterialPointState.virgin(n)

    def respond(self, state: MaterialPointState, grad_old: np.ndarray,
                grad_new: np.ndarray) -> ModelResponse:
        d = grad_new.shape[-1]
        eps = np.zeros(grad_new.shape[:-2] + (3, 3))
        eps[..., :d, :d] = 0.5 * (grad_new + np.swapaxes(grad_new, -1, -2))
        psi, _ = helmholtz_energy(MaterialPointState.virgin(), eps, self.params)
        Pfull = (self.params.lam * np.trace(eps, axis1=-2, axis2=-1)[..., None, None] * I3
                 + 2.0 * self.params.mu * eps)
        idx = in_plane_indices(d)
        C = self.params.elastic_modulus()[idx[:, None], idx[None, :]]
        A = np.broadcast_to(C, grad_new.shape[:-2] + C.shape)
        return ModelResponse(state, Pfull[..., :d, :d], A, psi,
                             np.zeros(grad_new.shape[:-2], dtype=bool), Pfull)


def with_params(model, **changes):
    return type(model)(replace(model.params, **changes))

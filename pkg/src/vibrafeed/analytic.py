"""Closed-form stationary moments of the fed-back mode and an independent oracle.

The effective-bath master equation is linear, so its stationary state is
Gaussian with normally ordered moments zeta = <a^dag a> and mu = <a^2>.
``steady_moments`` evaluates the closed form; ``moment_ode_oracle`` instead
reads the moment equations off the generator numerically and solves them,
without reference to the closed form.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .fock import DensityMatrix, FockBasis, dim_for_tail, lowering_op
from .liouville import (
    UnphysicalBathWarning,
    build_feedback_me,
    build_general_fb_me,
    padded_ladder,
)
from .params import DerivedCoeffs, FeedbackParams, ParameterError, derived_coeffs

__all__ = [
    "DerivedCoeffs",
    "FeedbackParams",
    "MomentDrift",
    "ParameterError",
    "Stability",
    "SteadyMoments",
    "cavity_chi",
    "derived_coeffs",
    "effective_occupation",
    "fock_moments",
    "moment_drift",
    "moment_ode_oracle",
    "optimal_phi",
    "quadrature_variance",
    "random_params",
    "stability_check",
    "steady_dim",
    "steady_moments",
    "thermal_occupation",
]


class Stability(str, enum.Enum):
    STABLE = "stable"
    UNSTABLE = "unstable"
    MARGINAL = "marginal"


@dataclass(frozen=True)
class SteadyMoments:
    zeta: float
    mu: complex

    @property
    def n_eff(self) -> float:
        return self.zeta + self.mu.real


# moment vector order for the drift matrix
MOMENTS = ("a", "a+", "a+a", "aa", "a+a+")
_POLY = ("1",) + MOMENTS
# index map for complex conjugation of a polynomial: a <-> a+, aa <-> a+a+
_CONJ = (0, 2, 1, 3, 5, 4)
_PROBE_DIM = 6


@dataclass(frozen=True)
class MomentDrift:
    """d m/dt = J m + b for m = (<a>, <a^dag>, <a^dag a>, <a^2>, <a^dag 2>)."""

    J: np.ndarray
    b: np.ndarray
    residual: float

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvals(self.J)


def _probe_generator(p: FeedbackParams):
    basis = FockBasis(_PROBE_DIM)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UnphysicalBathWarning)
        try:
            return build_feedback_me(p, basis)
        except ParameterError:
            if p.g != 0 and p.chi2_over_kappa == 0:
                raise
            # Gamma = 0: the rearranged form divides by Gamma, the raw form does not
            return build_general_fb_me(p, basis)


@lru_cache(maxsize=4096)
def moment_drift(p: FeedbackParams) -> MomentDrift:
    """Moment equations read off the generator by probing it with |j><k|.

    Tr(A G(|j><k|)) = <k| G^dag(A) |j>, so probing all j, k < 6 gives the
    adjoint generator applied to A on a block where the padded evaluation is
    exact. It is fitted against {1, a, a^dag, a^dag a, a^2, a^dag 2}; the fit
    residual certifies that the moment hierarchy closes at second order.
    """
    gen = _probe_generator(p)
    d = _PROBE_DIM
    units = np.eye(d * d, dtype=complex).reshape(d * d, d, d)
    out = gen.apply_padded(units)
    a, ad = padded_ladder(d)
    I = np.eye(a.shape[0])
    ops = {"1": I, "a": a, "a+": ad, "a+a": ad @ a, "aa": a @ a, "a+a+": ad @ ad}
    design = np.stack([ops[k][:d, :d].reshape(-1) for k in _POLY], axis=1)
    rows = {}
    worst = 0.0
    for target in ("a", "a+a", "aa"):
        adj = np.einsum("ij,nji->n", ops[target], out).reshape(d, d).T
        coef, *_ = np.linalg.lstsq(design, adj.reshape(-1), rcond=None)
        resid = np.max(np.abs(design @ coef - adj.reshape(-1)))
        worst = max(worst, resid / max(1.0, np.max(np.abs(adj))))
        rows[target] = coef
    if worst > 1e-9:
        raise ParameterError(f"moment hierarchy does not close at second order (residual {worst:.2e})")
    rows["a+"] = np.conj(rows["a"])[list(_CONJ)]
    rows["a+a+"] = np.conj(rows["aa"])[list(_CONJ)]
    full = np.array([rows[k] for k in MOMENTS])
    J = full[:, 1:].copy()
    b = full[:, 0].copy()
    J.setflags(write=False)
    b.setflags(write=False)
    return MomentDrift(J, b, float(worst))


def stability_check(p: FeedbackParams, tol: float = 1e-10) -> Stability:
    """Hurwitz test on the first- and second-moment drift matrix.

    Analytically the eigenvalues are -(Gamma -/+ g sin phi)/2 for the first
    moments and -Gamma, -Gamma -/+ g sin phi for the second, so stability is
    Gamma > |g sin phi|, i.e. gamma > g sin(phi) + |g sin(phi)|.
    """
    J = moment_drift(p).J
    scale = max(1.0, float(np.max(np.abs(J))))
    lead = float(np.max(np.linalg.eigvals(J).real))
    if lead < -tol * scale:
        return Stability.STABLE
    if lead > tol * scale:
        return Stability.UNSTABLE
    return Stability.MARGINAL


def moment_ode_oracle(p: FeedbackParams) -> tuple[float, complex]:
    """Stationary (<a^dag a>, <a^2>) from the generator's own moment equations."""
    drift = moment_drift(p)
    J, b = drift.J, drift.b
    if np.max(np.abs(J[2:, :2])) > 1e-12 * max(1.0, np.max(np.abs(J))) or np.max(np.abs(b[:2])) > 1e-12:
        raise ParameterError("second moments couple to first moments; not a centred Gaussian bath")
    # real unknowns (zeta, Re mu, Im mu); (zeta, mu, conj mu) = T w
    T = np.array([[1, 0, 0], [0, 1, 1j], [0, 1, -1j]])
    JT = J[2:, 2:] @ T
    A = np.array([JT[0].real, JT[1].real, JT[1].imag])
    rhs = -np.array([b[2].real, b[3].real, b[3].imag])
    if abs(np.linalg.det(A)) < 1e-14 * max(1.0, np.max(np.abs(A))) ** 3:
        raise ParameterError("singular moment equations (marginal stability)")
    zeta, x, y = np.linalg.solve(A, rhs)
    return float(zeta), complex(x, y)


def steady_moments(p: FeedbackParams) -> SteadyMoments:
    """Stationary Gaussian moments.

    With s = g sin(phi) and Q = N s + Gamma Re M + s/2,
        zeta = N + s Q / (Gamma^2 - s^2),
        Re mu = (Gamma/s)(zeta - N) = Gamma Q / (Gamma^2 - s^2),
        Im mu = Im M.
    The Re mu line is evaluated with s cancelled, so s = 0 needs no special
    case and gives zeta = N, mu = M.
    """
    state = stability_check(p)
    if state is not Stability.STABLE:
        raise ParameterError(f"stability_check reports {state.value}; no stationary state")
    s = p.feedback_drive
    co = derived_coeffs(p)
    G, N, M = co.Gamma, co.N, co.M
    den = G * G - s * s
    if den == 0:
        raise ParameterError("degenerate parameters: Gamma^2 = (g sin phi)^2")
    Q = N * s + G * M.real + 0.5 * s
    zeta = N + s * Q / den
    return SteadyMoments(zeta, complex(G * Q / den, M.imag))


def quadrature_variance(m: SteadyMoments, theta: float) -> float:
    """4 <X_theta^2> = 1 + 2 zeta + 2 Re(mu e^{2 i theta})."""
    return 1.0 + 2.0 * m.zeta + 2.0 * (m.mu * complex(math.cos(2 * theta), math.sin(2 * theta))).real


def effective_occupation(p: FeedbackParams) -> float:
    """n_eff with 4 <X^2> = 1 + 2 n_eff; equals n without feedback, can dip below 0."""
    return steady_moments(p).n_eff


def optimal_phi(p: FeedbackParams, grid: int = 721) -> tuple[float, float]:
    """Scan phi on the uniform grid -pi + 2 pi k/grid, k = 1..grid; return the stable argmin of n_eff."""
    best = None
    for k in range(1, grid + 1):
        phi = -math.pi + 2 * math.pi * k / grid
        q = p.with_(phi=phi)
        try:
            if stability_check(q) is not Stability.STABLE:
                continue
            value = effective_occupation(q)
        except ParameterError:
            continue
        if best is None or value < best[1]:
            best = (phi, value)
    if best is None:
        raise ParameterError("no stable phase on the grid")
    return best


def thermal_occupation(nu: float, T: float, hbar_over_kB: float = 1.0) -> float:
    if T <= 0:
        raise ValueError(f"temperature must be > 0, got {T}")
    if nu <= 0:
        raise ValueError(f"trap frequency must be > 0, got {nu}")
    x = hbar_over_kB * nu / T
    return 1.0 / math.expm1(x) if x < 700 else 0.0


def cavity_chi(beta: float, kbar: float, epsilon: float, Delta: float) -> float:
    """Coupling of the linearized cavity meter, -4 beta kbar epsilon^2 / Delta."""
    if Delta == 0:
        raise ValueError("detuning Delta must be nonzero")
    return -4.0 * beta * kbar * epsilon**2 / Delta


def fock_moments(rho: DensityMatrix) -> tuple[float, complex]:
    a = lowering_op(rho.basis).matrix
    r = rho.matrix
    zeta = float(np.real(np.sum((a.conj().T @ a).T * r)))
    mu = complex(np.sum((a @ a).T * r))
    return zeta, mu


def steady_dim(p: FeedbackParams, tail: float = 1e-8) -> int:
    """Fock dimension leaving less than ``tail`` of the stationary state above the cutoff."""
    m = steady_moments(p)
    return dim_for_tail(m.zeta + abs(m.mu), tail)


def random_params(rng: np.random.Generator, stable_only: bool = True, max_tries: int = 10_000) -> FeedbackParams:
    """Draw from the property-test distribution.

    gamma in [0.1, 10], chi^2/kappa in [0.01, 10] and g in [0.01, 10] are
    log-uniform (g set to 0 one time in ten), phi uniform on (-pi, pi],
    eta uniform on [0.1, 1], n uniform on [0, 5]; kappa = 1.
    """
    for _ in range(max_tries):
        gamma = 10 ** rng.uniform(-1, 1)
        c = 10 ** rng.uniform(-2, 1)
        g = 0.0 if rng.random() < 0.1 else 10 ** rng.uniform(-2, 1)
        phi = math.pi - 2 * math.pi * rng.random()
        eta = rng.uniform(0.1, 1.0)
        n = rng.uniform(0.0, 5.0)
        p = FeedbackParams.reduced(gamma, n, c, eta=eta, g=g, phi=phi)
        if not stable_only:
            return p
        try:
            if stability_check(p) is Stability.STABLE:
                return p
        except ParameterError:
            continue
    raise RuntimeError("no stable parameter set drawn")

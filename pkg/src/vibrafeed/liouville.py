"""Master-equation generators for the damped, measured and fed-back mode.

Generators are evaluated on the Fock basis padded by ``PAD`` extra levels.
Every generator here is at most quadratic in a, a^dag on each side of rho,
so for a state supported on the first d levels the padded products equal
the infinite-dimensional ones. The result is then restricted to the first
d levels and the population that crossed the cutoff is returned to the top
retained level. That keeps the generator trace preserving, and two
generators that agree as infinite-dimensional operators (for instance the
feedback master equation in its raw and rearranged forms) agree exactly on
the truncated space.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fock import DensityMatrix, FockBasis, ProductBasis, thermal_state
from .params import FeedbackParams, ParameterError, derived_coeffs

log = logging.getLogger(__name__)

PAD = 2
TOP_POPULATION_WARN = 1e-6


class IntegrationError(RuntimeError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


class TruncationWarning(RuntimeWarning):
    pass


class UnphysicalBathWarning(RuntimeWarning):
    pass


@lru_cache(maxsize=64)
def padded_ladder(dim: int) -> tuple[np.ndarray, np.ndarray]:
    """(a, a^dag) on dim + PAD levels."""
    D = dim + PAD
    a = np.diag(np.sqrt(np.arange(1, D, dtype=float)), 1).astype(complex)
    a.setflags(write=False)
    ad = a.T.copy()
    ad.setflags(write=False)
    return a, ad


def _dag(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2).conj()


def _comm(A: np.ndarray, r: np.ndarray) -> np.ndarray:
    return A @ r - r @ A


def _thermal_terms(gamma: float, n: float, a: np.ndarray, ad: np.ndarray) -> Callable:
    ada = ad @ a
    aad = a @ ad
    down = 0.5 * gamma * (n + 1)
    up = 0.5 * gamma * n

    def rhs(r):
        out = down * (2 * a @ r @ ad - ada @ r - r @ ada)
        if up:
            out = out + up * (2 * ad @ r @ a - aad @ r - r @ aad)
        return out

    return rhs


class MasterEquationGenerator:
    """Linear map rho -> d rho/dt on a fixed truncated basis.

    ``rhs`` acts on padded arrays (any leading batch axes). Instances are
    not mutated after construction apart from the lazily cached matrix form.
    """

    def __init__(
        self,
        basis: FockBasis | ProductBasis,
        rhs: Callable[[np.ndarray], np.ndarray],
        metadata: dict | None = None,
        warnings: tuple[str, ...] = (),
        name: str = "",
    ):
        self.basis = basis
        self.mode = basis.mode if isinstance(basis, ProductBasis) else basis
        self.meter_dim = basis.meter_dim if isinstance(basis, ProductBasis) else 1
        self.rhs = rhs
        self.metadata = dict(metadata or {})
        self.warnings = tuple(warnings)
        self.name = name
        self._super = None
        self._sparse = None

    def __repr__(self):
        return f"MasterEquationGenerator({self.name!r}, dim={self.basis.dim})"

    def _shape4(self, padded: bool) -> tuple[int, int, int, int]:
        d = self.mode.dim + (PAD if padded else 0)
        return (self.meter_dim, d, self.meter_dim, d)

    def embed(self, rho: np.ndarray) -> np.ndarray:
        batch = rho.shape[:-2]
        m, d = self.meter_dim, self.mode.dim
        r4 = rho.reshape(batch + (m, d, m, d))
        out = np.zeros(batch + self._shape4(True), dtype=complex)
        out[..., :, :d, :, :d] = r4
        D = m * (d + PAD)
        return out.reshape(batch + (D, D))

    def fold(self, out: np.ndarray) -> np.ndarray:
        batch = out.shape[:-2]
        m, d = self.meter_dim, self.mode.dim
        o4 = out.reshape(batch + self._shape4(True))
        kept = o4[..., :, :d, :, :d].copy()
        # trace over the overflow levels, per meter block
        spill = np.einsum("...ikjk->...ij", o4[..., :, d:, :, d:])
        kept[..., :, d - 1, :, d - 1] += spill
        return kept.reshape(batch + (m * d, m * d))

    def apply_padded(self, rho) -> np.ndarray:
        """Exact (infinite-dimensional) action, returned on the padded basis."""
        rho = rho.matrix if isinstance(rho, DensityMatrix) else np.asarray(rho, dtype=complex)
        return self.rhs(self.embed(rho))

    def __call__(self, rho) -> np.ndarray:
        rho = rho.matrix if isinstance(rho, DensityMatrix) else np.asarray(rho, dtype=complex)
        return self.fold(self.rhs(self.embed(rho)))

    def superoperator(self) -> np.ndarray:
        """Matrix S with vec(G(rho)) = S vec(rho), vec being row-major flattening."""
        if self._super is None:
            n = self.basis.dim
            units = np.eye(n * n, dtype=complex).reshape(n * n, n, n)
            S = self(units).reshape(n * n, n * n).T.copy()
            S.setflags(write=False)
            self._super = S
        return self._super

    def _reach(self) -> int:
        """Largest mode-index shift the padded rhs produces from a single |i><j|."""
        m, d = self.meter_dim, self.mode.dim
        i0 = d // 2
        reach = 0
        for a in range(m):
            for b in range(m):
                unit = np.zeros(self._shape4(False), dtype=complex)
                unit[a, i0, b, i0] = 1.0
                out = self.rhs(self.embed(unit.reshape(m * d, m * d))).reshape(self._shape4(True))
                _, k, _, l = np.nonzero(np.abs(out) > 0)
                if k.size:
                    reach = max(reach, int(np.max(np.abs(k - i0))), int(np.max(np.abs(l - i0))))
        return reach

    def sparse_superoperator(self) -> sp.csr_matrix:
        """``superoperator()`` assembled without forming the dense matrix.

        Units |i><j| whose mode indices agree modulo 2w+1 (w = reach of the
        rhs) have disjoint output windows, so they are probed together; the
        folded overflow stays inside the window of the single unit of each
        group that touches the top levels. The result is checked against the
        callable on random inputs.
        """
        if self._sparse is None:
            m, d = self.meter_dim, self.mode.dim
            n = m * d
            q = 2 * self._reach() + 1
            rows, cols, vals = [], [], []
            idx = np.arange(n).reshape(m, d)
            for ri in range(min(q, d)):
                for rj in range(min(q, d)):
                    I, J = np.arange(ri, d, q), np.arange(rj, d, q)
                    probes = np.zeros((m * m, m, d, m, d), dtype=complex)
                    for a in range(m):
                        for b in range(m):
                            probes[a * m + b, a, I[:, None], b, J[None, :]] = 1.0
                    outs = self(probes.reshape(m * m, n, n)).reshape(m * m, m, d, m, d)
                    for a in range(m):
                        for b in range(m):
                            out = outs[a * m + b]
                            for i in I:
                                k_lo, k_hi = max(0, i - q // 2), min(d, i + q // 2 + 1)
                                for j in J:
                                    l_lo, l_hi = max(0, j - q // 2), min(d, j + q // 2 + 1)
                                    win = out[:, k_lo:k_hi, :, l_lo:l_hi]
                                    nz = np.nonzero(win)
                                    if not nz[0].size:
                                        continue
                                    rk = idx[nz[0], nz[1] + k_lo]
                                    cl = idx[nz[2], nz[3] + l_lo]
                                    rows.append(rk * n + cl)
                                    cols.append(np.full(rk.size, idx[a, i] * n + idx[b, j]))
                                    vals.append(win[nz])
            S = sp.csr_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n * n, n * n)
            )
            rng = np.random.default_rng(0)
            probe = rng.standard_normal((3, n, n)) + 1j * rng.standard_normal((3, n, n))
            ref = self(probe).reshape(3, -1)
            got = (S @ probe.reshape(3, -1).T).T
            if np.max(np.abs(got - ref)) > 1e-12 * max(1.0, float(np.max(np.abs(ref)))):
                S = sp.csr_matrix(self.superoperator())
            self._sparse = S
        return self._sparse

    def max_rate(self) -> float:
        """Largest absolute column sum of the superoperator (its 1-norm)."""
        S = self.sparse_superoperator()
        return float(np.asarray(abs(S).sum(axis=0)).max())


def thermal_lindblad(gamma: float, n: float, basis: FockBasis) -> MasterEquationGenerator:
    """Quantum-optical damping at rates gamma (n+1) (emission) and gamma n (absorption)."""
    a, ad = padded_ladder(basis.dim)
    return MasterEquationGenerator(
        basis, _thermal_terms(gamma, n, a, ad), {"gamma": gamma, "n": n}, name="thermal"
    )


def _detuning_term(delta: float, a, ad):
    num = ad @ a
    return lambda r: -1j * delta * _comm(num, r)


def build_measurement_me(params: FeedbackParams, basis: FockBasis) -> MasterEquationGenerator:
    """Averaged dynamics of the monitored mode without feedback: L rho - (chi^2/2 kappa)[X,[X,rho]]."""
    a, ad = padded_ladder(basis.dim)
    X = 0.5 * (a + ad)
    L = _thermal_terms(params.gamma, params.n, a, ad)
    c = params.chi2_over_kappa

    def rhs(r):
        return L(r) - 0.5 * c * _comm(X, _comm(X, r))

    return MasterEquationGenerator(basis, rhs, params.as_dict(), name="measurement")


def build_general_fb_me(
    params: FeedbackParams, basis: FockBasis, detuning: float = 0.0
) -> MasterEquationGenerator:
    """Feedback master equation written term by term.

    L rho - (c/2)[X,[X,rho]] + K(i e^{i phi} rho X - i e^{-i phi} X rho) + K^2 rho / (2 eta c)
    with c = chi^2/kappa and K rho = (g/2)[a - a^dag, rho].
    """
    c = params.chi2_over_kappa
    if params.g != 0 and c == 0:
        raise ParameterError("feedback with chi = 0: the feedback diffusion term diverges")
    a, ad = padded_ladder(basis.dim)
    X = 0.5 * (a + ad)
    B = a - ad
    L = _thermal_terms(params.gamma, params.n, a, ad)
    g = params.g
    e = np.exp(1j * params.phi)
    diffusion = (0.5 * g) ** 2 / (2 * params.eta * c) if g else 0.0
    extra = _detuning_term(detuning, a, ad) if detuning else None

    def rhs(r):
        out = L(r) - 0.5 * c * _comm(X, _comm(X, r))
        if g:
            out = out + 0.5 * g * _comm(B, 1j * e * (r @ X) - 1j * np.conj(e) * (X @ r))
            out = out + diffusion * _comm(B, _comm(B, r))
        if extra is not None:
            out = out + extra(r)
        return out

    meta = params.as_dict() | {"detuning": detuning}
    return MasterEquationGenerator(basis, rhs, meta, name="feedback-general")


def build_feedback_me(
    params: FeedbackParams, basis: FockBasis, detuning: float = 0.0
) -> MasterEquationGenerator:
    """Effective phase-sensitive bath plus squeezing drive.

    Gamma(N+1) D[a] + Gamma N D[a^dag] - Gamma M (a^dag squeeze term)
    - Gamma M* (a squeeze term) - (g/4) sin(phi) [a^2 - a^dag^2, rho],
    with the dissipators in the 2 c rho c^dag - c^dag c rho - rho c^dag c form.
    """
    co = derived_coeffs(params)
    G, N, M = co.Gamma, co.N, co.M
    a, ad = padded_ladder(basis.dim)
    a2, ad2 = a @ a, ad @ ad
    ada, aad = ad @ a, a @ ad
    sq = a2 - ad2
    drive = 0.25 * params.g * math.sin(params.phi)
    extra = _detuning_term(detuning, a, ad) if detuning else None

    def rhs(r):
        out = 0.5 * G * (N + 1) * (2 * a @ r @ ad - ada @ r - r @ ada)
        out = out + 0.5 * G * N * (2 * ad @ r @ a - aad @ r - r @ aad)
        out = out - 0.5 * G * M * (2 * ad @ r @ ad - ad2 @ r - r @ ad2)
        out = out - 0.5 * G * np.conj(M) * (2 * a @ r @ a - a2 @ r - r @ a2)
        out = out - drive * _comm(sq, r)
        if extra is not None:
            out = out + extra(r)
        return out

    notes = []
    if not co.is_physical():
        msg = (
            f"|M|^2 = {abs(M) ** 2:.6g} exceeds N(N+1) = {N * (N + 1):.6g}: "
            "not a physical squeezed bath, steady state may lose positivity"
        )
        notes.append(msg)
        warnings.warn(msg, UnphysicalBathWarning, stacklevel=2)
    meta = params.as_dict() | {"Gamma": G, "N": N, "M": M, "detuning": detuning}
    return MasterEquationGenerator(basis, rhs, meta, tuple(notes), name="feedback-effective")


@dataclass(frozen=True)
class JointModel:
    """Two-level meter coupled to the mode through chi (sigma_+ + sigma_-) X / 2."""

    mode: FockBasis
    Delta: float
    nu: float
    chi: float
    kappa: float
    gamma: float
    n: float
    meter_dim: int = field(default=2)

    def __post_init__(self):
        if self.meter_dim != 2:
            raise ParameterError("only a two-level meter is supported")
        if self.kappa <= 0:
            raise ParameterError(f"kappa must be > 0, got {self.kappa}")
        if self.chi > 0 and self.kappa / self.chi < 10:
            warnings.warn(
                f"kappa/chi = {self.kappa / self.chi:.3g} < 10: adiabatic elimination not justified",
                RuntimeWarning,
                stacklevel=2,
            )

    @property
    def basis(self) -> ProductBasis:
        return ProductBasis(self.meter_dim, self.mode)


SIGMA_MINUS = np.array([[0, 1], [0, 0]], dtype=complex)  # |g><e|, ground = index 0
SIGMA_Z = np.diag([-1.0, 1.0]).astype(complex)


def build_joint_model(jm: JointModel) -> MasterEquationGenerator:
    a, ad = padded_ladder(jm.mode.dim)
    D = a.shape[0]
    I_m, I_f = np.eye(2), np.eye(D)
    sm = np.kron(SIGMA_MINUS, I_f)
    sp = sm.conj().T
    spsm = sp @ sm
    H = (
        jm.Delta * np.kron(SIGMA_Z, I_f)
        + jm.nu * np.kron(I_m, ad @ a)
        + 0.5 * jm.chi * np.kron(SIGMA_MINUS + SIGMA_MINUS.T, 0.5 * (a + ad))
    )
    A, Ad = np.kron(I_m, a), np.kron(I_m, ad)
    L = _thermal_terms(jm.gamma, jm.n, A, Ad)
    half_k = 0.5 * jm.kappa

    def rhs(r):
        out = -1j * _comm(H, r) + half_k * (2 * sm @ r @ sp - spsm @ r - r @ spsm)
        return out + L(r)

    meta = {k: getattr(jm, k) for k in ("Delta", "nu", "chi", "kappa", "gamma", "n")}
    return MasterEquationGenerator(jm.basis, rhs, meta, name="joint")


def trace_out_meter(D: DensityMatrix | np.ndarray, mode: FockBasis, meter_dim: int = 2) -> np.ndarray:
    M = D.matrix if isinstance(D, DensityMatrix) else np.asarray(D)
    d = mode.dim
    return np.einsum("ikil->kl", M.reshape(meter_dim, d, meter_dim, d))


def trace_out_mode(D: DensityMatrix | np.ndarray, mode: FockBasis, meter_dim: int = 2) -> np.ndarray:
    M = D.matrix if isinstance(D, DensityMatrix) else np.asarray(D)
    d = mode.dim
    return np.einsum("ikjk->ij", M.reshape(meter_dim, d, meter_dim, d))


def trace_distance(r1, r2) -> float:
    r1 = r1.matrix if isinstance(r1, DensityMatrix) else np.asarray(r1)
    r2 = r2.matrix if isinstance(r2, DensityMatrix) else np.asarray(r2)
    diff = r1 - r2
    diff = 0.5 * (diff + diff.conj().T)
    return 0.5 * float(np.abs(np.linalg.eigvalsh(diff)).sum())


# -- integration -------------------------------------------------------------


@dataclass
class Evolution:
    times: np.ndarray
    states: list[np.ndarray]
    trace_drift: float
    top_population: float

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def _top_population(gen: MasterEquationGenerator, rho: np.ndarray) -> float:
    m, d = gen.meter_dim, gen.mode.dim
    r4 = rho.reshape(m, d, m, d)
    return float(np.real(np.einsum("ii->", r4[:, d - 1, :, d - 1])))


def integrate(
    gen: MasterEquationGenerator,
    rho0: DensityMatrix | np.ndarray,
    t_final: float,
    dt: float,
    record_every: int = 0,
) -> Evolution:
    """Fixed-step RK4 with per-step Hermitization and trace renormalization.

    ``trace_drift`` accumulates |Tr rho - 1| removed by the renormalization.
    A TruncationWarning fires once if the top retained level's population
    exceeds TOP_POPULATION_WARN.
    """
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    if t_final < 0:
        raise ValueError(f"t_final must be >= 0, got {t_final}")
    rho = np.array(rho0.matrix if isinstance(rho0, DensityMatrix) else rho0, dtype=complex)
    steps = math.ceil(t_final / dt - 1e-12) if t_final > 0 else 0
    h = t_final / steps if steps else 0.0
    times, states = [0.0], [rho.copy()]
    drift = 0.0
    top = _top_population(gen, rho)
    warned = False
    for k in range(1, steps + 1):
        k1 = gen(rho)
        k2 = gen(rho + 0.5 * h * k1)
        k3 = gen(rho + 0.5 * h * k2)
        k4 = gen(rho + h * k3)
        rho = rho + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        rho = 0.5 * (rho + rho.conj().T)
        tr = np.trace(rho).real
        if not np.isfinite(rho).all() or not math.isfinite(tr) or tr <= 0:
            raise IntegrationError(
                f"non-finite state at t = {k * h:.6g}: reduce dt or check stability of the parameters"
            )
        drift += abs(tr - 1.0)
        rho /= tr
        p_top = _top_population(gen, rho)
        top = max(top, p_top)
        if p_top > TOP_POPULATION_WARN and not warned:
            warnings.warn(
                f"population {p_top:.3e} in top Fock level at t = {k * h:.6g}; truncation is too small",
                TruncationWarning,
                stacklevel=2,
            )
            warned = True
        if record_every and k % record_every == 0 and k != steps:
            times.append(k * h)
            states.append(rho.copy())
    if steps:
        times.append(steps * h)
        states.append(rho.copy())
    log.debug("integrated %s for t=%g: drift %.3e, top population %.3e", gen.name, t_final, drift, top)
    return Evolution(np.array(times), states, drift, top)


def evolve(
    gen: MasterEquationGenerator, rho0: DensityMatrix, t_final: float, dt: float
) -> DensityMatrix:
    res = integrate(gen, rho0, t_final, dt)
    return DensityMatrix.from_array(gen.basis, res.final, check_positive=False)


def rk4_propagator(gen: MasterEquationGenerator, h: float) -> np.ndarray:
    """One RK4 step as a matrix acting on row-major vec(rho)."""
    S = gen.superoperator() * h
    n = S.shape[0]
    P = np.eye(n, dtype=complex)
    term = np.eye(n, dtype=complex)
    for k in range(1, 5):
        term = term @ S / k
        P = P + term
    return P


def _vec_to_state(gen, v) -> np.ndarray:
    n = gen.basis.dim
    rho = v.reshape(n, n)
    rho = 0.5 * (rho + rho.conj().T)
    return rho / np.trace(rho).real


def propagate(
    gen: MasterEquationGenerator, rho0: DensityMatrix | np.ndarray, t_final: float, dt: float
) -> np.ndarray:
    """RK4 with m = ceil(t_final/dt) equal steps, applied as P^m by binary powering.

    Equal to ``integrate`` up to roundoff (the per-step projections are
    identities in exact arithmetic) but costs O(log m) matrix products, which
    pays off for stiff generators such as the meter-plus-mode model.
    """
    rho = np.asarray(rho0.matrix if isinstance(rho0, DensityMatrix) else rho0, dtype=complex)
    if t_final == 0:
        return rho.copy()
    m = math.ceil(t_final / dt - 1e-12)
    P = rk4_propagator(gen, t_final / m)
    v = rho.reshape(-1).copy()
    while m:
        if m & 1:
            v = P @ v
        m >>= 1
        if m:
            P = P @ P
    if not np.isfinite(v).all():
        raise IntegrationError("non-finite state: reduce dt or check stability of the parameters")
    return _vec_to_state(gen, v)


def steady_state(
    gen: MasterEquationGenerator,
    rho0: DensityMatrix | np.ndarray | None = None,
    tol: float = 1e-10,
    t_max: float = 1e7,
) -> DensityMatrix:
    """Evolve until max |d rho/dt| < tol.

    Time steps are implicit Euler, (1 - h S) v' = v, solved with a sparse LU
    of the superoperator. The step grows by a factor 8 per iteration; the
    scheme is unconditionally stable and its fixed points are exactly the null
    space of the generator, so large steps reach stationarity in a handful of
    factorizations even for wide truncations.
    """
    if rho0 is None:
        n = gen.metadata.get("n", 0.0)
        rho0 = thermal_state(gen.mode, n).matrix
        if gen.meter_dim > 1:
            ground = np.zeros((gen.meter_dim, gen.meter_dim))
            ground[0, 0] = 1.0
            rho0 = np.kron(ground, rho0)
    rho = np.asarray(rho0.matrix if isinstance(rho0, DensityMatrix) else rho0, dtype=complex)
    S = gen.sparse_superoperator().tocsc()
    eye = sp.identity(S.shape[0], dtype=complex, format="csc")
    h = 1.0 / gen.max_rate()
    t = 0.0
    residual = float(np.max(np.abs(gen(rho))))
    while residual >= tol:
        if t > t_max:
            raise ConvergenceError(f"no steady state within t = {t_max:g}", residual)
        try:
            v = spla.splu(eye - h * S).solve(rho.reshape(-1))
        except RuntimeError as exc:
            raise ConvergenceError(f"implicit step failed: {exc}", residual) from exc
        t += h
        h *= 8
        if not np.isfinite(v).all():
            raise ConvergenceError("state diverged while seeking steady state (unstable parameters?)", math.inf)
        rho = _vec_to_state(gen, v)
        residual = float(np.max(np.abs(gen(rho))))
    log.debug("steady state of %s reached at t=%.3g, residual %.2e", gen.name, t, residual)
    return DensityMatrix.from_array(gen.basis, rho, check_positive=False)

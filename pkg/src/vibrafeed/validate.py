"""Cross-checks between the analytic, master-equation and joint-model layers.

Each check returns a ``CheckResult``; the CLI ``validate`` mode and the
acceptance tests share these routines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .analytic import Stability, fock_moments, moment_ode_oracle, stability_check, steady_dim, steady_moments
from .fock import FockBasis, coherent_state
from .liouville import (
    JointModel,
    build_feedback_me,
    build_general_fb_me,
    build_joint_model,
    build_measurement_me,
    propagate,
    steady_state,
    trace_distance,
    trace_out_meter,
)
from .params import FeedbackParams

AE_RATIOS = (25.0, 50.0, 100.0)


@dataclass(frozen=True)
class CheckResult:
    name: str
    value: float
    tolerance: float
    passed: bool
    detail: str = ""


def random_hermitian_states(rng: np.random.Generator, dim: int, count: int) -> np.ndarray:
    """Hermitian unit-trace matrices with Gaussian entries (not necessarily positive)."""
    z = rng.standard_normal((count, dim, dim)) + 1j * rng.standard_normal((count, dim, dim))
    h = 0.5 * (z + np.conj(np.swapaxes(z, -1, -2)))
    tr = np.einsum("bii->b", h).real
    # keep the trace away from zero before normalizing
    h = h + np.eye(dim) * (np.sign(tr) * dim - tr)[:, None, None] / dim
    return h / np.einsum("bii->b", h).real[:, None, None]


def generator_gap(p: FeedbackParams, rhos: np.ndarray, dim: int) -> float:
    """max |G_raw(rho) - G_bath(rho)| relative to max(1, max |G_raw(rho)|)."""
    basis = FockBasis(dim)
    raw = build_general_fb_me(p, basis)(rhos)
    bath = build_feedback_me(p, basis)(rhos)
    return float(np.max(np.abs(raw - bath)) / max(1.0, np.max(np.abs(raw))))


def check_generator_identity(p: FeedbackParams, rng: np.random.Generator, dim: int = 12, count: int = 20,
                             tol: float = 1e-12) -> CheckResult:
    gap = generator_gap(p, random_hermitian_states(rng, dim, count), dim)
    return CheckResult("generator_identity", gap, tol, gap <= tol)


def moment_gap(p: FeedbackParams) -> float:
    """Relative disagreement between the closed form and the moment-ODE oracle."""
    m = steady_moments(p)
    zeta, mu = moment_ode_oracle(p)
    scale = max(abs(m.zeta), abs(m.mu), 1e-300)
    return max(abs(m.zeta - zeta), abs(m.mu - mu)) / scale


def check_closed_form(p: FeedbackParams, tol: float = 1e-10) -> CheckResult:
    gap = moment_gap(p)
    return CheckResult("closed_form_vs_oracle", gap, tol, gap <= tol)


def fock_gap(p: FeedbackParams, dim: int | None = None, tail: float = 1e-8) -> tuple[float, int]:
    """max(|dzeta|, |dmu|) between the Fock steady state and the closed form."""
    d = dim or steady_dim(p, tail)
    rho = steady_state(build_feedback_me(p, FockBasis(d)))
    zeta, mu = fock_moments(rho)
    m = steady_moments(p)
    return max(abs(zeta - m.zeta), abs(mu - m.mu)), d


def check_fock(p: FeedbackParams, dim: int | None = None, tol: float = 1e-5) -> CheckResult:
    gap, d = fock_gap(p, dim)
    return CheckResult("fock_vs_closed_form", gap, tol, gap <= tol, f"dim={d}")


def adiabatic_distances(c: float, gamma: float, n: float, ratios=AE_RATIOS, dim: int = 16,
                        t: float = 1.0, alpha: float = 1.0) -> np.ndarray:
    """Trace distance at time t between the traced-out joint model and the reduced dynamics.

    For each r in ``ratios``: chi = c r, kappa = chi r, so chi^2/kappa = c
    stays fixed while chi/kappa = 1/r shrinks. Detuning and trap frequency
    are zero; the meter starts in its ground state, the mode in a coherent
    state of amplitude ``alpha``.
    """
    basis = FockBasis(dim)
    rho0 = np.array(coherent_state(basis, alpha).matrix)
    reduced = build_measurement_me(FeedbackParams.reduced(gamma, n, c), basis)
    target = propagate(reduced, rho0, t, min(1e-3, 0.2 / max(reduced.max_rate(), 1e-300)))
    ground = np.diag([1.0, 0.0])
    out = []
    for r in ratios:
        chi = c * r
        kappa = chi * r
        joint = build_joint_model(JointModel(basis, 0.0, 0.0, chi, kappa, gamma, n))
        D = propagate(joint, np.kron(ground, rho0), t, 0.2 / kappa)
        out.append(trace_distance(trace_out_meter(D, basis), target))
    return np.array(out)


def scaling_exponent(ratios, distances) -> float:
    """Slope of log(distance) against log(chi/kappa)."""
    return float(np.polyfit(np.log(1.0 / np.asarray(ratios)), np.log(distances), 1)[0])


def check_adiabatic(c: float, gamma: float, n: float, dim: int = 16, band=(1.6, 2.4)) -> CheckResult:
    dist = adiabatic_distances(c, gamma, n, dim=dim)
    slope = scaling_exponent(AE_RATIOS, dist)
    ok = band[0] <= slope <= band[1]
    detail = " ".join(f"{r:g}:{x:.3e}" for r, x in zip(AE_RATIOS, dist))
    return CheckResult("adiabatic_exponent", slope, band[1] - 2.0, ok, detail)


def run_suite(p: FeedbackParams, seed: int = 0, dim: int | None = None) -> list[CheckResult]:
    """Three-way steady-state agreement plus the adiabatic-elimination check for ``p``."""
    rng = np.random.default_rng(seed)
    results = []
    if p.gamma - p.feedback_drive != 0 and not (p.g != 0 and p.chi2_over_kappa == 0):
        results.append(check_generator_identity(p, rng))
    state = stability_check(p)
    if state is Stability.STABLE:
        results.append(check_closed_form(p))
        results.append(check_fock(p, dim))
    else:
        results.append(CheckResult("stability_check", math.nan, 0.0, False, state.value))
    ae_dim = min(dim or 16, 16)
    results.append(check_adiabatic(max(p.chi2_over_kappa, 1e-2), p.gamma, p.n, dim=ae_dim))
    return results

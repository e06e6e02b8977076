import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from vibrafeed.analytic import (
    Stability,
    cavity_chi,
    effective_occupation,
    fock_moments,
    moment_drift,
    moment_ode_oracle,
    optimal_phi,
    quadrature_variance,
    random_params,
    stability_check,
    steady_dim,
    steady_moments,
    thermal_occupation,
)
from vibrafeed.fock import FockBasis
from vibrafeed.liouville import build_feedback_me, steady_state
from vibrafeed.params import FeedbackParams, ParameterError, derived_coeffs

gammas = st.floats(0.1, 10)
strengths = st.floats(0.01, 10)
gains = st.one_of(st.just(0.0), st.floats(0.01, 10))
phases = st.floats(-math.pi, math.pi)
effs = st.floats(0.1, 1.0)
occs = st.floats(0, 5)


@st.composite
def stable_params(draw):
    p = FeedbackParams.reduced(draw(gammas), draw(occs), draw(strengths), eta=draw(effs), g=draw(gains),
                               phi=draw(phases))
    assume(p.gamma - p.feedback_drive > abs(p.feedback_drive) * (1 + 1e-6) + 1e-9)
    return p


# -- parameters ----------------------------------------------------------------


@pytest.mark.parametrize(
    "kw, match",
    [
        (dict(gamma=0.0), "gamma"),
        (dict(kappa=-1.0), "kappa"),
        (dict(eta=1.5), r"\(0, 1\]"),
        (dict(eta=0.0), r"\(0, 1\]"),
        (dict(n=-0.1), "n must"),
        (dict(chi=-1.0), "chi"),
        (dict(g=math.nan), "finite"),
    ],
)
def test_params_invariants(kw, match):
    base = dict(gamma=1.0, n=0.0, chi=1.0, kappa=1.0)
    base.update(kw)
    with pytest.raises(ParameterError, match=match):
        FeedbackParams(**base)


def test_reduced_constructor_and_defaults():
    p = FeedbackParams.reduced(1.0, 0.5, 4.0, kappa=2.0)
    assert p.chi2_over_kappa == pytest.approx(4.0)
    assert p.kappa == 2.0
    assert p.eta == 1.0 and p.g == 0.0 and p.phi == -math.pi / 2
    assert p.measurement_strength == pytest.approx((4.0, 1.0))


def test_derived_coeffs_reference_example():
    co = derived_coeffs(FeedbackParams.reduced(1.0, 1.0, 1.0, eta=1.0, g=1.0, phi=-math.pi / 2))
    assert co.Gamma == pytest.approx(2.0)
    assert co.N == pytest.approx(0.5)
    assert abs(co.M) < 1e-15


def test_derived_coeffs_without_feedback():
    co = derived_coeffs(FeedbackParams.reduced(2.0, 1.5, 0.8))
    assert co.Gamma == 2.0
    assert co.N == pytest.approx(1.5 + 0.8 / 8)
    assert co.M == pytest.approx(-0.8 / 8)


def test_derived_coeffs_at_zero_phase():
    p = FeedbackParams.reduced(1.5, 0.4, 0.7, eta=0.6, g=0.9, phi=0.0)
    co = derived_coeffs(p)
    assert co.Gamma == 1.5
    assert co.M.imag == pytest.approx(0.9 / 2 / 1.5)


def test_derived_coeffs_degenerate_cases():
    with pytest.raises(ParameterError, match="Gamma"):
        derived_coeffs(FeedbackParams.reduced(1.0, 0.0, 1.0, g=1.0, phi=math.pi / 2))
    with pytest.raises(ParameterError, match="chi = 0"):
        derived_coeffs(FeedbackParams(1.0, 0.0, 0.0, 1.0, g=0.5))


@given(stable_params())
def test_effective_bath_is_physical(p):
    # the raw feedback generator is of Lindblad form, so the bath is always physical for eta <= 1
    assert derived_coeffs(p).is_physical()


# -- stability -------------------------------------------------------------------


def test_stability_boundary_at_half_gamma():
    p = FeedbackParams.reduced(1.0, 0.0, 1.0, phi=math.pi / 2)
    assert stability_check(p.with_(g=0.4)) is Stability.STABLE
    assert stability_check(p.with_(g=0.5)) is Stability.MARGINAL
    assert stability_check(p.with_(g=0.6)) is Stability.UNSTABLE
    assert stability_check(p.with_(g=1.5)) is Stability.UNSTABLE


def test_negative_sin_phi_always_stable():
    for g in (0.1, 1.0, 100.0):
        assert stability_check(FeedbackParams.reduced(1.0, 1.0, 1.0, g=g, phi=-math.pi / 2)) is Stability.STABLE


@given(gammas, strengths, st.floats(0.01, 10), phases, effs)
def test_drift_eigenvalues_match_analytic(gamma, c, g, phi, eta):
    p = FeedbackParams.reduced(gamma, 0.3, c, eta=eta, g=g, phi=phi)
    assume(abs(p.gamma - p.feedback_drive) > 1e-6)
    G, s = p.gamma - p.feedback_drive, p.feedback_drive
    expected = np.sort_complex(np.array([-(G - s) / 2, -(G + s) / 2, -G, -(G - s), -(G + s)], dtype=complex))
    got = np.sort_complex(moment_drift(p).eigenvalues())
    assert np.allclose(got, expected, atol=1e-8 * max(1, G))


@given(gammas, occs, strengths, effs, phases)
def test_no_feedback_is_always_stable(gamma, n, c, eta, phi):
    assert stability_check(FeedbackParams.reduced(gamma, n, c, eta=eta, g=0.0, phi=phi)) is Stability.STABLE


def test_unstable_parameters_rejected():
    with pytest.raises(ParameterError, match="stability_check"):
        steady_moments(FeedbackParams.reduced(1.0, 0.0, 1.0, g=1.0, phi=math.pi / 2))


# -- stationary moments -------------------------------------------------------------


@settings(max_examples=200)
@given(stable_params())
def test_closed_form_matches_oracle(p):
    m = steady_moments(p)
    zeta, mu = moment_ode_oracle(p)
    scale = max(abs(m.zeta), abs(m.mu))
    assert abs(m.zeta - zeta) <= 1e-9 * scale
    assert abs(m.mu - mu) <= 1e-9 * scale


@settings(max_examples=200)
@given(stable_params())
def test_uncertainty_bound(p):
    assert effective_occupation(p) >= -0.5
    m = steady_moments(p)
    # positivity of the Gaussian: zeta (zeta + 1) >= |mu|^2
    assert m.zeta * (m.zeta + 1) >= abs(m.mu) ** 2 * (1 - 1e-9) - 1e-12


@given(stable_params())
def test_g_zero_gives_thermal_occupation(p):
    q = p.with_(g=0.0)
    assert effective_occupation(q) == pytest.approx(q.n, rel=1e-13, abs=1e-13)


@given(stable_params(), st.floats(-math.pi, math.pi))
def test_quadrature_variance_is_rotated_form(p, theta):
    m = steady_moments(p)
    assert quadrature_variance(m, 0.0) == pytest.approx(1 + 2 * m.n_eff)
    v = quadrature_variance(m, theta)
    lo, hi = 1 + 2 * m.zeta - 2 * abs(m.mu), 1 + 2 * m.zeta + 2 * abs(m.mu)
    assert lo - 1e-9 <= v <= hi + 1e-9


@given(gammas, occs, strengths, effs, gains, st.sampled_from([-math.pi / 2, math.pi / 2]))
def test_quadrature_extremes_for_real_mu(gamma, n, c, eta, g, phi):
    p = FeedbackParams.reduced(gamma, n, c, eta=eta, g=g, phi=phi)
    assume(p.gamma - p.feedback_drive > abs(p.feedback_drive) * (1 + 1e-6) + 1e-9)
    m = steady_moments(p)
    assert abs(m.mu.imag) <= 1e-12 * max(1.0, abs(m.mu))
    thetas = np.linspace(0, math.pi, 721)
    values = [quadrature_variance(m, t) for t in thetas]
    best = thetas[int(np.argmin(values))]
    if abs(m.mu.real) > 1e-9:
        assert min(abs(best - math.pi / 2), abs(best), abs(best - math.pi)) < 1e-9
    assert min(values) == pytest.approx(1 + 2 * m.zeta - 2 * abs(m.mu), abs=1e-9)


@given(gammas, occs, strengths, effs, st.floats(0.01, 10), phases)
def test_n_eff_depends_on_sin_phi_only(gamma, n, c, eta, g, phi):
    p = FeedbackParams.reduced(gamma, n, c, eta=eta, g=g, phi=phi)
    q = p.with_(phi=math.pi - phi)
    assume(stability_check(p) is Stability.STABLE and p.gamma > 2 * p.feedback_drive * (1 + 1e-6))
    assert effective_occupation(p) == pytest.approx(effective_occupation(q), rel=1e-9, abs=1e-12)


def test_reference_family_value_at_optimal_phase():
    p = FeedbackParams.reduced(1.0, 1.0, 1.0, eta=1.0, g=1.0, phi=-math.pi / 2)
    m = steady_moments(p)
    assert m.zeta == pytest.approx(5 / 6)
    assert m.mu == pytest.approx(-2 / 3)
    assert m.n_eff == pytest.approx(1 / 6)


@given(stable_params())
def test_g_zero_moments_equal_bath_coefficients(p):
    q = p.with_(g=0.0)
    co = derived_coeffs(q)
    zeta, mu = moment_ode_oracle(q)
    assert zeta == pytest.approx(co.N, rel=1e-10)
    assert mu == pytest.approx(co.M, rel=1e-10, abs=1e-14)


def test_g_zero_occupation_flat_in_phi():
    p = FeedbackParams.reduced(0.7, 2.0, 3.0, eta=0.5)
    values = [effective_occupation(p.with_(phi=phi)) for phi in np.linspace(-math.pi, math.pi, 13)]
    assert np.ptp(values) < 1e-13


def test_sub_vacuum_occupation_exists():
    p = FeedbackParams.reduced(1.0, 0.0, 1.0, eta=1.0, g=1.0, phi=-math.pi / 2)
    assert effective_occupation(p) == pytest.approx(-1 / 6)


def test_feedback_reduces_occupation_at_optimal_phase():
    base = FeedbackParams.reduced(1.0, 1.0, 1.0)
    assert effective_occupation(base) == pytest.approx(1.0)
    values = [effective_occupation(base.with_(g=g)) for g in np.linspace(0.1, 3, 30)]
    assert min(values) < 1.0


def test_optimal_phi_reference_family():
    p = FeedbackParams.reduced(1.0, 1.0, 1.0, eta=1.0, g=1.0)
    phi, value = optimal_phi(p)
    assert abs(phi + math.pi / 2) <= 2 * math.pi / 721
    assert value == pytest.approx(1 / 6, abs=1e-4)


def test_fock_steady_state_matches_closed_form():
    p = FeedbackParams.reduced(1.0, 0.5, 1.0, eta=0.7, g=0.8, phi=-1.2)
    rho = steady_state(build_feedback_me(p, FockBasis(steady_dim(p))))
    zeta, mu = fock_moments(rho)
    m = steady_moments(p)
    assert zeta == pytest.approx(m.zeta, abs=1e-5)
    assert mu == pytest.approx(m.mu, abs=1e-5)


def test_random_params_distribution():
    rng = np.random.default_rng(3)
    draws = [random_params(rng) for _ in range(300)]
    assert all(stability_check(p) is Stability.STABLE for p in draws)
    assert all(0.1 <= p.gamma <= 10 and 0.1 <= p.eta <= 1 and 0 <= p.n <= 5 for p in draws)
    assert any(p.g == 0 for p in draws)


# -- helpers ----------------------------------------------------------------------


def test_thermal_occupation():
    assert thermal_occupation(1.0, 1.0) == pytest.approx(1 / (math.e - 1))
    assert thermal_occupation(1.0, 1e-4) == 0.0
    assert thermal_occupation(0.01, 1.0) == pytest.approx(1 / math.expm1(0.01))
    assert thermal_occupation(1e-6, 1.0) == pytest.approx(1e6, rel=1e-5)
    with pytest.raises(ValueError):
        thermal_occupation(1.0, 0.0)


def test_cavity_chi():
    assert cavity_chi(1, 1, 1, 1) == pytest.approx(-4.0)
    assert cavity_chi(0.5, 2.0, 3.0, -4.0) == pytest.approx(9.0)
    assert cavity_chi(0.5, 2.0, 3.0, 4.0) == pytest.approx(-9.0)
    assert cavity_chi(1.0, 2.0, 3.0, 4.0) == pytest.approx(2 * cavity_chi(0.5, 2.0, 3.0, 4.0))
    with pytest.raises(ValueError):
        cavity_chi(1, 1, 1, 0)

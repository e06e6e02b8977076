import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vibrafeed.fock import (
    BasisMismatchError,
    DensityMatrix,
    FockBasis,
    Operator,
    coherent_state,
    dim_for_tail,
    expectation,
    fock_state,
    identity_op,
    lowering_op,
    momentum_op,
    number_op,
    position_op,
    quadrature_op,
    raising_op,
    thermal_populations,
    thermal_state,
)


def test_basis_rejects_small_dims():
    with pytest.raises(ValueError):
        FockBasis(1)
    with pytest.raises(ValueError):
        FockBasis(2.5)


def test_ladder_action_on_number_states():
    b = FockBasis(6)
    a = lowering_op(b).matrix
    for k in range(1, 6):
        e = np.zeros(6)
        e[k] = 1
        expected = np.zeros(6)
        expected[k - 1] = math.sqrt(k)
        assert np.allclose(a @ e, expected)
    assert np.allclose(raising_op(b).matrix, a.T)
    assert np.allclose(number_op(b).matrix, a.T @ a)


def test_commutator_is_identity_except_top_level():
    d = 8
    b = FockBasis(d)
    a, ad = lowering_op(b).matrix, raising_op(b).matrix
    comm = a @ ad - ad @ a
    assert np.allclose(comm[: d - 1, : d - 1], np.eye(d - 1))
    assert comm[d - 1, d - 1] == pytest.approx(-(d - 1))


@given(st.floats(-10, 10, allow_nan=False))
def test_quadrature_rotation(theta):
    b = FockBasis(7)
    lhs = quadrature_op(b, theta).matrix
    rhs = math.cos(theta) * position_op(b).matrix + math.sin(theta) * momentum_op(b).matrix
    assert np.max(np.abs(lhs - rhs)) <= 1e-14
    assert quadrature_op(b, theta).is_hermitian()


def test_operator_algebra_and_basis_checks():
    b, c = FockBasis(4), FockBasis(5)
    x = position_op(b)
    assert np.allclose((x + x).matrix, (2 * x).matrix)
    assert np.allclose((x - x).matrix, 0)
    assert np.allclose((identity_op(b) @ x).matrix, x.matrix)
    with pytest.raises(BasisMismatchError):
        x + position_op(c)
    with pytest.raises(BasisMismatchError):
        expectation(position_op(c), thermal_state(b, 0.5))
    with pytest.raises(ValueError):
        Operator(b, np.eye(3))


def test_density_matrix_validation():
    b = FockBasis(3)
    with pytest.raises(ValueError, match="Hermitian"):
        DensityMatrix(b, np.array([[0.5, 0.1, 0], [0, 0.5, 0], [0, 0, 0]]))
    with pytest.raises(ValueError, match="trace"):
        DensityMatrix(b, np.diag([0.5, 0.4, 0.0]))
    with pytest.raises(ValueError, match="positive"):
        DensityMatrix(b, np.diag([1.2, -0.2, 0.0]))
    r = DensityMatrix(b, np.diag([1.2, -0.2, 0.0]), check_positive=False)
    assert r.min_eigenvalue() == pytest.approx(-0.2)
    r = DensityMatrix.from_array(b, np.array([[2, 1j, 0], [0, 2, 0], [0, 0, 0]]))
    assert np.trace(r.matrix) == pytest.approx(1)
    assert np.allclose(r.matrix, r.matrix.conj().T)
    assert not r.matrix.flags.writeable


def test_fock_state_expectations():
    b = FockBasis(6)
    r = fock_state(b, 3)
    assert expectation(number_op(b), r) == pytest.approx(3)
    assert expectation(position_op(b), r) == pytest.approx(0)
    # 4 <X^2> = 2 n + 1
    x = position_op(b)
    assert 4 * expectation(x @ x, r).real == pytest.approx(7)


@given(st.one_of(st.just(0.0), st.floats(1e-3, 4)), st.integers(2, 30))
def test_thermal_populations_geometric(n, d):
    p = thermal_populations(d, n)
    assert p.sum() == pytest.approx(1)
    assert np.all(p >= 0)
    if n > 0:
        ratios = p[1:] / p[:-1]
        assert np.allclose(ratios, n / (n + 1))


def test_thermal_mean_with_large_truncation():
    b = FockBasis(dim_for_tail(2.0, 1e-12))
    assert expectation(number_op(b), thermal_state(b, 2.0)).real == pytest.approx(2.0, abs=1e-9)


@settings(max_examples=50)
@given(st.floats(-2, 2), st.floats(-2, 2))
def test_coherent_state_moments(re, im):
    alpha = complex(re, im)
    b = FockBasis(40)
    r = coherent_state(b, alpha)
    a = lowering_op(b)
    assert expectation(a, r) == pytest.approx(alpha, abs=1e-9)
    x = position_op(b)
    var = expectation(x @ x, r).real - expectation(x, r).real ** 2
    assert var == pytest.approx(0.25, abs=1e-9)


@given(st.floats(0.01, 50), st.sampled_from([1e-6, 1e-8, 1e-10]))
def test_dim_for_tail_bound(n, tail):
    d = dim_for_tail(n, tail)
    q = n / (n + 1)
    assert q**d <= tail * (1 + 1e-9)
    assert d == 2 or q ** (d - 1) > tail


def test_dim_for_tail_zero_occupation():
    assert dim_for_tail(0.0) == 2
    with pytest.raises(ValueError):
        dim_for_tail(-1.0)

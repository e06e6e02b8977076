"""Truncated Fock-space operators and density matrices for a single mode."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

HERMITIAN_TOL = 1e-12
TRACE_TOL = 1e-10
POSITIVITY_TOL = 1e-8


class BasisMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class FockBasis:
    """Number states |0>, ..., |dim-1>."""

    dim: int

    def __post_init__(self):
        if int(self.dim) != self.dim or self.dim < 2:
            raise ValueError(f"Fock basis needs an integer dim >= 2, got {self.dim!r}")
        object.__setattr__(self, "dim", int(self.dim))


@dataclass(frozen=True)
class ProductBasis:
    """meter (dimension ``meter_dim``) tensor mode; meter index is the slow one."""

    meter_dim: int
    mode: FockBasis

    @property
    def dim(self) -> int:
        return self.meter_dim * self.mode.dim


def _frozen(matrix) -> np.ndarray:
    arr = np.array(matrix, dtype=complex)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Operator:
    basis: FockBasis
    matrix: np.ndarray = field(repr=False)

    def __post_init__(self):
        m = _frozen(self.matrix)
        if m.shape != (self.basis.dim, self.basis.dim):
            raise ValueError(f"operator shape {m.shape} does not match basis dim {self.basis.dim}")
        object.__setattr__(self, "matrix", m)

    def _check(self, other: Operator):
        if other.basis != self.basis:
            raise BasisMismatchError(f"{self.basis} vs {other.basis}")

    def dag(self) -> Operator:
        return Operator(self.basis, self.matrix.conj().T)

    def is_hermitian(self, tol: float = HERMITIAN_TOL) -> bool:
        return bool(np.max(np.abs(self.matrix - self.matrix.conj().T)) <= tol)

    def __add__(self, other: Operator) -> Operator:
        self._check(other)
        return Operator(self.basis, self.matrix + other.matrix)

    def __sub__(self, other: Operator) -> Operator:
        self._check(other)
        return Operator(self.basis, self.matrix - other.matrix)

    def __mul__(self, scalar) -> Operator:
        return Operator(self.basis, scalar * self.matrix)

    __rmul__ = __mul__

    def __matmul__(self, other: Operator) -> Operator:
        self._check(other)
        return Operator(self.basis, self.matrix @ other.matrix)


@dataclass(frozen=True, eq=False)
class DensityMatrix:
    """Hermitian, unit-trace, positive semidefinite state.

    ``check_positive=False`` skips the eigenvalue test; used where positivity
    is only a diagnostic (unphysical effective baths, stochastic steps).
    """

    basis: FockBasis | ProductBasis
    matrix: np.ndarray = field(repr=False)
    check_positive: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        m = _frozen(self.matrix)
        if m.shape != (self.basis.dim, self.basis.dim):
            raise ValueError(f"state shape {m.shape} incompatible with basis dim {self.basis.dim}")
        herm = np.max(np.abs(m - m.conj().T))
        if herm > HERMITIAN_TOL:
            raise ValueError(f"density matrix not Hermitian (max deviation {herm:.3e})")
        tr = np.trace(m)
        if abs(tr - 1) > TRACE_TOL:
            raise ValueError(f"density matrix trace is {tr.real:.15g}, expected 1")
        if self.check_positive:
            lo = float(np.linalg.eigvalsh(m)[0])
            if lo < -POSITIVITY_TOL:
                raise ValueError(f"density matrix not positive (smallest eigenvalue {lo:.3e})")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_array(cls, basis: FockBasis | ProductBasis, matrix, check_positive: bool = True) -> DensityMatrix:
        """Hermitize and renormalize before validating."""
        m = np.asarray(matrix, dtype=complex)
        m = 0.5 * (m + m.conj().T)
        m = m / np.trace(m).real
        return cls(basis, m, check_positive=check_positive)

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.matrix)[0])

    def populations(self) -> np.ndarray:
        return np.real(np.diag(self.matrix)).copy()


def lowering_op(basis: FockBasis) -> Operator:
    return Operator(basis, np.diag(np.sqrt(np.arange(1, basis.dim, dtype=float)), 1))


def raising_op(basis: FockBasis) -> Operator:
    return lowering_op(basis).dag()


def number_op(basis: FockBasis) -> Operator:
    return Operator(basis, np.diag(np.arange(basis.dim, dtype=float)))


def identity_op(basis: FockBasis) -> Operator:
    return Operator(basis, np.eye(basis.dim))


def quadrature_op(basis: FockBasis, theta: float) -> Operator:
    """X_theta = (a e^{i theta} + a^dag e^{-i theta}) / 2.

    theta = 0 is position X, theta = pi/2 the momentum-like P, and
    X_theta = cos(theta) X + sin(theta) P.
    """
    a = lowering_op(basis).matrix
    phase = np.exp(1j * theta)
    return Operator(basis, 0.5 * (phase * a + np.conj(phase) * a.conj().T))


def position_op(basis: FockBasis) -> Operator:
    return quadrature_op(basis, 0.0)


def momentum_op(basis: FockBasis) -> Operator:
    return quadrature_op(basis, math.pi / 2)


def expectation(op: Operator, rho: DensityMatrix) -> complex:
    if op.basis != rho.basis or op.matrix.shape != rho.matrix.shape:
        raise BasisMismatchError(f"operator on {op.basis} applied to state on {rho.basis}")
    return complex(np.sum(op.matrix.T * rho.matrix))


def thermal_populations(dim: int, n: float) -> np.ndarray:
    if n < 0:
        raise ValueError(f"thermal occupation must be >= 0, got {n}")
    if n == 0:
        p = np.zeros(dim)
        p[0] = 1.0
        return p
    k = np.arange(dim)
    p = np.exp(k * (math.log(n) - math.log1p(n)))
    return p / p.sum()


def thermal_state(basis: FockBasis, n: float) -> DensityMatrix:
    """Geometric populations (n/(n+1))^k, renormalized on the truncated basis."""
    return DensityMatrix(basis, np.diag(thermal_populations(basis.dim, n)).astype(complex))


def fock_state(basis: FockBasis, k: int) -> DensityMatrix:
    m = np.zeros((basis.dim, basis.dim), dtype=complex)
    m[k, k] = 1.0
    return DensityMatrix(basis, m)


def coherent_state(basis: FockBasis, alpha: complex) -> DensityMatrix:
    """Truncated, renormalized coherent state."""
    k = np.arange(basis.dim)
    logfact = np.array([math.lgamma(j + 1) for j in k])
    amp = np.zeros(basis.dim, dtype=complex)
    if alpha == 0:
        amp[0] = 1.0
    else:
        amp = np.exp(k * np.log(complex(alpha)) - 0.5 * logfact)
    amp /= np.linalg.norm(amp)
    return DensityMatrix(basis, np.outer(amp, amp.conj()))


def dim_for_tail(occupation: float, tail: float = 1e-8, minimum: int = 2) -> int:
    """Smallest d whose geometric tail mass sum_{k>=d} (1-q) q^k = q^d is below ``tail``.

    ``occupation`` is the mean of the geometric distribution; for squeezed
    Gaussian states pass zeta + |mu|, whose ratio q matches the slowest Fock
    decay of the state.
    """
    if occupation < 0:
        raise ValueError("occupation must be >= 0")
    if occupation == 0:
        return minimum
    q = occupation / (occupation + 1.0)
    return max(minimum, math.ceil(math.log(tail) / math.log(q)))

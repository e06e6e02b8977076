"""Physical parameter set and the effective-bath coefficients it induces."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

FIELDS = ("gamma", "n", "chi", "kappa", "eta", "g", "phi")


class ParameterError(ValueError):
    pass


@dataclass(frozen=True)
class FeedbackParams:
    """Mode damping, meter coupling, detection and feedback settings.

    Rates are in units of a caller-chosen reference rate (conventionally
    gamma = 1). The reduced mode dynamics depend on chi and kappa only
    through ``chi2_over_kappa``; kappa alone sets the photocurrent scale.
    """

    gamma: float
    n: float
    chi: float
    kappa: float
    eta: float = 1.0
    g: float = 0.0
    phi: float = -math.pi / 2

    def __post_init__(self):
        for name in FIELDS:
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ParameterError(f"{name} must be finite, got {value}")
            object.__setattr__(self, name, float(value))
        if self.gamma <= 0:
            raise ParameterError(f"gamma must be > 0, got {self.gamma}")
        if self.kappa <= 0:
            raise ParameterError(f"kappa must be > 0, got {self.kappa}")
        if self.chi < 0:
            raise ParameterError(f"chi must be >= 0, got {self.chi}")
        if not 0 < self.eta <= 1:
            raise ParameterError(f"eta must lie in (0, 1], got {self.eta}")
        if self.n < 0:
            raise ParameterError(f"n must be >= 0, got {self.n}")

    @classmethod
    def reduced(cls, gamma, n, chi2_over_kappa, eta=1.0, g=0.0, phi=-math.pi / 2, kappa=1.0):
        """Build from the measurement strength chi^2/kappa, fixing kappa."""
        if chi2_over_kappa < 0:
            raise ParameterError(f"chi2_over_kappa must be >= 0, got {chi2_over_kappa}")
        return cls(gamma, n, math.sqrt(chi2_over_kappa * kappa), kappa, eta, g, phi)

    @property
    def chi2_over_kappa(self) -> float:
        return self.chi * self.chi / self.kappa

    @property
    def measurement_strength(self) -> tuple[float, float]:
        """The pair (chi^2/kappa, eta) that fixes the reduced dynamics."""
        return self.chi2_over_kappa, self.eta

    @property
    def feedback_drive(self) -> float:
        """g sin(phi): strength of the squeezing drive the loop generates."""
        return self.g * math.sin(self.phi)

    def with_(self, **changes) -> FeedbackParams:
        return replace(self, **changes)

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


@dataclass(frozen=True)
class DerivedCoeffs:
    """Effective damping Gamma, thermal number N and squeezing coefficient M."""

    Gamma: float
    N: float
    M: complex

    def is_physical(self) -> bool:
        """Squeezed-bath positivity |M|^2 <= N (N + 1)."""
        return abs(self.M) ** 2 <= self.N * (self.N + 1) * (1 + 1e-12) + 1e-15


def derived_coeffs(p: FeedbackParams) -> DerivedCoeffs:
    c = p.chi2_over_kappa
    Gamma = p.gamma - p.g * math.sin(p.phi)
    if Gamma == 0:
        raise ParameterError("degenerate parameters: Gamma = gamma - g sin(phi) is zero")
    if p.g != 0 and c == 0:
        raise ParameterError("feedback with chi = 0: the feedback noise term g^2 kappa/(4 eta chi^2) diverges")
    fb_noise = p.g * p.g / (4 * p.eta * c) if p.g != 0 else 0.0
    N = (p.gamma * p.n + c / 4 + fb_noise + 0.5 * p.g * math.sin(p.phi)) / Gamma
    M = -complex(c / 4 - fb_noise, -0.5 * p.g * math.cos(p.phi)) / Gamma
    if not (math.isfinite(N) and math.isfinite(M.real) and math.isfinite(M.imag)):
        raise ParameterError(f"non-finite effective-bath coefficients N={N}, M={M}")
    return DerivedCoeffs(Gamma, N, M)

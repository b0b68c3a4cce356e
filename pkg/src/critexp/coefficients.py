"""Two-phase conductivity pairs, Beltrami coefficients and exponent formulas."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import InvalidInput, UnsupportedCase

ELLIPTICITY_MARGIN = 1e-10
S_ZERO_TOL = 1e-12


def _as_matrix(sigma) -> np.ndarray:
    M = np.asarray(sigma, dtype=float)
    if M.shape != (2, 2) or not np.all(np.isfinite(M)):
        raise InvalidInput(f"conductivity must be a finite 2x2 matrix, got {sigma!r}")
    return M


def check_elliptic(sigma, name="sigma") -> np.ndarray:
    """Return sigma as an array after checking its symmetric part is positive definite."""
    M = _as_matrix(sigma)
    sym = 0.5 * (M + M.T)
    lo = np.linalg.eigvalsh(sym)[0]
    if lo < ELLIPTICITY_MARGIN:
        raise InvalidInput(
            f"{name} is not uniformly elliptic: smallest eigenvalue of the "
            f"symmetric part is {lo:.3g}"
        )
    return M


@dataclass(frozen=True)
class CoefficientPair:
    sigma1: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "sigma1", check_elliptic(self.sigma1, "sigma1"))
        object.__setattr__(self, "sigma2", check_elliptic(self.sigma2, "sigma2"))

    @property
    def d1(self) -> float:
        return float(np.linalg.det(0.5 * (self.sigma1 + self.sigma1.T)))

    @property
    def d2(self) -> float:
        return float(np.linalg.det(0.5 * (self.sigma2 + self.sigma2.T)))


@dataclass(frozen=True)
class ExponentReport:
    K_star: float
    p_opt: float
    q_opt: float
    m: float
    n: float
    d1: float
    d2: float
    degenerate: bool = False

    def as_dict(self):
        return {
            "K_star": self.K_star,
            "p_opt": self.p_opt,
            "q_opt": self.q_opt,
            "m": self.m,
            "n": self.n,
            "d1": self.d1,
            "d2": self.d2,
            "degenerate": self.degenerate,
        }


def _root_factor(x: float) -> float:
    # (x + sqrt(x^2 - 4)) / 2 for x >= 2; values a hair below 2 are rounding
    if x < 2.0:
        if x < 2.0 - 1e-9:
            raise InvalidInput(f"exponent invariant {x!r} < 2; input is not a valid pair")
        x = 2.0
    return 0.5 * (x + math.sqrt(max(x * x - 4.0, 0.0)))


def pair_invariants(pair: CoefficientPair):
    """The two scale-free invariants (m, n) entering the distortion formula."""
    s1, s2 = pair.sigma1, pair.sigma2
    root = math.sqrt(pair.d1 * pair.d2)
    m = (
        s2[0, 0] * s1[1, 1]
        + s1[0, 0] * s2[1, 1]
        - 0.5 * (s2[0, 1] + s2[1, 0]) * (s1[0, 1] + s1[1, 0])
    ) / root
    n = (
        np.linalg.det(s1)
        + np.linalg.det(s2)
        - 0.5 * (s1[1, 0] - s1[0, 1]) * (s2[1, 0] - s2[0, 1])
    ) / root
    return float(m), float(n)


def critical_exponents_general(pair: CoefficientPair) -> ExponentReport:
    """Effective distortion K* of a pair and the exponents q = 2K*/(K*+1), p = 2K*/(K*-1)."""
    m, n = pair_invariants(pair)
    K = math.sqrt(_root_factor(m)) * math.sqrt(_root_factor(n))
    if K <= 1.0 + 1e-12:
        # a single phase up to normalization: every W^{1,q} space is fine
        return ExponentReport(1.0, math.inf, 1.0, m, n, pair.d1, pair.d2, degenerate=True)
    return ExponentReport(K, 2 * K / (K - 1), 2 * K / (K + 1), m, n, pair.d1, pair.d2)


@dataclass(frozen=True)
class DiagonalPairParams:
    """Parameters of sigma1 = diag(1/K, 1/S1), sigma2 = diag(K, S2).

    When the input has s < 0 the stored s1, s2 (and S1, S2) are the
    reflected values with positive average; ``reflected`` records this and
    ``original`` keeps the input triple.
    """

    K: float
    S1: float
    S2: float
    k: float
    s1: float
    s2: float
    s: float
    S: float
    reflected: bool = False
    original: tuple = field(default=None)

    @property
    def exact(self) -> bool:
        return isinstance(self.k, Fraction)

    def s_j(self, j: int):
        if j == 1:
            return self.s1
        if j == 2:
            return self.s2
        raise InvalidInput(f"phase must be 1 or 2, got {j!r}")

    @property
    def q_K(self):
        return 2 * self.K / (self.K + 1)

    @property
    def q_S(self):
        return 2 * self.S / (self.S + 1)

    def sigma_pair(self) -> CoefficientPair:
        K, S1, S2 = (float(x) for x in self.original or (self.K, self.S1, self.S2))
        return CoefficientPair(np.diag([1 / K, 1 / S1]), np.diag([K, S2]))

    def as_dict(self):
        out = {
            name: float(getattr(self, name))
            for name in ("K", "S1", "S2", "k", "s1", "s2", "s", "S")
        }
        out["reflected"] = self.reflected
        out["case"] = "s<0 reflected to s>0" if self.reflected else "s>0"
        return out


def _is_rational(x) -> bool:
    return isinstance(x, (int, Fraction)) and not isinstance(x, bool)


def diagonal_params(K, S1, S2) -> DiagonalPairParams:
    """Derived parameters k, s_j, s, S for the diagonal pair (K, S1, S2).

    Integer or Fraction inputs keep every derived quantity exact.
    """
    exact = all(_is_rational(x) for x in (K, S1, S2))
    conv = Fraction if exact else float
    K, S1, S2 = conv(K), conv(S1), conv(S2)
    if not K > 1:
        raise InvalidInput(f"K must exceed 1, got {K}")
    tol = 0 if exact else 1e-12
    for name, Sj in (("S1", S1), ("S2", S2)):
        if not (1 / K - tol <= Sj <= K + tol):
            raise InvalidInput(f"{name}={Sj} outside the ellipticity range [1/K, K]")
    k = (K - 1) / (K + 1)
    s1 = (S1 - 1) / (S1 + 1)
    s2 = (S2 - 1) / (S2 + 1)
    s = (s1 + s2) / 2
    if abs(s) < S_ZERO_TOL:
        raise UnsupportedCase(
            "s = 0 (S1*S2 = 1): the staircase construction is not available in this case"
        )
    original = (K, S1, S2)
    reflected = s < 0
    if reflected:
        s1, s2, s = -s1, -s2, -s
        S1, S2 = 1 / S1, 1 / S2
    S = (1 + s) / (1 - s)
    return DiagonalPairParams(K, S1, S2, k, s1, s2, s, S, reflected, original)


def beltrami_from_sigma(sigma):
    """Beltrami coefficients (mu, nu) of a conductivity matrix."""
    M = _as_matrix(sigma)
    tr = M[0, 0] + M[1, 1]
    det = float(np.linalg.det(M))
    den = 1.0 + tr + det
    if den <= 0:
        raise InvalidInput("1 + tr(sigma) + det(sigma) <= 0: sigma is not elliptic")
    mu = complex(M[1, 1] - M[0, 0], -(M[0, 1] + M[1, 0])) / den
    nu = complex(1.0 - det, M[0, 1] - M[1, 0]) / den
    if abs(mu) + abs(nu) >= 1:
        raise InvalidInput(f"|mu| + |nu| = {abs(mu) + abs(nu):.6g} >= 1: sigma is not elliptic")
    return mu, nu


def sigma_from_beltrami(mu, nu) -> np.ndarray:
    """Inverse of :func:`beltrami_from_sigma`."""
    mu, nu = complex(mu), complex(nu)
    if abs(mu) + abs(nu) >= 1:
        raise InvalidInput("ellipticity requires |mu| + |nu| < 1")
    den = abs(1 + nu) ** 2 - abs(mu) ** 2
    return (
        np.array(
            [
                [abs(1 - mu) ** 2 - abs(nu) ** 2, 2 * (nu - mu).imag],
                [-2 * (nu + mu).imag, abs(1 + mu) ** 2 - abs(nu) ** 2],
            ]
        )
        / den
    )

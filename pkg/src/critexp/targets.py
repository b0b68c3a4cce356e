"""Target planes T1, T2 and the rank-one geometry around them.

With k = (K-1)/(K+1) and s_j = (S_j-1)/(S_j+1) the real-linear maps
d_j(a) = k Re a + i s_j Im a define

    T1 = {(a, d_1(conj a))},    T2 = {(a, -d_2(conj a))}

in conformal coordinates. A map f = (u, v) with gradient in T_j has
R^T grad v = sigma_j grad u, i.e. u solves the phase-j equation and v is
its stream function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .coefficients import DiagonalPairParams
from .conformal import (
    ConformalMatrix,
    GaussianRational,
    distortion,
    fraction_sqrt,
    rotation_unit,
)
from .errors import InvalidInput

RANK_ONE_TOL = 1e-9
T1_TOL = 1e-12
SQRT2 = math.sqrt(2.0)


class DegenerateAngle(InvalidInput):
    """theta_A is undefined because A lies on T1."""


def is_rank_one(D: ConformalMatrix, tol: float = RANK_ONE_TOL) -> bool:
    """Scale-invariant test |det D| <= tol * |D|^2 (exact equality for exact input)."""
    if D.exact and tol == 0:
        return D.det() == 0
    return abs(float(D.det())) <= tol * float(D.hs_norm2())


def _sqrt_exact_or_float(q):
    """sqrt of a non-negative number, exact when q is a rational perfect square."""
    if isinstance(q, Fraction):
        r = fraction_sqrt(q)
        if r is not None:
            return r
    return math.sqrt(float(q))


def positive_root(A, B):
    """The positive root of A x^2 + 2 B x - 1 = 0 for A > 0.

    Uses 1 / (sqrt(B^2 + A) + B) when B >= 0 and (sqrt(B^2 + A) - B) / A
    otherwise, so neither branch subtracts nearly equal numbers.
    """
    r = _sqrt_exact_or_float(B * B + A)
    if isinstance(r, float):
        A, B = float(A), float(B)
    if B >= 0:
        return 1 / (r + B)
    return (r - B) / A


@dataclass(frozen=True)
class InfinityDecomposition:
    """A = mu1 * Q + (1 - mu1) * P with Q in T1, P = t * J * R_theta, det(P - Q) = 0."""

    Q: ConformalMatrix
    P: ConformalMatrix
    mu1: float
    t: float
    theta: float
    degenerate: bool = False


@dataclass(frozen=True)
class ConjugationLink:
    """Output of :meth:`TargetSpec.connect_to_conjugation`."""

    lambda1: float
    Q1: ConformalMatrix
    lambda2: float
    Q2: ConformalMatrix


class TargetSpec:
    """Target planes for a diagonal pair."""

    def __init__(self, params: DiagonalPairParams):
        self.params = params
        self.k = params.k
        self.s1 = params.s1
        self.s2 = params.s2
        self.exact = params.exact

    def s_j(self, j):
        return self.params.s_j(j)

    def d(self, j: int, a):
        """d_j(a) = k Re a + i s_j Im a."""
        sj = self.s_j(j)
        if isinstance(a, GaussianRational):
            return GaussianRational(self.k * a.real, sj * a.imag)
        if isinstance(a, (int, Fraction)):
            return GaussianRational(self.k * a, 0)
        a = complex(a)
        return complex(float(self.k) * a.real, float(sj) * a.imag)

    def element(self, j: int, a) -> ConformalMatrix:
        """The point of T_j with first conformal coordinate a."""
        b = self.d(j, a.conjugate())
        return ConformalMatrix(a, b if j == 1 else -b)

    def real_element(self, j: int, x: float, y: float) -> np.ndarray:
        """Real-coordinate parametrization of T_j."""
        K, S1, S2 = (float(v) for v in (self.params.K, self.params.S1, self.params.S2))
        if j == 1:
            return np.array([[x, -y], [y / S1, x / K]])
        return np.array([[x, -y], [S2 * y, K * x]])

    def contains(self, A: ConformalMatrix, j: int, tol: float = T1_TOL) -> bool:
        if A.exact and self.exact and tol == 0:
            return A == self.element(j, A.a_plus)
        return self.dist_to_target(A, j) <= tol * max(1.0, A.to_float().hs_norm())

    # Projection onto the 2-plane T_j. In the coordinates
    # (Re a+, Im a+, Re a-, Im a-) the plane is spanned by the orthogonal pair
    # (1, 0, +-k, 0) and (0, 1, 0, -+s_j); HS distance is sqrt(2) times the
    # Euclidean distance in these coordinates.
    def _basis(self, j):
        k = float(self.k)
        sj = float(self.s_j(j))
        sign = 1.0 if j == 1 else -1.0
        return np.array([1.0, 0.0, sign * k, 0.0]), np.array([0.0, 1.0, 0.0, -sign * sj])

    def project(self, A: ConformalMatrix, j: int) -> ConformalMatrix:
        p = np.array(A.as_tuple())
        ex, ey = self._basis(j)
        x = p @ ex / (ex @ ex)
        y = p @ ey / (ey @ ey)
        return self.element(j, complex(x, y))

    def dist_to_target(self, A: ConformalMatrix, j: int) -> float:
        """Hilbert-Schmidt distance from A to the plane T_j."""
        return A.distance(self.project(A, j))

    def dist_to_targets(self, A: ConformalMatrix) -> float:
        return min(self.dist_to_target(A, 1), self.dist_to_target(A, 2))

    def dist_arrays(self, ap, am, j: int) -> np.ndarray:
        """Vectorized :meth:`dist_to_target` for arrays of conformal coordinates."""
        P = np.stack([ap.real, ap.imag, am.real, am.imag], axis=-1)
        ex, ey = self._basis(j)
        x = P @ ex / (ex @ ex)
        y = P @ ey / (ey @ ey)
        R = P - x[..., None] * ex - y[..., None] * ey
        return SQRT2 * np.linalg.norm(R, axis=-1)

    def theta_of(self, A: ConformalMatrix) -> float:
        """theta_A = -arg(b - d_1(conj a)) in (-pi, pi]."""
        w = A.a_minus - self.d(1, A.a_plus.conjugate())
        wc = complex(w)
        scale = max(1.0, A.to_float().hs_norm())
        if abs(wc) <= T1_TOL * scale:
            raise DegenerateAngle("A lies on T1; theta_A is undefined")
        th = -math.atan2(wc.imag, wc.real)
        return math.pi if th <= -math.pi else th

    def decompose_through_infinity(self, A: ConformalMatrix) -> InfinityDecomposition:
        """Split A along a rank-one segment between T1 and the anti-conformal plane.

        Writes A = (a, d) + (0, w) with d = d_1(conj a), w = b - d, and finds
        the positive t0 with |a| = |t0 w - d|; then Q = (1 + 1/t0)(a, d),
        P = (0, (1 + t0) w) and A = mu1 Q + (1 - mu1) P with mu1 = t0/(1 + t0).
        """
        a, b = A.a_plus, A.a_minus
        exact = A.exact and self.exact
        if not exact and A.exact:
            A = A.to_float()
            a, b = A.a_plus, A.a_minus
        if not a and not b:
            raise InvalidInput("cannot decompose the zero matrix")
        theta = self.theta_of(A)
        # in floating point a negligible a_plus (t0 would underflow) is the same branch
        if not a or (not exact and abs(a) <= 1e-14 * abs(b)):
            t = _sqrt_exact_or_float(b.abs2()) if exact else abs(b)
            zero = ConformalMatrix(0, 0) if exact else ConformalMatrix(0j, 0j)
            return InfinityDecomposition(zero, A, 0 if exact else 0.0, t, theta, True)
        d = self.d(1, a.conjugate())
        w = b - d
        if exact:
            W = w.abs2()
            D = a.abs2() - d.abs2()
            B = (w.conjugate() * d).real
        else:
            W = abs(w) ** 2
            D = abs(a) ** 2 - abs(d) ** 2
            B = (w.conjugate() * d).real
        r = _sqrt_exact_or_float(B * B + D * W)
        if isinstance(r, float) and exact:
            # irrational root: continue in floating point
            return self.decompose_through_infinity(A.to_float())
        t0 = (r + B) / W if B >= 0 else D / (r - B)
        rho = 1 + 1 / t0
        Q = ConformalMatrix(a * rho, d * rho)
        P = ConformalMatrix(0 * a, w * (1 + t0))
        mu1 = 1 / rho
        t = _sqrt_exact_or_float(P.a_minus.abs2()) if exact else abs(P.a_minus)
        return InfinityDecomposition(Q, P, mu1, t, theta, False)

    def connect_to_conjugation(self, a, R) -> ConjugationLink:
        """Q_j in T_j with det(Q_j - J R) = 0, scaled by the positive lambda_j."""
        r = R.a_plus if isinstance(R, ConformalMatrix) else R
        rotation_unit(r)  # validates |r| = 1
        exact = self.exact and isinstance(a, GaussianRational) and isinstance(r, GaussianRational)
        if not exact:
            a, r = complex(a), complex(r)
        if not a:
            raise InvalidInput("connect_to_conjugation needs a != 0")
        out = []
        for j in (1, 2):
            dj = self.d(j, a)
            if exact:
                Aj = a.abs2() - dj.abs2()
                Bj = (r.conjugate() * dj).real
            else:
                Aj = abs(a) ** 2 - abs(dj) ** 2
                Bj = (r.conjugate() * dj).real
            lam = positive_root(Aj, Bj)
            if exact and isinstance(lam, float):
                return self.connect_to_conjugation(complex(a), complex(r))
            out.append(lam)
        lam1, lam2 = out
        abar = a.conjugate()
        Q1 = ConformalMatrix(a * lam1, self.d(1, abar) * lam1)
        Q2 = ConformalMatrix(-a * lam2, self.d(2, abar) * lam2)
        return ConjugationLink(lam1, Q1, lam2, Q2)


def anti_conformal_level(n, R) -> ConformalMatrix:
    """n * J * R for a rotation R, i.e. (0, n * conj(r))."""
    r = R.a_plus if isinstance(R, ConformalMatrix) else R
    return ConformalMatrix(0 * r, r.conjugate() * n)


def dist_to_S(A: ConformalMatrix, n: float, delta: float | None = None) -> float:
    """HS distance from A to S_n = {n J R_theta} (restricted to |theta| <= delta if given)."""
    ap, am = complex(A.a_plus), complex(A.a_minus)
    if am == 0:
        phi = 0.0
    else:
        phi = math.atan2(am.imag, am.real)
    # n J R_theta = (0, n e^{-i theta}); nearest theta is -arg(a_minus)
    theta = -phi
    if delta is not None:
        theta = max(-delta, min(delta, theta))
    target = n * complex(math.cos(theta), -math.sin(theta))
    return math.sqrt(2 * abs(ap) ** 2 + 2 * abs(am - target) ** 2)


# Randomized audits of the target-plane estimates. Each returns a dict with the
# number of samples, number of failures and the worst observed margin.


def audit_target_distortion(params: DiagonalPairParams, j: int, samples: int, rng) -> dict:
    """det Q > 0, |s_j| <= |mu_Q| <= k and max(S_j, 1/S_j) <= K(Q) <= K on random Q in T_j."""
    k = float(params.k)
    sj = abs(float(params.s_j(j)))
    K = float(params.K)
    Sj = (1 + sj) / (1 - sj)
    scale = np.exp(rng.uniform(-5, 5, samples))
    a = scale * np.exp(1j * rng.uniform(-np.pi, np.pi, samples))
    tgt = TargetSpec(params)
    # vectorized d_j(conj a)
    d = k * a.real + 1j * float(params.s_j(j)) * (-a.imag)
    am = d if j == 1 else -d
    det = np.abs(a) ** 2 - np.abs(am) ** 2
    mu = np.abs(am) / np.abs(a)
    dist = (np.abs(a) + np.abs(am)) ** 2 / det
    eps = 1e-12
    fail_det = det <= 0
    fail_mu = (mu < sj * (1 - eps) - eps) | (mu > k * (1 + eps) + eps)
    fail_K = (dist < Sj * (1 - 1e-10)) | (dist > K * (1 + 1e-10))
    # spot check the vectorized formulas against the scalar path
    for i in range(min(samples, 16)):
        Q = tgt.element(j, complex(a[i]))
        if abs(distortion(Q) - dist[i]) > 1e-9 * dist[i]:
            fail_K[i] = True
    failures = int(np.count_nonzero(fail_det | fail_mu | fail_K))
    return {
        "samples": samples,
        "failures": failures,
        "min_det_ratio": float(np.min(det / np.abs(a) ** 2)),
        "mu_range": (float(mu.min()), float(mu.max())),
        "K_range": (float(dist.min()), float(dist.max())),
    }


def audit_rank_one_norm_bound(samples: int, rng) -> dict:
    """|B| <= sqrt(2) K(B) |A| whenever det B != 0 and B - A is rank one."""
    B = rng.normal(size=(samples, 2, 2)) * np.exp(rng.uniform(-3, 3, (samples, 1, 1)))
    u = rng.normal(size=(samples, 2))
    v = rng.normal(size=(samples, 2))
    scale = np.exp(rng.uniform(-3, 3, samples))
    A = B - scale[:, None, None] * u[:, :, None] * v[:, None, :]
    nB = np.linalg.norm(B, axis=(1, 2))
    nA = np.linalg.norm(A, axis=(1, 2))
    op = np.linalg.norm(B, ord=2, axis=(1, 2))
    detB = np.abs(np.linalg.det(B))
    KB = op ** 2 / detB
    ratio = nB / (SQRT2 * KB * nA)
    failures = int(np.count_nonzero(ratio > 1 + 1e-10))
    return {"samples": samples, "failures": failures, "max_ratio": float(ratio.max())}


def audit_conjugation_connection(params: DiagonalPairParams, samples: int, rng) -> dict:
    """det(Q_j - J R) = 0 relative to |Q_j - J R|^2 for random a and rotations R."""
    tgt = TargetSpec(params)
    k = float(params.k)
    a = np.exp(rng.uniform(-4, 4, samples)) * np.exp(1j * rng.uniform(-np.pi, np.pi, samples))
    r = np.exp(1j * rng.uniform(-np.pi, np.pi, samples))
    worst = 0.0
    failures = 0
    worst_lambda = (np.inf, 0.0)
    for j, sign in ((1, 1.0), (2, -1.0)):
        sj = float(params.s_j(j))
        dj = k * a.real + 1j * sj * a.imag
        Aj = np.abs(a) ** 2 - np.abs(dj) ** 2
        Bj = (np.conj(r) * dj).real
        root = np.sqrt(Bj * Bj + Aj)
        lam = np.where(Bj >= 0, 1.0 / (root + Bj), (root - Bj) / Aj)
        dbar = k * a.real - 1j * sj * a.imag  # d_j(conj a)
        dp = sign * lam * a
        dm = lam * dbar - np.conj(r)
        det = np.abs(dp) ** 2 - np.abs(dm) ** 2
        size = np.abs(dp) ** 2 + np.abs(dm) ** 2
        rel = np.abs(det) / size
        worst = max(worst, float(rel.max()))
        failures += int(np.count_nonzero(rel > 1e-10))
        worst_lambda = (min(worst_lambda[0], float(lam.min())), max(worst_lambda[1], float(lam.max())))
    # scalar path agrees with the vectorized one
    for i in range(min(samples, 16)):
        link = tgt.connect_to_conjugation(complex(a[i]), complex(r[i]))
        JR = anti_conformal_level(1, complex(r[i]))
        for Q in (link.Q1, link.Q2):
            D = Q - JR
            if abs(D.det()) > 1e-10 * D.hs_norm2():
                failures += 1
    return {"samples": samples, "failures": failures, "max_rel_det": worst, "lambda_range": worst_lambda}

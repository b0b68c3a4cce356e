"""Angle-dependent step coefficients and the staircase laminate.

One staircase step takes a matrix A close to n*J*R and splits it, with three
rank-one splittings, into atoms on the target planes plus a single atom
(n+1)*J*R one level higher. Iterating from J*R_theta produces laminates
whose mass on the top level decays like n^(-p(theta)).
"""

from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.optimize import minimize_scalar

from .coefficients import DiagonalPairParams
from .conformal import ConformalMatrix, GaussianRational, rotation_unit
from .errors import InvalidInput, InvariantViolation
from .laminate import Laminate, LaminateBuilder
from .targets import (
    InfinityDecomposition,
    TargetSpec,
    anti_conformal_level,
    dist_to_S,
    positive_root,
)

M_GRID = 10_000
SUPPORT_TOL = 1e-9
SANDWICH_TOL = 1e-12


@dataclass(frozen=True)
class ThetaFunctions:
    theta: float
    lambda1: float
    lambda2: float
    M1: float
    M2: float
    l: float
    L: float
    p: float
    m_const: float
    a: complex = None

    def beta(self, n):
        """1 - (1 + l)/n."""
        return 1 - (1 + self.l) / n

    def as_row(self):
        return [self.theta] + [float(v) for v in (self.lambda1, self.lambda2, self.l, self.L, self.p)]


_EXACT_ANGLES = {
    0.0: GaussianRational(1, 0),
    math.pi / 2: GaussianRational(0, 1),
    math.pi: GaussianRational(-1, 0),
    -math.pi / 2: GaussianRational(0, -1),
}


def exact_unit(theta):
    """e^{i theta} as a Gaussian rational for quarter-turn angles, else None."""
    return _EXACT_ANGLES.get(float(theta))


def _a_of(params, r):
    # a(R) = cos/k + i sin/s
    if isinstance(r, GaussianRational):
        return GaussianRational(r.real / params.k, r.imag / params.s)
    r = complex(r)
    return complex(r.real / float(params.k), r.imag / float(params.s))


def _m_from_lambdas(lam1, lam2):
    den = (lam1 + lam2) / 2 - lam1 * lam2
    M1, M2 = lam1 / den, lam2 / den
    l = (M1 + M2) / 2 - 1
    L = (1 + l) / (1 - l)
    return M1, M2, l, L, 2 * L / (L + 1)


def lambda_arrays(params: DiagonalPairParams, thetas):
    """Vectorized (lambda1, lambda2) over an array of angles."""
    th = np.asarray(thetas, dtype=float)
    c, sn = np.cos(th), np.sin(th)
    k, s = float(params.k), float(params.s)
    a2 = (c / k) ** 2 + (sn / s) ** 2
    out = []
    for sj in (float(params.s1), float(params.s2)):
        # d_j(a) = cos + i (s_j/s) sin; B_j = Re(conj(r) d_j)
        ratio = sj / s
        A = a2 - c**2 - (ratio * sn) ** 2
        B = c**2 + ratio * sn**2
        root = np.sqrt(B * B + A)
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = np.where(B >= 0, 1.0 / (root + B), (root - B) / A)
        out.append(lam)
    return out[0], out[1]


def theta_table(params: DiagonalPairParams, thetas) -> dict:
    """Vectorized theta functions: dict of arrays lambda1, lambda2, M1, M2, l, L, p."""
    lam1, lam2 = lambda_arrays(params, thetas)
    M1, M2, l, L, p = _m_from_lambdas(lam1, lam2)
    return {"theta": np.asarray(thetas, float), "lambda1": lam1, "lambda2": lam2,
            "M1": M1, "M2": M2, "l": l, "L": L, "p": p}


@functools.lru_cache(maxsize=64)
def _m_const_cached(k, s1, s2, s):
    proxy = _Proxy(k, s1, s2, s)

    def g(th):
        M2 = theta_table(proxy, np.atleast_1d(th))["M2"]
        return M2 / (2 - M2)

    grid = np.linspace(0.0, math.pi, M_GRID, endpoint=False)
    vals = g(grid)
    i = int(np.argmin(vals))
    h = grid[1] - grid[0]
    res = minimize_scalar(lambda x: float(g(x)[0]), bounds=(grid[i] - h, grid[i] + h), method="bounded",
                          options={"xatol": 1e-12})
    return float(min(vals[i], res.fun))


@dataclass(frozen=True)
class _Proxy:
    k: float
    s1: float
    s2: float
    s: float


def m_const(params: DiagonalPairParams) -> float:
    """min over theta of M2/(2 - M2) (grid of 1e4 points plus bounded local refinement)."""
    return _m_const_cached(float(params.k), float(params.s1), float(params.s2), float(params.s))


def theta_functions(params: DiagonalPairParams, theta, rotation=None) -> ThetaFunctions:
    """Step coefficients at angle theta.

    With exact parameters and a quarter-turn angle (or an exact unit
    ``rotation``) every field except ``m_const`` is a ``Fraction``.
    """
    if not params.s > 0:
        raise InvalidInput("theta functions need s > 0")
    r = rotation if rotation is not None else (exact_unit(theta) if params.exact else None)
    if r is None:
        r = complex(math.cos(theta), math.sin(theta))
    spec = TargetSpec(params)
    a = _a_of(params, r)
    link = spec.connect_to_conjugation(a, r)
    M1, M2, l, L, p = _m_from_lambdas(link.lambda1, link.lambda2)
    if not (0 < M1 < 2 and 0 < M2 < 2):
        raise InvariantViolation("theta functions", f"M1={float(M1)}, M2={float(M2)} outside (0, 2)")
    return ThetaFunctions(float(theta), link.lambda1, link.lambda2, M1, M2, l, L, p, m_const(params), a)


@dataclass(frozen=True)
class StaircaseStep:
    nu: Laminate
    R: ConformalMatrix
    n: int
    mass_up: float
    mu1: float
    mu2: float
    mu3: float
    t: float
    theta: float
    top: ConformalMatrix
    diagnostics: dict = field(default_factory=dict)
    splits: list = field(default_factory=list)  # (B, C) for each of the three splittings


def _expand(builder, leaf, dec: InfinityDecomposition, n, r, Q1, Q2, M1, M2, check=True):
    """Apply the three splittings of one step to ``leaf``; returns (top_id, mu1, mu2, mu3)."""
    t = dec.t
    e = t - n
    mu2 = M2 * (1 - e) / (2 * n + M2 + e * (2 - M2))
    mu3 = M1 * (1 - e) / (2 * (n + 1))
    for name, mu in (("mu2", mu2), ("mu3", mu3)):
        if not (0 <= mu <= 1):
            raise InvariantViolation("step weights", f"{name}={float(mu)} outside [0, 1] (t - n = {float(e)})")
    top = anti_conformal_level(n + 1, r)
    low1 = Q1 * t
    low2 = Q2 * (n + 1)
    # P~ is the intermediate node eliminated by the last split
    ptilde = low2 * mu3 + top * (1 - mu3)
    if dec.degenerate:
        p_id = leaf
        mu1 = 0 * mu2
    else:
        _, p_id = builder.split(leaf, dec.Q, dec.P, dec.mu1, ("T1", ""), check=check)
        mu1 = dec.mu1
    _, pt_id = builder.split(p_id, low1, ptilde, mu2, ("T1", ""), check=check)
    _, top_id = builder.split(pt_id, low2, top, mu3, ("T2", "S"), check=check)
    return top_id, mu1, mu2, mu3


def _rotation_from(dec, exact):
    # P = t J R = (0, t conj(r))
    r = dec.P.a_minus.conjugate() / dec.t
    if exact and isinstance(r, GaussianRational):
        return r
    r = complex(r)
    return r / abs(r)


def step(params: DiagonalPairParams, A: ConformalMatrix, n: int, rho=0.0, delta=None, check=True) -> StaircaseStep:
    """One staircase step from A close to n J R (rho = 0 means A lies exactly on S_n)."""
    if int(n) != n or n < 1:
        raise InvalidInput(f"step index must be an integer >= 1, got {n!r}")
    n = int(n)
    tf_m = m_const(params)
    if rho < 0:
        raise InvalidInput("rho must be non-negative")
    if rho > 0 and not rho < min(tf_m, 0.5):
        raise InvalidInput(f"rho={rho} must be below min(m_const, 1/2) = {min(tf_m, 0.5):.6g}")
    if delta is not None and not (0 <= delta < math.pi / 4):
        raise InvalidInput("delta must lie in [0, pi/4)")
    dist = dist_to_S(A, n)
    if rho > 0 and not dist < rho:
        raise InvalidInput(f"dist(A, S_n) = {dist:.3g} is not below rho = {rho}")
    if rho == 0 and dist > SUPPORT_TOL * n:
        raise InvalidInput(f"rho = 0 needs A on S_n, but dist(A, S_n) = {dist:.3g}")

    spec = TargetSpec(params)
    dec = spec.decompose_through_infinity(A)
    exact = A.exact and params.exact and dec.P.exact and isinstance(dec.t, Fraction)
    r = _rotation_from(dec, exact)
    if rho == 0 and not exact:
        # on S_n the split is degenerate up to rounding; take t = n exactly
        dec = InfinityDecomposition(ConformalMatrix(0j, 0j), A, 0.0, float(n), dec.theta, True)
    tf = theta_functions(params, dec.theta, rotation=r)
    link = spec.connect_to_conjugation(tf.a, r)
    builder = LaminateBuilder(A)
    top_id, mu1, mu2, mu3 = _expand(builder, 0, dec, n, r, link.Q1, link.Q2, tf.M1, tf.M2, check)
    nu = builder.freeze()
    mass_up = builder.nodes[top_id].weight
    top = builder.nodes[top_id].matrix
    splits = [(nu.nodes[node.children[0]].matrix, nu.nodes[node.children[1]].matrix)
              for node in nu.nodes if node.children]
    if dec.degenerate:
        # zero-weight first splitting; its partner t Q1 is rank-one connected to P = t J R
        splits.insert(0, (link.Q1 * dec.t, dec.P))
    out = StaircaseStep(nu, rotation_unit(r), n, mass_up, mu1, mu2, mu3, dec.t, dec.theta, top, splits=splits)
    _audit_step(spec, out, tf, A, rho, delta)
    return out


def _audit_step(spec, st: StaircaseStep, tf, A, rho, delta):
    n = st.n
    diag = st.diagnostics
    bar = None
    for i in st.nu.leaf_ids():
        node = st.nu.nodes[i]
        term = node.matrix * node.weight
        bar = term if bar is None else bar + term
    if A.exact and bar.exact:
        if bar != A:
            raise InvariantViolation("step barycenter", "barycenter differs from A")
    elif bar.distance(A) > 1e-10 * max(1.0, A.to_float().hs_norm()):
        raise InvariantViolation("step barycenter", f"error {bar.distance(A):.3g}")

    ratios = []
    on_top = 0
    for i in st.nu.leaf_ids():
        node = st.nu.nodes[i]
        M = node.matrix.to_float()
        scale = max(1.0, M.hs_norm())
        if node.label == "S":
            on_top += 1
            if dist_to_S(M, n + 1) > SUPPORT_TOL * scale:
                raise InvariantViolation("step support", "top atom is off S_{n+1}")
        else:
            j = 1 if node.label == "T1" else 2
            if spec.dist_to_target(M, j) > SUPPORT_TOL * scale:
                raise InvariantViolation("step support", f"atom off T{j}")
        op = M.op_norm()
        if op > 0:
            ratios.append(max(op / n, n / op))
    if on_top != 1:
        raise InvariantViolation("step support", "expected exactly one atom on S_{n+1}")
    diag["norm_constant"] = max(ratios)

    if rho > 0 and abs(float(st.t) - n) >= rho:
        raise InvariantViolation("step t", f"|t - n| = {abs(float(st.t) - n):.3g} >= rho")
    diag["mu1_constant"] = (1 - float(st.mu1)) * n / rho if rho > 0 and float(st.mu1) > 0 else 0.0

    lo, hi = tf.beta(n), tf.beta(n + 2)
    m = st.mass_up
    if rho == 0:
        if float(m) < float(lo) - SANDWICH_TOL or float(m) > float(hi) + SANDWICH_TOL:
            raise InvariantViolation(
                "growth sandwich", f"mass {float(m):.6g} outside [{float(lo):.6g}, {float(hi):.6g}]"
            )
        diag["sandwich_constant"] = 0.0
    else:
        c = 0.0
        if lo > 0 and m < lo:
            c = max(c, float(1 - m / lo) * n / rho)
        if m > hi:
            c = max(c, float(m / hi - 1) * n / rho)
        diag["sandwich_constant"] = c
    diag["beta_n"] = float(lo)
    diag["beta_n2"] = float(hi)

    if delta is not None and rho > 0 and dist_to_S(A, n, delta) < rho:
        if not abs(st.theta) < delta + rho:
            raise InvariantViolation("step angle", f"|theta_A| = {abs(st.theta):.3g} >= delta + rho")


@dataclass(frozen=True)
class IterateResult:
    nu: Laminate
    mass_series: list
    moment_series: list
    theta_functions: ThetaFunctions


def iterate(params: DiagonalPairParams, theta: float, N: int, p=None, check=True, exact=False) -> IterateResult:
    """N exact staircase steps from J R_theta.

    ``mass_series[n]`` is the weight of the atom on S_{n+1} after n steps and
    ``moment_series[n]`` the p-moment of the laminate after n steps (p
    defaults to p(theta)); index 0 is the starting Dirac mass.
    """
    if int(N) != N or N < 1:
        raise InvalidInput("N must be an integer >= 1")
    r = exact_unit(theta) if (exact and params.exact) else None
    if exact and r is None:
        raise InvalidInput("exact iteration needs exact parameters and a quarter-turn angle")
    if r is None:
        r = complex(math.cos(theta), math.sin(theta))
    tf = theta_functions(params, theta, rotation=r)
    spec = TargetSpec(params)
    link = spec.connect_to_conjugation(tf.a, r)
    pexp = float(tf.p) if p is None else float(p)
    JR = anti_conformal_level(1, r)
    builder = LaminateBuilder(JR)
    leaf = 0
    zero = ConformalMatrix(0, 0) if exact else ConformalMatrix(0j, 0j)
    norm1 = link.Q1.to_float().hs_norm()
    norm2 = link.Q2.to_float().hs_norm()
    sqrt2 = math.sqrt(2.0)
    mass = [1.0]
    moment = [sqrt2**pexp]
    settled = []
    for n in range(1, N + 1):
        A = builder.nodes[leaf].matrix
        dec = InfinityDecomposition(zero, A, 0 * tf.M1, n, float(theta), True)
        w_before = float(builder.nodes[leaf].weight)
        leaf, _, mu2, mu3 = _expand(builder, leaf, dec, n, r, link.Q1, link.Q2, tf.M1, tf.M2, check)
        mu2, mu3 = float(mu2), float(mu3)
        settled.append(w_before * mu2 * (n * norm1) ** pexp)
        settled.append(w_before * (1 - mu2) * mu3 * ((n + 1) * norm2) ** pexp)
        w = float(builder.nodes[leaf].weight)
        mass.append(w)
        moment.append(math.fsum(settled) + w * (sqrt2 * (n + 1)) ** pexp)
    return IterateResult(builder.freeze(), mass, moment, tf)


def loglog_slope(ns, values):
    """Least-squares slope of log(values) against log(ns), ignoring non-positive values."""
    ns = np.asarray(ns, float)
    v = np.asarray(values, float)
    keep = (v > 0) & (ns > 0)
    if keep.sum() < 2:
        raise InvalidInput("need at least two positive points for a slope")
    return float(np.polyfit(np.log(ns[keep]), np.log(v[keep]), 1)[0])


def _beta_start(l):
    return math.ceil(1 + float(l)) + 1


def beta_log_residuals(params: DiagonalPairParams, theta: float, n_max: int):
    """(ns, log prod_{j0..n} beta_j + p log n) for n = j0..n_max."""
    tf = theta_functions(params, theta)
    l, p = float(tf.l), float(tf.p)
    j0 = _beta_start(l)
    if n_max < j0:
        raise InvalidInput(f"n must be at least {j0}")
    ns = np.arange(j0, n_max + 1, dtype=float)
    logs = np.cumsum(np.log1p(-(1 + l) / ns))
    return ns, logs + p * np.log(ns)


def beta_product(params: DiagonalPairParams, theta: float, n: int):
    """Product of beta_j(theta) over j0 <= j <= n and the residual |log prod + p log n|."""
    tf = theta_functions(params, theta)
    l = tf.l
    j0 = _beta_start(l)
    if int(n) != n or n < j0:
        raise InvalidInput(f"n must be an integer >= {j0} (first positive factor), got {n!r}")
    if isinstance(l, Fraction) and n <= 2000:
        prod = Fraction(1)
        for j in range(j0, int(n) + 1):
            prod *= 1 - (1 + l) / j
        logp = math.log(prod)
    else:
        logp = math.fsum(math.log1p(-float(1 + l) / j) for j in range(j0, int(n) + 1))
        prod = math.exp(logp)
    return prod, abs(logp + float(tf.p) * math.log(n))


def write_theta_csv(path, params: DiagonalPairParams, thetas):
    tab = theta_table(params, thetas)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["theta", "lambda1", "lambda2", "l", "L", "p"])
        for i in range(len(tab["theta"])):
            w.writerow([repr(float(tab[c][i])) for c in ("theta", "lambda1", "lambda2", "l", "L", "p")])


def write_series_csv(path, mass_series, moment_series):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "mass", "moment"])
        for n, (m, mo) in enumerate(zip(mass_series, moment_series)):
            w.writerow([n, repr(float(m)), repr(float(mo))])

"""Gradient statistics of piecewise-affine maps: distribution functions,
weak-L^p quasinorms, L^p integrals, slope fits and weak-form residuals."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .coefficients import DiagonalPairParams
from .errors import InvalidInput
from .realize import PiecewiseAffineMap, SigmaField, StaircaseRun, extract_sigma_field


@dataclass(frozen=True)
class DistributionProfile:
    t_grid: np.ndarray
    lambda_values: np.ndarray  # |{|grad f| > t}| / |Omega|
    fitted_slope: float
    fit_range: tuple


def _norms_areas(pam: PiecewiseAffineMap, norm="hs"):
    areas = pam.areas()
    return pam.grad_norms(norm), areas / areas.sum()


def loglog_fit(t, lam, fit_range=None):
    """Least-squares slope of log lam against log t over fit_range (points with lam > 0)."""
    t = np.asarray(t, float)
    lam = np.asarray(lam, float)
    keep = lam > 0
    if fit_range is not None:
        keep &= (t >= fit_range[0]) & (t <= fit_range[1])
    if keep.sum() < 2:
        return math.nan
    return float(np.polyfit(np.log(t[keep]), np.log(lam[keep]), 1)[0])


def distribution_function(pam: PiecewiseAffineMap, t_grid, fit_range=None, norm="hs") -> DistributionProfile:
    """Normalized measure of {|grad f| > t} on each grid point, aggregated cell by cell."""
    t = np.asarray(t_grid, float)
    if np.any(t <= 0):
        raise InvalidInput("t grid must be positive")
    norms, w = _norms_areas(pam, norm)
    order = np.argsort(norms)
    ns, ws = norms[order], w[order]
    tail = np.concatenate([np.cumsum(ws[::-1])[::-1], [0.0]])
    lam = tail[np.searchsorted(ns, t, side="right")]
    lam = np.clip(lam, 0.0, 1.0)
    fr = tuple(fit_range) if fit_range is not None else (float(t.min()), float(t.max()))
    return DistributionProfile(t, lam, loglog_fit(t, lam, fr), fr)


def weak_lp_quasinorm(profile: DistributionProfile, p: float) -> float:
    """(sup over the grid of t^p lambda(t))^(1/p)."""
    if p < 1:
        raise InvalidInput("p must be >= 1")
    return float(np.max(profile.t_grid**p * profile.lambda_values)) ** (1 / p)


def lp_integral(pam: PiecewiseAffineMap, p: float, norm="hs") -> float:
    """Sum over cells of area * |grad f|^p."""
    if p < 1:
        raise InvalidInput("p must be >= 1")
    return math.fsum(pam.areas() * pam.grad_norms(norm) ** p)


def layer_cake_integral(pam: PiecewiseAffineMap, p: float, norm="hs") -> float:
    """p * int_0^inf t^(p-1) |{|grad f| > t}| dt, integrated exactly on the step profile."""
    norms = pam.grad_norms(norm)
    areas = pam.areas()
    order = np.argsort(norms)
    ns = norms[order]
    tail = np.cumsum(areas[order][::-1])[::-1]  # measure of {|grad f| >= ns[i]}
    edges = np.concatenate([[0.0], ns])
    # on (edges[i], edges[i+1]) the superlevel measure is tail[i]
    return math.fsum((edges[1:] ** p - edges[:-1] ** p) * tail)


def profile_rows(profile: DistributionProfile, p: float):
    return [(float(t), float(l), float(t**p * l)) for t, l in zip(profile.t_grid, profile.lambda_values)]


def write_profile_csv(path, profile: DistributionProfile, p: float):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "lambda", "t^p*lambda"])
        for row in profile_rows(profile, p):
            w.writerow([repr(x) for x in row])


def write_summary_json(path, summary: dict):
    from . import SCHEMA_VERSION

    doc = {"schema": SCHEMA_VERSION, "kind": "analysis"}
    doc.update(summary)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def distribution_sandwich(run: StaircaseRun, t_values, c_grid=None):
    """Smallest c on a grid with Omega_{floor(ct)+1} inside {|grad f| > t} inside Omega_{floor(t/c)}.

    Membership in Omega_n is read from the cell level tags. Returns
    (c, failures) where failures lists the t values no grid c satisfies.
    """
    norms = run.map.grad_norms()
    levels = np.array([c.level for c in run.map.cells])
    c_grid = np.linspace(1.0, 4.0, 61) if c_grid is None else np.asarray(c_grid)
    bad = []
    best = 1.0
    for t in t_values:
        above = norms > t
        for c in c_grid:
            n1, n2 = math.floor(c * t), math.floor(t / c)
            inner = levels >= n1 + 1
            outer = levels >= n2 if n2 >= 1 else np.ones_like(above)
            if np.all(above[inner]) and np.all(outer[above]):
                best = max(best, float(c))
                break
        else:
            bad.append(float(t))
    return best, bad


# weak residual ----------------------------------------------------------


@dataclass(frozen=True)
class HatGrid:
    """Interior nodes of a (k+1) x (k+1) partition of a box, one bilinear hat per node."""

    x0: float
    y0: float
    hx: float
    hy: float
    k: int = 5

    @classmethod
    def on_box(cls, domain, k=5):
        xs = [p[0] for p in domain]
        ys = [p[1] for p in domain]
        return cls(min(xs), min(ys), (max(xs) - min(xs)) / (k + 1), (max(ys) - min(ys)) / (k + 1), k)

    @property
    def centers(self):
        idx = np.arange(1, self.k + 1)
        X, Y = np.meshgrid(self.x0 + idx * self.hx, self.y0 + idx * self.hy, indexing="ij")
        return np.stack([X.ravel(), Y.ravel()], axis=-1)

    def values(self, pts):
        """(npts, k*k) hat values."""
        c = self.centers
        u = np.clip(1 - np.abs(pts[:, None, 0] - c[None, :, 0]) / self.hx, 0, None)
        v = np.clip(1 - np.abs(pts[:, None, 1] - c[None, :, 1]) / self.hy, 0, None)
        return u * v

    def grad_l1(self) -> float:
        """||grad phi||_{L^1} (the same for every hat)."""
        hx, hy = self.hx, self.hy

        def f(y, x):  # one quadrant, with u = x/hx, v = y/hy
            return math.hypot((1 - y / hy) / hx, (1 - x / hx) / hy)

        val, _ = integrate.dblquad(f, 0, hx, 0, hy, epsabs=1e-13, epsrel=1e-12)
        return 4 * val


def _edge_segments(pam: PiecewiseAffineMap, grid: HatGrid):
    """Cell edges split at grid lines: (cell index, start, end) arrays."""
    cidx, P, Q = [], [], []
    for i, c in enumerate(pam.cells):
        poly = c.poly
        n = len(poly)
        for j in range(n):
            cidx.append(i)
            P.append(poly[j])
            Q.append(poly[(j + 1) % n])
    cidx = np.array(cidx)
    P = np.array(P, float)
    Q = np.array(Q, float)
    gx = lambda x: np.floor((x - grid.x0) / grid.hx)
    gy = lambda y: np.floor((y - grid.y0) / grid.hy)
    simple = (gx(P[:, 0]) == gx(Q[:, 0])) & (gy(P[:, 1]) == gy(Q[:, 1]))
    out_c, out_p, out_q = [cidx[simple]], [P[simple]], [Q[simple]]
    extra_c, extra_p, extra_q = [], [], []
    for i in np.nonzero(~simple)[0]:
        p, q = P[i], Q[i]
        ts = {0.0, 1.0}
        d = q - p
        for axis, x0, h in ((0, grid.x0, grid.hx), (1, grid.y0, grid.hy)):
            if d[axis] != 0:
                lo, hi = sorted((p[axis], q[axis]))
                for m in range(int(math.floor((lo - x0) / h)) + 1, int(math.floor((hi - x0) / h)) + 1):
                    t = (x0 + m * h - p[axis]) / d[axis]
                    if 0 < t < 1:
                        ts.add(t)
        ts = sorted(ts)
        for a, b in zip(ts[:-1], ts[1:]):
            extra_c.append(cidx[i])
            extra_p.append(p + a * d)
            extra_q.append(p + b * d)
    if extra_c:
        out_c.append(np.array(extra_c))
        out_p.append(np.array(extra_p))
        out_q.append(np.array(extra_q))
    return np.concatenate(out_c), np.concatenate(out_p), np.concatenate(out_q)


def cell_hat_integrals(pam: PiecewiseAffineMap, grid: HatGrid) -> np.ndarray:
    """(ncells, k*k, 2): integral of grad phi over each cell, via the boundary integral of phi * normal.

    Every hat is quadratic along each split segment, so Simpson's rule is exact.
    """
    cidx, P, Q = _edge_segments(pam, grid)
    M = 0.5 * (P + Q)
    avg = (grid.values(P) + 4 * grid.values(M) + grid.values(Q)) / 6
    d = Q - P
    nrm = np.stack([d[:, 1], -d[:, 0]], axis=-1)  # outward normal times length (ccw cells)
    contrib = avg[:, :, None] * nrm[:, None, :]
    out = np.zeros((len(pam.cells), avg.shape[1], 2))
    np.add.at(out, cidx, contrib)
    return out


@dataclass(frozen=True)
class WeakResidual:
    residuals: np.ndarray  # per test function, int sigma grad f^1 . grad phi
    via_rows: np.ndarray  # the same through int (sigma a - R^T b) . grad phi
    stream: np.ndarray  # int R^T grad f^2 . grad phi (zero for a continuous map)
    grad_l1: float
    c_ratio: float  # max |residual| / (gamma * ||grad phi||_1)
    gamma: float


def weak_residual(pam: PiecewiseAffineMap, coeffs: DiagonalPairParams, gamma: float, k=5,
                  sigma: SigmaField = None) -> WeakResidual:
    """Max over a k x k grid of bilinear hats of |int sigma grad f^1 . grad phi|, computed cell-exactly."""
    if gamma <= 0:
        raise InvalidInput("gamma must be positive")
    sf = sigma or extract_sigma_field(pam, coeffs)
    grid = HatGrid.on_box(pam.domain, k)
    I = cell_hat_integrals(pam, grid)
    G = pam.gradients()
    s1 = np.array([1 / float(coeffs.K), 1 / float(coeffs.S1)])
    s2 = np.array([float(coeffs.K), float(coeffs.S2)])
    sig = np.where((sf.phase == 1)[:, None], s1, s2)
    Rt = np.array([[0.0, 1.0], [-1.0, 0.0]])  # transpose of the quarter turn
    flux = sig * G[:, 0:2]
    rows = sig * sf.residual_a - sf.residual_b @ Rt.T
    stream = G[:, 2:4] @ Rt.T
    res = np.einsum("ci,cki->k", flux, I)
    via = np.einsum("ci,cki->k", rows, I)
    st = np.einsum("ci,cki->k", stream, I)
    gl1 = grid.grad_l1()
    return WeakResidual(res, via, st, gl1, float(np.abs(res).max() / (gamma * gl1)), gamma)

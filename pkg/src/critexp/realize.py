"""Piecewise-affine realization of laminates and the staircase map.

A rank-one split A = lam B + (1 - lam) C with B - C = a (x) n is realized in a
convex cell by f = A x + b + a psi(x), where psi is a sawtooth in x.n with
slopes (1 - lam) and -lam, cut off near the cell boundary by s * dist(x, edge)
(the pointwise minimum of affine functions, so every piece is convex). With
s just below eta / |a| the cut-off pieces have gradient within eta of A; they form a
boundary layer whose area shrinks with the sawtooth period. Layer pieces are
realized again with shifted atoms, so most of their area also ends up near
the atoms.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .coefficients import DiagonalPairParams
from .conformal import ConformalMatrix, J, conformal_arrays, real_arrays
from .errors import BudgetExhausted, InvalidInput, InvariantViolation
from .laminate import Laminate
from .staircase import m_const, step, theta_table
from .targets import TargetSpec, dist_to_S

UNIT_SQUARE = ((0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0))
DEDUP_TOL = 1e-15
MAX_REFINEMENTS = 8
MESH_TOL = 1e-9


# polygons ---------------------------------------------------------------


def polygon_area(P) -> float:
    s = 0.0
    n = len(P)
    for i in range(n):
        x1, y1 = P[i]
        x2, y2 = P[(i + 1) % n]
        s += x1 * y2 - x2 * y1
    return 0.5 * s


def clip(P, gx, gy, c):
    """Part of the convex polygon P with gx*x + gy*y <= c (None if empty)."""
    v = [gx * x + gy * y - c for x, y in P]
    if max(v) <= 0:
        return P
    if min(v) >= 0:
        return None
    out = []
    n = len(P)
    for i in range(n):
        vp, vq = v[i], v[(i + 1) % n]
        p, q = P[i], P[(i + 1) % n]
        if vp <= 0:
            out.append(p)
        if (vp < 0 < vq) or (vq < 0 < vp):
            t = vp / (vp - vq)
            out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    res = []
    for pt in out:
        if not res or abs(pt[0] - res[-1][0]) + abs(pt[1] - res[-1][1]) > DEDUP_TOL:
            res.append(pt)
    if len(res) > 1 and abs(res[0][0] - res[-1][0]) + abs(res[0][1] - res[-1][1]) <= DEDUP_TOL:
        res.pop()
    if len(res) < 3:
        return None
    return res


def point_in_polygon(P, x, y, tol=1e-12) -> bool:
    """Closed containment test for a counter-clockwise convex polygon."""
    n = len(P)
    for i in range(n):
        (x1, y1), (x2, y2) = P[i], P[(i + 1) % n]
        ex, ey = x2 - x1, y2 - y1
        L = math.hypot(ex, ey)
        if (ex * (y - y1) - ey * (x - x1)) < -tol * max(L, 1.0):
            return False
    return True


def check_convex_polygon(P):
    P = [tuple(map(float, v)) for v in P]
    if len(P) < 3:
        raise InvalidInput("a cell needs at least three vertices")
    if polygon_area(P) <= 0:
        raise InvalidInput("cell vertices must be in counter-clockwise order with positive area")
    n = len(P)
    for i in range(n):
        (x0, y0), (x1, y1), (x2, y2) = P[i - 1], P[i], P[(i + 1) % n]
        if (x1 - x0) * (y2 - y1) - (y1 - y0) * (x2 - x1) < -1e-14:
            raise InvalidInput("cell must be convex")
    return P


# real 2x2 helpers; gradients are stored as (m11, m12, m21, m22) tuples


def _real4(M: ConformalMatrix):
    R = M.to_float().to_real()
    return (float(R[0, 0]), float(R[0, 1]), float(R[1, 0]), float(R[1, 1]))


def _conf(G) -> ConformalMatrix:
    m11, m12, m21, m22 = G
    return ConformalMatrix(complex((m11 + m22) / 2, (m21 - m12) / 2), complex((m11 - m22) / 2, (m21 + m12) / 2))


def _sub4(X, Y):
    return tuple(x - y for x, y in zip(X, Y))


def _add4(X, Y):
    return tuple(x + y for x, y in zip(X, Y))


def _norm4(X):
    return math.sqrt(sum(x * x for x in X))


def rank_one_factor(D):
    """Write a rank-one real matrix (4-tuple) as a (x) n with |n| = 1."""
    r1, r2 = (D[0], D[1]), (D[2], D[3])
    v = r1 if math.hypot(*r1) >= math.hypot(*r2) else r2
    nv = math.hypot(*v)
    if nv == 0:
        raise InvalidInput("zero matrix has no rank-one factorization")
    n = (v[0] / nv, v[1] / nv)
    a = (r1[0] * n[0] + r1[1] * n[1], r2[0] * n[0] + r2[1] * n[1])
    resid = math.hypot(D[0] - a[0] * n[0], D[1] - a[0] * n[1]) + math.hypot(D[2] - a[1] * n[0], D[3] - a[1] * n[1])
    if resid > 1e-9 * _norm4(D):
        raise InvalidInput("B - C is not rank one")
    return a, n


# maps -------------------------------------------------------------------


class Cell:
    __slots__ = ("id", "poly", "G", "b", "level", "phase", "tag", "parent", "atom")

    def __init__(self, id, poly, G, b, level=0, phase=0, tag="", parent=-1, atom=-1):
        self.id = id
        self.poly = poly
        self.G = G
        self.b = b
        self.level = level
        self.phase = phase
        self.tag = tag
        self.parent = parent
        self.atom = atom

    @property
    def area(self):
        return polygon_area(self.poly)

    @property
    def gradient(self) -> ConformalMatrix:
        return _conf(self.G)

    def value(self, x, y):
        m11, m12, m21, m22 = self.G
        return (m11 * x + m12 * y + self.b[0], m21 * x + m22 * y + self.b[1])


@dataclass
class PiecewiseAffineMap:
    cells: list
    domain: tuple
    boundary_matrix: ConformalMatrix
    boundary_offset: tuple = (0.0, 0.0)
    diagnostics: dict = field(default_factory=dict)

    def areas(self) -> np.ndarray:
        return np.array([c.area for c in self.cells])

    def gradients(self) -> np.ndarray:
        return np.array([c.G for c in self.cells], dtype=float).reshape(-1, 4)

    def grad_norms(self, norm="hs") -> np.ndarray:
        G = self.gradients()
        if norm == "hs":
            return np.sqrt((G**2).sum(axis=1))
        if norm == "op":
            ap, am = conformal_arrays(G.reshape(-1, 2, 2))
            return np.abs(ap) + np.abs(am)
        raise InvalidInput(f"unknown norm {norm!r}")

    @property
    def domain_area(self):
        return polygon_area(self.domain)


class _Budget:
    def __init__(self, limit):
        self.limit = limit
        self.used = 0

    def reserve(self, n, what):
        if self.limit is not None and self.used + n > self.limit:
            raise BudgetExhausted(
                f"cell budget {self.limit} exceeded while {what} (needs about {self.used + n} cells)"
            )


def _cutoffs(P, n, u0, u1, slope):
    """Affine cut-off functions slope * dist(x, edge) for edges not parallel to the strips."""
    out = []
    length = 0.0
    N = len(P)
    scale = 1.0 + abs(u0) + abs(u1)
    for i in range(N):
        p, q = P[i], P[(i + 1) % N]
        ex, ey = q[0] - p[0], q[1] - p[1]
        L = math.hypot(ex, ey)
        nx, ny = -ey / L, ex / L  # inward normal for ccw polygons
        if abs(abs(nx * n[0] + ny * n[1]) - 1) < 1e-9:
            up = n[0] * p[0] + n[1] * p[1]
            if abs(up - u0) < 1e-12 * scale or abs(up - u1) < 1e-12 * scale:
                # the sawtooth already vanishes on this edge
                continue
        out.append((slope * nx, slope * ny, -slope * (nx * p[0] + ny * p[1])))
        length += L
    return out, length


def _sawtooth_pieces(P, A, b, a, n, lam, cands, u0, h, m):
    """Pieces of f = A x + b + a * min(sawtooth, cut-offs) over m periods of width h."""
    out = []
    for k in range(m):
        base = u0 + k * h
        teeth = (
            ((1 - lam) * n[0], (1 - lam) * n[1], -(1 - lam) * base, base, base + lam * h, "B"),
            (-lam * n[0], -lam * n[1], lam * (base + h), base + lam * h, base + h, "C"),
        )
        for gx, gy, c0, ua, ub, tag in teeth:
            S = clip(P, -n[0], -n[1], -ua)
            if S is None:
                continue
            S = clip(S, n[0], n[1], ub)
            if S is None:
                continue
            funcs = [(gx, gy, c0, tag)] + [(cx, cy, cc, "L") for cx, cy, cc in cands]
            # affine functions compared at the slab vertices: one that is >= another
            # everywhere on the slab never attains the minimum in its interior
            vals = [[f0 * x + f1 * y + fc for x, y in S] for f0, f1, fc, _ in funcs]
            live = [
                i for i in range(len(funcs))
                if not any(j != i and all(vj <= vi for vj, vi in zip(vals[j], vals[i])) and
                           (j < i or any(vj < vi for vj, vi in zip(vals[j], vals[i])))
                           for j in range(len(funcs)))
            ]
            for i in live:
                gi0, gi1, ci, ti = funcs[i]
                R = S
                for j in live:
                    gj0, gj1, cj, _ = funcs[j]
                    if i == j:
                        continue
                    R = clip(R, gi0 - gj0, gi1 - gj1, cj - ci)
                    if R is None:
                        break
                if R is None or polygon_area(R) <= 0:
                    continue
                G = (A[0] + a[0] * gi0, A[1] + a[0] * gi1, A[2] + a[1] * gi0, A[3] + a[1] * gi1)
                out.append((R, G, (b[0] + a[0] * ci, b[1] + a[1] * ci), ti))
    return out


def _first_order(P, A, b, Bm, Cm, lam, eta, budget=None):
    """Split one cell; returns (pieces, info). Gradients are 4-tuples."""
    if not (0 <= lam <= 1):
        raise InvalidInput(f"split fraction {lam} outside [0, 1]")
    comb = tuple(lam * x + (1 - lam) * y for x, y in zip(Bm, Cm))
    if _norm4(_sub4(comb, A)) > 1e-10 * max(1.0, _norm4(A)):
        raise InvalidInput("realization needs A = lam B + (1 - lam) C")
    D = _sub4(Bm, Cm)
    if lam in (0, 1) or _norm4(D) == 0:
        return [(P, A, b, "B" if lam == 1 else "C")], {"periods": 0, "layer_area": 0.0}
    if not eta < _norm4(D) / 2:
        raise InvalidInput(f"tolerance {eta} must be below |B - C|/2 = {_norm4(D) / 2:.6g}")
    a, n = rank_one_factor(D)
    anorm = math.hypot(*a)
    us = [n[0] * x + n[1] * y for x, y in P]
    u0, u1 = min(us), max(us)
    width = u1 - u0
    area = polygon_area(P)
    # slope 0.99 eta/|a| keeps layer gradients strictly inside the eta-ball around A
    slope_eta = 0.99 * eta
    cands, Lsum = _cutoffs(P, n, u0, u1, slope_eta / anorm)
    if Lsum > 0:
        # layer area ~ lam (1 - lam) |a| h Lsum / (2 eta) must stay below eta |cell|
        h_max = 2 * slope_eta * eta * area / (lam * (1 - lam) * anorm * Lsum)
        m = max(1, math.ceil(1.05 * width / h_max))
    else:
        m = 1
    for _ in range(MAX_REFINEMENTS + 1):
        if budget is not None:
            budget.reserve(2 * m + 2 * len(cands), "realizing a rank-one split")
        pieces = _sawtooth_pieces(P, A, b, a, n, lam, cands, u0, width / m, m)
        layer = sum(polygon_area(p[0]) for p in pieces if p[3] == "L")
        if layer < eta * area:
            return pieces, {"periods": m, "layer_area": layer}
        # layer area is roughly proportional to the period once the layer is thin
        m = max(2 * m, math.ceil(1.1 * m * layer / (eta * area)))
    raise InvariantViolation("boundary layer", f"layer area {layer:.3g} not below {eta * area:.3g}")


def realize_first_order(cell, A, B, C, lam, delta, offset=(0.0, 0.0), max_cells=None) -> PiecewiseAffineMap:
    """Piecewise-affine f equal to A x + offset on the cell boundary with gradient B or C
    on strips of volume fractions lam, 1 - lam, plus a boundary layer of area below
    delta * |cell| where the gradient is within delta of A (tag "L")."""
    P = check_convex_polygon(cell)
    A4, B4, C4 = (_real4(M) if isinstance(M, ConformalMatrix) else tuple(map(float, np.ravel(M))) for M in (A, B, C))
    budget = _Budget(max_cells)
    pieces, info = _first_order(P, A4, tuple(offset), B4, C4, float(lam), float(delta), budget)
    cells = [Cell(i, poly, G, bb, tag=tag) for i, (poly, G, bb, tag) in enumerate(pieces)]
    A_c = A if isinstance(A, ConformalMatrix) else _conf(A4)
    return PiecewiseAffineMap(cells, tuple(P), A_c, tuple(offset), dict(info))


def realize_laminate(cell, lam: Laminate, delta, alpha=None, offset=(0.0, 0.0), max_cells=None,
                     max_layer_depth=2, _budget=None) -> PiecewiseAffineMap:
    """Realize every split of a laminate tree inside a convex cell.

    Splits use tolerance delta/2; boundary-layer pieces are realized again from
    the same tree node with all atoms shifted by the layer gradient error, with
    the tolerance halved at each layer generation, so the accumulated shift
    stays below delta. Layer pieces left after ``max_layer_depth`` generations
    are tagged "U" (unresolved) and their area is reported.
    """
    P = check_convex_polygon(cell)
    budget = _budget or _Budget(max_cells)
    nodes = lam.nodes
    mats = [_real4(nd.matrix) for nd in nodes]
    out = []
    stats = {"periods": 0, "unresolved_area": 0.0, "splits": 0}

    def emit(poly, G, bb, tag, atom):
        out.append(Cell(len(out), poly, G, bb, tag=tag, atom=atom))

    # explicit stack keeps deep trees off the recursion limit; order is deterministic
    stack = [(P, 0, (0.0, 0.0, 0.0, 0.0), tuple(map(float, offset)), delta / 2, 0)]
    while stack:
        poly, nid, shift, bb, eta, gen = stack.pop()
        node = nodes[nid]
        A4 = _add4(mats[nid], shift)
        if node.children is None:
            emit(poly, A4, bb, node.label or "atom", nid)
            continue
        ib, ic = node.children
        Bm, Cm = _add4(mats[ib], shift), _add4(mats[ic], shift)
        pieces, info = _first_order(poly, A4, bb, Bm, Cm, float(node.lam), eta, budget)
        stats["periods"] += info["periods"]
        stats["splits"] += 1
        nxt = []
        for piece, G, b2, tag in pieces:
            if tag == "B":
                nxt.append((piece, ib, shift, b2, eta, gen))
            elif tag == "C":
                nxt.append((piece, ic, shift, b2, eta, gen))
            elif gen < max_layer_depth:
                nxt.append((piece, nid, _sub4(G, mats[nid]), b2, eta / 2, gen + 1))
            else:
                emit(piece, G, b2, "U", -1)
                stats["unresolved_area"] += polygon_area(piece)
        budget.used += len(pieces) - 1
        stack.extend(reversed(nxt))
    root = nodes[0].matrix
    pam = PiecewiseAffineMap(out, tuple(P), root.to_float() if root.exact else root, tuple(offset), stats)
    if alpha is not None:
        stats["holder"] = holder_seminorm(pam, alpha)
    return pam


# audits -----------------------------------------------------------------


class _CellIndex:
    """Uniform grid over cell bounding boxes for point location."""

    def __init__(self, cells, domain):
        xs = [p[0] for p in domain]
        ys = [p[1] for p in domain]
        self.x0, self.y0 = min(xs), min(ys)
        w = max(max(xs) - self.x0, max(ys) - self.y0) or 1.0
        self.nb = max(1, int(math.sqrt(len(cells))))
        self.size = w / self.nb
        self.buckets = {}
        for c in cells:
            cx = [p[0] for p in c.poly]
            cy = [p[1] for p in c.poly]
            i0, i1 = self._ix(min(cx)), self._ix(max(cx))
            j0, j1 = self._ix(min(cy) - self.y0 + self.x0), self._ix(max(cy) - self.y0 + self.x0)
            for i in range(i0, i1 + 1):
                for j in range(j0, j1 + 1):
                    self.buckets.setdefault((i, j), []).append(c)

    def _ix(self, x):
        return min(self.nb - 1, max(0, int((x - self.x0) / self.size)))

    def candidates(self, x, y):
        return self.buckets.get((self._ix(x), self._ix(y - self.y0 + self.x0)), ())


def audit_partition(pam: PiecewiseAffineMap, tol=MESH_TOL) -> float:
    """Relative mismatch between total cell area and the domain area."""
    total = math.fsum(c.area for c in pam.cells)
    err = abs(total - pam.domain_area) / pam.domain_area
    if err > tol or any(c.area <= 0 for c in pam.cells):
        raise InvariantViolation("area partition", f"cells cover {total!r} of {pam.domain_area!r}")
    return err


def _on_boundary(domain, x, y, tol=1e-12):
    n = len(domain)
    for i in range(n):
        (x1, y1), (x2, y2) = domain[i], domain[(i + 1) % n]
        ex, ey = x2 - x1, y2 - y1
        L2 = ex * ex + ey * ey
        t = ((x - x1) * ex + (y - y1) * ey) / L2
        if -tol <= t <= 1 + tol and abs(ex * (y - y1) - ey * (x - x1)) <= tol * math.sqrt(L2):
            return True
    return False


def audit_boundary(pam: PiecewiseAffineMap, tol=MESH_TOL) -> float:
    """Largest |f(v) - (A v + b)| over cell vertices lying on the domain boundary."""
    A = _real4(pam.boundary_matrix)
    b = pam.boundary_offset
    worst = 0.0
    for c in pam.cells:
        for x, y in c.poly:
            if _on_boundary(pam.domain, x, y):
                fx, fy = c.value(x, y)
                ex = fx - (A[0] * x + A[1] * y + b[0])
                ey = fy - (A[2] * x + A[3] * y + b[1])
                worst = max(worst, math.hypot(ex, ey))
    if worst > tol:
        raise InvariantViolation("boundary datum", f"max deviation {worst:.3g} from the affine boundary map")
    return worst


def audit_continuity(pam: PiecewiseAffineMap, tol=MESH_TOL) -> float:
    """Largest disagreement between cells at shared vertices (hanging nodes included)."""
    index = _CellIndex(pam.cells, pam.domain)
    seen = set()
    worst = 0.0
    for c in pam.cells:
        for x, y in c.poly:
            key = (round(x, 12), round(y, 12))
            if key in seen:
                continue
            seen.add(key)
            vals = [d.value(x, y) for d in index.candidates(x, y) if point_in_polygon(d.poly, x, y)]
            if len(vals) > 1:
                vx = [v[0] for v in vals]
                vy = [v[1] for v in vals]
                worst = max(worst, max(vx) - min(vx), max(vy) - min(vy))
    if worst > tol:
        raise InvariantViolation("continuity", f"cells disagree by {worst:.3g} at a shared vertex")
    return worst


def holder_seminorm(pam: PiecewiseAffineMap, alpha, max_points=1500, seed=0) -> float:
    """[f - A x - b]_{C^alpha} estimated on (a deterministic sample of) mesh vertices."""
    A = _real4(pam.boundary_matrix)
    b = pam.boundary_offset
    pts = {}
    for c in pam.cells:
        for x, y in c.poly:
            key = (round(x, 12), round(y, 12))
            if key not in pts:
                fx, fy = c.value(x, y)
                pts[key] = (x, y, fx - (A[0] * x + A[1] * y + b[0]), fy - (A[2] * x + A[3] * y + b[1]))
    arr = np.array(sorted(pts.values()))
    if len(arr) > max_points:
        rng = np.random.default_rng(seed)
        arr = arr[np.sort(rng.choice(len(arr), max_points, replace=False))]
    X, F = arr[:, :2], arr[:, 2:]
    dx = np.linalg.norm(X[:, None, :] - X[None, :, :], axis=-1)
    df = np.linalg.norm(F[:, None, :] - F[None, :, :], axis=-1)
    mask = dx > 1e-14
    if not mask.any():
        return 0.0
    return float((df[mask] / dx[mask] ** alpha).max())


def atom_fractions(pam: PiecewiseAffineMap) -> dict:
    """Area fraction of the cells realizing each laminate leaf (key -1: unresolved)."""
    out = {}
    for c in pam.cells:
        out[c.atom] = out.get(c.atom, 0.0) + c.area
    total = pam.domain_area
    return {k: v / total for k, v in out.items()}


# staircase map ----------------------------------------------------------


@dataclass(frozen=True)
class StaircaseParams:
    N: int = 8
    delta0: float = 0.1
    gamma: float = 0.05
    eps: float = 0.1
    alpha: float = 0.5
    budget: int = 1_000_000
    rho1: float | None = None
    realize_tol: float | None = None  # replaces rho_n for n >= 2 when set (coarse runs)
    max_layer_depth: int = 2

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise InvalidInput("N must be an integer >= 1")
        for name in ("delta0", "gamma", "eps"):
            if not getattr(self, name) > 0:
                raise InvalidInput(f"{name} must be positive")
        if not 0 < self.alpha < 1:
            raise InvalidInput("alpha must lie in (0, 1)")
        if self.budget < 1:
            raise InvalidInput("budget must be positive")
        if self.realize_tol is not None and not self.realize_tol > 0:
            raise InvalidInput("realize_tol must be positive")


@dataclass
class Schedule:
    delta: float
    rho: list  # rho[n] for n = 1..N+1 (index 0 unused)
    delta_n: list
    m_const: float
    c_hat: float
    dist_S1_T: float
    p_delta0: float
    p_max: float


def modulus_delta(params: DiagonalPairParams, delta0: float, grid=4096):
    """Largest delta < pi/4 on a grid with osc of p over any delta-window below delta0.

    Returns (delta, p(R_delta)). When p is constant in theta every delta works.
    """
    gap = float(2 * params.K / (params.K + 1) - 2 * params.S / (params.S + 1))
    th = np.linspace(-math.pi, math.pi, 2 * grid, endpoint=False)
    p = theta_table(params, th)["p"]
    if gap <= 1e-12:
        delta = math.pi / 8
        return delta, float(theta_table(params, [delta])["p"][0])
    if not delta0 < gap:
        raise InvalidInput(f"delta0 must be below 2K/(K+1) - 2S/(S+1) = {gap:.6g}")
    step_ = th[1] - th[0]
    best = 0.0
    pp = np.concatenate([p, p])
    for w in range(1, int((math.pi / 4) / step_)):
        # oscillation over windows of w grid steps
        win = np.lib.stride_tricks.sliding_window_view(pp, w + 1)[: len(p)]
        if (win.max(axis=1) - win.min(axis=1)).max() >= delta0:
            break
        best = w * step_
    if best == 0.0:
        raise InvalidInput("delta0 is too small for the angle grid")
    return best, float(theta_table(params, [best])["p"][0])


def make_schedule(params: DiagonalPairParams, sp: StaircaseParams) -> Schedule:
    mc = m_const(params)
    c_hat = step(params, J if params.exact else J.to_float(), 1).diagnostics["norm_constant"]
    th = np.linspace(-math.pi, math.pi, 4096, endpoint=False)
    spec = TargetSpec(params)
    am = np.exp(-1j * th)
    ap = np.zeros_like(am)
    dST = float(min(spec.dist_arrays(ap, am, 1).min(), spec.dist_arrays(ap, am, 2).min()))
    delta, p_delta = modulus_delta(params, sp.delta0)
    rho1 = 0.25 * min(mc, 1 / c_hat, dST, sp.gamma) * 0.99
    if sp.rho1 is not None:
        if not 0 < sp.rho1 <= rho1:
            raise InvalidInput(f"rho1 must lie in (0, {rho1:.6g}]")
        rho1 = sp.rho1
    rho = [math.nan, rho1]
    for n in range(2, sp.N + 2):
        if sp.realize_tol is not None:
            rho.append(sp.realize_tol)
        else:
            rho.append(min(rho[-1] * 0.99, 0.99 * (delta / 4) * 2.0**-n))
    if sp.realize_tol is not None and not sp.realize_tol < min(mc, 0.5):
        raise InvalidInput(f"realize_tol must be below min(m_const, 1/2) = {min(mc, 0.5):.6g}")
    delta_n = [math.nan, 0.0]
    for n in range(2, sp.N + 2):
        delta_n.append(delta_n[-1] + rho[n - 1])
    pmax = float(2 * params.K / (params.K + 1))
    return Schedule(delta, rho, delta_n, mc, c_hat, dST, p_delta, pmax)


@dataclass
class StaircaseRun:
    map: PiecewiseAffineMap
    omega_n_areas: list  # index n -> |Omega_n| / |Omega| for n = 1..depth+1 (index 0 unused)
    params: StaircaseParams
    schedule: Schedule
    p_delta0: float
    depth: int
    levels: dict  # n -> list of (cell id, parent id, polygon) for the cells of Omega_n
    diagnostics: dict = field(default_factory=dict)
    complete: bool = True


def _classify(spec, cells, rho_next):
    """Phase per cell: nearest target plane if closer than rho_next, else 0 (still active)."""
    G = np.array([c.G for c in cells], dtype=float).reshape(-1, 2, 2)
    ap, am = conformal_arrays(G)
    d1, d2 = spec.dist_arrays(ap, am, 1), spec.dist_arrays(ap, am, 2)
    return np.where(np.minimum(d1, d2) < rho_next, np.where(d1 <= d2, 1, 2), 0).tolist()


def build_staircase_map(params: StaircaseParams, domain=UNIT_SQUARE, coeffs: DiagonalPairParams = None,
                        on_budget="raise") -> StaircaseRun:
    """Staircase map with f = J x on the boundary of a convex domain.

    Level n refines every cell of Omega_n by one staircase step realized with
    tolerance rho_{n+1}; cells within rho_{n+1} of the target planes retire.
    ``on_budget="partial"`` returns the run completed so far instead of
    raising :class:`BudgetExhausted`.
    """
    if coeffs is None:
        raise InvalidInput("coefficient parameters are required")
    P = check_convex_polygon(domain)
    sched = make_schedule(coeffs, params)
    spec = TargetSpec(coeffs)
    budget = _Budget(params.budget)
    J4 = _real4(J)
    dom_area = polygon_area(P)
    cells = [Cell(0, P, J4, (0.0, 0.0), level=1, phase=0, tag="S", parent=-1)]
    budget.used = 1
    levels = {1: [(0, -1, tuple(P))]}
    next_id = 1
    diag = {"sandwich_constant": 0.0, "mu1_constant": 0.0, "norm_constant": 0.0, "periods": 0,
            "unresolved_area": [], "stalled_area": 0.0, "angle_ok": True}
    depth = 0
    complete = True

    for n in range(1, params.N + 1):
        rho_n, rho_next = sched.rho[n], sched.rho[n + 1]
        tol = rho_next
        active = [c for c in cells if c.level == n and c.phase == 0]
        snapshot = list(cells)
        new_cells = [c for c in cells if not (c.level == n and c.phase == 0)]
        level_cells = []
        unresolved = 0.0
        try:
            for c in active:
                A = _conf(c.G)
                if dist_to_S(A, n) >= rho_n:
                    # not close enough to S_n to take a step: the cell stalls
                    c.tag = "stalled"
                    new_cells.append(c)
                    diag["stalled_area"] += c.area
                    continue
                st = step(coeffs, A, n, rho=rho_n if dist_to_S(A, n) > 0 else 0.0, delta=sched.delta_n[n] or None)
                for key in ("sandwich_constant", "mu1_constant", "norm_constant"):
                    diag[key] = max(diag[key], st.diagnostics.get(key, 0.0))
                if abs(st.theta) >= sched.delta:
                    diag["angle_ok"] = False
                sub = realize_laminate(c.poly, st.nu, tol, offset=c.b, max_layer_depth=params.max_layer_depth,
                                       _budget=budget)
                diag["periods"] += sub.diagnostics["periods"]
                unresolved += sub.diagnostics["unresolved_area"]
                for sc, phase in zip(sub.cells, _classify(spec, sub.cells, rho_next)):
                    level = n if phase else n + 1
                    nc = Cell(next_id, sc.poly, sc.G, sc.b, level=level, phase=phase, tag=sc.tag, parent=c.id)
                    next_id += 1
                    new_cells.append(nc)
                    if phase == 0:
                        level_cells.append((nc.id, c.id, tuple(nc.poly)))
        except BudgetExhausted as exc:
            complete = False
            cells = snapshot
            diag["budget_message"] = str(exc)
            break
        cells = new_cells
        levels[n + 1] = level_cells
        diag["unresolved_area"].append(unresolved)
        depth = n

    # renumber deterministically in creation order
    cells.sort(key=lambda c: c.id)
    pam = PiecewiseAffineMap(cells, tuple(P), J.to_float(), (0.0, 0.0), {})
    omega = [math.nan] + [math.fsum(polygon_area(p) for _, _, p in levels[k]) / dom_area
                          for k in range(1, depth + 2)]
    run = StaircaseRun(pam, omega, params, sched, sched.p_delta0, depth,
                       {k: levels[k] for k in range(1, depth + 2)}, diag, complete)
    diag["cells"] = len(cells)
    diag["omega_sandwich"] = sandwich_report(run, coeffs)
    if not complete and on_budget == "raise":
        raise BudgetExhausted(
            f"{diag['budget_message']}; completed depth {depth} of {params.N}", partial=run
        )
    return run


def sandwich_report(run: StaircaseRun, coeffs: DiagonalPairParams) -> list:
    """Per level: (n, |Omega_n|/|Omega|, lower, upper, holds) with the recorded step constant."""
    sched = run.schedule
    c = max(run.diagnostics.get("sandwich_constant", 0.0), sched.c_hat)
    tab0 = theta_table(coeffs, [0.0])
    tabd = theta_table(coeffs, [sched.delta])
    l0, ld = float(tab0["l"][0]), float(tabd["l"][0])
    out = []
    lo = hi = 1.0
    for n in range(1, run.depth + 2):
        frac = run.omega_n_areas[n]
        out.append((n, frac, lo, hi, bool(lo - 1e-12 <= frac <= hi + 1e-12)))
        rj = sched.rho[n]
        lo *= (1 - c * rj / n) * (1 - (1 + l0) / n)
        hi *= (1 + c * rj / n) * (1 - (1 + ld) / (n + 2))
    return out


def audit_nesting(run: StaircaseRun) -> bool:
    """Each cell of Omega_{n+1} descends from a cell of Omega_n and lies inside it."""
    for n in range(1, run.depth + 1):
        parents = {cid: poly for cid, _, poly in run.levels[n]}
        for cid, pid, poly in run.levels[n + 1]:
            if pid not in parents:
                raise InvariantViolation("nesting", f"cell {cid} of level {n + 1} has no parent in level {n}")
            pp = parents[pid]
            if not all(point_in_polygon(pp, x, y, 1e-9) for x, y in poly):
                raise InvariantViolation("nesting", f"cell {cid} sticks out of its parent")
    return True


def retired_target_distance(run: StaircaseRun, coeffs: DiagonalPairParams) -> float:
    """max dist(grad f, T_phase) over retired cells."""
    spec = TargetSpec(coeffs)
    G = np.array([c.G for c in run.map.cells if c.phase in (1, 2)]).reshape(-1, 4)
    if len(G) == 0:
        return 0.0
    ph = np.array([c.phase for c in run.map.cells if c.phase in (1, 2)])
    ap, am = conformal_arrays(G.reshape(-1, 2, 2))
    d = np.where(ph == 1, spec.dist_arrays(ap, am, 1), spec.dist_arrays(ap, am, 2))
    return float(d.max())


# sigma field ------------------------------------------------------------


@dataclass
class SigmaField:
    phase: np.ndarray  # 1 or 2 per cell
    residual_a: np.ndarray  # (ncells, 2)
    residual_b: np.ndarray
    E: np.ndarray
    ambiguous: np.ndarray  # bool per cell


def extract_sigma_field(pam: PiecewiseAffineMap, coeffs: DiagonalPairParams, gamma=None, c_bound=10.0) -> SigmaField:
    """Nearest-phase assignment and the row residuals of the projection onto T_phase.

    E is the first row of the projected gradient, so that grad f^1 = E + a and
    grad f^2 = R sigma E + b with R the quarter turn. With ``gamma`` set, every
    retired cell must have |a|, |b| <= c_bound * gamma.
    """
    spec = TargetSpec(coeffs)
    G = pam.gradients()
    ap, am = conformal_arrays(G.reshape(-1, 2, 2))
    d1, d2 = spec.dist_arrays(ap, am, 1), spec.dist_arrays(ap, am, 2)
    phase = np.where(d1 <= d2, 1, 2)
    ambiguous = np.abs(d1 - d2) <= 1e-12 * np.maximum(1.0, np.sqrt((G**2).sum(axis=1)))
    k = float(coeffs.k)
    X = np.stack([ap.real, ap.imag, am.real, am.imag], axis=-1)
    Ppr = np.empty_like(G)
    for j in (1, 2):
        ex, ey = spec._basis(j)
        x = X @ ex / (ex @ ex)
        y = X @ ey / (ey @ ey)
        # T_j element with first conformal coordinate x + iy, second +-d_j(x - iy)
        d = k * x - 1j * float(coeffs.s_j(j)) * y
        R = real_arrays(x + 1j * y, d if j == 1 else -d).reshape(-1, 4)
        Ppr = np.where((phase == j)[:, None], R, Ppr)
    E = Ppr[:, 0:2]
    sig = {
        1: np.diag([1 / float(coeffs.K), 1 / float(coeffs.S1)]),
        2: np.diag([float(coeffs.K), float(coeffs.S2)]),
    }
    Rq = np.array([[0.0, -1.0], [1.0, 0.0]])
    sE = np.where((phase == 1)[:, None], E @ sig[1].T, E @ sig[2].T)
    res_a = G[:, 0:2] - E
    res_b = G[:, 2:4] - sE @ Rq.T
    if gamma is not None:
        retired = np.array([c.phase in (1, 2) for c in pam.cells])
        worst = max(
            np.linalg.norm(res_a[retired], axis=1).max(initial=0.0),
            np.linalg.norm(res_b[retired], axis=1).max(initial=0.0),
        )
        if worst > c_bound * gamma:
            raise InvariantViolation("sigma residual", f"row residual {worst:.3g} > {c_bound} * gamma")
    return SigmaField(phase, res_a, res_b, E, ambiguous)


# mesh files -------------------------------------------------------------


def mesh_to_json(pam: PiecewiseAffineMap, extra=None) -> str:
    from . import SCHEMA_VERSION

    doc = {
        "schema": SCHEMA_VERSION,
        "kind": "mesh",
        "domain": [list(v) for v in pam.domain],
        "boundary_matrix": list(_real4(pam.boundary_matrix)),
        "boundary_offset": list(pam.boundary_offset),
        "cells": [
            {
                "id": c.id,
                "vertices": [[x, y] for x, y in c.poly],
                "gradient": list(c.G),
                "offset": list(c.b),
                "level": c.level,
                "phase": c.phase,
                "tag": c.tag,
                "parent": c.parent,
            }
            for c in pam.cells
        ],
    }
    if extra:
        doc.update(extra)
    return json.dumps(doc, separators=(",", ":"))


def mesh_from_json(text: str) -> PiecewiseAffineMap:
    from . import SCHEMA_VERSION

    doc = json.loads(text)
    if doc.get("schema") != SCHEMA_VERSION or doc.get("kind") != "mesh":
        raise InvalidInput(f"unsupported mesh schema {doc.get('schema')!r}")
    cells = [
        Cell(
            c["id"],
            [tuple(v) for v in c["vertices"]],
            tuple(c["gradient"]),
            tuple(c["offset"]),
            c["level"],
            c["phase"],
            c["tag"],
            c["parent"],
        )
        for c in doc["cells"]
    ]
    return PiecewiseAffineMap(cells, tuple(tuple(v) for v in doc["domain"]), _conf(tuple(doc["boundary_matrix"])),
                              tuple(doc["boundary_offset"]))


def write_mesh_csv(path, pam: PiecewiseAffineMap):
    norms = pam.grad_norms()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell_id", "area", "grad_norm", "phase", "level"])
        for c, nm in zip(pam.cells, norms):
            w.writerow([c.id, repr(c.area), repr(float(nm)), c.phase, c.level])

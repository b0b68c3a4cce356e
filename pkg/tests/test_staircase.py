import csv
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from critexp import InvalidInput
from critexp.coefficients import diagonal_params
from critexp.conformal import J, ConformalMatrix, GaussianRational
from critexp.laminate import barycenter, validate
from critexp.staircase import (
    beta_log_residuals,
    beta_product,
    iterate,
    m_const,
    step,
    theta_functions,
    theta_table,
    write_series_csv,
    write_theta_csv,
)
from critexp.targets import TargetSpec, anti_conformal_level, dist_to_S, is_rank_one

ISO = diagonal_params(2, 2, 2)
ANISO = diagonal_params(2, 1, 2)
F = Fraction


def test_theta_functions_iso_at_zero():
    tf = theta_functions(ISO, 0.0)
    assert (tf.lambda1, tf.lambda2) == (F(1, 4), F(1, 4))
    assert (tf.M1, tf.M2, tf.l, tf.L, tf.p) == (F(4, 3), F(4, 3), F(1, 3), 2, F(4, 3))
    assert tf.lambda1 == ISO.k / (1 + ISO.k) and tf.l == ISO.k


def test_theta_functions_aniso_at_quarter_turn():
    tf = theta_functions(ANISO, math.pi / 2)
    assert (tf.lambda1, tf.lambda2) == (F(1, 6), F(1, 8))
    assert tf.l == F(1, 6) == ANISO.s
    assert tf.L == F(7, 5) == ANISO.S
    assert tf.p == F(7, 6) == 2 * ANISO.S / (ANISO.S + 1)
    assert theta_functions(ANISO, 0.0).p == F(4, 3)


@pytest.mark.parametrize("params", [ISO, ANISO, diagonal_params(5.0, 0.5, 3.0), diagonal_params(1.5, 1.2, 1.0)])
def test_ranges_and_identities_on_grid(params):
    th = np.linspace(-math.pi, math.pi, 2001)
    tab = theta_table(params, th)
    k, s, K, S = (float(getattr(params, a)) for a in ("k", "s", "K", "S"))
    eps = 1e-12
    for j, lam in ((1, tab["lambda1"]), (2, tab["lambda2"])):
        sj = float(params.s_j(j))
        assert np.all(lam >= s / (1 + sj) - eps) and np.all(lam <= k / (1 + k) + eps)
    assert np.all((tab["l"] >= s - eps) & (tab["l"] <= k + eps))
    assert np.all((tab["L"] >= S - 1e-10) & (tab["L"] <= K + 1e-10))
    assert np.all((tab["p"] >= 2 * S / (S + 1) - eps) & (tab["p"] <= 2 * K / (K + 1) + eps))
    assert np.all((tab["M1"] > 0) & (tab["M1"] < 2) & (tab["M2"] > 0) & (tab["M2"] < 2))
    assert np.allclose(1 + tab["l"], tab["p"], atol=1e-13)
    assert np.allclose(tab["p"], 2 * tab["L"] / (tab["L"] + 1), atol=1e-13)
    # evenness
    assert np.allclose(tab["p"], tab["p"][::-1], atol=1e-13)
    assert m_const(params) > 0


def test_strict_monotonicity_anisotropic():
    th = np.linspace(0, math.pi, 20001)
    tab = theta_table(ANISO, th)
    half = len(th) // 2  # th[half] = pi/2
    for key in ("lambda1", "lambda2", "l", "L", "p"):
        v = tab[key]
        assert np.all(np.diff(v[: half + 1]) < 0), key
        assert np.all(np.diff(v[half:]) > 0), key
        assert np.argmax(v) in (0, len(v) - 1) and abs(np.argmin(v) - half) <= 0


def test_isotropic_functions_are_constant():
    tab = theta_table(ISO, np.linspace(0, math.pi, 1001))
    for key in ("lambda1", "lambda2", "l", "L", "p"):
        assert np.ptp(tab[key]) < 1e-14


def test_l_is_maximal_at_zero():
    tab = theta_table(ANISO, np.linspace(-math.pi / 2, math.pi / 2, 513))
    assert np.all(tab["l"] <= float(ANISO.k) + 1e-15)


def test_step_at_J_exact():
    st_ = step(ISO, J, 1)
    nu = st_.nu
    assert nu.exact
    atoms = {(a.matrix.a_plus, a.matrix.a_minus): a.weight for a in nu.atoms}
    G = GaussianRational
    assert atoms == {
        (G(F(3, 4)), G(F(1, 4))): F(2, 5),
        (G(F(-3, 2)), G(F(1, 2))): F(1, 5),
        (G(0), G(2)): F(2, 5),
    }
    assert barycenter(nu) == J
    for node in nu.nodes:
        if node.children:
            B, C = (nu.nodes[c].matrix for c in node.children)
            assert (B - C).det() == 0
    assert (st_.mu1, st_.mu2, st_.mu3) == (0, F(2, 5), F(1, 3))
    # the first splitting carries no weight at J but is still a rank-one pair
    assert len(st_.splits) == 3 and all((B - C).det() == 0 for B, C in st_.splits)
    assert st_.splits[0] == (ConformalMatrix(G(F(3, 4)), G(F(1, 4))), J)
    tf = theta_functions(ISO, 0.0)
    assert st_.mass_up == F(2, 5)
    assert max(0, tf.beta(1)) <= st_.mass_up <= tf.beta(3) == F(5, 9)
    validate(nu)


@pytest.mark.parametrize("n", [1, 2, 5, 17])
@pytest.mark.parametrize("params", [ISO, ANISO])
def test_step_on_S_n(n, params):
    G = GaussianRational
    for r in (G(1), G(0, 1), G(-1)):
        A = anti_conformal_level(n, r)
        st_ = step(params, A, n)
        tf = theta_functions(params, 0.0, rotation=r)
        assert st_.mu1 == 0 and st_.t == n
        assert st_.mu2 == tf.M2 / (2 * n + tf.M2)
        assert st_.mu3 == tf.M1 / (2 * (n + 1))
        assert barycenter(st_.nu) == A
        assert st_.top == anti_conformal_level(n + 1, r)
        validate(st_.nu)


def test_step_preconditions():
    with pytest.raises(InvalidInput):
        step(ISO, J, 0)
    with pytest.raises(InvalidInput):
        step(ISO, J * 2, 1)  # not on S_1 with rho = 0
    with pytest.raises(InvalidInput):
        step(ISO, J.to_float(), 1, rho=0.6)
    with pytest.raises(InvalidInput):
        step(ISO, J.to_float(), 1, rho=0.1, delta=1.0)


def _perturbed_step(params, n, theta, rho, v):
    A = anti_conformal_level(n, complex(math.cos(theta), math.sin(theta)))
    v = np.asarray(v, float)
    v = v * (0.9 * rho / (math.sqrt(2) * np.linalg.norm(v)))
    A = A + ConformalMatrix(complex(v[0], v[1]), complex(v[2], v[3]))
    return A, step(params, A, n, rho=rho, delta=0.5)


def test_random_steps_near_S_n():
    # 10^4 random A within rho of S_n^delta; every step audit must pass
    rng = np.random.default_rng(2024)
    spec = TargetSpec(ANISO)
    rho = 0.01
    worst_c = 0.0
    for _ in range(10_000):
        n = int(rng.integers(1, 65))
        theta = rng.uniform(-0.5, 0.5)
        A, st_ = _perturbed_step(ANISO, n, theta, rho, rng.normal(size=4))
        assert dist_to_S(A, n, 0.5) < rho
        assert abs(st_.theta) < 0.5 + rho
        assert abs(st_.t - n) < rho
        assert barycenter(st_.nu).distance(A) < 1e-10 * n
        top = [a for a in st_.nu.atoms if dist_to_S(a.matrix, n + 1) < 1e-9 * n]
        assert len(top) == 1
        for a in st_.nu.atoms:
            if a is not top[0]:
                assert spec.dist_to_targets(a.matrix) < 1e-9 * n
        for node in st_.nu.nodes:
            if node.children:
                B, C = (st_.nu.nodes[c].matrix for c in node.children)
                assert is_rank_one(B - C)
        worst_c = max(worst_c, st_.diagnostics["sandwich_constant"])
    assert worst_c < 100


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 64), st.floats(-0.7, 0.7), st.floats(1e-4, 0.4),
       st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_step_invariants_property(n, theta, rho, v):
    _, st_ = _perturbed_step(ISO, n, theta, rho, v)
    d = st_.diagnostics
    assert d["norm_constant"] < 10
    assert 0 <= float(st_.mu2) <= 1 and 0 <= float(st_.mu3) <= 1
    assert st_.mass_up > 0


def test_iterate_exact_product_formula():
    res = iterate(ISO, 0.0, 12, exact=True)
    nu = res.nu
    assert nu.exact and barycenter(nu) == J
    validate(nu)
    tf = res.theta_functions
    prod = F(1)
    for n in range(1, 13):
        mu2 = tf.M2 / (2 * n + tf.M2)
        mu3 = tf.M1 / (2 * (n + 1))
        prod *= (1 - mu2) * (1 - mu3)
        assert res.mass_series[n] == pytest.approx(float(prod), rel=1e-14)
    assert res.mass_series[0] == 1.0


def test_iterate_support_and_moment_series():
    res = iterate(ANISO, 0.7, 40)
    spec = TargetSpec(ANISO)
    on_top = 0
    for a in res.nu.atoms:
        if dist_to_S(a.matrix, 41) < 1e-9 * 41:
            on_top += 1
        else:
            assert spec.dist_to_targets(a.matrix) < 1e-9 * 41
    assert on_top == 1
    mom = np.array(res.moment_series)
    assert np.all(np.diff(mom) >= -1e-12)
    from critexp.laminate import p_moment

    assert p_moment(res.nu, float(res.theta_functions.p)) == pytest.approx(mom[-1], rel=1e-10)


def test_beta_product():
    tf = theta_functions(ISO, 0.0)
    assert tf.beta(7) == 1 - F(4, 3) / 7 == 1 - (1 + ISO.k) / 7
    prod, res = beta_product(ISO, 0.0, 100)
    j0 = math.ceil(1 + 1 / 3) + 1
    expect = math.prod(1 - (4 / 3) / j for j in range(j0, 101))
    assert float(prod) == pytest.approx(expect, rel=1e-12)
    assert res == pytest.approx(abs(math.log(expect) + (4 / 3) * math.log(100)), rel=1e-10)
    with pytest.raises(InvalidInput):
        beta_product(ISO, 0.0, 2)
    ns, r = beta_log_residuals(ANISO, 1.0, 10_000)
    assert np.ptp(r[-1000:]) < 1e-3  # converging to a constant


def test_csv_writers(tmp_path):
    write_theta_csv(tmp_path / "t.csv", ANISO, [0.0, math.pi / 2])
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["theta", "lambda1", "lambda2", "l", "L", "p"]
    assert float(rows[2][5]) == pytest.approx(7 / 6)
    res = iterate(ISO, 0.0, 1)
    write_series_csv(tmp_path / "s.csv", res.mass_series, res.moment_series)
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert len(rows) == 3 and float(rows[2][1]) == pytest.approx(0.4)


@pytest.mark.parametrize("n", [1, 7, 60])
def test_tail_mass_isolates_top_atom(n):
    from critexp.laminate import tail_mass

    res = iterate(ISO, 0.0, n)
    # settled atoms have norm at most (n+1)|Q_j| = 1.118 (n+1); the top atom sqrt(2)(n+1)
    assert tail_mass(res.nu, 1.25 * (n + 1)) == pytest.approx(res.mass_series[n], abs=1e-9)
    # at t = n settled atoms of the last levels are counted as well
    assert tail_mass(res.nu, n) > res.mass_series[n]

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from critexp import InvalidInput, UnsupportedCase
from critexp.coefficients import (
    CoefficientPair,
    beltrami_from_sigma,
    critical_exponents_general,
    diagonal_params,
    sigma_from_beltrami,
)


def test_isotropic_pair_exponents():
    rep = critical_exponents_general(CoefficientPair(np.eye(2) / 2, 2 * np.eye(2)))
    assert rep.m == pytest.approx(2.0, abs=1e-15)
    assert rep.n == pytest.approx(17 / 4, abs=1e-15)
    assert rep.K_star == pytest.approx(2.0, abs=1e-12)
    assert rep.q_opt == pytest.approx(4 / 3, abs=1e-12)
    assert rep.p_opt == pytest.approx(4.0, abs=1e-12)


def test_single_phase_is_degenerate():
    rep = critical_exponents_general(CoefficientPair(np.eye(2), np.eye(2)))
    assert rep.degenerate and rep.K_star == 1.0


def test_non_elliptic_rejected():
    with pytest.raises(InvalidInput):
        CoefficientPair(np.diag([1.0, -1.0]), np.eye(2))


def test_diagonal_params_examples():
    P = diagonal_params(2, 2, 2)
    assert P.exact
    assert (P.k, P.s1, P.s2, P.s, P.S) == (Fraction(1, 3),) * 4 + (2,)
    Q = diagonal_params(2, 1, 2)
    assert (Q.k, Q.s1, Q.s2, Q.s, Q.S) == (Fraction(1, 3), 0, Fraction(1, 3), Fraction(1, 6), Fraction(7, 5))
    assert Q.S == (1 + 2 + 4) / Fraction(5)
    with pytest.raises(UnsupportedCase):
        diagonal_params(2, Fraction(1, 2), 2)
    with pytest.raises(InvalidInput):
        diagonal_params(1, 1, 1)
    with pytest.raises(InvalidInput):
        diagonal_params(2, 3, 1)


def test_negative_s_is_reflected():
    P = diagonal_params(2, Fraction(1, 2), 1)
    assert P.reflected and P.s > 0
    assert P.s1 == Fraction(1, 3) and P.s2 == 0
    assert P.original == (2, Fraction(1, 2), 1)


K_grid = [1.5, 2.0, 5.0]


@pytest.mark.parametrize("K", K_grid)
@pytest.mark.parametrize("a", [-1, 0, 1])
@pytest.mark.parametrize("b", [-1, 0, 1])
def test_diagonal_pairs_realize_K(K, a, b):
    S1, S2 = K**a, K**b
    pair = CoefficientPair(np.diag([1 / K, 1 / S1]), np.diag([K, S2]))
    rep = critical_exponents_general(pair)
    assert rep.K_star == pytest.approx(K, rel=1e-10)
    assert rep.q_opt < 2 < rep.p_opt
    assert 1 / rep.q_opt + 1 / rep.p_opt == pytest.approx(1.0, abs=1e-12)


@given(st.floats(1.01, 20), st.floats(0, 1), st.floats(0, 1))
def test_derived_formulas_agree(K, u, v):
    S1 = K ** (2 * u - 1)
    S2 = K ** (2 * v - 1)
    if abs(S1 * S2 - 1) < 1e-6:
        return
    P = diagonal_params(K, S1, S2)
    s_direct = (S1 * S2 - 1) / ((1 + S1) * (1 + S2))
    assert abs(P.s) == pytest.approx(abs(s_direct), rel=1e-9, abs=1e-12)
    if not P.reflected:
        S_direct = (S1 + S2 + 2 * S1 * S2) / (2 + S1 + S2)
        assert P.S == pytest.approx(S_direct, rel=1e-10)
    assert 1 / K - 1e-12 <= P.S <= K + 1e-12
    assert abs(P.s1) <= P.k + 1e-12 and abs(P.s2) <= P.k + 1e-12


def test_beltrami_examples():
    assert beltrami_from_sigma(np.eye(2)) == (0, 0)
    mu, nu = beltrami_from_sigma(2 * np.eye(2))
    assert mu == 0 and nu == pytest.approx(-1 / 3, abs=1e-15)
    mu, nu = beltrami_from_sigma(np.eye(2) / 2)
    assert mu == 0 and nu == pytest.approx(1 / 3, abs=1e-15)
    assert np.allclose(sigma_from_beltrami(0, 0), np.eye(2))
    assert np.allclose(sigma_from_beltrami(0, -1 / 3), 2 * np.eye(2), atol=1e-15)
    with pytest.raises(InvalidInput):
        sigma_from_beltrami(0.6, 0.5)


@given(st.floats(0, 0.9), st.floats(0, 1), st.floats(-math.pi, math.pi), st.floats(-math.pi, math.pi))
def test_beltrami_round_trip(r, share, a1, a2):
    mu = r * share * complex(math.cos(a1), math.sin(a1))
    nu = r * (1 - share) * complex(math.cos(a2), math.sin(a2))
    sig = sigma_from_beltrami(mu, nu)
    mu2, nu2 = beltrami_from_sigma(sig)
    assert abs(mu2 - mu) < 1e-10 and abs(nu2 - nu) < 1e-10


@given(st.floats(0.1, 10), st.floats(0.1, 10), st.floats(-0.9, 0.9))
def test_sigma_round_trip(l1, l2, c):
    off = c * math.sqrt(l1 * l2)
    sig = np.array([[l1, off], [off, l2]])
    back = sigma_from_beltrami(*beltrami_from_sigma(sig))
    assert np.allclose(back, sig, rtol=1e-10, atol=1e-10 * max(l1, l2))

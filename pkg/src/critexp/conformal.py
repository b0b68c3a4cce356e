"""2x2 real matrices in conformal coordinates.

A real matrix M acts on v = x + iy as  M v = a_plus * v + a_minus * conj(v).
The pair (a_plus, a_minus) determines M and makes determinant, norms and
distortion one-line formulas.

Two scalar types are supported for the coordinates: Python ``complex``
(the production path) and :class:`GaussianRational` (exact complex numbers
with rational parts, used as an oracle for identities that are rational in
their inputs).
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass
from fractions import Fraction
from numbers import Rational

import numpy as np

from .errors import InvalidInput


def _mixed(other, fn):
    # exact op float: fall back to complex floating point
    if isinstance(other, (float, complex)):
        return fn()
    return NotImplemented


class GaussianRational:
    """Exact complex number re + i*im with ``Fraction`` parts."""

    __slots__ = ("real", "imag")

    def __init__(self, real=0, imag=0):
        if isinstance(real, GaussianRational):
            real, imag = real.real, real.imag + Fraction(imag)
        self.real = Fraction(real)
        self.imag = Fraction(imag)

    @staticmethod
    def coerce(z):
        if isinstance(z, GaussianRational):
            return z
        if isinstance(z, (int, Rational)):
            return GaussianRational(z, 0)
        raise TypeError(f"cannot mix exact arithmetic with {type(z).__name__}")

    def conjugate(self):
        return GaussianRational(self.real, -self.imag)

    def abs2(self):
        return self.real * self.real + self.imag * self.imag

    def __abs__(self):
        return math.sqrt(self.abs2())

    def __add__(self, other):
        try:
            o = GaussianRational.coerce(other)
        except TypeError:
            return _mixed(other, lambda: complex(self) + other)
        return GaussianRational(self.real + o.real, self.imag + o.imag)

    __radd__ = __add__

    def __neg__(self):
        return GaussianRational(-self.real, -self.imag)

    def __sub__(self, other):
        try:
            o = GaussianRational.coerce(other)
        except TypeError:
            return _mixed(other, lambda: complex(self) - other)
        return GaussianRational(self.real - o.real, self.imag - o.imag)

    def __rsub__(self, other):
        return (-self).__add__(other)

    def __mul__(self, other):
        try:
            o = GaussianRational.coerce(other)
        except TypeError:
            return _mixed(other, lambda: complex(self) * other)
        return GaussianRational(
            self.real * o.real - self.imag * o.imag,
            self.real * o.imag + self.imag * o.real,
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        try:
            o = GaussianRational.coerce(other)
        except TypeError:
            return _mixed(other, lambda: complex(self) / other)
        den = o.abs2()
        if den == 0:
            raise ZeroDivisionError("division by exact zero")
        num = self * o.conjugate()
        return GaussianRational(num.real / den, num.imag / den)

    def __rtruediv__(self, other):
        if isinstance(other, (float, complex)):
            return other / complex(self)
        return GaussianRational.coerce(other).__truediv__(self)

    def __eq__(self, other):
        try:
            o = GaussianRational.coerce(other)
        except TypeError:
            if isinstance(other, complex):
                return complex(self) == other
            return NotImplemented
        return self.real == o.real and self.imag == o.imag

    def __hash__(self):
        return hash((self.real, self.imag))

    def __complex__(self):
        return complex(float(self.real), float(self.imag))

    def __bool__(self):
        return bool(self.real) or bool(self.imag)

    def __repr__(self):
        return f"GaussianRational({self.real}, {self.imag})"


def is_exact(z) -> bool:
    return isinstance(z, (GaussianRational, int, Rational)) and not isinstance(z, bool)


def fraction_sqrt(q):
    """Exact square root of a non-negative rational, or ``None``."""
    q = Fraction(q)
    if q < 0:
        return None
    rn, rd = math.isqrt(q.numerator), math.isqrt(q.denominator)
    if rn * rn == q.numerator and rd * rd == q.denominator:
        return Fraction(rn, rd)
    return None


def _abs2(z):
    if isinstance(z, GaussianRational):
        return z.abs2()
    if isinstance(z, (int, Rational)):
        return Fraction(z) ** 2
    return z.real * z.real + z.imag * z.imag


def _conj(z):
    if isinstance(z, (int, Rational)):
        return z
    return z.conjugate()


@dataclass(frozen=True)
class ConformalMatrix:
    """A real 2x2 matrix stored as (a_plus, a_minus)."""

    a_plus: complex
    a_minus: complex

    def __post_init__(self):
        ap, am = self.a_plus, self.a_minus
        if is_exact(ap) and is_exact(am):
            object.__setattr__(self, "a_plus", GaussianRational.coerce(ap))
            object.__setattr__(self, "a_minus", GaussianRational.coerce(am))
        else:
            object.__setattr__(self, "a_plus", complex(ap))
            object.__setattr__(self, "a_minus", complex(am))

    @property
    def exact(self) -> bool:
        return isinstance(self.a_plus, GaussianRational)

    # linear structure
    def __add__(self, other):
        return ConformalMatrix(self.a_plus + other.a_plus, self.a_minus + other.a_minus)

    def __sub__(self, other):
        return ConformalMatrix(self.a_plus - other.a_plus, self.a_minus - other.a_minus)

    def __neg__(self):
        return ConformalMatrix(-self.a_plus, -self.a_minus)

    def __mul__(self, c):
        # real scalar multiple; complex scalars would not give a real matrix
        return ConformalMatrix(self.a_plus * c, self.a_minus * c)

    __rmul__ = __mul__

    def __truediv__(self, c):
        return ConformalMatrix(self.a_plus / c, self.a_minus / c)

    def __matmul__(self, other):
        return compose(self, other)

    def det(self):
        return _abs2(self.a_plus) - _abs2(self.a_minus)

    def hs_norm2(self):
        return 2 * _abs2(self.a_plus) + 2 * _abs2(self.a_minus)

    def hs_norm(self) -> float:
        return math.sqrt(self.hs_norm2())

    def op_norm(self) -> float:
        return math.sqrt(_abs2(self.a_plus)) + math.sqrt(_abs2(self.a_minus))

    def to_real(self):
        return to_real(self)

    def to_float(self) -> "ConformalMatrix":
        return ConformalMatrix(complex(self.a_plus), complex(self.a_minus))

    def as_tuple(self):
        """(Re a+, Im a+, Re a-, Im a-) as floats."""
        ap, am = complex(self.a_plus), complex(self.a_minus)
        return (ap.real, ap.imag, am.real, am.imag)

    def distance(self, other) -> float:
        """Hilbert-Schmidt distance."""
        return (self - other).to_float().hs_norm()

    def __repr__(self):
        return f"ConformalMatrix({self.a_plus!r}, {self.a_minus!r})"


class _PointAtInfinity:
    """Tagged value for the second dilatation of an anti-conformal matrix."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "INFINITY"

    def __eq__(self, other):
        return other is self

    def __hash__(self):
        return hash("point-at-infinity")


INFINITY = _PointAtInfinity()


def to_conformal(M) -> ConformalMatrix:
    """Conformal coordinates of a real 2x2 matrix (nested lists or ndarray).

    Integer or Fraction entries give an exact result.
    """
    if isinstance(M, ConformalMatrix):
        return M
    if isinstance(M, np.ndarray):
        if M.shape != (2, 2):
            raise InvalidInput(f"expected a 2x2 matrix, got shape {M.shape}")
        m11, m12, m21, m22 = (float(x) for x in M.ravel())
    else:
        (m11, m12), (m21, m22) = M
    entries = (m11, m12, m21, m22)
    if all(is_exact(x) for x in entries):
        m11, m12, m21, m22 = (Fraction(x) for x in entries)
        half = Fraction(1, 2)
        ap = GaussianRational((m11 + m22) * half, (m21 - m12) * half)
        am = GaussianRational((m11 - m22) * half, (m21 + m12) * half)
        return ConformalMatrix(ap, am)
    m11, m12, m21, m22 = (float(x) for x in entries)
    return ConformalMatrix(
        complex((m11 + m22) / 2, (m21 - m12) / 2),
        complex((m11 - m22) / 2, (m21 + m12) / 2),
    )


def to_real(C: ConformalMatrix):
    """Real matrix of C: ndarray for float input, nested Fraction lists for exact input."""
    ap, am = C.a_plus, C.a_minus
    rows = (
        (ap.real + am.real, -ap.imag + am.imag),
        (ap.imag + am.imag, ap.real - am.real),
    )
    if C.exact:
        return [list(rows[0]), list(rows[1])]
    return np.array(rows, dtype=float)


def compose(A: ConformalMatrix, B: ConformalMatrix) -> ConformalMatrix:
    """Matrix product AB."""
    return ConformalMatrix(
        A.a_plus * B.a_plus + A.a_minus * _conj(B.a_minus),
        A.a_plus * B.a_minus + A.a_minus * _conj(B.a_plus),
    )


def _is_zero(z) -> bool:
    if isinstance(z, GaussianRational):
        return not z
    return z == 0


def second_dilatation(A: ConformalMatrix):
    """a_minus / conj(a_plus); ``INFINITY`` when a_plus = 0."""
    if _is_zero(A.a_plus) and _is_zero(A.a_minus):
        raise InvalidInput("second dilatation of the zero matrix is undefined")
    if _is_zero(A.a_plus):
        return INFINITY
    return A.a_minus / _conj(A.a_plus)


def distortion(A: ConformalMatrix) -> float:
    """||A||_op^2 / |det A|, +inf for singular A."""
    if _is_zero(A.a_plus) and _is_zero(A.a_minus):
        raise InvalidInput("distortion of the zero matrix is undefined")
    d = A.det()
    if d == 0:
        return math.inf
    return A.op_norm() ** 2 / abs(float(d))


def distortion_from_dilatation(mu) -> float:
    """(1 + |mu|) / |1 - |mu||, the dilatation form of the distortion."""
    if mu is INFINITY:
        return 1.0
    r = abs(complex(mu))
    if r == 1.0:
        return math.inf
    return (1 + r) / abs(1 - r)


def rotation(theta: float) -> ConformalMatrix:
    return ConformalMatrix(cmath.exp(1j * theta), 0j)


def rotation_unit(r) -> ConformalMatrix:
    """Rotation given by a unit complex number (exact for Gaussian rationals)."""
    if isinstance(r, GaussianRational):
        if r.abs2() != 1:
            raise InvalidInput("rotation must be a unit complex number")
        return ConformalMatrix(r, GaussianRational(0))
    r = complex(r)
    if abs(abs(r) - 1) > 1e-12:
        raise InvalidInput("rotation must be a unit complex number")
    return ConformalMatrix(r, 0j)


IDENTITY = ConformalMatrix(GaussianRational(1), GaussianRational(0))
J = ConformalMatrix(GaussianRational(0), GaussianRational(1))


def conformal_arrays(M: np.ndarray):
    """Vectorized conformal coordinates of a stack of real matrices (..., 2, 2)."""
    M = np.asarray(M, dtype=float)
    m11, m12, m21, m22 = M[..., 0, 0], M[..., 0, 1], M[..., 1, 0], M[..., 1, 1]
    ap = 0.5 * (m11 + m22) + 0.5j * (m21 - m12)
    am = 0.5 * (m11 - m22) + 0.5j * (m21 + m12)
    return ap, am


def real_arrays(ap, am) -> np.ndarray:
    """Inverse of :func:`conformal_arrays`."""
    ap = np.asarray(ap, dtype=complex)
    am = np.asarray(am, dtype=complex)
    out = np.empty(ap.shape + (2, 2))
    out[..., 0, 0] = ap.real + am.real
    out[..., 0, 1] = -ap.imag + am.imag
    out[..., 1, 0] = ap.imag + am.imag
    out[..., 1, 1] = ap.real - am.real
    return out

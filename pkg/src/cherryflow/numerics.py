"""Extended precision reals (MPFR through gmpy2) and a sign/log-magnitude type.

Every computation in the package runs under a `NumericContext`.  Values are
plain `gmpy2.mpfr` objects; the context fixes the working precision and
widens the exponent range to the MPFR maximum so that distances like
exp(-10**6) are still representable.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from fractions import Fraction

import gmpy2
from gmpy2 import mpfr

from .errors import ConfigError

MIN_PRECISION = 64

_state = threading.local()


class NumericContext:
    """Fixed binary precision for a computation; immutable once built."""

    def __init__(self, precision_bits: int):
        if int(precision_bits) != precision_bits or precision_bits < MIN_PRECISION:
            raise ConfigError(f"precision_bits must be an integer >= {MIN_PRECISION}, got {precision_bits!r}")
        self._bits = int(precision_bits)
        self._gctx = gmpy2.context(
            precision=self._bits,
            emin=gmpy2.get_emin_min(),
            emax=gmpy2.get_emax_max(),
        )

    @property
    def precision_bits(self) -> int:
        return self._bits

    def __repr__(self):
        return f"NumericContext({self._bits})"

    def __eq__(self, other):
        return isinstance(other, NumericContext) and other._bits == self._bits

    def __hash__(self):
        return hash(("NumericContext", self._bits))

    # entering makes gmpy2 arithmetic round at this precision
    def __enter__(self):
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(gmpy2.get_context())
        gmpy2.set_context(gmpy2.context(self._gctx))
        return self

    def __exit__(self, *exc):
        gmpy2.set_context(_state.stack.pop())
        return False

    def real(self, v) -> mpfr:
        """Parse a decimal string, int, Fraction or mpfr at this precision."""
        if isinstance(v, Fraction):
            with self:
                return mpfr(v.numerator) / mpfr(v.denominator)
        if isinstance(v, float):
            # binary literals are exact, but we prefer callers to pass strings
            return mpfr(v, self._bits)
        if isinstance(v, str):
            s = v.strip()
            if "/" in s:
                return self.real(Fraction(s))
            try:
                return mpfr(s, self._bits)
            except ValueError as e:
                raise ConfigError(f"not a number: {v!r}") from e
        return mpfr(v, self._bits)

    @property
    def eps(self) -> mpfr:
        """Unit roundoff 2**(1-P)."""
        return mpfr(2, self._bits) ** (1 - self._bits)

    @property
    def guard(self) -> mpfr:
        """Singularity guard 2**(-P+8) used for distances to the critical value."""
        return mpfr(2, self._bits) ** (8 - self._bits)

    def decimal_digits(self) -> int:
        return int(math.ceil(self._bits * math.log10(2))) + 2

    def to_str(self, x) -> str:
        """Decimal string that parses back to the same value at this precision."""
        x = mpfr(x, self._bits)
        if gmpy2.is_zero(x):
            return "0"
        if not gmpy2.is_finite(x):
            return str(x)
        # format() on mpfr is unreliable across gmpy2 releases; digits() is not
        mant, exp, _ = x.digits(10, self.decimal_digits())
        sign = "-" if mant.startswith("-") else ""
        mant = mant.lstrip("-")
        return f"{sign}{mant[0]}.{mant[1:]}e{exp - 1}"


def make_context(precision_bits: int) -> NumericContext:
    return NumericContext(precision_bits)


def current_precision() -> int:
    return gmpy2.get_context().precision


def frac(x):
    """Fractional part in [0, 1)."""
    return x - gmpy2.floor(x)


def circle_dist(x, y):
    """Distance on R/Z."""
    t = frac(x - y)
    return min(t, 1 - t)


def signed_circle_offset(x, y):
    """Representative of x - y in [-1/2, 1/2)."""
    t = frac(x - y + mpfr("0.5"))
    return t - mpfr("0.5")


@dataclass(frozen=True)
class LogMag:
    """A real number stored as sign and natural log of its magnitude.

    Multiplication, division and real powers act on the log part only and so
    never under- or overflow.  Zero is (0, -inf).
    """

    sign: int
    log_abs: mpfr

    @classmethod
    def zero(cls):
        return cls(0, mpfr("-inf"))

    @classmethod
    def one(cls):
        return cls(1, mpfr(0))

    @classmethod
    def from_log(cls, log_abs, sign=1):
        return cls(sign, mpfr(log_abs))

    def to_real(self) -> mpfr:
        if self.sign == 0:
            return mpfr(0)
        return self.sign * gmpy2.exp(self.log_abs)

    def __float__(self):
        return float(self.to_real())

    def __mul__(self, other):
        if not isinstance(other, LogMag):
            other = to_logmag(other)
        if self.sign == 0 or other.sign == 0:
            return LogMag.zero()
        return LogMag(self.sign * other.sign, self.log_abs + other.log_abs)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, LogMag):
            other = to_logmag(other)
        if other.sign == 0:
            raise ZeroDivisionError("LogMag division by zero")
        if self.sign == 0:
            return LogMag.zero()
        return LogMag(self.sign * other.sign, self.log_abs - other.log_abs)

    def __pow__(self, r):
        if self.sign == 0:
            if r > 0:
                return LogMag.zero()
            raise ZeroDivisionError("0 ** nonpositive")
        if self.sign < 0:
            raise ValueError("real power of a negative LogMag")
        return LogMag(1, self.log_abs * r)

    def __neg__(self):
        return LogMag(-self.sign, self.log_abs)

    def __abs__(self):
        return LogMag(abs(self.sign), self.log_abs)

    def _key(self):
        # total order: sign first, then magnitude in the direction of the sign
        if self.sign == 0:
            return (0, mpfr(0))
        return (self.sign, self.sign * self.log_abs)

    def _coerce(self, other):
        return other if isinstance(other, LogMag) else to_logmag(other)

    def __lt__(self, other):
        return self._key() < self._coerce(other)._key()

    def __le__(self, other):
        return self._key() <= self._coerce(other)._key()

    def __gt__(self, other):
        return self._key() > self._coerce(other)._key()

    def __ge__(self, other):
        return self._key() >= self._coerce(other)._key()

    def __eq__(self, other):
        if not isinstance(other, (LogMag, int, float)) and not isinstance(other, type(mpfr(0))):
            return NotImplemented
        return self._key() == self._coerce(other)._key()

    def __hash__(self):
        return hash((self.sign, float(self.log_abs)))

    def log10(self) -> mpfr:
        return self.log_abs / gmpy2.log(mpfr(10))


def to_logmag(x) -> LogMag:
    x = mpfr(x)
    if gmpy2.is_zero(x):
        return LogMag.zero()
    return LogMag(1 if x > 0 else -1, gmpy2.log(abs(x)))

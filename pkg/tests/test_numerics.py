import gmpy2
import pytest
from gmpy2 import mpfr

from cherryflow.errors import ConfigError
from cherryflow.numerics import LogMag, circle_dist, frac, make_context, to_logmag


@pytest.mark.parametrize("bits", [256, 64])
def test_make_context_echoes_precision(bits):
    assert make_context(bits).precision_bits == bits


@pytest.mark.parametrize("bits", [32, 0, -5, 63])
def test_make_context_rejects_low_precision(bits):
    with pytest.raises(ConfigError):
        make_context(bits)


def test_context_is_scoped():
    outer = gmpy2.get_context().precision
    ctx = make_context(300)
    with ctx:
        assert gmpy2.get_context().precision == 300
    assert gmpy2.get_context().precision == outer


def test_logmag_of_one_and_zero():
    with make_context(128):
        one = to_logmag(1)
        assert one.sign == 1 and one.log_abs == 0
        zero = to_logmag(0)
        assert zero.sign == 0 and gmpy2.is_infinite(zero.log_abs) and zero.log_abs < 0


@pytest.mark.parametrize("bits", [64, 256])
def test_logmag_small_value_against_double_precision_log(bits):
    ctx = make_context(bits)
    with ctx:
        lm = to_logmag(gmpy2.exp(mpfr(-100)))
    # oracle: recompute at twice the precision
    with make_context(2 * bits):
        ref = gmpy2.log(gmpy2.exp(mpfr(-100)))
        assert lm.sign == 1
        assert abs(lm.log_abs - ref) <= 100 * mpfr(2) ** (1 - bits)


def test_logmag_products_do_not_underflow():
    with make_context(64):
        tiny = LogMag.from_log(-10**6)
        prod = tiny * tiny
        assert prod.log_abs == -2 * 10**6
        assert (prod / tiny).log_abs == tiny.log_abs
        assert to_logmag(-2).sign == -1


def test_round_trip_to_str():
    for bits in (64, 256, 512):
        ctx = make_context(bits)
        with ctx:
            x = gmpy2.sqrt(mpfr(2)) / 7
            assert ctx.real(ctx.to_str(x)) == x


def test_circle_helpers():
    with make_context(64):
        assert frac(mpfr("-0.25")) == mpfr("0.75")
        assert circle_dist(mpfr("0.05"), mpfr("0.95")) == circle_dist(mpfr("0.95"), mpfr("0.05"))
        assert abs(circle_dist(mpfr("0.05"), mpfr("0.95")) - mpfr("0.1")) < mpfr(2) ** -60

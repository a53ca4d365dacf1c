import random

import gmpy2
import pytest
from gmpy2 import mpfr

from cherryflow.errors import ConfigError, OrbitHitSingularity
from cherryflow.flatmap import (
    FlatCircleMap, SaddleSpec, check_compatible, deriv_f, deriv_g, eval_f, eval_g,
    make_standard_map,
)
from cherryflow.numerics import circle_dist, frac, make_context


def std(r, omega, bits=256):
    ctx = make_context(bits)
    return make_standard_map(ctx.real("0.40"), ctx.real("0.55"), ctx.real(r), ctx.real("0.05"),
                             ctx.real(omega), ctx)


def test_critical_value_follows_omega():
    assert std("0.8", "0").xi == 0
    m = std("2.5", "0.3")
    with m.ctx:
        assert m.xi == m.ctx.real("0.3")


def test_geometry_violation():
    ctx = make_context(64)
    with pytest.raises(ConfigError):
        make_standard_map("0.6", "0.5", "0.8", "0.05", "0", ctx)
    with pytest.raises(ConfigError):
        make_standard_map("0.40", "0.55", "0.8", "0.6", "0", ctx)


@pytest.mark.parametrize("r", ["0.8", "2.5"])
def test_flat_interval_maps_to_critical_value(r):
    m = std(r, "0.3")
    with m.ctx:
        for x in ("0.40001", "0.475", "0.54999"):
            assert eval_f(m, m.ctx.real(x)) == m.xi
            assert deriv_f(m, m.ctx.real(x)).sign == 0


@pytest.mark.parametrize("r", ["0.8", "2.5"])
def test_normal_form_right_of_gap(r):
    m = std(r, "0.3")
    with m.ctx:
        for t in ("0.05", "0.01", "1e-9"):
            t = m.ctx.real(t)
            y = eval_f(m, m.d + t)
            assert abs(y - frac(m.xi + t ** m.r)) < mpfr(2) ** -240
            y = frac(m.xi + t ** m.r)
            back = eval_g(m, y)
            # rounding y costs a factor g'(y) near the critical value
            tol = mpfr(2) ** -250 * (1 + deriv_g(m, y).to_real())
            assert abs(back - (m.d + t)) < tol


def test_derivative_at_junction():
    m = std("2.5", "0.3")
    with m.ctx:
        e = m.epsilon
        df = deriv_f(m, m.d + e).to_real()
        assert abs(df - m.r * e ** (m.r - 1)) < mpfr(2) ** -240
        dg = deriv_g(m, frac(m.xi + e ** m.r)).to_real()
        assert abs(dg - e ** (1 - m.r) / m.r) < mpfr(2) ** -230


def test_derivative_blows_up_for_small_exponent():
    m = std("0.8", "0.1")
    with m.ctx:
        for k in (3, 6, 12):
            t = mpfr(10) ** -k
            lm = deriv_f(m, m.d + t)
            # finite-difference oracle at doubled precision
            with make_context(512):
                h = t * mpfr(10) ** -30
                fd = ((t + h) ** m.r - t ** m.r) / h
                assert abs(lm.log_abs - gmpy2.log(fd)) < mpfr(10) ** -20
            # d + t is rounded at |d|, so t keeps only about P - log2(1/t) bits
            assert abs(lm.log_abs - ((m.r - 1) * gmpy2.log(t) + gmpy2.log(m.r))) < mpfr(2) ** -200


@pytest.mark.parametrize("r", ["0.8", "1", "2.5"])
def test_inverse_round_trip_on_grid(r):
    m = std(r, "0.123")
    with m.ctx:
        n = 400
        for i in range(n):
            x = m.ctx.real(i) / n + mpfr(2) ** -20
            if m.c <= x <= m.d:
                continue
            y = eval_f(m, x)
            assert circle_dist(eval_g(m, y), x) < mpfr(2) ** (-256 + 12)


def test_chain_rule_for_inverse():
    m = std("2.5", "0.2")
    rng = random.Random(3)
    with m.ctx:
        for _ in range(50):
            x = m.ctx.real(rng.random())
            if m.c <= x <= m.d:
                continue
            y = eval_f(m, x)
            prod = deriv_f(m, x) * deriv_g(m, y)
            assert abs(prod.log_abs) < mpfr(2) ** -200


def test_eval_g_guard_at_critical_value():
    m = std("2.5", "0.3")
    with pytest.raises(OrbitHitSingularity):
        eval_g(m, m.xi)


def test_lift_is_degree_one_and_monotone():
    m = std("2.5", "0.7")
    with m.ctx:
        prev = None
        for i in range(-50, 150):
            x = m.ctx.real(i) / 100
            y = m.lift(x)
            assert abs(m.lift(x + 1) - y - 1) < mpfr(2) ** -250
            if prev is not None:
                assert y >= prev
            prev = y


def test_lift_jet_matches_pointwise_derivatives():
    m = std("2.5", "0.37")
    rng = random.Random(5)
    with m.ctx:
        for _ in range(200):
            x = m.ctx.real(rng.random())
            y, j, d1, ratio = m.lift_jet(x)
            assert (y, j) == m.lift_step(x)
            assert abs(d1 - m.deriv_f_real(x)) <= abs(d1) * mpfr(2) ** -200
            if ratio is not None:
                assert abs(ratio * d1 - m.deriv2_f(x)) <= (abs(m.deriv2_f(x)) + 1) * mpfr(2) ** -190


def test_serialization_round_trip():
    m = std("0.8", "0.0926")
    m2 = FlatCircleMap.from_dict(m.to_dict())
    with m.ctx:
        assert m2.omega == m.omega and m2.r == m.r and m2.c == m.c


def test_saddle_compatibility():
    ctx = make_context(256)
    sad = SaddleSpec.from_r("2.5", ctx=ctx)
    assert not sad.dissipative
    assert SaddleSpec.from_r("0.8", ctx=ctx).dissipative
    check_compatible(std("2.5", "0.1"), sad)
    with pytest.raises(ConfigError):
        check_compatible(std("0.8", "0.1"), sad)
    with pytest.raises(ConfigError):
        SaddleSpec.make("1.5", "4", ctx=ctx)

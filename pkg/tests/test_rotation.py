from fractions import Fraction

import gmpy2
import pytest
from gmpy2 import mpfr

from cherryflow.errors import ConfigError, PrecisionExhausted
from cherryflow.flatmap import RigidRotation
from cherryflow.numerics import make_context
from cherryflow.rotation import (
    continued_fraction, convergents_from_quotients, euclid_quotients, golden_mean,
    is_bounded_type, measured_continued_fraction, rigid_rotation_gap, rotation_number,
    tune_parameter,
)

from conftest import OMEGA, family, tuned

FIB = [1, 1, 2, 3, 5, 8, 13, 21, 34, 55, 89]


def test_golden_mean_expansion():
    ctx = make_context(256)
    cf = continued_fraction(golden_mean(ctx), 30, ctx)
    assert cf.quotients == [1] * 30
    assert cf.q[:7] == FIB[:7]
    assert is_bounded_type(cf, 1, 30)


@pytest.mark.parametrize("num,den", [(13, 31), (1, 3), (355, 1130), (89, 144)])
def test_rational_expansion_matches_euclid(num, den):
    ctx = make_context(256)
    cf = continued_fraction(Fraction(num, den), 40, ctx)
    assert cf.terminated
    assert cf.quotients == euclid_quotients(num, den)
    assert cf.convergent(cf.depth) == Fraction(num, den)


def test_silver_mean_via_gauss_map_oracle():
    ctx = make_context(256)
    with ctx:
        x = gmpy2.sqrt(mpfr(2)) - 1
    cf = continued_fraction(x, 30, ctx)
    # oracle: Gauss map iterated at quadruple the precision
    with make_context(1024):
        y, ref = gmpy2.sqrt(mpfr(2)) - 1, []
        for _ in range(30):
            a = int(gmpy2.floor(1 / y))
            ref.append(a)
            y = 1 / y - a
    assert cf.quotients == ref == [2] * 30
    assert is_bounded_type(cf, 2, 30)
    assert not is_bounded_type(cf, 1, 30)


def test_injected_large_quotient_breaks_bounded_type():
    qs = [1] * 7 + [50] + [1] * 10
    p, q = convergents_from_quotients(qs)
    ctx = make_context(256)
    with ctx:
        x = mpfr(p[-1]) / q[-1]
    cf = continued_fraction(x, 15, ctx)
    assert cf.quotients[7] == 50
    assert not is_bounded_type(cf, 10, 15)


def test_precision_exhausted():
    ctx = make_context(64)
    with pytest.raises(PrecisionExhausted):
        continued_fraction(golden_mean(ctx), 80, ctx)


def test_rejects_out_of_range():
    with pytest.raises(ConfigError):
        continued_fraction(Fraction(3, 2), 5, make_context(64))


def test_rigid_gap_last_convergent_of_rational():
    ctx = make_context(128)
    cf = continued_fraction(Fraction(1, 3), 5, ctx)
    value, lo, hi = rigid_rotation_gap(Fraction(1, 3), cf.depth, cf, ctx)
    assert value == lo == hi == 0


def test_rigid_gap_golden_brute_force():
    ctx = make_context(256)
    rho = golden_mean(ctx)
    cf = continued_fraction(rho, 12, ctx)
    value, lo, hi = rigid_rotation_gap(rho, 10, cf, ctx)
    with ctx:
        best = min(abs(i * rho - gmpy2.rint(i * rho)) for i in range(1, cf.q[10] + 1))
        assert abs(value - best) < mpfr(2) ** -240
        assert lo <= value <= hi
    for n in range(1, 11):
        v, lo, hi = rigid_rotation_gap(rho, n, cf, ctx)
        assert lo <= v <= hi


def test_rotation_number_of_rigid_rotation():
    ctx = make_context(256)
    with ctx:
        omega = golden_mean(ctx) / 3
    est = rotation_number(RigidRotation(omega, ctx), max_iters=10**7, tol=1e-12)
    with ctx:
        assert abs(est.rho - omega) <= est.bound
        assert est.bound < 1e-12
        assert est.lower < Fraction(float(omega)) < est.upper


def test_tuned_golden_parameter_remeasured():
    fmap = tuned("2.5", 256)
    est = rotation_number(fmap, max_iters=10**7, tol=1e-12)
    with fmap.ctx:
        rho = golden_mean(fmap.ctx)
        # lift rotation number, compared mod 1
        err = abs(est.rho - rho)
        assert abs(err - gmpy2.rint(err)) <= est.bound + mpfr("1e-10")
        assert est.bound < 1e-10


def test_measured_cf_of_tuned_map():
    cf = measured_continued_fraction(tuned("2.5", 256), 14)
    assert cf.quotients[:14] == [1] * 14


def test_tune_rational_target_is_mode_locked():
    fam = family("2.5", 256)
    res = tune_parameter(fam, Fraction(1, 2), tol=1e-12)
    assert res.mode_locked
    lo, hi = res.tongue
    with fam.ctx:
        assert lo < res.omega < hi
        fmap = fam.at(res.omega)
    est = rotation_number(fmap, max_iters=10**5, tol=1e-12)
    assert est.exact == Fraction(1, 2)


def test_tune_golden_reproduces_frozen_parameter():
    fam = family("0.8", 256)
    with fam.ctx:
        res = tune_parameter(fam, golden_mean(fam.ctx), tol=1e-10)
        assert abs(res.omega - fam.ctx.real(OMEGA[("0.8", 256)])) < mpfr("1e-12")

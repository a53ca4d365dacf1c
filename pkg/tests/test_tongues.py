from fractions import Fraction

import gmpy2
import pytest
from gmpy2 import mpfr

from cherryflow.errors import ConfigError, PassageStalled, StageFailed, TongueNotFound
from cherryflow.flatmap import RigidRotation, SaddleSpec
from cherryflow.numerics import circle_dist, frac, make_context
from cherryflow.tongues import (
    LO, admissible_multiplier, compare, first_stage, gap_bound, g_power, in_intervals,
    liouville_stage, locate_tongue, merge_arcs, next_tongue, parabolic_endpoint, parabolic_passage_distortion,
    passage_setup, stage_constant,
)

from conftest import family, saddle


@pytest.fixture(scope="module")
def fam():
    return family("2.5", 256)


@pytest.fixture(scope="module")
def tongue0(fam):
    return locate_tongue(fam, Fraction(0), tol=1e-14)


@pytest.fixture(scope="module")
def endpoint0(tongue0):
    return parabolic_endpoint(tongue0, LO)


@pytest.fixture(scope="module")
def stage1(fam):
    return first_stage(fam, saddle("2.5", 256), distortion=False)


def _g_minus_id_changes_sign(fmap, n=2000):
    with fmap.ctx:
        signs = set()
        for i in range(n):
            x = (mpfr(i) + mpfr("0.5")) / n
            if fmap.c <= x <= fmap.d:
                continue
            try:
                y = fmap.eval_g(x)
            except Exception:
                continue
            off = frac(y - x + mpfr("0.5")) - mpfr("0.5")
            signs.add(off > 0)
        return len(signs) == 2


def test_fixed_point_tongue(fam, tongue0):
    assert tongue0.width > 0
    with fam.ctx:
        mid = fam.at(frac((tongue0.omega_lo + tongue0.omega_hi) / 2))
    assert _g_minus_id_changes_sign(mid)


def test_half_tongue_midpoint_has_period_two(fam):
    rec = locate_tongue(fam, Fraction(1, 2), tol=1e-12)
    with fam.ctx:
        fm = fam.at(frac((rec.omega_lo + rec.omega_hi) / 2))
        x = fm.ctx.real("0.3")
        for _ in range(1000):
            x = fm.eval_g(x)
        y = fm.eval_g(fm.eval_g(x))
        assert circle_dist(x, y) < mpfr("1e-30")
        assert circle_dist(x, fm.eval_g(x)) > mpfr("1e-3")


def test_tongues_are_disjoint_and_ordered(fam):
    half = locate_tongue(fam, Fraction(1, 2), tol=1e-10)
    third = locate_tongue(fam, Fraction(1, 3), tol=1e-10)
    with fam.ctx:
        assert third.omega_hi < half.omega_lo or half.omega_hi < third.omega_lo


def test_compare_orders_parameters(fam, tongue0):
    br = tongue0.branch()
    with fam.ctx:
        mid = (tongue0.omega_lo + tongue0.omega_hi) / 2
        assert compare(br, mid).sign == 0
        assert compare(br, tongue0.outer_lo).sign == -compare(br, tongue0.outer_hi).sign != 0


def test_parabolic_endpoint_multiplier_curve(endpoint0, fam):
    vals = [abs(1 - float(m)) for _, m in endpoint0.curve]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert vals[-1] <= 0.25
    assert abs(1 - float(endpoint0.multiplier)) < 1e-10
    # interior probe: attracting, multiplier below 1
    assert 0 < float(endpoint0.curve[0][1]) < 1


def test_no_fixed_point_just_past_endpoint(endpoint0, fam):
    with fam.ctx:
        fm = fam.at(frac(endpoint0.omega - mpfr("1e-6")))
    assert not _g_minus_id_changes_sign(fm)


def test_passage_distortion_bounded(endpoint0, fam):
    ks, ns = [], []
    for dist in ("1e-3", "1e-5"):
        fm, fund, a2 = passage_setup(endpoint0, fam, mpfr(dist), mpfr("0.05"))
        d = parabolic_passage_distortion(fm, fund, a2, samples=8)
        ks.append(float(d.K))
        ns.append(max(d.passages))
    assert ns[1] > 5 * ns[0]
    assert max(ks) / min(ks) < 4


def test_passage_stalls_inside_tongue(endpoint0, fam):
    with fam.ctx:
        fm, fund, a2 = passage_setup(endpoint0, fam, mpfr("1e-3"), mpfr("0.05"))
        inside = fam.at(frac(endpoint0.omega + mpfr("1e-3")))
    with pytest.raises(PassageStalled):
        parabolic_passage_distortion(inside, fund, a2, samples=2, cap=2000)


def test_rigid_rotation_escape_is_isometric():
    ctx = make_context(128)
    rot = RigidRotation(ctx.real("0.01"), ctx)
    with ctx:
        # g of the rotation by omega is the rotation by -omega
        d = parabolic_passage_distortion(rot, (ctx.real("0.5"), ctx.real("0.48")), ctx.real("0.3"),
                                         samples=4)
    assert d.K == 1 and d.min_derivative == 1


def test_gap_bound_stage_one(stage1, fam):
    assert stage1.delta_gap > 0
    with fam.ctx:
        fm = fam.at(frac(stage1.omega))
        pts = {"c": fm.c, "d": fm.d, "p": stage1.point}
        g1 = gap_bound(fm, pts, 500)
        g2 = gap_bound(fm, pts, 1000)
    assert not g1.hit_singularity
    assert abs(float(g2.delta) / float(g1.delta) - 1) < 0.1


def test_gap_bound_independent_of_multiplier(stage1, fam):
    deltas = []
    for a in (5, 9):
        _, ep = next_tongue(stage1, fam, a)
        with fam.ctx:
            fm = fam.at(frac(ep.omega))
            deltas.append(float(gap_bound(fm, {"c": fm.c, "d": fm.d, "p": ep.point}, 4 * a).delta))
    assert max(deltas) / min(deltas) < 4


def test_second_stage_target(stage1, fam):
    rec, ep = next_tongue(stage1, fam, 8)
    assert rec.rational == Fraction(1, 8) and ep.q == 8
    with fam.ctx:
        fm = fam.at(frac(ep.omega))
        y, _ = g_power(fm, ep.point, 8)
        assert circle_dist(y, ep.point) < mpfr("1e-8")
        assert min(circle_dist(ep.cycle[0], c) for c in ep.cycle[1:]) > mpfr("1e-4")


def test_stage_arithmetic(stage1):
    assert stage1.b == 1 and stage1.p == 0
    assert admissible_multiplier(stage1, 8) == 8
    prod = 1
    for i in range(1, 30):
        prod *= stage_constant(i)
    assert prod > Fraction(1, 2)
    with pytest.raises(ConfigError):
        class Prev:
            p, b = 1, 135
        next_tongue(Prev, None, 8)


def test_stage_search_stops_at_period_cap(stage1, fam):
    with pytest.raises(StageFailed) as info:
        liouville_stage(stage1, [], fam, saddle("2.5", 256), a=8, period_cap=7)
    assert info.value.diagnostics[-1]["a"] == 8


def test_arc_helpers():
    with make_context(64):
        arcs = merge_arcs([(mpfr("0.1"), mpfr("0.2")), (mpfr("0.15"), mpfr("0.3")), (mpfr("0.9"), mpfr("0.05"))])
        assert in_intervals(mpfr("0.25"), arcs)
        assert in_intervals(mpfr("0.95"), arcs)
        assert in_intervals(mpfr("0.01"), arcs)
        assert not in_intervals(mpfr("0.5"), arcs)


def test_empty_tongue_bracket(fam):
    with pytest.raises(TongueNotFound):
        locate_tongue(fam, Fraction(1, 2), bracket=(fam.ctx.real("0.3"), fam.ctx.real("0.31")), tol=1e-10)

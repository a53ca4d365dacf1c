import math

import pytest
from gmpy2 import mpfr

from cherryflow.flatmap import SaddleSpec
from cherryflow.numerics import make_context
from cherryflow.suspension import (
    DIRAC_SADDLE, INCONCLUSIVE, QUASI_MINIMAL, SuspensionFlow, classify, classify_physical,
    evolve_birkhoff, jacobian_trend, reversed_orbit_avoids_gap, roof, saddle_pass_occupancy,
)

from conftest import saddle, tuned


def test_roof_one_and_five_efoldings(map_b):
    sad = SaddleSpec.from_r("2.5", ctx=map_b.ctx)
    flow = SuspensionFlow(map_b, sad)
    with map_b.ctx:
        lu = sad.lambda_u
        assert abs(roof(flow, map_b.xi + 1 / lu) - (sad.tau0 + 1)) < mpfr(2) ** -200
        assert abs(roof(flow, map_b.xi + lu ** -5) - (sad.tau0 + 5)) < mpfr(2) ** -200


def test_occupancy_whole_chart():
    sad = SaddleSpec.make("0.5", "4", ctx=make_context(64))
    assert saddle_pass_occupancy(sad, 1e-6, 1) == pytest.approx(-math.log(1e-6) / math.log(4))


def test_occupancy_boundary_is_zero():
    sad = SaddleSpec.make("0.5", "4", ctx=make_context(64))
    delta = 0.1
    u = delta ** (1 + math.log(4) / -math.log(0.5))
    assert saddle_pass_occupancy(sad, u, delta) == pytest.approx(0, abs=1e-12)


def test_occupancy_against_time_stepping():
    sad = SaddleSpec.make("0.5", "4", ctx=make_context(64))
    u, delta = 1e-6, 0.1
    # linear flow: stable coordinate 0.5**t from 1, unstable u * 4**t until it reaches 1
    dt = 1e-4
    t_exit = -math.log(u) / math.log(4)
    steps = int(t_exit / dt)
    inside = sum(1 for i in range(steps)
                 if 0.5 ** ((i + 0.5) * dt) <= delta and u * 4 ** ((i + 0.5) * dt) <= delta)
    assert saddle_pass_occupancy(sad, u, delta) == pytest.approx(inside * dt, abs=2 * dt)


def test_degenerate_roof_averages(map_b):
    flow = SuspensionFlow(map_b, saddle("2.5", 256), singular_coefficient=0)
    with map_b.ctx:
        rep = evolve_birkhoff(flow, map_b.ctx.real("0.2"), 1e3, {"one": lambda x: 1.0},
                              check_period=False)
    assert rep.averages["one"] == pytest.approx(1.0)
    assert rep.occupancy == 0


def test_thresholds():
    assert classify(0.95, 0.5) == DIRAC_SADDLE
    assert classify(0.2, 1e-3) == QUASI_MINIMAL
    assert classify(0.2, 0.1) == INCONCLUSIVE
    assert classify(0.95, 0.0, completed=False) == INCONCLUSIVE


def test_short_horizon_never_claims_dirac():
    flow = SuspensionFlow(tuned("0.8", 256), saddle("0.8", 256))
    res = classify_physical(flow, 3, 1e2, seed=1)
    for rep in res.reports:
        assert rep.classification != DIRAC_SADDLE or rep.occupancy >= 0.9


def test_non_dissipative_is_quasi_minimal(map_b):
    flow = SuspensionFlow(map_b, saddle("2.5", 256))
    res = classify_physical(flow, 3, 1e5, seed=0)
    assert res.verdict == QUASI_MINIMAL
    assert all(r.occupancy <= 0.3 for r in res.reports)


def test_conservative_jacobian_is_flat():
    ctx = make_context(256)
    sad = SaddleSpec.make("0.5", "2", ctx=ctx)
    fmap = tuned("1", 256)
    flow = SuspensionFlow(fmap, sad)
    with ctx:
        jt = jacobian_trend(flow, ctx.real("0.2"), 1e4, include_smooth=False)
    assert abs(jt.slope) < 1e-12


@pytest.mark.parametrize("r,sign", [("2.5", 1), ("0.8", -1)])
def test_jacobian_sign(r, sign):
    fmap = tuned(r, 256)
    flow = SuspensionFlow(fmap, saddle(r, 256))
    with fmap.ctx:
        jt = jacobian_trend(flow, fmap.ctx.real("0.2"), 1e4)
    assert jt.sign == sign


def test_reversed_orbit_avoids_gap(map_b):
    assert reversed_orbit_avoids_gap(map_b, 5000)

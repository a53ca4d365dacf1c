"""Mode-locking intervals of the family f_omega, their parabolic endpoints,
passage through a parabolic bottleneck, gap bounds, and finite stages of a
construction that stacks ever longer parabolic orbits.

Rotation numbers in this module are those of the inverse map g = f^{-1}
unless a name says otherwise; rho_g = -rho_f (mod 1).  The parameter is the
lift parameter Omega: the map at Omega is f_{frac(Omega)} and its lift is
shifted by floor(Omega), so rho_f(Omega) is continuous and increasing.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction

import gmpy2
from gmpy2 import mpfr

from .errors import (
    ConfigError,
    EndpointCertificationError,
    OrbitHitSingularity,
    PassageStalled,
    StageFailed,
    TongueNotFound,
)
from .flatmap import MapFamily, SaddleSpec
from .numerics import LogMag, circle_dist, frac, signed_circle_offset
from .rotation import log_abs

LO, HI = "lo", "hi"


# ---------------------------------------------------------------------------
# H(x) = F^q(x) - x - P on the lift, with derivatives in x and Omega


@dataclass
class Jets:
    H: object     # F^q(x) - x - P
    H1: object    # (F^q)'(x) - 1
    H2: object    # (F^q)''(x)
    HO: object    # dH/dOmega
    H1O: object   # d(F^q)'/dOmega
    D: object     # (F^q)'(x)


class Branch:
    """F^q - P for one rational type P/q of the f-lift, as a function of Omega."""

    def __init__(self, family: MapFamily, P: int, q: int):
        if q < 1:
            raise ConfigError("period must be positive")
        self.family, self.P, self.q = family, int(P), int(q)
        self.ctx = family.ctx
        self._cache = {}
        self.evaluations = 0

    def map_at(self, Om):
        """(map, effective lift numerator) at lift parameter Omega."""
        key = self.ctx.to_str(Om)
        hit = self._cache.get(key)
        if hit is None:
            with self.ctx:
                fl = int(gmpy2.floor(Om))
                m = self.family.at(Om - fl)
            hit = (m, self.P - self.q * fl)
            if len(self._cache) > 64:
                self._cache.clear()
            self._cache[key] = hit
        return hit

    def G(self, m, Pe, y):
        """F^q(y) - P on the real line."""
        n = gmpy2.floor(y)
        x = y - n
        w = 0
        step = m.lift_step
        for _ in range(self.q):
            x, j = step(x)
            w += j
        self.evaluations += self.q
        return x + (w + n - Pe)

    def jets(self, m, Pe, y) -> Jets:
        n = gmpy2.floor(y)
        x = y - n
        w = 0
        D, S, DO, SO = mpfr(1), mpfr(0), mpfr(0), mpfr(0)
        flat = False
        jet = m.lift_jet
        for _ in range(self.q):
            x, j, fp, k = jet(x)
            w += j
            if k is None or not gmpy2.is_finite(fp):
                flat = True
            else:
                S += k * D
                SO += k * DO
            D = fp * D
            DO = 1 + fp * DO
        self.evaluations += self.q
        H = x + (w + n - Pe) - y
        if flat:
            return Jets(H, mpfr(-1), mpfr(0), DO, mpfr(0), mpfr(0))
        return Jets(H, D - 1, D * S, DO, D * SO, D)


@dataclass
class Comparison:
    sign: int            # -1: rho_f < P/q, 0: locked, +1: rho_f > P/q
    x: object            # periodic point, or the extremum of H closest to zero
    value: object        # H there
    probes: int


def compare(branch: Branch, Om, tol_h=None, grid: int = 64) -> Comparison:
    """Order rho_f(Omega) against P/q by periodic-orbit detection.

    With s P - t q = 1, G1 = F^s - t sends every P/q cycle point to its
    circular successor, so the arc [xi, G1(xi)] holds a point of every such
    cycle.  A zero of H on (a slight widening of) that arc means locked; with
    no zero, H has one sign on the whole line and H(xi) gives the order.
    Tangencies between grid points are caught by refining each extremum.
    """
    ctx = branch.ctx
    q = branch.q
    with ctx:
        m, Pe = branch.map_at(Om)
        tol_h = mpfr(2) ** (-(ctx.precision_bits // 2)) if tol_h is None else tol_h
        x0 = m.xi
        H0 = branch.G(m, Pe, x0) - x0
        if H0 == 0:
            return Comparison(0, x0, H0, 1)
        s0 = 1 if H0 > 0 else -1
        if q == 1:
            end = x0 + 1
        else:
            sh = pow(Pe % q, -1, q)
            t = (sh * Pe - 1) // q
            end = Branch(branch.family, t, sh).G(m, t, x0)
            branch.evaluations += sh
            if end <= x0:
                return Comparison(s0, x0, H0, 1)
        pad = (end - x0) / 4 if q > 1 else mpfr(0)
        lo = x0 - pad
        width = end - x0 + 2 * pad
        pts = [lo + width * j / grid for j in range(grid + 1)]
        jets = [branch.jets(m, Pe, u) for u in pts]
        best = (abs(H0), x0, H0)
        for u, J in zip(pts, jets):
            if J.H == 0 or (J.H > 0) != (s0 > 0) or abs(J.H) <= tol_h:
                return Comparison(0, u, J.H, grid + 1)
            if abs(J.H) < best[0]:
                best = (abs(J.H), u, J.H)
        for k in range(grid):
            h1a, h1b = jets[k].H1, jets[k + 1].H1
            # max of H when looking for a zero from below, min from above
            turn = (h1a > 0 >= h1b) if s0 < 0 else (h1a < 0 <= h1b)
            if not turn:
                continue
            xm = _refine_extremum(branch, m, Pe, pts[k], pts[k + 1])
            hm = branch.jets(m, Pe, xm).H
            if s0 * hm <= tol_h:
                return Comparison(0, xm, hm, grid + 1)
            if abs(hm) < best[0]:
                best = (abs(hm), xm, hm)
        return Comparison(s0, best[1], best[2], grid + 1)


def _refine_extremum(branch, m, Pe, a, b, iters: int = 80):
    """Zero of H' in [a, b] (H' changes sign there): Newton kept inside the bracket."""
    stop = mpfr(2) ** (-(branch.ctx.precision_bits * 3 // 4))
    Ja = branch.jets(m, Pe, a)
    sa = Ja.H1 > 0
    x = (a + b) / 2
    for _ in range(iters):
        J = branch.jets(m, Pe, x)
        if J.H1 == 0:
            return x
        if (J.H1 > 0) == sa:
            a = x
        else:
            b = x
        nx = x - J.H1 / J.H2 if J.H2 != 0 else (a + b) / 2
        if not (a < nx < b):
            nx = (a + b) / 2
        if abs(nx - x) <= stop * max(abs(x), 1) or b - a <= stop:
            return nx
        x = nx
    return x


# ---------------------------------------------------------------------------
# tongues


@dataclass
class TongueRecord:
    rational: Fraction            # rotation number of g
    P: int                        # f-lift numerator: rho_f = P/q on the tongue
    q: int
    omega_lo: object              # innermost certified parameters
    omega_hi: object
    outer_lo: object              # certified just outside
    outer_hi: object
    iterations: int
    multipliers: dict = field(default_factory=dict)   # g^q multipliers near each endpoint
    bottleneck: dict = field(default_factory=dict)    # periodic point guess near each endpoint
    family: MapFamily | None = None

    @property
    def width(self):
        return self.omega_hi - self.omega_lo

    def branch(self) -> Branch:
        return Branch(self.family, self.P, self.q)

    def to_dict(self):
        cx = self.family.ctx
        return {
            "rational": f"{self.rational.numerator}/{self.rational.denominator}",
            "lift_numerator": self.P,
            "period": self.q,
            "omega_lo": cx.to_str(self.omega_lo),
            "omega_hi": cx.to_str(self.omega_hi),
            "outer_lo": cx.to_str(self.outer_lo),
            "outer_hi": cx.to_str(self.outer_hi),
            "iterations": self.iterations,
            "multipliers": {k: repr(float(v)) for k, v in self.multipliers.items()},
            "precision_bits": cx.precision_bits,
        }


def lift_numerator(family: MapFamily, rational: Fraction, near=None) -> int:
    """f-lift numerator P with P/q = -rational (mod 1), placed where the
    family realizes it: rho_f(Omega) sweeps [rho_f(0), rho_f(0) + 1) on [0, 1)."""
    from .rotation import _lift_rho0

    q = rational.denominator
    base = Fraction(-rational.numerator % q, q)
    with family.ctx:
        rho0 = Fraction(str(float(_lift_rho0(family))))
    if near is not None:
        rho0 += math.floor(near)
    k = math.ceil(rho0 - base)
    return int((base + k) * q)


def locate_tongue(family: MapFamily, rational, bracket=None, tol=1e-12, P: int | None = None,
                  max_bisections: int | None = None, sides=(LO, HI)) -> TongueRecord:
    """Mode-locking interval of g-rotation number `rational` (p/q, lowest terms).

    Bisection on the ordering predicate finds an interior point, then each
    endpoint in `sides` to within `tol`; an unresolved side keeps the interior
    point and the bracket end.  `P` overrides the f-lift numerator.
    """
    rational = Fraction(rational)
    q = rational.denominator
    ctx = family.ctx
    with ctx:
        tol_r = ctx.real(str(tol)) if not isinstance(tol, type(mpfr(0))) else tol
        if bracket is None:
            a, b = mpfr("-0.5"), mpfr("1.5")
        else:
            a, b = ctx.real(bracket[0]) if isinstance(bracket[0], str) else mpfr(bracket[0]), \
                ctx.real(bracket[1]) if isinstance(bracket[1], str) else mpfr(bracket[1])
        if P is None:
            P = lift_numerator(family, rational, near=float(a) if bracket is not None else None)
        br = Branch(family, P, q)
        steps = max_bisections or ctx.precision_bits
        it = 0
        ca = compare(br, a)
        cb = compare(br, b)
        if ca.sign != -1 or cb.sign != 1:
            # an endpoint of the bracket may already be locked
            if ca.sign == 0 or cb.sign == 0:
                pass
            else:
                raise TongueNotFound(f"bracket does not straddle {rational} (signs {ca.sign}, {cb.sign})")
        inner = None
        if ca.sign == 0:
            inner = a
        elif cb.sign == 0:
            inner = b
        while inner is None:
            it += 1
            if b - a <= tol_r or it > steps:
                raise TongueNotFound(f"no locked parameter for {rational} above resolution {float(tol_r):.3g}")
            mid = (a + b) / 2
            c = compare(br, mid)
            if c.sign == 0:
                inner = mid
            elif c.sign < 0:
                a = mid
            else:
                b = mid
        if LO in sides:
            lo_out, lo_in, mult_lo, x_lo = _endpoint(br, a, inner, -1, tol_r, steps)
        else:
            lo_out, lo_in, mult_lo, x_lo = a, inner, mpfr("nan"), None
        if HI in sides:
            hi_in, hi_out, mult_hi, x_hi = _endpoint(br, inner, b, +1, tol_r, steps)
        else:
            hi_in, hi_out, mult_hi, x_hi = inner, b, mpfr("nan"), None
        it += br.evaluations // max(q, 1)
        mid = (lo_in + hi_in) / 2
        if compare(br, mid).sign != 0:
            raise TongueNotFound(f"midpoint of the {rational} interval is not locked")
    return TongueRecord(rational, P, q, lo_in, hi_in, lo_out, hi_out, it,
                        {LO: mult_lo, HI: mult_hi}, {LO: x_lo, HI: x_hi}, family)


def _endpoint(br, a, b, outside_sign, tol_r, steps):
    """Bisect between a certified-unlocked and a locked parameter."""
    if outside_sign < 0:
        out, inn = a, b
    else:
        inn, out = a, b
    last = None
    for _ in range(steps):
        if abs(inn - out) <= tol_r:
            break
        mid = (inn + out) / 2
        c = compare(br, mid)
        if c.sign == 0:
            inn, last = mid, c
        elif c.sign == outside_sign:
            out = mid
        else:
            raise TongueNotFound("rotation number not monotone in the parameter")
    if last is None:
        last = compare(br, inn)
    mult = _g_multiplier(br, inn, last.x)
    if outside_sign < 0:
        return out, inn, mult, last.x
    return inn, out, mult, last.x


def _g_multiplier(br, Om, x):
    """Multiplier of g^q at the periodic point of G near x (1 / (F^q)')."""
    with br.ctx:
        m, Pe = br.map_at(Om)
        z = _root_near(br, m, Pe, x)
        if z is None:
            z = x
        J = br.jets(m, Pe, z)
        return 1 / J.D if J.D != 0 else mpfr("inf")


def _root_near(br, m, Pe, x, iters=80):
    tol = mpfr(2) ** (-(br.ctx.precision_bits * 3 // 4))
    span = mpfr("0.5") / br.q
    z = x
    for _ in range(iters):
        J = br.jets(m, Pe, z)
        if J.H1 == 0:
            return None
        dz = -J.H / J.H1
        if abs(dz) > span / 4:
            dz = (span / 4) * (1 if dz > 0 else -1)
        z += dz
        if abs(z - x) > span:
            return None
        if abs(dz) <= tol:
            return z
    J = br.jets(m, Pe, z)
    return z if abs(J.H) <= mpfr(2) ** (-(br.ctx.precision_bits // 2)) else None


# ---------------------------------------------------------------------------
# parabolic endpoints


@dataclass
class ParabolicEndpoint:
    omega: object                 # lift parameter of the tangency
    point: object                 # periodic point closest to xi, in [0, 1)
    multiplier: object            # g^q multiplier at the tangency (1 up to rounding)
    kappa: float                  # |1 - multiplier| at distance tol inside the tongue
    curve: list                   # (distance inside, multiplier) along a dyadic sequence
    cycle: list                   # the q points of the orbit, in [0, 1)
    side: str
    q: int
    P: int

    def to_dict(self, ctx):
        return {
            "omega": ctx.to_str(self.omega),
            "point": ctx.to_str(self.point),
            "multiplier": repr(float(self.multiplier)),
            "kappa": repr(self.kappa),
            "curve": [[repr(float(d)), repr(float(v))] for d, v in self.curve],
            "side": self.side,
            "period": self.q,
            "lift_numerator": self.P,
        }


def saddle_node(br: Branch, Om, x, iters: int = 60, max_dO=None):
    """Newton on (H, H') = 0 in (x, Omega): the tangency of F^q - P with the diagonal."""
    ctx = br.ctx
    with ctx:
        stop = mpfr(2) ** (-(ctx.precision_bits - 24))
        span = mpfr("0.125") / br.q
        for _ in range(iters):
            m, Pe = br.map_at(Om)
            J = br.jets(m, Pe, x)
            det = J.H1 * J.H1O - J.HO * J.H2
            if det == 0:
                break
            dx = -(J.H1O * J.H - J.HO * J.H1) / det
            dO = -(-J.H2 * J.H + J.H1 * J.H1) / det
            # damped: stay near the seed
            shrink = 1
            if abs(dx) > span:
                shrink = min(shrink, span / abs(dx))
            if max_dO is not None and abs(dO) > max_dO:
                shrink = min(shrink, max_dO / abs(dO))
            x, Om = x + shrink * dx, Om + shrink * dO
            if abs(dO) <= stop * max(abs(Om), 1) and abs(dx) <= stop:
                break
        return Om, x


def _extremum(br, m, Pe, x, want_max: bool, iters: int = 60):
    """Critical point of H near x with the requested curvature, or x itself."""
    span = mpfr("0.25") / br.q
    z = x
    stop = mpfr(2) ** (-(br.ctx.precision_bits * 3 // 4))
    for _ in range(iters):
        J = br.jets(m, Pe, z)
        if J.H2 == 0 or (J.H2 < 0) != want_max:
            return x
        dz = -J.H1 / J.H2
        if abs(dz) > span / 4:
            dz = (span / 4) * (1 if dz > 0 else -1)
        z += dz
        if abs(z - x) > span:
            return x
        if abs(dz) <= stop:
            break
    return z


def parabolic_endpoint(record: TongueRecord, side: str = LO, tol=None, levels=range(4, 13),
                       kappa_max: float = 0.25, extra_levels: int = 8) -> ParabolicEndpoint:
    """Tangency parameter at one end of a tongue, certified by the g^q
    multiplier of the periodic orbit tending to 1 from inside."""
    if side not in (LO, HI):
        raise ConfigError("side must be 'lo' or 'hi'")
    br = record.branch()
    ctx = br.ctx
    with ctx:
        inner = record.omega_lo if side == LO else record.omega_hi
        outer = record.outer_lo if side == LO else record.outer_hi
        slack = 4 * abs(inner - outer) + mpfr(2) ** (-(ctx.precision_bits // 2))
        m_in, Pe_in = br.map_at(inner)
        x0 = _extremum(br, m_in, Pe_in, record.bottleneck[side], want_max=(side == LO))
        Om, x = saddle_node(br, inner, x0, max_dO=slack)
        lo_b, hi_b = min(inner, outer) - slack, max(inner, outer) + slack
        if not (lo_b <= Om <= hi_b):
            raise EndpointCertificationError(
                f"tangency at Omega={float(Om)!r} outside the bisection bracket"
            )
        into = 1 if side == LO else -1
        width = record.omega_hi - record.omega_lo
        scale = min(width, mpfr(1))
        m, Pe = br.map_at(Om)
        Jt = br.jets(m, Pe, x)
        curve = []
        for j in levels:
            dist = scale * mpfr(2) ** (-j)
            mult = _attracting_multiplier(br, Om + into * dist, x, Jt)
            curve.append((dist, mult))
        devs = [abs(1 - float(v)) for _, v in curve]
        # narrow, lopsided tongues of long period need a few more levels
        j = levels[-1]
        while devs[-1] > kappa_max and j < levels[-1] + extra_levels and devs[-1] < devs[-2]:
            j += 1
            dist = scale * mpfr(2) ** (-j)
            curve.append((dist, _attracting_multiplier(br, Om + into * dist, x, Jt)))
            devs.append(abs(1 - float(curve[-1][1])))
        if any(b > a * 1.05 + 1e-12 for a, b in zip(devs, devs[1:])) or devs[-1] > kappa_max:
            raise EndpointCertificationError(
                f"multiplier does not approach 1: deviations {[f'{d:.3g}' for d in devs]}"
            )
        tol_r = ctx.real(str(tol)) if tol is not None else curve[-1][0] / 2
        kappa = abs(1 - float(_attracting_multiplier(br, Om + into * tol_r, x, Jt)))
        cycle = _cycle(m, x, br.q)
        point = min(cycle, key=lambda p: circle_dist(p, m.xi))
        return ParabolicEndpoint(Om, point, 1 / Jt.D, kappa, curve, cycle, side, br.q, br.P)


def _climb(br, m, Pe, x, want_max: bool):
    """Move off a flat piece of H (an orbit through U) towards the extremum."""
    J = br.jets(m, Pe, x)
    if J.H2 != 0 or J.H1 != -1:
        return x
    # H = const - x there, so a maximum lies to the left, a minimum to the right
    step = -1 if want_max else 1
    h = mpfr(2) ** (-(br.ctx.precision_bits // 4)) / br.q
    span = mpfr("0.25") / br.q
    while h < span:
        z = x + step * h
        J = br.jets(m, Pe, z)
        if not (J.H2 == 0 and J.H1 == -1):
            return z
        h *= 2
    return x


def _attracting_multiplier(br, Om, x, Jt):
    """g^q multiplier of the g-attracting member of the saddle-node pair.

    That member is the zero of H on the rising side of the extremum, where
    (F^q)' > 1; the other member may be the orbit through U (multiplier 0
    for f), which sits on a flat piece of H.
    """
    m, Pe = br.map_at(Om)
    want_max = Jt.H2 < 0
    inside = 1 if want_max else -1     # sign of H at the extremum inside
    # the extremum drifts with the parameter; for long periods the drift
    # exceeds the pair's separation, so re-centre first
    x = _extremum(br, m, Pe, _climb(br, m, Pe, x, want_max), want_max)
    J = br.jets(m, Pe, x)
    if inside * J.H <= 0:
        raise EndpointCertificationError("no periodic pair at a parameter inside the tongue")
    direction = -1 if want_max else 1
    h = gmpy2.sqrt(abs(2 * J.H / J.H2)) if J.H2 != 0 else mpfr(2) ** -40 / br.q
    span = mpfr("0.5") / br.q
    a, b = x, x + direction * h
    while inside * br.jets(m, Pe, b).H > 0:
        a, h = b, 2 * h
        if h > span:
            raise EndpointCertificationError("no g-attracting orbit found inside the tongue")
        b = x + direction * h
    # bisect to a Newton-sized bracket, then polish
    for _ in range(40):
        mid = (a + b) / 2
        if inside * br.jets(m, Pe, mid).H > 0:
            a = mid
        else:
            b = mid
        if abs(b - a) <= h * mpfr(2) ** -20:
            break
    z = _root_near(br, m, Pe, (a + b) / 2)
    if z is None:
        z = (a + b) / 2
    Jz = br.jets(m, Pe, z)
    if not Jz.D > 1:
        raise EndpointCertificationError("no g-attracting orbit found inside the tongue")
    return 1 / Jz.D


def _cycle(m, x, q):
    pts = []
    y = frac(x)
    for _ in range(q):
        pts.append(y)
        y = m.eval_f(y)
    return pts


# ---------------------------------------------------------------------------
# passage through a parabolic bottleneck


@dataclass
class Distortion:
    min_derivative: object
    max_derivative: object
    K: object
    passages: list            # n(x) per sample
    samples: int

    def to_dict(self):
        return {
            "min_derivative": repr(float(self.min_derivative)),
            "max_derivative": repr(float(self.max_derivative)),
            "K": repr(float(self.K)),
            "n_min": min(self.passages),
            "n_max": max(self.passages),
            "samples": self.samples,
        }


def g_power(fmap, x, period: int):
    """g^period(x) unwrapped next to x, and log of its derivative."""
    y = x
    ld = mpfr(0)
    for _ in range(period):
        ld += fmap.deriv_g(y).log_abs
        y = fmap.eval_g(y)
    return x + signed_circle_offset(y, x), ld


def parabolic_passage_distortion(fmap, fundamental, exit_point, samples: int = 32,
                                 period: int = 1, cap: int = 10**6) -> Distortion:
    """Derivative of the escape map through [a1, a2] under G = g^period.

    `fundamental` = (a1, b1) with b1 = G_0^2(a1) for the tangent map G_0;
    `exit_point` = a2.  For each sample x in [a1, b1], n(x) counts iterates
    until G^n(x) > a2 (or < a2 when the passage runs downward).
    """
    ctx = fmap.ctx
    with ctx:
        a1, b1 = (ctx.real(v) if isinstance(v, str) else mpfr(v) for v in fundamental)
        a2 = ctx.real(exit_point) if isinstance(exit_point, str) else mpfr(exit_point)
        up = a2 > a1
        lo_log, hi_log = None, None
        ns = []
        for i in range(samples):
            x = a1 + (b1 - a1) * (mpfr(i) + mpfr("0.5")) / samples
            total = mpfr(0)
            n = 0
            while (x <= a2) if up else (x >= a2):
                x, ld = g_power(fmap, x, period)
                total += ld
                n += 1
                if n > cap:
                    raise PassageStalled(f"no escape after {cap} iterates (parameter inside the tongue?)")
            ns.append(n)
            lo_log = total if lo_log is None else min(lo_log, total)
            hi_log = total if hi_log is None else max(hi_log, total)
        mn, mx = gmpy2.exp(lo_log), gmpy2.exp(hi_log)
        return Distortion(mn, mx, max(mx, 1 / mn), ns, samples)


def passage_setup(endpoint: ParabolicEndpoint, family: MapFamily, distance, radius, point=None):
    """Map just outside the tongue and the passage intervals around the ghost.

    Returns (map, (a1, b1), a2) with [a1, a2] = [p - radius, p + radius]
    oriented along the passage, and b1 = G_0^2(a1) for the tangent map.
    `point` defaults to the tangency point found by Newton.
    """
    ctx = family.ctx
    with ctx:
        outside = -1 if endpoint.side == LO else 1
        Om = endpoint.omega + outside * distance
        fm = family.at(frac(Om))
        f0 = family.at(frac(endpoint.omega))
        p = endpoint.cycle[0] if point is None else point
        probe, _ = g_power(fm, p, endpoint.q)
        up = probe > p
        a1, a2 = (p - radius, p + radius) if up else (p + radius, p - radius)
        g1, _ = g_power(f0, a1, endpoint.q)
        g2, _ = g_power(f0, g1, endpoint.q)
        return fm, (a1, g2), a2


# ---------------------------------------------------------------------------
# gap bound


@dataclass
class GapBound:
    delta: object
    argmin: tuple                 # (label, k)
    k_max: int
    L: object | None
    condition: bool | None        # 2 delta < delta^(1/r) / L
    hit_singularity: bool = False

    def to_dict(self):
        return {
            "delta_gap": repr(float(self.delta)),
            "argmin": list(self.argmin),
            "k_max": self.k_max,
            "L": None if self.L is None else repr(float(self.L)),
            "condition_2delta_lt_delta_pow_over_L": self.condition,
            "hit_singularity": self.hit_singularity,
        }


def gap_bound(fmap, points=None, k_max: int = 1000, L=None) -> GapBound:
    """min over z and 1 <= k <= k_max of dist(g^k(z), xi)."""
    ctx = fmap.ctx
    with ctx:
        if points is None:
            points = {"c": fmap.c, "d": fmap.d}
        best, arg = None, None
        for label, z in points.items():
            y = mpfr(z)
            try:
                for k in range(1, k_max + 1):
                    y = fmap.eval_g(y, index=k)
                    dz = circle_dist(y, fmap.xi)
                    if best is None or dz < best:
                        best, arg = dz, (label, k)
            except OrbitHitSingularity as e:
                return GapBound(mpfr(0), (label, e.index), k_max, L, False, hit_singularity=True)
        cond = None
        if L is not None:
            cond = bool(2 * best < best ** (1 / fmap.r) / L)
        return GapBound(best, arg, k_max, L, cond)


# ---------------------------------------------------------------------------
# finite stages


def stage_constant(i: int) -> Fraction:
    """c_i = 1 - 2^(-i-2); the infinite product is positive."""
    return 1 - Fraction(1, 2 ** (i + 2))


def merge_arcs(arcs):
    """Union of ccw arcs (start, end) on [0, 1) as sorted disjoint intervals."""
    pieces = []
    for a, b in arcs:
        a, b = frac(a), frac(b)
        if a <= b:
            pieces.append((a, b))
        else:
            pieces.append((a, mpfr(1)))
            pieces.append((mpfr(0), b))
    pieces.sort(key=lambda t: t[0])
    out = []
    for a, b in pieces:
        if out and a <= out[-1][1]:
            if b > out[-1][1]:
                out[-1] = (out[-1][0], b)
        else:
            out.append((a, b))
    return out


def in_intervals(x, intervals):
    from bisect import bisect_right

    starts = [a for a, _ in intervals]
    k = bisect_right(starts, x) - 1
    return k >= 0 and x <= intervals[k][1]


@dataclass
class StageRecord:
    n: int
    omega: object                     # lift parameter of the parabolic map
    rho: Fraction                     # g-rotation number p_n / b_n
    b: int
    P: int                            # f-lift numerator of the tongue
    multiplier: int | None            # a used to reach this stage from the previous one
    point: object                     # parabolic point closest to xi
    cycle: list
    radius: object                    # B_n = (point - radius, point + radius)
    base_set: list                    # union of g^j(B_n), j < b_n
    core_set: list                    # same with half radius (C_n)
    constants: list                   # c_1 .. c_n
    fractions: dict = field(default_factory=dict)   # i -> {"z": min ratio, "p": ratio, "required": prod}
    horizons: dict = field(default_factory=dict)    # i -> t_i
    delta_gap: object = None
    K: object = None
    roof_cap: float = math.nan        # T_n
    roof_floor: float = math.nan      # T_0
    off_tongue_count: int | None = None   # d_{n-1} measured for this stage's partition
    period_time: float = math.nan     # flow time of the parabolic orbit
    tongue: TongueRecord | None = None
    transcript: list = field(default_factory=list)

    @property
    def p(self):
        return self.rho.numerator

    def to_dict(self, ctx):
        return {
            "n": self.n,
            "omega": ctx.to_str(self.omega),
            "rho": f"{self.rho.numerator}/{self.rho.denominator}",
            "b": self.b,
            "lift_numerator": self.P,
            "multiplier": self.multiplier,
            "point": ctx.to_str(self.point),
            "radius": repr(float(self.radius)),
            "constants": [f"{c.numerator}/{c.denominator}" for c in self.constants],
            "fractions": {str(i): {k: (repr(float(v)) if not isinstance(v, Fraction) else
                                       f"{v.numerator}/{v.denominator}")
                                   for k, v in d.items()} for i, d in self.fractions.items()},
            "horizons": {str(i): repr(float(t)) for i, t in self.horizons.items()},
            "delta_gap": None if self.delta_gap is None else repr(float(self.delta_gap)),
            "K": None if self.K is None else repr(float(self.K)),
            "roof_cap": repr(self.roof_cap),
            "roof_floor": repr(self.roof_floor),
            "off_tongue_count": self.off_tongue_count,
            "period_time": repr(self.period_time),
            "transcript": list(self.transcript),
            "precision_bits": ctx.precision_bits,
        }


def _neighbourhood(fmap, cycle, point, b):
    """Radius of B_n and the base sets of A_n (full radius) and C_n (half radius)."""
    cap = circle_dist(point, fmap.xi) / 2
    if b == 1:
        radius = cap
    else:
        radius = min(min(circle_dist(point, y) for y in cycle if y != point) / 2, cap)
    return radius, _orbit_union(fmap, point, radius, b), _orbit_union(fmap, point, radius / 2, b)


def _orbit_union(fmap, point, radius, b):
    a, e = point - radius, point + radius
    arcs = []
    for _ in range(b):
        arcs.append((a, e))
        a, e = fmap.eval_g(a), fmap.eval_g(e)
    return merge_arcs(arcs)


def _roof(saddle_coef, tau0, fmap, x):
    return tau0 - saddle_coef * log_abs(circle_dist(x, fmap.xi))


def _trajectory(fmap, z, horizon, saddle_coef, tau0):
    """Base points and fiber lengths of the flow from z up to time horizon."""
    xs, taus = [], []
    t = 0.0
    x = mpfr(z)
    while t < horizon:
        tau = _roof(saddle_coef, tau0, fmap, x)
        xs.append(x)
        taus.append(tau)
        t += tau
        x = fmap.eval_g(x, index=len(xs))
    return xs, taus


def _worst_fraction(xs, taus, base, t_start):
    """min over return times t >= t_start of t_A / t for the flow box over `base`."""
    tA, t, worst = 0.0, 0.0, math.inf
    for x, tau in zip(xs, taus):
        t += tau
        if in_intervals(x, base):
            tA += tau
        if t >= t_start:
            worst = min(worst, tA / t)
    return worst


def _saddle_floats(saddle):
    return float(1 / gmpy2.log(saddle.lambda_u)), float(saddle.tau0)


def _make_stage(n, family, saddle, ep, rho, b, P, a, rec, transcript):
    ctx = family.ctx
    coef, tau0 = _saddle_floats(saddle)
    with ctx:
        fm = family.at(frac(ep.omega))
        radius, base, core = _neighbourhood(fm, ep.cycle, ep.point, b)
        period_time = 0.0
        y = ep.point
        for _ in range(b):
            period_time += _roof(coef, tau0, fm, y)
            y = fm.eval_g(y)
    return StageRecord(n, ep.omega, rho, b, P, a, ep.point, ep.cycle, radius, base, core,
                       [stage_constant(i) for i in range(1, n + 1)], tongue=rec,
                       period_time=period_time, transcript=list(transcript))


def _stage_distortion(family, ep, st, passes: int = 16, samples: int = 4):
    """K for the passage through the stage's own bottleneck, n(x) near `passes`."""
    ctx = family.ctx
    with ctx:
        br = Branch(family, ep.P, ep.q)
        scale = _tangent_scale(br, ep.omega, ep.cycle[0])
        dist = mpfr(math.pi ** 2 / (scale * passes ** 2))
        fm, fund, a2 = passage_setup(ep, family, dist, st.radius / 2, point=st.point)
        return parabolic_passage_distortion(fm, fund, a2, samples=samples, period=ep.q).K


def _tangent_scale(br, Om, x):
    """|dH/dOmega| |H''| / 2 at the tangency; a parameter at distance e outside
    gives passages of about pi / sqrt(scale * e) iterates."""
    m, Pe = br.map_at(Om)
    J = br.jets(m, Pe, x)
    return float(abs(J.HO) * abs(J.H2) / 2)


def first_stage(family: MapFamily, saddle: SaddleSpec, tol=1e-14, bracket=None,
                gap_kmax: int = 1000, distortion: bool = True) -> StageRecord:
    """Stage 1: the parabolic fixed point of g at the end of the 0/1 tongue
    where rho_g grows as the parameter moves out."""
    rec = locate_tongue(family, Fraction(0), bracket=bracket, tol=tol)
    ep = parabolic_endpoint(rec, LO)
    st = _make_stage(1, family, saddle, ep, Fraction(0), 1, rec.P, None, rec, [])
    with family.ctx:
        fm = family.at(frac(ep.omega))
        st.delta_gap = gap_bound(fm, {"c": fm.c, "d": fm.d, "p": st.point}, gap_kmax).delta
    if distortion:
        st.K = _stage_distortion(family, ep, st)
    st.transcript = [{"a": None, "accepted": True}]
    return st


def admissible_multiplier(prev: StageRecord, a: int) -> int:
    """Smallest a' >= a for which (p a' + 1)/(a' b) is in lowest terms."""
    a = max(a, 2)
    while math.gcd(prev.p * a + 1, prev.b) != 1:
        a += 1
    return a


def liouville_stage(prev: StageRecord, history: list, family: MapFamily, saddle: SaddleSpec,
                    a: int = 8, a_cap: int = 4096, z_samples: int = 9, distortion_cap: int = 2000,
                    period_cap: int = 50000, log=None) -> StageRecord:
    """Next stage: the tongue of rho_g = (p a + 1)/(a b) next to prev, its
    parabolic endpoint, and the occupancy inequalities for every earlier
    flow box; a grows until they hold, passes a_cap, or the period a b
    passes period_cap."""
    ctx = family.ctx
    records = list(history) + [prev]
    transcript = []
    coef, tau0 = _saddle_floats(saddle)
    with ctx:
        scale = _tangent_scale(Branch(family, prev.P, prev.b), prev.omega, prev.point)
    a = admissible_multiplier(prev, a)
    while a <= a_cap:
        q = a * prev.b
        if q > period_cap:
            transcript.append({"a": a, "failure": f"period {q} above period_cap {period_cap}"})
            if log:
                log(transcript[-1])
            raise StageFailed(f"multiplier {a} needs period {q} > {period_cap}", diagnostics=transcript)
        rho = Fraction(prev.p * a + 1, q)
        P = a * prev.P - 1
        try:
            rec, ep = _stage_tongue(family, prev, rho, P, a, scale)
        except (TongueNotFound, EndpointCertificationError) as e:
            transcript.append({"a": a, "failure": f"tongue: {e}"})
            if log:
                log(transcript[-1])
            a = admissible_multiplier(prev, a + max(1, a // 4))
            continue
        st = _make_stage(prev.n + 1, family, saddle, ep, rho, q, P, a, rec, transcript)
        with ctx:
            fm = family.at(frac(ep.omega))
            # d_n: intervals of the partition by g^{j b_n}(p_{n+1}) not inside C_n
            pts = sorted(_every(fm, st.point, prev.b, a))
            d_n = 0
            for k in range(len(pts)):
                u, v = pts[k], pts[(k + 1) % len(pts)]
                mid = frac(u + frac(v - u) / 2)
                if not all(in_intervals(w, prev.core_set) for w in (u, v, mid)):
                    d_n += 1
            cyc_x, cyc_t = [], []
            y = st.point
            for _ in range(q):
                cyc_x.append(y)
                cyc_t.append(_roof(coef, tau0, fm, y))
                y = fm.eval_g(y)
            zs = [fm.c + (fm.d - fm.c) * i / (z_samples - 1) for i in range(z_samples)]
            # T_n from a first look at the z-orbits over a few periods
            probe = [_trajectory(fm, z, 2 * st.period_time, coef, tau0) for z in zs]
            all_t = [t for _, ts in probe for t in ts] + cyc_t
            T_n, T_0 = max(all_t), min(all_t)
            c_n = float(stage_constant(prev.n))
            t_n = 2 * prev.b * T_n * (1 + d_n) / (1 - c_n)
            horizons = dict(prev.horizons)
            horizons[prev.n] = t_n
            horizon = max(t_n, 8 * st.period_time) + 2 * st.period_time
            trajs = [_trajectory(fm, z, horizon, coef, tau0) for z in zs]
        st.roof_cap, st.roof_floor, st.off_tongue_count = T_n, T_0, d_n
        st.horizons = horizons
        failures, wanted = [], a
        for rec_i in records:
            i = rec_i.n
            need = 1.0
            for j in range(i, prev.n + 1):
                need *= float(stage_constant(j))
            z_worst = min(_worst_fraction(xs, ts, rec_i.base_set, horizons[i]) for xs, ts in trajs)
            tp = sum(t for x, t in zip(cyc_x, cyc_t) if in_intervals(x, rec_i.base_set))
            p_frac = tp / sum(cyc_t)
            st.fractions[i] = {"z": z_worst, "p": p_frac, "required": need}
            worst = min(z_worst, p_frac)
            if not worst > need:
                failures.append(f"A{i}: fraction {worst:.4f} <= {need:.4f}")
                # the deficit shrinks like 1/a
                wanted = max(wanted, math.ceil(a * (1 - worst) / (1 - need) * 1.1))
        if not failures:
            with ctx:
                st.delta_gap = gap_bound(fm, {"c": fm.c, "d": fm.d, "p": st.point}, 2 * q).delta
            if q <= distortion_cap:
                st.K = _stage_distortion(family, ep, st)
            transcript.append({"a": a, "accepted": True,
                               "fractions": {str(k): v["z"] for k, v in st.fractions.items()}})
            if log:
                log(transcript[-1])
            st.transcript = transcript
            return st
        transcript.append({"a": a, "failure": "; ".join(failures)})
        if log:
            log(transcript[-1])
        a = admissible_multiplier(prev, max(wanted, a + max(1, a // 4)))
    raise StageFailed(f"no admissible multiplier up to {a_cap}", diagnostics=transcript)


def _every(fm, point, step, count):
    out = []
    y = point
    for _ in range(count):
        out.append(frac(y))
        for _ in range(step):
            y = fm.eval_g(y)
    return out


def _stage_tongue(family, prev, rho, P, a, scale):
    """Tongue of the next rational just past prev's endpoint, and its parabolic end.

    The ghost of prev's orbit is crossed in about a passes when the parameter
    sits about pi^2 / (scale a^2) outside, which seeds the bracket.
    """
    ctx = family.ctx
    with ctx:
        br = Branch(family, P, rho.denominator)
        top = prev.omega
        guess = mpfr(math.pi ** 2 / (scale * a * a))
        far = 4 * guess
        while compare(br, top - far).sign >= 0:
            far *= 4
            if far > 1:
                raise TongueNotFound(f"no parameter below the tongue of {rho}")
        near = guess / 16
        while compare(br, top - near).sign <= 0:
            near /= 4
            if near < mpfr(2) ** -(ctx.precision_bits // 2):
                raise TongueNotFound(f"no parameter above the tongue of {rho}")
        # bisection only seeds the tangency Newton; a modest resolution suffices
        tol_r = (far - near) * mpfr(2) ** -36
        rec = locate_tongue(family, rho, bracket=(top - far, top - near), tol=tol_r, P=P, sides=(LO,))
        ep = parabolic_endpoint(rec, LO)
        return rec, ep


def next_tongue(prev: StageRecord, family: MapFamily, a: int):
    """Tongue of rho_g = (p a + 1)/(a b) next to prev and its parabolic endpoint.

    No occupancy checks: this is the geometric part of `liouville_stage`.
    """
    if math.gcd(prev.p * a + 1, prev.b) != 1:
        raise ConfigError(f"multiplier {a} does not give a rational in lowest terms")
    with family.ctx:
        scale = _tangent_scale(Branch(family, prev.P, prev.b), prev.omega, prev.point)
    rho = Fraction(prev.p * a + 1, a * prev.b)
    return _stage_tongue(family, prev, rho, a * prev.P - 1, a, scale)


def run_stages(family: MapFamily, saddle: SaddleSpec, count: int = 3, a: int = 8,
               a_cap: int = 4096, period_cap: int = 50000, tol=1e-14, log=None) -> list:
    if not 1 <= count <= 4:
        raise ConfigError("stage count must lie in 1..4")
    stages = [first_stage(family, saddle, tol=tol)]
    while len(stages) < count:
        stages.append(liouville_stage(stages[-1], stages[:-1], family, saddle, a=a, a_cap=a_cap,
                                      period_cap=period_cap, log=log))
    return stages


def stages_transcript_csv(stages) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", "a", "outcome"])
    for st in stages:
        for entry in st.transcript:
            w.writerow([st.n, entry.get("a"), "accepted" if entry.get("accepted") else entry.get("failure")])
    return buf.getvalue()


__all__ = [
    "Branch", "Jets", "compare", "TongueRecord", "locate_tongue", "lift_numerator",
    "ParabolicEndpoint", "parabolic_endpoint", "saddle_node", "Distortion",
    "parabolic_passage_distortion", "passage_setup", "next_tongue", "g_power", "GapBound", "gap_bound",
    "StageRecord", "first_stage", "liouville_stage", "run_stages", "stage_constant",
    "admissible_multiplier",
    "merge_arcs", "in_intervals", "stages_transcript_csv", "LO", "HI", "LogMag",
]

"""Rotation numbers, continued fractions and tuning of the family.

The rotation number is bracketed by Farey descent: for a lift F of a monotone
degree-one map and any base point x,

    F^q(x) - x - p > 0  =>  rho >= p/q,     < 0  =>  rho <= p/q,

and equality means x is periodic.  Orbit points carry a forward error bound
so that a sign is only used when it exceeds that bound; otherwise the
descent stops and reports that it ran out of precision.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import gmpy2
from gmpy2 import mpfr

from .errors import ConfigError, PrecisionExhausted, TuneError
from .flatmap import FlatCircleMap, MapFamily
from .numerics import NumericContext, frac

# ---------------------------------------------------------------------------
# continued fractions


@dataclass
class ContinuedFraction:
    rho: object
    quotients: list          # a_1 .. a_N
    p: list                  # p_0 .. p_N
    q: list                  # q_0 .. q_N
    terminated: bool = False  # True when rho is rational and fully expanded
    bounded_type_bound: int | None = None

    @property
    def depth(self):
        return len(self.quotients)

    def convergent(self, n) -> Fraction:
        return Fraction(self.p[n], self.q[n])

    def to_dict(self, ctx: NumericContext | None = None):
        rho = self.rho
        if isinstance(rho, Fraction):
            rho_s = f"{rho.numerator}/{rho.denominator}"
        elif ctx is not None:
            rho_s = ctx.to_str(rho)
        else:
            rho_s = str(rho)
        return {
            "rho": rho_s,
            "quotients": list(self.quotients),
            "p": [str(v) for v in self.p],
            "q": [str(v) for v in self.q],
            "terminated": self.terminated,
            "bounded_type_bound": self.bounded_type_bound,
        }


def convergents_from_quotients(quotients):
    """p_0..p_N, q_0..q_N for rho = [0; a_1, a_2, ...]."""
    p, q = [0], [1]
    pm, qm = 1, 0
    for a in quotients:
        p_new, q_new = a * p[-1] + pm, a * q[-1] + qm
        pm, qm = p[-1], q[-1]
        p.append(p_new)
        q.append(q_new)
    return p, q


def continued_fraction(rho, depth: int, ctx: NumericContext | None = None) -> ContinuedFraction:
    """Gauss-map expansion of rho in [0, 1) at the working precision.

    A Fraction argument is rounded to the working precision first; the
    expansion then stops when the remainder is zero within its error bound.
    Raises PrecisionExhausted when `depth` quotients cannot be certified.
    """
    bits = ctx.precision_bits if ctx else gmpy2.get_context().precision
    ctx = ctx or NumericContext(max(bits, 64))
    with ctx:
        x = ctx.real(rho) if isinstance(rho, (Fraction, str)) else mpfr(rho)
        if not (0 <= x < 1):
            raise ConfigError("rotation number must lie in [0, 1)")
        err = abs(x) * ctx.eps
        zero_tol = mpfr(2) ** (-(bits // 2))
        quotients = []
        terminated = x == 0
        while len(quotients) < depth and not terminated:
            if err > zero_tol:
                raise PrecisionExhausted(
                    f"continued fraction loses significance after {len(quotients)} quotients at P={bits}"
                )
            y = 1 / x
            yerr = err / (x * (x - err)) + y * ctx.eps if x > err else mpfr("inf")
            n = gmpy2.rint(y)
            if abs(y - n) <= max(4 * yerr, zero_tol):
                # 1/x is an integer within its error: rational, finished
                quotients.append(int(n))
                terminated = True
                break
            a = gmpy2.floor(y)
            if gmpy2.floor(y - yerr) != a or gmpy2.floor(y + yerr) != a:
                raise PrecisionExhausted(
                    f"quotient {len(quotients) + 1} undecidable at P={bits}"
                )
            quotients.append(int(a))
            x = y - a
            err = yerr + ctx.eps
        p, q = convergents_from_quotients(quotients)
        return ContinuedFraction(rho=rho, quotients=quotients, p=p, q=q, terminated=terminated)


def euclid_quotients(num: int, den: int):
    """Partial quotients of num/den in [0,1) by the integer Euclid algorithm."""
    out = []
    a, b = den, num
    while b:
        out.append(a // b)
        a, b = b, a % b
    return out


def rigid_rotation_gap(rho, n: int, cf: ContinuedFraction | None = None, ctx: NumericContext | None = None):
    """||q_n rho|| with its bracket [1/(q_{n+1}+q_n), 1/q_{n+1}].

    Returns (value, lower, upper); for the last convergent of a rational the
    value and both bounds are 0.
    """
    ctx = ctx or NumericContext(max(gmpy2.get_context().precision, 64))
    cf = cf or continued_fraction(rho, n + 1, ctx)
    with ctx:
        qn = cf.q[n]
        if isinstance(rho, Fraction):
            v = abs(qn * rho - round(qn * rho))
            value = ctx.real(v)
        else:
            x = qn * (ctx.real(rho) if isinstance(rho, str) else mpfr(rho))
            value = abs(x - gmpy2.rint(x))
        if n + 1 < len(cf.q):
            q1 = cf.q[n + 1]
            lower, upper = mpfr(1) / (q1 + qn), mpfr(1) / q1
        elif cf.terminated and n == len(cf.q) - 1:
            lower = upper = mpfr(0)
        else:
            raise ConfigError("continued fraction not available to depth n+1")
        return value, lower, upper


@dataclass
class BoundedTypeVerdict:
    bounded: bool
    bound: int
    depth: int
    max_quotient: int

    def __bool__(self):
        return self.bounded


def is_bounded_type(cf: ContinuedFraction, bound: int, depth: int) -> BoundedTypeVerdict:
    if depth > cf.depth and not cf.terminated:
        raise ConfigError(f"continued fraction has depth {cf.depth} < {depth}")
    qs = cf.quotients[:depth]
    m = max(qs) if qs else 0
    return BoundedTypeVerdict(m <= bound, bound, min(depth, cf.depth), m)


def golden_mean(ctx: NumericContext):
    with ctx:
        return (gmpy2.sqrt(mpfr(5)) - 1) / 2


def parse_rotation(spec, ctx: NumericContext):
    """'golden', 'silver', 'p/q' (-> Fraction) or a decimal string."""
    if isinstance(spec, Fraction):
        return spec
    s = str(spec).strip().lower()
    if s in ("golden", "golden_mean"):
        return golden_mean(ctx)
    if s in ("silver", "sqrt2-1"):
        with ctx:
            return gmpy2.sqrt(mpfr(2)) - 1
    if "/" in s:
        try:
            fr = Fraction(s)
        except ValueError as e:
            raise ConfigError(f"bad rotation number {spec!r}") from e
        return fr
    return ctx.real(s)


# ---------------------------------------------------------------------------
# lifted orbits with error bounds


class LiftOrbit:
    """F^n(x0) stored as (fraction in [0,1), integer winding, log error bound).

    The error of x0 itself is taken as zero: the orbit is that of the stored
    mpfr value.  `es[n]` is the natural log of a bound on |computed - exact|.
    """

    def __init__(self, fmap, x0):
        self.map = fmap
        self.ctx = fmap.ctx
        with self.ctx:
            self.x0 = frac(mpfr(x0))
        self.ys = [self.x0]
        self.ws = [0]
        self.es = [-math.inf]
        self.closed_form = hasattr(fmap, "lift_power")
        self._lrnd = (2 - self.ctx.precision_bits) * math.log(2)

    def __len__(self):
        return len(self.ys)

    def extend(self, n):
        if self.closed_form:
            return
        step = self.map.lift_step_err
        ys, ws, es = self.ys, self.ws, self.es
        with self.ctx:
            y, w, e = ys[-1], ws[-1], es[-1]
            for _ in range(len(ys), n + 1):
                y, j, e = step(y, e)
                w += j
                ys.append(y)
                ws.append(w)
                es.append(e)

    def at(self, n):
        """(y_n, w_n, log e_n) with F^n(x0) = y_n + w_n up to exp(log e_n)."""
        if self.closed_form:
            with self.ctx:
                y, w = self.map.lift_power(self.x0, n)
                return y, w, self._lrnd + math.log(max(n, 1))
        self.extend(n)
        return self.ys[n], self.ws[n], self.es[n]

    def displacement(self, q, p):
        """F^q(x0) - x0 - p and the log of its error bound."""
        y, w, le = self.at(q)
        with self.ctx:
            return (y - self.x0) + (w - p), le


def log_abs(x) -> float:
    """log|x| as a float, valid far below the double range."""
    xf = abs(float(x))
    if xf > 1e-300 and xf < 1e300:
        return math.log(xf)
    if x == 0:
        return -math.inf
    return float(gmpy2.log(abs(x)))


def _sign_test(orbit: LiftOrbit, p, q):
    """+1, -1, 0 (periodic), or None when the sign is below the error bound."""
    s, le = orbit.displacement(q, p)
    if s == 0:
        return 0 if le == -math.inf else None
    if log_abs(s) <= le:
        return None
    return 1 if s > 0 else -1


@dataclass
class RotationEstimate:
    rho: object                   # mpfr midpoint of the bracket, or exact Fraction
    bound: object                 # half-width; 0 when exact
    lower: Fraction
    upper: Fraction
    iterations: int
    exact: Fraction | None = None
    mode_locked: bool = False
    precision_limited: bool = False
    periodic_check: dict = field(default_factory=dict)

    def __iter__(self):
        yield self.rho
        yield self.bound


def _detect_periodic(orbit: LiftOrbit, frac_pq: Fraction, budget: int):
    """Does the orbit settle on a periodic orbit of rotation number p/q?"""
    p, q = frac_pq.numerator, frac_pq.denominator
    ctx = orbit.ctx
    n = max(budget - q, 0)
    if not orbit.closed_form:
        orbit.extend(n + q)
    with ctx:
        tol = mpfr(2) ** (-(ctx.precision_bits // 2))
        ya, wa, ea = orbit.at(n)
        yb, wb, eb = orbit.at(n + q)
        resid = (yb - ya) + (wb - wa - p)
        ok = abs(resid) <= tol or log_abs(resid) <= math.log(2) + max(ea, eb)
        return ok, {"start": n, "period": q, "residual": float(abs(resid))}


def rotation_number(fmap, max_iters: int = 10**6, tol=1e-12, x0=None) -> RotationEstimate:
    """Bracket the rotation number by Farey descent on sign tests.

    The base point is the critical value when the map has one (x0 = xi),
    else 0.  The returned bound is the half-width of a Farey bracket, so
    |rho - estimate| <= bound is certified up to the orbit error accounting.
    """
    if max_iters < 1000:
        raise ConfigError("max_iters must be at least 1000")
    ctx = fmap.ctx
    if x0 is None:
        x0 = getattr(fmap, "xi", mpfr(0))
    orbit = LiftOrbit(fmap, x0)
    with ctx:
        tol = ctx.real(str(tol)) if not isinstance(tol, type(mpfr(0))) else tol

    def result(lo, hi, exact=None, mode_locked=False, limited=False, check=None):
        with ctx:
            if exact is not None:
                return RotationEstimate(ctx.real(exact), mpfr(0), exact, exact, len(orbit),
                                        exact, mode_locked, limited, check or {})
            mid = (ctx.real(lo) + ctx.real(hi)) / 2
            half = ctx.real(hi - lo) / 2
            return RotationEstimate(mid, half, lo, hi, max(len(orbit) - 1, hi.denominator),
                                    None, False, limited, check or {})

    # integer bracket
    y1, w1, _ = orbit.at(1)
    with ctx:
        n0 = int(gmpy2.floor(y1 - orbit.x0)) + w1
    s = _sign_test(orbit, n0, 1)
    if s == 0:
        return result(None, None, exact=Fraction(n0))
    if s is None:
        return result(Fraction(n0 - 1), Fraction(n0 + 1), limited=True)
    if s > 0:
        s2 = _sign_test(orbit, n0 + 1, 1)
        if s2 == 0:
            return result(None, None, exact=Fraction(n0 + 1))
        if s2 is None:
            return result(Fraction(n0), Fraction(n0 + 2), limited=True)
        lo, hi = (Fraction(n0), Fraction(n0 + 1)) if s2 < 0 else (Fraction(n0 + 1), Fraction(n0 + 2))
    else:
        lo, hi = Fraction(n0 - 1), Fraction(n0)

    def width(a, b):
        return Fraction(1, a.denominator * b.denominator)

    def step(a, b, k):
        # k Stern-Brocot moves from a toward b
        return Fraction(a.numerator + k * b.numerator, a.denominator + k * b.denominator)

    while ctx.real(width(lo, hi)) > 2 * tol:
        med = step(lo, hi, 1)
        if med.denominator > max_iters:
            break
        s = _sign_test(orbit, med.numerator, med.denominator)
        if s is None:
            return result(lo, hi, limited=True)
        if s == 0:
            return result(None, None, exact=med)
        # gallop in the direction of the test
        if s > 0:
            moving, fixed, sgn = lo, hi, 1
        else:
            moving, fixed, sgn = hi, lo, -1
        k_ok, k = 1, 2
        stalled = None
        while True:
            cand = step(moving, fixed, k)
            if cand.denominator > max_iters:
                stalled = "budget"
                break
            t = _sign_test(orbit, cand.numerator, cand.denominator)
            if t is None:
                stalled = "precision"
                break
            if t == 0:
                return result(None, None, exact=cand)
            if t != sgn:
                break
            k_ok, k = k, 2 * k
        # binary search for the last k with the same sign, in (k_ok, k)
        hi_k = k
        while hi_k - k_ok > 1:
            mid = (k_ok + hi_k) // 2
            cand = step(moving, fixed, mid)
            if cand.denominator > max_iters:
                hi_k = mid
                continue
            t = _sign_test(orbit, cand.numerator, cand.denominator)
            if t is None:
                stalled = "precision"
                hi_k = mid
                continue
            if t == 0:
                return result(None, None, exact=cand)
            if t == sgn:
                k_ok = mid
            else:
                hi_k = mid
        new_moving = step(moving, fixed, k_ok)
        if sgn > 0:
            lo = new_moving
        else:
            hi = new_moving
        if stalled is not None and hi_k == k and k_ok >= 32:
            # a long one-sided run: is the fixed endpoint a locked rotation number?
            ok, info = _detect_periodic(orbit, fixed, max_iters)
            if ok:
                return result(None, None, exact=fixed, mode_locked=True, check=info)
        if stalled == "precision":
            return result(lo, hi, limited=True)
        if stalled == "budget":
            break
    # budget exhausted or bracket narrow enough: check for locking at either end
    if ctx.real(width(lo, hi)) > 2 * tol:
        for cand in (lo, hi):
            if cand.denominator <= max_iters // 4:
                ok, info = _detect_periodic(orbit, cand, max_iters)
                if ok:
                    return result(None, None, exact=cand, mode_locked=True, check=info)
    return result(lo, hi)


# ---------------------------------------------------------------------------
# tuning


@dataclass
class TuneResult:
    omega: object
    target: object
    certified_level: int          # last CF level whose sign test agreed
    bound: object                 # |rho(omega) - target| <= bound (lift coordinates)
    iterations: int
    mode_locked: bool = False
    tongue: tuple | None = None   # (omega_lo, omega_hi) for rational targets
    precision_limited: bool = False
    lift_shift: int = 0
    notes: list = field(default_factory=list)


def _lift_rho0(family: MapFamily, n=4000):
    """Lift rotation number of the omega = 0 member, to within 1/n."""
    m = family.at(0)
    with family.ctx:
        x = m.c
        w = 0
        for _ in range(n):
            x, j = m.lift_step(x)
            w += j
        return (x - m.c + w) / n


class _Comparator:
    """Orders rho(omega) against an irrational target through its convergents."""

    def __init__(self, family: MapFamily, cf: ContinuedFraction, shift: int, depth: int):
        self.family, self.cf, self.shift, self.depth = family, cf, shift, depth

    def __call__(self, omega):
        m = self.family.at(omega)
        orbit = LiftOrbit(m, m.c)
        cf, shift = self.cf, self.shift
        certified = -1
        for k in range(self.depth + 1):
            q = cf.q[k]
            P = cf.p[k] + shift * q
            expect = 1 if k % 2 == 0 else -1   # p_k/q_k < rho for even k
            s = _sign_test(orbit, P, q)
            if s is None:
                return 0, certified, True
            if s == 0:
                return -expect, certified, False
            if s != expect:
                return (-1 if expect > 0 else 1), certified, False
            certified = k
        return 0, certified, False


def tune_parameter(family: MapFamily, target, tol=1e-10, bracket=None, extra_levels=3,
                   max_steps=None) -> TuneResult:
    """Find omega with rho(f_omega) = target (mod 1).

    Irrational targets: bisection driven by convergent sign tests at the
    left endpoint c of the flat interval (F_omega^q(c) increases with omega).
    Rational targets: the whole mode-locking interval is located and its
    midpoint returned with `mode_locked` set.
    """
    ctx = family.ctx
    if isinstance(target, Fraction):
        return _tune_rational(family, target, tol, bracket)
    with ctx:
        target = ctx.real(target) if isinstance(target, str) else mpfr(target)
        if not (0 < target < 1):
            raise ConfigError("target rotation number must lie in (0, 1)")
        tol_r = ctx.real(str(tol))
        rho0 = _lift_rho0(family)
        shift = int(gmpy2.ceil(rho0 - target))
        # choose depth so the level-K bracket is below tol, then go deeper
        quotients_needed = 2
        cf = None
        while True:
            try:
                cf = continued_fraction(target, quotients_needed, ctx)
            except PrecisionExhausted:
                break
            if cf.terminated or mpfr(1) / (cf.q[-1] * cf.q[-2]) < tol_r:
                break
            quotients_needed += 1
        if cf is None:
            raise TuneError("target has no usable continued fraction at this precision")
        depth_needed = cf.depth
        try:
            cf = continued_fraction(target, depth_needed + extra_levels, ctx)
        except PrecisionExhausted:
            pass
        depth = cf.depth
        cmp = _Comparator(family, cf, shift, depth)
        lo, hi = (ctx.real(bracket[0]), ctx.real(bracket[1])) if bracket else (mpfr(0), 1 - ctx.eps)
        c_lo, _, _ = cmp(lo)
        c_hi, _, _ = cmp(hi)
        if c_lo > 0 or c_hi < 0:
            raise TuneError(f"bracket [{float(lo)}, {float(hi)}] does not straddle the target")
        steps = max_steps or ctx.precision_bits
        mid, level, limited, it = lo, -1, False, 0
        for it in range(1, steps + 1):
            mid = (lo + hi) / 2
            c, level, limited = cmp(mid)
            if c == 0:
                break
            if c < 0:
                lo = mid
            else:
                hi = mid
        else:
            limited = True
        if level >= 1:
            bound = mpfr(1) / (cf.q[level] * cf.q[level - 1])
        else:
            bound = mpfr(1)
        res = TuneResult(mid, target, level, bound, it, precision_limited=limited or bound >= tol_r,
                         lift_shift=shift)
        if res.precision_limited:
            res.notes.append(
                f"certified to level {level} (q={cf.q[max(level, 0)]}); bound {float(bound):.3g} "
                f"at P={ctx.precision_bits}"
            )
        return res


def _tune_rational(family: MapFamily, target: Fraction, tol, bracket):
    from .tongues import locate_tongue   # tongues does not import this module

    if not (0 < target < 1) and target != 0:
        raise ConfigError("target rotation number must lie in [0, 1)")
    rho_g = (1 - target) % 1
    rec = locate_tongue(family, Fraction(rho_g), bracket=bracket, tol=tol)
    ctx = family.ctx
    with ctx:
        mid = (rec.omega_lo + rec.omega_hi) / 2
        width = rec.omega_hi - rec.omega_lo
        # report the member parameter in [0, 1); the tongue moves with it
        shift = gmpy2.floor(mid)
        tongue = (rec.omega_lo - shift, rec.omega_hi - shift)
        mid = mid - shift
    res = TuneResult(mid, target, -1, mpfr(0), rec.iterations, mode_locked=True, tongue=tongue)
    if width > ctx.real(str(tol)):
        res.notes.append("mode-locking interval wider than tol; midpoint returned")
    return res


def certified_quotients(lo: Fraction, hi: Fraction, limit: int):
    """Quotients shared by every number in the open interval (lo, hi)."""
    out = []
    while len(out) < limit:
        if lo <= 0:
            break
        y_lo, y_hi = 1 / hi, 1 / lo
        a = math.floor(y_lo)
        # the bracket is open (sign tests were strict): no integer strictly inside
        if math.ceil(y_hi) - 1 != a:
            break
        out.append(a)
        lo, hi = y_lo - a, y_hi - a
    return out


def measured_continued_fraction(fmap: FlatCircleMap, depth: int, max_iters=10**7) -> ContinuedFraction:
    """CF of the map's own rotation number, from the Farey bracket.

    Quotients are those shared by both ends of the bracket, so every
    returned quotient is certified by the sign tests.
    """
    est = rotation_number(fmap, max_iters=max_iters, tol=1e-300)
    if est.exact is not None:
        fr = est.exact % 1
        qs = euclid_quotients(fr.numerator, fr.denominator)
        p, q = convergents_from_quotients(qs[:depth])
        return ContinuedFraction(fr, qs[:depth], p, q, terminated=len(qs) <= depth)
    shift = math.floor(est.lower)
    lo, hi = est.lower - shift, est.upper - shift
    common = certified_quotients(lo, hi, depth)
    if len(common) < depth:
        raise PrecisionExhausted(
            f"rotation number certified to {len(common)} quotients, {depth} requested"
        )
    p, q = convergents_from_quotients(common[:depth])
    return ContinuedFraction(est.rho, common[:depth], p, q)


__all__ = [
    "ContinuedFraction", "RotationEstimate", "TuneResult", "BoundedTypeVerdict", "LiftOrbit",
    "continued_fraction", "rigid_rotation_gap", "rotation_number", "tune_parameter",
    "is_bounded_type", "euclid_quotients", "convergents_from_quotients", "golden_mean",
    "parse_rotation", "measured_continued_fraction",
]

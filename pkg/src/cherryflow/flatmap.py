"""The standard family of circle maps with one flat interval.

    f_w(x) = w + F0(x)  (mod 1)

where F0 collapses U = [c, d] to 0, behaves like (x-d)**r just right of d and
like -(c-x)**r just left of c, and is completed on the long arc by a quintic
Hermite bridge matching value, slope and curvature of the power laws.  The
critical value xi = f(U) equals w mod 1.  `eval_g` is the inverse branch; it
is discontinuous at xi with one-sided limits c and d.

Points on the circle are mpfr numbers in [0, 1).  `lift_step` returns the
image together with the integer jump, so lifted orbits can be carried as
(winding, fractional position) without losing absolute precision.
"""
from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass

import gmpy2
from gmpy2 import mpfr

from .errors import BridgeError, ConfigError, OrbitHitSingularity
from .numerics import LogMag, NumericContext, circle_dist, frac, make_context

BRIDGE_GRID = 10_000

_FLAT, _RIGHT, _BRIDGE, _LEFT = 0, 1, 2, 3


def _hermite5(p0, p1, v0, v1, w0, w1):
    """Coefficients on t in [0,1] for value p, first derivative v, second w."""
    dp = p1 - p0
    return [
        p0,
        v0,
        w0 / 2,
        10 * dp - 6 * v0 - 4 * v1 - (3 * w0 - w1) / 2,
        -15 * dp + 8 * v0 + 7 * v1 + (3 * w0 - 2 * w1) / 2,
        6 * dp - 3 * v0 - 3 * v1 - (w0 - w1) / 2,
    ]


class FlatCircleMap:
    """One member f_omega of the family; immutable after construction.

    Methods assume the map's context is active (``with fmap.ctx:``); the
    module-level `eval_f`, `eval_g`, `deriv_f`, `deriv_g` enter it for you.
    """

    def __init__(self, c, d, r, epsilon, omega, ctx: NumericContext):
        self.ctx = ctx
        with ctx:
            self.c = ctx.real(c)
            self.d = ctx.real(d)
            self.r = ctx.real(r)
            self.epsilon = ctx.real(epsilon)
            self.omega = ctx.real(omega)
            self._check_geometry()
            self.xi = frac(self.omega)
            self.gap = self.d - self.c
            # s = x - d (mod 1); flat part is s in [s_flat, 1)
            self.s_flat = 1 - self.gap
            self.bridge_len = self.s_flat - 2 * self.epsilon
            self.eps_r = self.epsilon ** self.r
            self.junction_slope = self.r * self.epsilon ** (self.r - 1)
            k0 = self.r * (self.r - 1) * self.epsilon ** (self.r - 2)
            h = self.bridge_len
            self._coef = _hermite5(
                self.eps_r, 1 - self.eps_r,
                self.junction_slope * h, self.junction_slope * h,
                k0 * h * h, -k0 * h * h,
            )
            self._dcoef = [i * a for i, a in enumerate(self._coef)][1:]
            self._d2coef = [i * a for i, a in enumerate(self._dcoef)][1:]
            self._fcoef = [float(a) for a in self._coef]
            self._fdcoef = [float(a) for a in self._dcoef]
            self.log_r = gmpy2.log(self.r)
            self.inv_r = 1 / self.r
            self._validate_bridge()
            n = 4096
            self._ftab = [_fhorner(self._fcoef, i / n) for i in range(n + 1)]
            self._newton_stop = mpfr(2) ** -(ctx.precision_bits // 2 + 8)
            self._guard = ctx.guard
            self._rf = float(self.r)
            self._lr = math.log(self._rf)
            self._fh = float(self.bridge_len)
            self._lrnd = (2 - ctx.precision_bits) * math.log(2)
            d2 = [i * a for i, a in enumerate(self._fdcoef)][1:]
            self._bridge_curv = max(abs(_fhorner(d2, i / 256)) for i in range(257)) / self._fh ** 2 / max(
                min(_fhorner(self._fdcoef, i / 256) for i in range(257)) / self._fh, 1e-300)

    # construction ---------------------------------------------------------

    def _check_geometry(self):
        c, d, eps = self.c, self.d, self.epsilon
        if not (0 < c < d < 1):
            raise ConfigError(f"need 0 < c < d < 1, got c={c}, d={d}")
        if not (eps > 0 and d - c + 2 * eps < 1):
            raise ConfigError("need epsilon > 0 and d - c + 2*epsilon < 1")
        if not self.r > 0:
            raise ConfigError("boundary exponent r must be positive")
        if not (0 <= self.omega < 1):
            raise ConfigError("omega must lie in [0, 1)")

    def _validate_bridge(self):
        lo = None
        for i in range(BRIDGE_GRID + 1):
            t = mpfr(i) / BRIDGE_GRID
            v = _horner(self._dcoef, t)
            if not v > 0:
                raise BridgeError(
                    f"bridge derivative {float(v):.3g} <= 0 at grid point {i}/{BRIDGE_GRID}",
                    x=float(self.d + self.epsilon + t * self.bridge_len),
                )
            lo = v if lo is None else min(lo, v)
        self.bridge_min_slope = lo / self.bridge_len

    # coordinates ----------------------------------------------------------

    def _zone(self, s):
        if s >= self.s_flat:
            return _FLAT
        if s <= self.epsilon:
            return _RIGHT
        if s <= self.epsilon + self.bridge_len:
            return _BRIDGE
        return _LEFT

    def _s(self, x):
        """Offset from d, in [0, 1), and the integer used to get there."""
        k = gmpy2.floor(x - self.d)
        return x - self.d - k, int(k)

    def _v(self, s, zone):
        if zone == _FLAT:
            return mpfr(1)
        if zone == _RIGHT:
            return s ** self.r if s > 0 else mpfr(0)
        if zone == _BRIDGE:
            return _horner(self._coef, (s - self.epsilon) / self.bridge_len)
        return 1 - (self.s_flat - s) ** self.r

    # the map --------------------------------------------------------------

    def lift_step(self, x):
        """(f(x) in [0,1), jump) with lift F(x) = f(x) + jump for x in [0,1)."""
        s, k = self._s(x)
        zone = self._zone(s)
        if zone == _FLAT:
            return self.xi, int(gmpy2.floor(self.omega)) + 1 + k
        val = self.omega + (self._v(s, zone) + k)
        j = gmpy2.floor(val)
        return val - j, int(j)

    def lift_jet(self, x):
        """lift_step plus f'(x) and f''(x)/f'(x) in one classification.

        On the flat interval f' = 0 and the ratio is None.
        """
        s, k = self._s(x)
        zone = self._zone(s)
        if zone == _FLAT:
            return self.xi, int(gmpy2.floor(self.omega)) + 1 + k, mpfr(0), None
        if zone == _BRIDGE:
            h = self.bridge_len
            u = (s - self.epsilon) / h
            v = _horner(self._coef, u)
            d1 = _horner(self._dcoef, u) / h
            ratio = _horner(self._d2coef, u) / (h * h * d1)
        else:
            t = s if zone == _RIGHT else self.s_flat - s
            if t == 0:
                d1 = self.deriv_f_real(x)
                return (*self.lift_step(x), d1, None)
            tr1 = t ** (self.r - 1)
            d1 = self.r * tr1
            ratio = (self.r - 1) / t
            if zone == _RIGHT:
                v = t * tr1
            else:
                v = 1 - t * tr1
                ratio = -ratio
        val = self.omega + (v + k)
        j = gmpy2.floor(val)
        return val - j, int(j), d1, ratio

    def lift(self, x):
        """Lift F on the real line; F(x+1) = F(x) + 1."""
        n = gmpy2.floor(x)
        y, j = self.lift_step(x - n)
        return y + j + n

    def eval_f(self, x):
        return self.lift_step(frac(x))[0]

    def deriv_f(self, x) -> LogMag:
        s, _ = self._s(frac(x))
        return self._deriv_s(s, self._zone(s))

    def _deriv_s(self, s, zone) -> LogMag:
        if zone == _FLAT:
            return LogMag.zero()
        if zone == _BRIDGE:
            v = _horner(self._dcoef, (s - self.epsilon) / self.bridge_len) / self.bridge_len
            return LogMag(1, gmpy2.log(v))
        t = s if zone == _RIGHT else self.s_flat - s
        if t == 0:
            if self.r < 1:
                return LogMag(1, mpfr("inf"))
            if self.r > 1:
                return LogMag.zero()
            return LogMag.one()
        return LogMag(1, self.log_r + (self.r - 1) * gmpy2.log(t))

    def deriv_f_real(self, x):
        """f'(x) as an mpfr (may be inf for r < 1 at the junctions)."""
        s, _ = self._s(frac(x))
        zone = self._zone(s)
        if zone == _FLAT:
            return mpfr(0)
        if zone == _BRIDGE:
            return _horner(self._dcoef, (s - self.epsilon) / self.bridge_len) / self.bridge_len
        t = s if zone == _RIGHT else self.s_flat - s
        if t == 0:
            return mpfr("inf") if self.r < 1 else mpfr(0 if self.r > 1 else 1)
        return self.r * t ** (self.r - 1)

    def deriv2_f(self, x):
        s, _ = self._s(frac(x))
        zone = self._zone(s)
        if zone == _FLAT:
            return mpfr(0)
        if zone == _BRIDGE:
            h = self.bridge_len
            return _horner(self._d2coef, (s - self.epsilon) / h) / (h * h)
        rr = self.r * (self.r - 1)
        if zone == _RIGHT:
            return rr * s ** (self.r - 2) if s > 0 else mpfr("inf") * (1 if rr > 0 else -1)
        t = self.s_flat - s
        return -rr * t ** (self.r - 2) if t > 0 else mpfr("-inf") * (1 if rr > 0 else -1)

    def lift_step_err(self, x, le):
        """lift_step plus propagation of a forward error bound.

        `le` is the natural log of the absolute error of x (-inf for exact);
        the returned bound covers both the propagated error and rounding.
        """
        s, k = self._s(x)
        zone = self._zone(s)
        if zone == _FLAT:
            y, j = self.xi, int(gmpy2.floor(self.omega)) + 1 + k
        else:
            val = self.omega + (self._v(s, zone) + k)
            j = gmpy2.floor(val)
            y, j = val - j, int(j)
        if zone == _FLAT:
            # the image is the stored critical value itself, so no rounding
            pe = -math.inf if le == -math.inf else self._propagate(s, zone, le)
            return y, j, pe if pe == -math.inf else _logaddexp(pe, self._lrnd)
        if le == -math.inf:
            return y, j, self._lrnd
        return y, j, _logaddexp(self._propagate(s, zone, le), self._lrnd)

    def _propagate(self, s, zone, le):
        r = self._rf
        if zone == _BRIDGE:
            u = float((s - self.epsilon) / self.bridge_len)
            d1 = _fhorner(self._fdcoef, u) / self._fh
            return math.log(d1) + le + self._bridge_curv * math.exp(le)
        if zone == _FLAT:
            t, inside = s - self.s_flat, True
        elif zone == _RIGHT:
            t, inside = s, False
        else:
            t, inside = self.s_flat - s, False
        tf = float(t)
        lt = math.log(tf) if tf > 1e-300 else float(gmpy2.log(t)) if t > 0 else -math.inf
        ratio = math.exp(le - lt) if lt > -math.inf else math.inf
        if inside:
            # in the flat piece: exact unless the error reaches the junction
            if ratio < 1:
                return -math.inf
            return r * (math.log(2) + le)
        if ratio <= 0.5:
            return self._lr + (r - 1) * lt + abs(r - 1) * math.log1p(2 * ratio) + le
        # error interval reaches the junction: Hoelder estimate over [0, t + e]
        lte = math.log(3) + le
        if r < 1:
            return r * lte
        return self._lr + (r - 1) * lte + math.log(2) + le

    # inverse branch -------------------------------------------------------

    def dist_to_xi(self, y):
        return circle_dist(y, self.xi)

    def _t_of(self, y, index=None):
        t = frac(y - self.xi)
        if min(t, 1 - t) <= self._guard:
            raise OrbitHitSingularity(
                f"point within 2^-{self.ctx.precision_bits - 8} of the critical value",
                index=index, point=y,
            )
        return t

    def eval_g(self, y, index=None):
        """The point x outside (c, d) with f(x) = y."""
        t = self._t_of(y, index)
        return frac(self.d + self._s_of_t(t))

    def _s_of_t(self, t):
        if t <= self.eps_r:
            return t ** self.inv_r
        if t >= 1 - self.eps_r:
            return self.s_flat - (1 - t) ** self.inv_r
        return self.epsilon + self.bridge_len * self._bridge_inverse(t)

    def _bridge_inverse(self, t):
        """Solve bridge(u) = t for u in [0, 1] (normalized coordinate)."""
        tf = float(t)
        tab = self._ftab
        i = min(max(bisect_right(tab, tf) - 1, 0), len(tab) - 2)
        h = 1.0 / (len(tab) - 1)
        u = (i + (tf - tab[i]) / (tab[i + 1] - tab[i])) * h
        for _ in range(3):
            u -= (_fhorner(self._fcoef, u) - tf) / _fhorner(self._fdcoef, u)
        if not (i * h - h <= u <= i * h + 2 * h):
            u = (i + 0.5) * h
        um = mpfr(u)
        for _ in range(64):
            delta = (_horner(self._coef, um) - t) / _horner(self._dcoef, um)
            um -= delta
            if abs(delta) < self._newton_stop:
                break
        return um

    def deriv_g(self, y, index=None) -> LogMag:
        """g'(y) = 1 / f'(g(y)); equals (1/r) t**(1/r - 1) for y = xi + t, small t."""
        t = self._t_of(y, index)
        if t <= self.eps_r:
            return LogMag(1, -self.log_r + (self.inv_r - 1) * gmpy2.log(t))
        if t >= 1 - self.eps_r:
            return LogMag(1, -self.log_r + (self.inv_r - 1) * gmpy2.log(1 - t))
        s = self.epsilon + self.bridge_len * self._bridge_inverse(t)
        return LogMag(1, -self._deriv_s(s, _BRIDGE).log_abs)

    # serialization --------------------------------------------------------

    def to_dict(self):
        cx = self.ctx
        return {
            "c": cx.to_str(self.c),
            "d": cx.to_str(self.d),
            "r": cx.to_str(self.r),
            "epsilon": cx.to_str(self.epsilon),
            "omega": cx.to_str(self.omega),
            "bridge_endpoint_slope": cx.to_str(self.junction_slope),
            "precision_bits": cx.precision_bits,
        }

    @classmethod
    def from_dict(cls, dct, ctx: NumericContext | None = None):
        try:
            ctx = ctx or make_context(int(dct["precision_bits"]))
            m = cls(dct["c"], dct["d"], dct["r"], dct["epsilon"], dct["omega"], ctx)
        except KeyError as e:
            raise ConfigError(f"map record lacks field {e}") from e
        return m

    def family(self) -> "MapFamily":
        return MapFamily(self.c, self.d, self.r, self.epsilon, self.ctx)

    def with_omega(self, omega) -> "FlatCircleMap":
        return FlatCircleMap(self.c, self.d, self.r, self.epsilon, omega, self.ctx)

    def __repr__(self):
        return (f"FlatCircleMap(c={float(self.c)}, d={float(self.d)}, r={float(self.r)}, "
                f"eps={float(self.epsilon)}, omega={float(self.omega)!r}, P={self.ctx.precision_bits})")


def _horner(coef, t):
    acc = coef[-1]
    for a in reversed(coef[:-1]):
        acc = acc * t + a
    return acc


def _logaddexp(a, b):
    if a < b:
        a, b = b, a
    if b == -math.inf:
        return a
    return a + math.log1p(math.exp(b - a))


def _fhorner(coef, t):
    acc = coef[-1]
    for a in reversed(coef[:-1]):
        acc = acc * t + a
    return acc


@dataclass(frozen=True)
class MapFamily:
    """Fixed geometry; `at(omega)` gives the member map."""

    c: object
    d: object
    r: object
    epsilon: object
    ctx: NumericContext

    def at(self, omega) -> FlatCircleMap:
        with self.ctx:
            w = frac(self.ctx.real(omega) if isinstance(omega, str) else mpfr(omega))
        return FlatCircleMap(self.c, self.d, self.r, self.epsilon, w, self.ctx)

    def with_ctx(self, ctx: NumericContext) -> "MapFamily":
        return MapFamily(self.c, self.d, self.r, self.epsilon, ctx)


def make_standard_map(c, d, r, epsilon, omega, ctx: NumericContext | None = None) -> FlatCircleMap:
    return FlatCircleMap(c, d, r, epsilon, omega, ctx or make_context(256))


class RigidRotation:
    """x -> x + omega.  Test double with the orbit interface of FlatCircleMap."""

    def __init__(self, omega, ctx: NumericContext):
        self.ctx = ctx
        with ctx:
            self.omega = frac(ctx.real(omega))
        self.xi = self.omega

    def lift_step(self, x):
        val = x + self.omega
        j = gmpy2.floor(val)
        return val - j, int(j)

    def lift(self, x):
        return x + self.omega

    def lift_power(self, x, n):
        """F^n(x) in closed form as (fraction, winding)."""
        val = x + n * self.omega
        j = gmpy2.floor(val)
        return val - j, int(j)

    def eval_f(self, x):
        return frac(x + self.omega)

    def eval_g(self, y, index=None):
        return frac(y - self.omega)

    def deriv_f(self, x):
        return LogMag.one()

    def deriv_f_real(self, x):
        return mpfr(1)

    def deriv_g(self, y, index=None):
        return LogMag.one()

    def lift_step_err(self, x, le):
        y, j = self.lift_step(x)
        lr = (2 - self.ctx.precision_bits) * math.log(2)
        return y, j, lr if le == -math.inf else _logaddexp(le, lr)

    def dist_to_xi(self, y):
        return circle_dist(y, self.xi)


def r_from_eigenvalues(lambda_s, lambda_u):
    return -gmpy2.log(lambda_u) / gmpy2.log(lambda_s)


@dataclass(frozen=True)
class SaddleSpec:
    lambda_s: object
    lambda_u: object
    delta_box: object
    tau0: object
    ctx: NumericContext

    def __post_init__(self):
        ls, lu, db, t0 = self.lambda_s, self.lambda_u, self.delta_box, self.tau0
        if not (0 < ls < 1):
            raise ConfigError("lambda_s must lie in (0, 1)")
        if not lu > 1:
            raise ConfigError("lambda_u must exceed 1")
        if not (0 < db < 1):
            raise ConfigError("delta_box must lie in (0, 1)")
        if not t0 > 0:
            raise ConfigError("tau0 must be positive")

    @classmethod
    def make(cls, lambda_s, lambda_u, delta_box="0.1", tau0="1", ctx=None):
        ctx = ctx or make_context(256)
        with ctx:
            return cls(ctx.real(lambda_s), ctx.real(lambda_u), ctx.real(delta_box), ctx.real(tau0), ctx)

    @classmethod
    def from_r(cls, r, lambda_s="0.5", delta_box="0.1", tau0="1", ctx=None):
        """Eigenvalues with lambda_u = lambda_s ** (-r)."""
        ctx = ctx or make_context(256)
        with ctx:
            ls = ctx.real(lambda_s)
            lu = ls ** (-ctx.real(r))
            return cls(ls, lu, ctx.real(delta_box), ctx.real(tau0), ctx)

    @property
    def r_derived(self):
        with self.ctx:
            return r_from_eigenvalues(self.lambda_s, self.lambda_u)

    @property
    def dissipative(self) -> bool:
        with self.ctx:
            return self.lambda_s * self.lambda_u <= 1

    def to_dict(self):
        cx = self.ctx
        return {
            "lambda_s": cx.to_str(self.lambda_s),
            "lambda_u": cx.to_str(self.lambda_u),
            "r_derived": cx.to_str(self.r_derived),
            "delta_box": cx.to_str(self.delta_box),
            "tau0": cx.to_str(self.tau0),
            "precision_bits": cx.precision_bits,
        }


def check_compatible(fmap: FlatCircleMap, saddle: SaddleSpec, rel=None):
    """Raise ConfigError unless the map exponent matches the saddle's derived r."""
    with fmap.ctx:
        rd = saddle.r_derived
        tol = rel if rel is not None else mpfr(2) ** (-fmap.ctx.precision_bits // 2)
        if abs(rd - fmap.r) > tol * fmap.r:
            raise ConfigError(
                f"map exponent r={float(fmap.r)} disagrees with -log(lambda_u)/log(lambda_s)={float(rd)}"
            )


def eval_f(fmap, x):
    with fmap.ctx:
        return fmap.eval_f(fmap.ctx.real(x) if isinstance(x, str) else x)


def eval_g(fmap, y):
    with fmap.ctx:
        return fmap.eval_g(fmap.ctx.real(y) if isinstance(y, str) else y)


def deriv_f(fmap, x) -> LogMag:
    with fmap.ctx:
        return fmap.deriv_f(fmap.ctx.real(x) if isinstance(x, str) else x)


def deriv_g(fmap, y) -> LogMag:
    with fmap.ctx:
        return fmap.deriv_g(fmap.ctx.real(y) if isinstance(y, str) else y)


__all__ = [
    "eval_f", "eval_g", "deriv_f", "deriv_g",
    "FlatCircleMap", "MapFamily", "RigidRotation", "SaddleSpec", "make_standard_map",
    "check_compatible", "r_from_eigenvalues",
]

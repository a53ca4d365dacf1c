"""The Cherry flow as a suspension of the inverse return map g under a
log-singular roof, and trajectory-level statistics on it.

A fiber over x starts with the passage near the saddle, which lasts
(-log dist(x, xi)) / log(lambda_u), followed by a smooth arc of length tau0.
Observables are functions of the base point, so their time averages are
roof-weighted averages over returns.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import gmpy2
import numpy as np
from gmpy2 import mpfr

from .errors import ConfigError, OrbitHitSingularity
from .flatmap import FlatCircleMap, SaddleSpec
from .numerics import circle_dist, make_context
from .rotation import log_abs

DIRAC_SADDLE = "DIRAC_SADDLE"
QUASI_MINIMAL = "QUASI_MINIMAL"
INCONCLUSIVE = "INCONCLUSIVE"

DIRAC_THRESHOLD = 0.9
QUASI_THRESHOLD = 0.5
HALF_WIDTH_THRESHOLD = 1e-2


@dataclass
class SuspensionFlow:
    map: FlatCircleMap
    saddle: SaddleSpec
    singular_coefficient: object = None     # None means 1/log(lambda_u)

    def __post_init__(self):
        with self.saddle.ctx:
            if self.singular_coefficient is None:
                self.singular_coefficient = 1 / gmpy2.log(self.saddle.lambda_u)
            self._coef = float(self.singular_coefficient)
            self._tau0 = float(self.saddle.tau0)
            self._log_lu = float(gmpy2.log(self.saddle.lambda_u))
            self._log_ls = float(gmpy2.log(self.saddle.lambda_s))

    @property
    def ctx(self):
        return self.map.ctx

    def with_precision(self, bits: int) -> "SuspensionFlow":
        """Same map and saddle (decimal-exact parameters) at another precision."""
        ctx = make_context(bits)
        fmap = FlatCircleMap.from_dict(self.map.to_dict(), ctx)
        sd = self.saddle.to_dict()
        saddle = SaddleSpec.make(sd["lambda_s"], sd["lambda_u"], sd["delta_box"], sd["tau0"], ctx)
        coef = None
        if self.singular_coefficient is not None:
            with self.saddle.ctx:
                coef = self.saddle.ctx.to_str(self.singular_coefficient)
            with ctx:
                coef = ctx.real(coef)
        return SuspensionFlow(fmap, saddle, coef)

    def roof_from_log(self, log_dist: float) -> float:
        return self._tau0 - self._coef * log_dist

    def transit_from_log(self, log_dist: float) -> float:
        """Saddle passage time for entry at unstable distance exp(log_dist)."""
        return -log_dist / self._log_lu


def distance_cosine(fmap):
    """Observable F(x) = cos(2 pi dist(x, xi)) on the transversal."""
    xi = fmap.xi

    def F(x):
        return math.cos(2 * math.pi * float(circle_dist(x, xi)))

    return F


def roof(flow: SuspensionFlow, x):
    """tau0 + (-log dist(x, xi)) * coefficient, in working precision."""
    fmap = flow.map
    with fmap.ctx:
        x = fmap.ctx.real(x) if isinstance(x, str) else mpfr(x)
        d = circle_dist(x, fmap.xi)
        if d <= fmap.ctx.guard:
            raise OrbitHitSingularity("roof evaluated at the critical value", point=x)
        if flow.singular_coefficient == 0:
            return mpfr(flow.saddle.tau0)
        return flow.saddle.tau0 - flow.singular_coefficient * gmpy2.log(d)


def saddle_pass_occupancy(saddle: SaddleSpec, u, delta) -> float:
    """Time a linear-saddle trajectory entering at unstable distance u spends
    in the box of half-size delta: max(0, t2 - t1)."""
    u, delta = float(u), float(delta)
    if not (0 < u < 1) or not (0 < delta <= 1):
        raise ConfigError("need 0 < u < 1 and 0 < delta <= 1")
    return _occupancy_from_log(math.log(u), math.log(delta),
                               float(gmpy2.log(saddle.lambda_s)), float(gmpy2.log(saddle.lambda_u)))


def _occupancy_from_log(log_u, log_delta, log_ls, log_lu):
    t1 = log_delta / log_ls
    t2 = (log_delta - log_u) / log_lu
    return max(0.0, t2 - t1)


def _box_window(log_u, log_delta, log_ls, log_lu):
    t1 = log_delta / log_ls
    t2 = (log_delta - log_u) / log_lu
    return t1, t2


# ---------------------------------------------------------------------------
# Birkhoff averages


@dataclass
class BirkhoffReport:
    start: str
    horizon: float
    returns: int
    flow_time: float
    occupancy: float            # fraction of flow time in the saddle box
    averages: dict
    half_averages: tuple        # (first half, second half) dicts, including occupancy
    half_width: float
    classification: str
    precision_bits: int
    delta: float
    completed: bool = True
    notes: list = field(default_factory=list)
    period: int | None = None   # cycle length when the orbit is periodic
    trace: list = field(default_factory=list)   # (flow time, running occupancy) samples

    def to_dict(self):
        return {
            "start": self.start,
            "horizon": self.horizon,
            "returns": self.returns,
            "flow_time": _f(self.flow_time),
            "occupancy": _f(self.occupancy),
            "averages": {k: _f(v) for k, v in self.averages.items()},
            "half_averages": [{k: _f(v) for k, v in h.items()} for h in self.half_averages],
            "half_width": _f(self.half_width),
            "classification": self.classification,
            "precision_bits": self.precision_bits,
            "delta": self.delta,
            "completed": self.completed,
            "notes": list(self.notes),
            "period": self.period,
        }


def _f(v):
    return repr(float(v)) if math.isfinite(v) else str(v)


def classify(occupancy: float, half_width: float, completed: bool = True) -> str:
    if not completed:
        return INCONCLUSIVE
    if occupancy >= DIRAC_THRESHOLD:
        return DIRAC_SADDLE
    if occupancy <= QUASI_THRESHOLD and half_width < HALF_WIDTH_THRESHOLD:
        return QUASI_MINIMAL
    return INCONCLUSIVE


class _Halves:
    """Running time integrals split at flow time T/2."""

    def __init__(self, T, names):
        self.mid = T / 2
        self.names = names
        self.time = [0.0, 0.0]
        self.occ = [0.0, 0.0]
        self.obs = [[0.0] * len(names), [0.0] * len(names)]

    def add(self, t0, length, occ_lo, occ_hi, values):
        """A fiber [t0, t0+length) with box window [occ_lo, occ_hi) in fiber time."""
        mid = self.mid
        for h, (a, b) in enumerate(((t0, min(t0 + length, mid)), (max(t0, mid), t0 + length))):
            if b <= a:
                continue
            w = b - a
            self.time[h] += w
            lo, hi = max(occ_lo, a - t0), min(occ_hi, b - t0)
            if hi > lo:
                self.occ[h] += hi - lo
            acc = self.obs[h]
            for k, v in enumerate(values):
                acc[k] += w * v

    def report(self):
        out = []
        for h in (0, 1):
            t = self.time[h]
            d = {"occupancy": self.occ[h] / t if t > 0 else math.nan}
            for k, name in enumerate(self.names):
                d[name] = self.obs[h][k] / t if t > 0 else math.nan
            out.append(d)
        return out


def _run(flow: SuspensionFlow, x0, T, observables, delta, trace_every, check_period):
    fmap = flow.map
    ctx = fmap.ctx
    names = list(observables)
    funcs = [observables[k] for k in names]
    log_delta = math.log(delta)
    log_ls, log_lu = flow._log_ls, flow._log_lu
    coef, tau0 = flow._coef, flow._tau0
    halves = _Halves(T, names)
    t = 0.0
    occ = 0.0
    sums = [0.0] * len(names)
    n = 0
    trace = []
    next_trace = trace_every
    ref, ref_n, span = None, 0, 1
    with ctx:
        x = ctx.real(x0) if isinstance(x0, str) else mpfr(x0)
        while t < T:
            d = circle_dist(x, fmap.xi)
            if d <= ctx.guard:
                raise OrbitHitSingularity("trajectory reached the critical value", index=n, point=x)
            ld = log_abs(d)
            transit = -ld / log_lu if coef != 0 else 0.0
            tau = tau0 - coef * ld
            length = min(tau, T - t)
            if coef != 0:
                t1, t2 = _box_window(ld, log_delta, log_ls, log_lu)
                t2 = min(t2, transit)
            else:
                t1, t2 = 0.0, 0.0
            o = max(0.0, min(t2, length) - t1)
            occ += o
            vals = [float(F(x)) for F in funcs]
            for k, v in enumerate(vals):
                sums[k] += length * v
            halves.add(t, length, t1, t2, vals)
            t += length
            n += 1
            if trace_every and t >= next_trace:
                trace.append((t, occ / t))
                next_trace += trace_every
            if t >= T:
                break
            x = fmap.eval_g(x, index=n)
            # Brent-style check for a numerically periodic orbit
            if check_period:
                if ref is not None and x == ref:
                    return None, n, n - ref_n
                if n - ref_n >= span:
                    ref, ref_n, span = x, n, 2 * span
    averages = {name: sums[k] / t for k, name in enumerate(names)}
    return (t, occ, averages, halves.report(), trace), n, None


def evolve_birkhoff(flow: SuspensionFlow, x0, T, observables=None, delta=None,
                    max_precision: int = 2048, trace_every: float = 0.0,
                    check_period: bool = True) -> BirkhoffReport:
    """Follow the suspension flow from x0 up to flow time T.

    If the trajectory reaches the critical value within the precision guard,
    or settles on a periodic orbit, the run is restarted at twice the
    precision with identical parameters, up to `max_precision`.  A cycle seen
    with the same period at two precisions is taken as genuine mode-locking:
    the run is finished and reported as INCONCLUSIVE with `period` set.
    """
    if T <= 0:
        raise ConfigError("horizon T must be positive")
    observables = observables or {}
    delta = float(flow.saddle.delta_box if delta is None else delta)
    notes = []
    cur = flow
    start = x0 if isinstance(x0, str) else flow.ctx.to_str(x0)
    seen = None
    check = check_period
    while True:
        try:
            res, n, period = _run(cur, start, T, observables, delta, trace_every, check)
        except OrbitHitSingularity as e:
            notes.append(f"critical value reached at return {e.index} with P={cur.ctx.precision_bits}")
            res, n, period = None, e.index, None
        if res is not None:
            break
        if period is not None:
            notes.append(f"periodic orbit of period {period} at P={cur.ctx.precision_bits}")
            if seen == period:
                # the same cycle at two precisions is a property of the map
                check = False
                continue
            seen = period
        bits = cur.ctx.precision_bits * 2
        if bits > max_precision:
            return BirkhoffReport(start, float(T), n, math.nan, math.nan, {}, ({}, {}), math.inf,
                                  INCONCLUSIVE, cur.ctx.precision_bits, delta, completed=False,
                                  notes=notes, period=seen)
        cur = cur.with_precision(bits)
    t, occ, averages, halves, trace = res
    occ_frac = occ / t
    half_width = 0.0
    for key in halves[0]:
        a, b = halves[0][key], halves[1][key]
        if math.isfinite(a) and math.isfinite(b):
            half_width = max(half_width, abs(a - b))
    locked = check_period and not check
    # a mode-locked parameter falls outside the irrational-rotation picture
    verdict = INCONCLUSIVE if locked else classify(occ_frac, half_width)
    seen_period = seen if locked else None
    return BirkhoffReport(start, float(T), n, t, occ_frac, averages, tuple(halves), half_width,
                          verdict, cur.ctx.precision_bits, delta, notes=notes, trace=trace,
                          period=seen_period)


# ---------------------------------------------------------------------------
# classification over random starts


@dataclass
class Classification:
    verdict: str
    dissent: int
    counts: dict
    reports: list
    resampled: int
    seed: int

    def to_dict(self):
        return {
            "verdict": self.verdict,
            "dissent": self.dissent,
            "counts": self.counts,
            "resampled": self.resampled,
            "seed": self.seed,
            "samples": [r.to_dict() for r in self.reports],
        }

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = sorted({k for r in self.reports for k in r.averages})
        w.writerow(["sample", "start", "occupancy", *names, "half_width", "verdict"])
        for i, r in enumerate(self.reports):
            w.writerow([i, r.start, _f(r.occupancy), *[_f(r.averages.get(k, math.nan)) for k in names],
                        _f(r.half_width), r.classification])
        return buf.getvalue()

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample", "flow_time", "running_occupancy"])
        for i, r in enumerate(self.reports):
            for t, o in r.trace:
                w.writerow([i, repr(t), repr(o)])
        return buf.getvalue()


def sample_starts(flow: SuspensionFlow, count: int, seed: int):
    """Deterministic uniform starting points, resampling any within the guard."""
    rng = np.random.default_rng(seed)
    ctx = flow.ctx
    starts, resampled = [], 0
    with ctx:
        while len(starts) < count:
            u = rng.random()
            x = ctx.real(repr(u))
            if circle_dist(x, flow.map.xi) <= ctx.guard:
                resampled += 1
                continue
            starts.append(ctx.to_str(x))
    return starts, resampled


def classify_physical(flow: SuspensionFlow, sample_count: int, T, delta=None, seed: int = 0,
                      observables=None, max_precision: int = 2048, trace_every: float = 0.0,
                      threads: int = 1) -> Classification:
    if sample_count < 1:
        raise ConfigError("sample_count must be at least 1")
    starts, resampled = sample_starts(flow, sample_count, seed)

    def one(x0):
        return evolve_birkhoff(flow, x0, T, observables, delta, max_precision, trace_every)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as ex:
            reports = list(ex.map(one, starts))     # map keeps seed order
    else:
        reports = [one(x0) for x0 in starts]
    counts = {}
    for r in reports:
        counts[r.classification] = counts.get(r.classification, 0) + 1
    # majority with a fixed tie order
    order = [DIRAC_SADDLE, QUASI_MINIMAL, INCONCLUSIVE]
    verdict = max(order, key=lambda v: (counts.get(v, 0), -order.index(v)))
    return Classification(verdict, sample_count - counts.get(verdict, 0), counts, reports, resampled, seed)


# ---------------------------------------------------------------------------
# Jacobian growth


@dataclass
class JacobianTrend:
    slope: float
    sign: int
    returns: int
    flow_time: float
    log_jacobian: float
    include_smooth: bool
    precision_bits: int = 0

    def to_dict(self):
        return {k: (_f(v) if isinstance(v, float) else v) for k, v in self.__dict__.items()}


def jacobian_trend(flow: SuspensionFlow, x0, T, include_smooth: bool = True,
                   samples: int = 2000, max_precision: int = 4096) -> JacobianTrend:
    """Least-squares slope of the accumulated log-Jacobian against flow time.

    Each return contributes transit * (log lambda_s + log lambda_u), plus
    log g'(x_i) for the smooth arc when `include_smooth` is set.  A run that
    reaches the critical value is repeated at twice the precision.
    """
    if isinstance(x0, str):
        start = x0
    else:
        start = flow.ctx.to_str(x0)
    while True:
        try:
            return _jacobian_run(flow, start, T, include_smooth, samples)
        except OrbitHitSingularity:
            bits = flow.ctx.precision_bits * 2
            if bits > max_precision:
                raise
            flow = flow.with_precision(bits)


def _jacobian_run(flow, x0, T, include_smooth, samples):
    fmap = flow.map
    ctx = fmap.ctx
    with ctx:
        rate = float(gmpy2.log(flow.saddle.lambda_s) + gmpy2.log(flow.saddle.lambda_u))
        x = ctx.real(x0) if isinstance(x0, str) else mpfr(x0)
        t, J, n = 0.0, 0.0, 0
        ts, Js = [0.0], [0.0]
        step = T / samples
        mark = step
        while t < T:
            d = circle_dist(x, fmap.xi)
            if d <= ctx.guard:
                raise OrbitHitSingularity("trajectory reached the critical value", index=n, point=x)
            ld = log_abs(d)
            transit = flow.transit_from_log(ld) if flow._coef != 0 else 0.0
            J += transit * rate
            if include_smooth:
                J += float(fmap.deriv_g(x, index=n).log_abs)
            t += flow.roof_from_log(ld)
            n += 1
            if t >= mark:
                ts.append(t)
                Js.append(J)
                mark += step
            x = fmap.eval_g(x, index=n)
    if len(ts) >= 2 and max(Js) == min(Js):
        slope = 0.0
    else:
        slope = float(np.polyfit(np.asarray(ts), np.asarray(Js), 1)[0])
    sign = 0 if slope == 0 else (1 if slope > 0 else -1)
    return JacobianTrend(slope, sign, n, t, J, include_smooth, flow.ctx.precision_bits)


def reversed_orbit_avoids_gap(fmap: FlatCircleMap, n: int) -> bool:
    """The f-orbit of the critical value never enters (c, d)."""
    from .returns import critical_orbit
    with fmap.ctx:
        for x in critical_orbit(fmap, n):
            if fmap.c < x < fmap.d:
                return False
    return True


__all__ = [
    "SuspensionFlow", "BirkhoffReport", "Classification", "JacobianTrend",
    "roof", "distance_cosine", "saddle_pass_occupancy", "evolve_birkhoff", "classify_physical", "classify",
    "jacobian_trend", "sample_starts", "reversed_orbit_avoids_gap",
    "DIRAC_SADDLE", "QUASI_MINIMAL", "INCONCLUSIVE",
]

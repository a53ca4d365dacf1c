"""Critical orbit, closest returns, the invariant measure of dynamical
intervals, the integrability test for the return time, the expansion search
and coverage of the circle by images of the gap.

The invariant measure mu is never constructed pointwise: the semi-conjugacy
h sends x_i = f^i(xi) to i*rho, so the mu-mass of an arc between two orbit
points is the length of the corresponding arc of the rigid rotation.
"""
from __future__ import annotations

import csv
import io
import math
from bisect import bisect_left
from dataclasses import dataclass, field
from fractions import Fraction

import gmpy2
import numpy as np
from gmpy2 import mpfr

from .errors import CombinatoricsError, ConfigError, DisjointnessError, PrecisionExhausted
from .flatmap import SaddleSpec
from .numerics import LogMag, circle_dist, frac, to_logmag
from .rotation import (
    ContinuedFraction,
    LiftOrbit,
    log_abs,
    measured_continued_fraction,
    rotation_number,
)

DIVERGENT_TREND = "DIVERGENT_TREND"
CONVERGENT_TREND = "CONVERGENT_TREND"
INCONCLUSIVE = "INCONCLUSIVE"
DIVERGENT = "DIVERGENT"
CONVERGENT = "CONVERGENT"


def critical_orbit(fmap, n: int):
    """x_1 .. x_n with x_i = f^i(xi)."""
    orbit = LiftOrbit(fmap, fmap.xi)
    if not orbit.closed_form:
        orbit.extend(n)
    return [orbit.at(i)[0] for i in range(1, n + 1)]


def orbit_distance(fmap, x) -> LogMag:
    with fmap.ctx:
        return to_logmag(circle_dist(x, fmap.xi))


# ---------------------------------------------------------------------------
# closest returns


@dataclass
class ReturnRow:
    n: int
    q: int
    x: object            # x_{q_n}
    side: int            # sign of x_{q_n} - xi (lift)
    dist: LogMag
    log_err: float       # log of the orbit error bound at q_n
    mass: object         # ||q_n rho||
    mass_lo: object
    mass_hi: object
    singular_mass: object
    ratio: LogMag | None  # dist_n / dist_{n-2}


@dataclass
class ClosestReturnTable:
    rows: list
    rho: object
    cf: ContinuedFraction
    precision_bits: int
    detected: list = field(default_factory=list)   # record-breaking return times

    def column(self, name):
        return [getattr(r, name) for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "q_n", "log10_dist_qn", "mass_n", "M_n", "log10_ratio_n"])
        for r in self.rows:
            w.writerow([
                r.n, r.q, f"{float(r.dist.log10()):.12g}", f"{float(r.mass):.12g}",
                f"{float(r.singular_mass):.12g}",
                "" if r.ratio is None else f"{float(r.ratio.log10()):.12g}",
            ])
        return buf.getvalue()

    def to_dict(self):
        return {
            "precision_bits": self.precision_bits,
            "quotients": list(self.cf.quotients),
            "rows": [
                {
                    "n": r.n, "q_n": r.q, "side": r.side,
                    "log_dist_qn": f"{float(r.dist.log_abs):.15g}",
                    "mass_n": f"{float(r.mass):.15g}",
                    "M_n": f"{float(r.singular_mass):.15g}",
                    "log_ratio_n": None if r.ratio is None else f"{float(r.ratio.log_abs):.15g}",
                }
                for r in self.rows
            ],
            "detected_returns": self.detected,
        }


def detect_closest_returns(fmap, limit: int, orbit: LiftOrbit | None = None):
    """Times i <= limit at which dist(f^i(xi), xi) sets a new record."""
    orbit = orbit or LiftOrbit(fmap, fmap.xi)
    if not orbit.closed_form:
        orbit.extend(limit)
    out = []
    best = None
    with fmap.ctx:
        xi = orbit.x0
        for i in range(1, limit + 1):
            d = circle_dist(orbit.at(i)[0], xi)
            if best is None or d < best:
                best = d
                out.append(i)
    return out


def closest_returns(fmap, depth: int, check_limit: int = 10**5, max_iters: int = 10**7,
                    cf: ContinuedFraction | None = None) -> ClosestReturnTable:
    """Rows n = 0..depth.  Raises CombinatoricsError if the record-breaking
    return times up to min(q_depth, check_limit) differ from the convergent
    denominators, and PrecisionExhausted if a distance is below its error."""
    ctx = fmap.ctx
    if cf is None:
        cf = measured_continued_fraction(fmap, depth + 1, max_iters=max_iters)
    if len(cf.q) < depth + 2:
        raise PrecisionExhausted(f"continued fraction known to {cf.depth} quotients")
    est = rotation_number(fmap, max_iters=max_iters, tol=1e-300)
    with ctx:
        rho = frac(est.rho)
    orbit = LiftOrbit(fmap, fmap.xi)
    qs = cf.q
    lift_shift = math.floor(est.lower) if est.exact is None else math.floor(est.exact)
    rows = []
    with ctx:
        for n in range(depth + 1):
            q = qs[n]
            p_lift = cf.p[n] + lift_shift * q
            s, le = orbit.displacement(q, p_lift)
            ld = log_abs(s)
            if ld <= le + math.log(4):
                raise PrecisionExhausted(
                    f"distance at level {n} (q={q}) is below its error bound at P={ctx.precision_bits}"
                )
            x = orbit.at(q)[0]
            mass = abs(q * rho - gmpy2.rint(q * rho))
            q1 = qs[n + 1]
            dist = LogMag(1, gmpy2.log(abs(s)))
            ratio = None if n < 2 else dist / rows[n - 2].dist
            rows.append(ReturnRow(
                n=n, q=q, x=x, side=1 if s > 0 else -1, dist=dist, log_err=le,
                mass=mass, mass_lo=mpfr(1) / (q1 + q), mass_hi=mpfr(1) / q1,
                singular_mass=mass * (-dist.log_abs), ratio=ratio,
            ))
    table = ClosestReturnTable(rows, rho, cf, ctx.precision_bits)
    limit = min(qs[depth], check_limit)
    detected = detect_closest_returns(fmap, limit, orbit)
    predicted = sorted({q for q in qs[: depth + 1] if q <= limit})
    table.detected = detected
    if detected != predicted:
        raise CombinatoricsError(
            f"closest returns {detected} disagree with convergent denominators {predicted}",
            predicted=predicted, detected=detected,
        )
    return table


# ---------------------------------------------------------------------------
# singular mass trend


@dataclass
class TrendFit:
    verdict: str
    slope: float            # least-squares slope of log M_n against n
    intercept: float
    floor: float            # min M_n over the fitted window
    ratio: float            # exp(slope)
    tail: float             # geometric tail estimate (inf unless decaying)
    levels: list
    values: list

    def to_dict(self):
        return {k: (v if not isinstance(v, float) or math.isfinite(v) else str(v))
                for k, v in self.__dict__.items()}


def fit_log_trend(levels, values):
    x = np.asarray(levels, dtype=float)
    y = np.log(np.asarray(values, dtype=float))
    slope, intercept = np.polyfit(x, y, 1)
    return float(slope), float(intercept)


def singular_mass_series(table, window: int = 4, levels=None, tail_tol: float = 0.1,
                         min_depth: int = 6) -> tuple[list, TrendFit]:
    """Classify the trend of M_n = ||q_n rho|| * (-log dist_qn).

    Least squares on log M_n over the last `window` levels (or `levels`):
    slope < -0.1 with a geometric tail below `tail_tol` is convergent; a
    slope >= -0.02 with positive floor is divergent (a sequence that does
    not decrease cannot be summable); anything else is inconclusive.
    """
    if isinstance(table, ClosestReturnTable):
        ms = {r.n: float(r.singular_mass) for r in table.rows}
    else:
        ms = {i: float(v) for i, v in enumerate(table)}
    series = [ms[k] for k in sorted(ms)]
    if len(series) < min_depth:
        return series, TrendFit(INCONCLUSIVE, math.nan, math.nan, math.nan, math.nan, math.inf, [], [])
    if levels is None:
        levels = sorted(ms)[-window:]
    vals = [ms[k] for k in levels]
    if min(vals) <= 0:
        return series, TrendFit(INCONCLUSIVE, math.nan, math.nan, min(vals), math.nan, math.inf, list(levels), vals)
    slope, icpt = fit_log_trend(levels, vals)
    ratio = math.exp(slope)
    floor = min(vals)
    tail = vals[-1] * ratio / (1 - ratio) if ratio < 1 else math.inf
    if slope < -0.1 and tail < tail_tol:
        verdict = CONVERGENT_TREND
    elif slope > -0.02 and floor > 0:
        verdict = DIVERGENT_TREND
    else:
        verdict = INCONCLUSIVE
    return series, TrendFit(verdict, slope, icpt, floor, ratio, tail, list(levels), vals)


# ---------------------------------------------------------------------------
# integral of the return time against mu


def roof_value(saddle: SaddleSpec, dist, coefficient=None):
    """tau0 + coefficient * (-log dist); coefficient defaults to 1/log(lambda_u)."""
    if coefficient is None:
        coefficient = 1 / gmpy2.log(saddle.lambda_u)
    if coefficient == 0:
        return mpfr(saddle.tau0)
    return saddle.tau0 - coefficient * gmpy2.log(dist)


@dataclass
class TauIntegral:
    verdict: str
    total_far: object          # far-endpoint representatives
    total_mid: object          # midpoint representatives (shells: near endpoint)
    regular_far: object
    regular_mid: object
    partial_sums: list         # per level: regular part + shells down to that level
    shell_terms: list          # (level, contribution) pairs, both sides merged
    tail: float
    tail_ratio: float
    points: int
    mass_total: object
    weighted: dict = field(default_factory=dict)   # same sums for tau*F when an observable is given

    def to_dict(self):
        return {
            "verdict": self.verdict,
            "total_far": f"{float(self.total_far):.15g}",
            "total_mid": f"{float(self.total_mid):.15g}",
            "regular_far": f"{float(self.regular_far):.15g}",
            "regular_mid": f"{float(self.regular_mid):.15g}",
            "partial_sums": [f"{float(v):.15g}" for v in self.partial_sums],
            "tail": str(self.tail) if not math.isfinite(self.tail) else f"{self.tail:.6g}",
            "tail_ratio": f"{self.tail_ratio:.6g}",
            "points": self.points,
            "mass_total": f"{float(self.mass_total):.15g}",
            "weighted": {k: f"{float(v):.15g}" for k, v in self.weighted.items()},
        }


def _arc_mid(a, b):
    """Midpoint of the ccw arc from a to b."""
    return frac(a + frac(b - a) / 2)


def tau_integral(fmap, saddle: SaddleSpec, depth: int, quad_points: int,
                 table: ClosestReturnTable | None = None, coefficient=None,
                 observable=None, tail_tol: float = 1e-3) -> TauIntegral:
    """Quadrature of the return time against mu.

    Regular part: the partition of the circle by x_0 .. x_{N-1}, N =
    quad_points, without the two arcs next to xi.  Singular part: those two
    arcs are cut into closest-return shells (x_{q_{m+2}}, x_{q_m}) of mass
    ||q_m rho|| - ||q_{m+2} rho|| down to the table depth, and the rest is a
    geometric tail fitted to the last shells.
    """
    ctx = fmap.ctx
    if table is None:
        table = closest_returns(fmap, depth)
    if depth > len(table.rows) - 1:
        raise ConfigError("table shallower than requested depth")
    rows = table.rows[: depth + 1]
    rho = table.rho
    N = int(quad_points)
    if N < 3:
        raise ConfigError("quad_points must be at least 3")
    orbit = LiftOrbit(fmap, fmap.xi)
    if not orbit.closed_form:
        orbit.extend(N)
    F = observable
    with ctx:
        pts = [(orbit.at(i)[0], i) for i in range(N)]
        pts.sort(key=lambda t: t[0])
        pos = next(k for k, (_, i) in enumerate(pts) if i == 0)
        pts = pts[pos:] + pts[:pos]              # start at xi, go ccw
        xi = fmap.xi
        mass_total = mpfr(0)
        reg_far = mpfr(0)
        reg_mid = mpfr(0)
        w_far = mpfr(0)
        w_mid = mpfr(0)
        for k in range(N):
            a, ia = pts[k]
            b, ib = pts[(k + 1) % N]
            m = frac((ib - ia) * rho)
            if k == N - 1 and m == 0:
                m = mpfr(1)
            mass_total += m
            if k == 0 or k == N - 1:
                continue                          # the two arcs touching xi
            da, db = circle_dist(a, xi), circle_dist(b, xi)
            far = a if da >= db else b
            mid = _arc_mid(a, b)
            tf = roof_value(saddle, max(da, db), coefficient)
            tm = roof_value(saddle, circle_dist(mid, xi), coefficient)
            reg_far += tf * m
            reg_mid += tm * m
            if F is not None:
                w_far += tf * F(far) * m
                w_mid += tm * F(mid) * m
        right_nb, left_nb = pts[1][1], pts[-1][1]
        qs = [r.q for r in rows]
        shells = []
        shell_w = []
        for nb in (right_nb, left_nb):
            if nb not in qs:
                raise CombinatoricsError(
                    f"neighbour x_{nb} of xi is not a closest return {qs}", predicted=qs, detected=[nb]
                )
            m0 = qs.index(nb)
            for m in range(m0, depth - 1, 2):
                outer, inner = rows[m], rows[m + 2]
                mass = outer.mass - inner.mass
                t_far = roof_value(saddle, outer.dist.to_real(), coefficient)
                t_near = roof_value(saddle, inner.dist.to_real(), coefficient)
                shells.append((m, mass * t_far, mass * t_near))
                if F is not None:
                    shell_w.append((m, mass * t_far * F(outer.x), mass * t_near * F(inner.x)))
        shells.sort(key=lambda t: t[0])
        levels = sorted({s[0] for s in shells})
        by_level = {lv: (sum(s[1] for s in shells if s[0] == lv), sum(s[2] for s in shells if s[0] == lv))
                    for lv in levels}
        partial = []
        acc_far = reg_far
        for lv in levels:
            acc_far += by_level[lv][0]
            partial.append(acc_far)
        sing_far = sum((v[0] for v in by_level.values()), mpfr(0))
        sing_near = sum((v[1] for v in by_level.values()), mpfr(0))
        # geometric tail fitted to the shell terms of the last table levels;
        # these shells exist whatever the partition size
        last = []
        for m in range(max(0, depth - 5), depth - 1):
            outer, inner = rows[m], rows[m + 2]
            last.append(float((outer.mass - inner.mass)
                              * roof_value(saddle, inner.dist.to_real(), coefficient)))
        ratio = math.nan
        tail = math.inf
        if len(last) >= 3 and min(last) > 0:
            ratio = math.exp(np.polyfit(np.arange(len(last)), np.log(last), 1)[0])
            if ratio < 1:
                tail = last[-1] * ratio / (1 - ratio)
        # innermost arcs (xi, x_{q_M}) on each side: far endpoint for the lower
        # sum, the fitted tail for the other
        inner_far = mpfr(0)
        inner_w = mpfr(0)
        for nb in (right_nb, left_nb):
            m0 = qs.index(nb)
            last_m = m0 + 2 * max(0, (depth - m0) // 2)
            if last_m > depth:
                last_m -= 2
            row = rows[last_m]
            t_in = roof_value(saddle, row.dist.to_real(), coefficient)
            inner_far += row.mass * t_in
            if F is not None:
                inner_w += row.mass * t_in * F(row.x)
        sing_far += inner_far
        if math.isfinite(tail):
            sing_near += tail
        else:
            sing_near = mpfr("inf")
        if math.isfinite(tail) and tail < tail_tol:
            verdict = CONVERGENT
        elif ratio >= 1:
            verdict = DIVERGENT
        else:
            verdict = INCONCLUSIVE
        weighted = {}
        if F is not None:
            wf = sum((s[1] for s in shell_w), mpfr(0)) + inner_w
            wn = sum((s[2] for s in shell_w), mpfr(0)) + (inner_w if math.isfinite(tail) else mpfr("inf"))
            weighted = {"far": w_far + wf, "mid": w_mid + wn}
        return TauIntegral(
            verdict=verdict,
            total_far=reg_far + sing_far,
            total_mid=reg_mid + sing_near,
            regular_far=reg_far,
            regular_mid=reg_mid,
            partial_sums=partial,
            shell_terms=[(lv, by_level[lv][0]) for lv in levels],
            tail=tail,
            tail_ratio=ratio,
            points=N,
            mass_total=mass_total,
            weighted=weighted,
        )


# ---------------------------------------------------------------------------
# expansion away from the flat interval


@dataclass
class ExpansionResult:
    N: int
    alpha: object
    k: int
    min_derivative: object
    scanned: list = field(default_factory=list)   # (N, k, log min) for every pair tried

    def to_dict(self):
        return {
            "found": True, "N": self.N, "alpha": f"{float(self.alpha):.12g}", "k": self.k,
            "min_derivative": f"{float(self.min_derivative):.12g}",
            "scanned": [[n, k, v] for n, k, v in self.scanned],
        }


@dataclass
class NotFound:
    n_cap: int
    k_max: int
    scanned: list = field(default_factory=list)

    def __bool__(self):
        return False

    def to_dict(self):
        return {"found": False, "n_cap": self.n_cap, "k_max": self.k_max,
                "scanned": [[n, k, v] for n, k, v in self.scanned]}


def preimage_arcs(fmap, k: int):
    """Arcs f^{-i}(U), i = 0..k, as ccw (start, end) pairs; f^{-i}(U) = g^i(U)."""
    arcs = []
    with fmap.ctx:
        a, b = fmap.c, fmap.d
        arcs.append((a, b))
        for _ in range(k):
            a, b = fmap.eval_g(a), fmap.eval_g(b)
            arcs.append((a, b))
    return arcs


def _in_arc(x, arc):
    a, b = arc
    return frac(x - a) <= frac(b - a)


def log_deriv_power(fmap, x, N):
    """log Df^N(x) (may be -inf) and f^N(x)."""
    total = mpfr(0)
    for _ in range(N):
        d = fmap.deriv_f(x)
        if d.sign == 0:
            return mpfr("-inf"), None
        total += d.log_abs
        x = fmap.eval_f(x)
    return total, x


def expansion_search(fmap, k_max: int = 8, n_cap: int = 64, grid_size: int = 10**4):
    """First (N, k) with min over the grid of Df^N > 1 off U, ..., f^{-k}(U)."""
    ctx = fmap.ctx
    arcs = preimage_arcs(fmap, k_max)
    scanned = []
    with ctx:
        grid = [(mpfr(j) + mpfr("0.5")) / grid_size for j in range(grid_size)]
        # smallest i with x in f^{-i}(U); k_max + 1 means "in none of them"
        member = []
        for x in grid:
            idx = k_max + 1
            for i, arc in enumerate(arcs):
                if _in_arc(x, arc):
                    idx = i
                    break
            member.append(idx)
        N = 2
        while N <= n_cap:
            logs = [log_deriv_power(fmap, x, N)[0] for x in grid]
            for k in range(k_max + 1):
                vals = [lv for lv, m in zip(logs, member) if m > k]
                if not vals:
                    continue
                lo = min(vals)
                scanned.append((N, k, float(lo)))
                if lo > 0:
                    alpha = gmpy2.exp(lo)
                    return ExpansionResult(N, alpha, k, alpha, scanned)
            N *= 2
    return NotFound(n_cap, k_max, scanned)


# ---------------------------------------------------------------------------
# images of the gap under g


@dataclass
class Coverage:
    total: object
    steps: int
    checkpoints: list          # (n, cumulative length)
    smallest: object
    precision_bits: int

    def to_dict(self):
        return {
            "total": f"{float(self.total):.15g}",
            "steps": self.steps,
            "checkpoints": [[n, f"{float(v):.15g}"] for n, v in self.checkpoints],
            "smallest_length": f"{float(self.smallest):.6g}",
            "precision_bits": self.precision_bits,
        }


class _ArcSet:
    """Disjoint arcs of [0,1) kept sorted by left end."""

    def __init__(self):
        self.starts = []
        self.ends = []

    def insert(self, a, b, n):
        k = bisect_left(self.starts, a)
        if k > 0 and self.ends[k - 1] > a:
            raise DisjointnessError(f"g^{n}(U) overlaps an earlier image near {float(a):.17g}")
        if k < len(self.starts) and b > self.starts[k]:
            raise DisjointnessError(f"g^{n}(U) overlaps an earlier image near {float(b):.17g}")
        self.starts.insert(k, a)
        self.ends.insert(k, b)


def wandering_coverage(fmap, N: int, checkpoints=(0, 10, 100, 1000, 10**4, 10**5, 10**6)) -> Coverage:
    """Total length of g^n((c, d)), n = 0..N, asserting pairwise disjointness."""
    ctx = fmap.ctx
    arcs = _ArcSet()
    marks = []
    with ctx:
        a, b = fmap.c, fmap.d
        total = mpfr(0)
        smallest = mpfr(1)
        cps = set(checkpoints) | {N}
        for n in range(N + 1):
            length = frac(b - a)
            if b >= a:
                arcs.insert(a, b, n)
            else:
                arcs.insert(a, mpfr(1), n)
                arcs.insert(mpfr(0), b, n)
            total += length
            smallest = min(smallest, length)
            if n in cps:
                marks.append((n, total))
            if n < N:
                a, b = fmap.eval_g(a, index=n), fmap.eval_g(b, index=n)
    return Coverage(total, N, marks, smallest, ctx.precision_bits)


__all__ = [
    "critical_orbit", "closest_returns", "detect_closest_returns", "ClosestReturnTable",
    "singular_mass_series", "tau_integral", "expansion_search", "wandering_coverage",
    "roof_value", "preimage_arcs", "log_deriv_power", "TrendFit", "TauIntegral",
    "ExpansionResult", "NotFound", "Coverage", "Fraction",
    "DIVERGENT_TREND", "CONVERGENT_TREND", "INCONCLUSIVE", "DIVERGENT", "CONVERGENT",
]

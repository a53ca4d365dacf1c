"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Runs take tens of minutes in total.  The canonical maps come from the
frozen tuned parameters in conftest; the CLI-driven criteria write their
artifacts under a session temp directory and criterion 12 reruns them.
"""
import json
import math
import os
import time
from fractions import Fraction

import numpy as np
import pytest
from gmpy2 import mpfr

from cherryflow.cli import main
from cherryflow.flatmap import RigidRotation, SaddleSpec
from cherryflow.numerics import frac, make_context
from cherryflow.returns import expansion_search, fit_log_trend, wandering_coverage
from cherryflow.rotation import continued_fraction, euclid_quotients, rotation_number
from cherryflow.suspension import SuspensionFlow, jacobian_trend
from cherryflow.tongues import (
    LO, first_stage, gap_bound, locate_tongue, next_tongue, parabolic_endpoint,
    parabolic_passage_distortion, passage_setup,
)

from conftest import family, saddle, tuned

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIGS = os.path.join(ROOT, "configs")


def report(capsys, n, ok, detail, seconds, budget):
    ok = ok and seconds < budget
    limit = f"{budget:.0f}s" if math.isfinite(budget) else "no limit"
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}  [{seconds:.0f}s / {limit}]"
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


# ---------------------------------------------------------------------------
# CLI runs shared by criteria 2, 3, 5, 6 and 12


def _map_file(directory, r, bits):
    path = os.path.join(directory, f"map_{r}_{bits}.json")
    if not os.path.exists(path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"map": tuned(r, bits).to_dict()}, fh)
    return path


RUNS = {
    "returns_a": ("returns", "map_a.json", ("0.8", 512)),
    "returns_b": ("returns", "map_b.json", ("2.5", 256)),
    "classify_a": ("classify", "map_a.json", ("0.8", 512)),
    "classify_b": ("classify", "map_b.json", ("2.5", 256)),
}


class CliRuns:
    def __init__(self, base):
        self.base = base
        self.done = {}

    def get(self, key, rep=0):
        if (key, rep) not in self.done:
            cmd, cfg, (r, bits) = RUNS[key]
            out = os.path.join(self.base, f"{key}_{rep}")
            t0 = time.perf_counter()
            code = main([cmd, "--config", os.path.join(CONFIGS, cfg), "--out", out,
                         "--map", _map_file(self.base, r, bits)])
            self.done[(key, rep)] = (out, code, time.perf_counter() - t0)
        return self.done[(key, rep)]

    def payload(self, key, name, rep=0):
        out, code, _ = self.get(key, rep)
        with open(os.path.join(out, name), encoding="utf-8") as fh:
            return json.load(fh)


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    return CliRuns(str(tmp_path_factory.mktemp("acceptance")))


# ---------------------------------------------------------------------------


def test_criterion_01_oracles(capsys):
    t0 = time.perf_counter()
    ctx = make_context(256)
    rng = np.random.default_rng(1)
    worst = mpfr(0)
    with ctx:
        for _ in range(100):
            omega = ctx.real(repr(float(rng.uniform(0.001, 0.999))))
            est = rotation_number(RigidRotation(omega, ctx), max_iters=10**9, tol=1e-12)
            err = abs(est.exact - Fraction(repr(float(omega)))) if est.exact is not None \
                else abs(est.rho - omega)
            worst = max(worst, mpfr(err))
    mismatches = 0
    for _ in range(1000):
        den = int(rng.integers(2, 10**6 + 1))
        num = int(rng.integers(1, den))
        cf = continued_fraction(Fraction(num, den), 64, ctx)
        g = math.gcd(num, den)
        if cf.quotients != euclid_quotients(num // g, den // g):
            mismatches += 1
    ok = worst <= 1e-12 and mismatches == 0
    report(capsys, 1, ok, f"max |rho - omega| = {float(worst):.2e}; CF mismatches {mismatches}/1000",
           time.perf_counter() - t0, 60)


def test_criterion_02_combinatorics(capsys, runs):
    _, code, secs = runs.get("returns_b")
    ret = runs.payload("returns_b", "returns.json")
    limit = 10**5
    predicted = sorted({q for q in ret["q"] if q <= limit})
    ok = code == 0 and ret["detected_returns"] == predicted and max(predicted) > limit // 2
    report(capsys, 2, ok, f"{len(predicted)} return times up to q={max(predicted)} agree with the CF",
           secs, 300)


def test_criterion_03_dissipative_mass(capsys, runs):
    _, code, secs = runs.get("returns_a")
    if code != 0:
        report(capsys, 3, False, f"returns exited with code {code}", secs, 600)
    ret = runs.payload("returns_a", "returns.json")
    levels = list(range(5, 11))
    m = [ret["singular_mass"][n] for n in levels]
    slope, _ = fit_log_trend(levels, m)
    small = [v for n, v in enumerate(ret["log_dist_over_next_q"]) if n >= 4]
    ok = code == 0 and abs(slope) < 0.02 and min(m) > 0 and max(small) <= -0.01
    report(capsys, 3, ok,
           f"slope(log M_n, n=5..10) = {slope:+.4f}, floor {min(m):.3f}, "
           f"max log dist/q_(n+1) = {max(small):.3f}", secs, 600)


def test_criterion_04_expansion(capsys):
    t0 = time.perf_counter()
    res = expansion_search(tuned("0.8", 512), k_max=8, n_cap=64, grid_size=10**4)
    ok = bool(res) and res.N <= 64 and res.alpha > 1 and res.k <= 8
    detail = f"N={res.N}, k={res.k}, alpha={float(res.alpha):.4f}" if res else "NotFound"
    report(capsys, 4, ok, detail, time.perf_counter() - t0, 600)


def test_criterion_05_bounded_type(capsys, runs):
    _, code, secs = runs.get("returns_b")
    ret = runs.payload("returns_b", "returns.json")
    ratios = [ret["ratio_n"][n] for n in range(4, 13)]
    tau = ret["tau_integral"]
    tail = float(tau["refined"]["tail"])
    ok = (code == 0 and min(ratios) >= 1e-3 and ret["trend"]["ratio"] < 0.9
          and tau["cauchy_gap"] < 1e-3 and tail < 1e-3)
    report(capsys, 5, ok,
           f"min ratio_n = {min(ratios):.4f}, M_n ratio {ret['trend']['ratio']:.3f}, "
           f"refinement gap {tau['cauchy_gap']:.2e}, tail {tail:.2e}", secs, 900)


def test_criterion_06_classification(capsys, runs):
    _, code_a, secs_a = runs.get("classify_a")
    _, code_b, secs_b = runs.get("classify_b")
    a = runs.payload("classify_a", "classify.json")
    b = runs.payload("classify_b", "classify.json")
    occ_a = [float(s["occupancy"]) for s in a["samples"]]
    occ_b = [float(s["occupancy"]) for s in b["samples"]]
    quad = b["quadrature_F"]
    f_err = max(abs(float(s["averages"]["F"]) - quad) for s in b["samples"])
    ok_a = code_a == 0 and a["verdict"] == "DIRAC_SADDLE" and a["dissent"] == 0 and min(occ_a) >= 0.9
    ok_b = (code_b == 0 and b["verdict"] == "QUASI_MINIMAL" and b["dissent"] == 0
            and max(occ_b) <= 0.3 and f_err < 1e-2)
    report(capsys, 6, ok_a and ok_b,
           f"A: {a['verdict']} {a['counts']} occupancy {min(occ_a):.3f}..{max(occ_a):.3f}; "
           f"B: {b['verdict']} {b['counts']} occupancy <= {max(occ_b):.3f}, |F avg - quadrature| <= {f_err:.2e}",
           secs_a + secs_b, 1800)


def test_criterion_07_jacobian(capsys):
    t0 = time.perf_counter()
    out = {}
    for name, r in (("A", "0.8"), ("B", "2.5")):
        fm = tuned(r, 256)
        sad = saddle(r, 256)
        with fm.ctx:
            jt = jacobian_trend(SuspensionFlow(fm, sad), fm.ctx.real("0.2"), 1e5)
            expect = 1 if math.log(float(sad.lambda_s)) + math.log(float(sad.lambda_u)) > 0 else -1
        out[name] = (jt.slope, jt.sign == expect)
    ctx = make_context(256)
    fm = tuned("1", 256)
    with ctx:
        jt = jacobian_trend(SuspensionFlow(fm, SaddleSpec.make("0.5", "2", ctx=ctx)), ctx.real("0.2"), 1e5,
                            include_smooth=False)
    out["conservative"] = (jt.slope, abs(jt.slope) < 1e-3)
    ok = all(v[1] for v in out.values())
    report(capsys, 7, ok, ", ".join(f"{k}: {v[0]:+.4g}" for k, v in out.items()),
           time.perf_counter() - t0, 300)


def test_criterion_08_passage_distortion(capsys):
    t0 = time.perf_counter()
    fam = family("2.5", 256)
    ep = parabolic_endpoint(locate_tongue(fam, Fraction(0), tol=1e-14), LO)
    rows = []
    for dist in ("1e-3", "1e-4", "1e-5", "1e-6", "1e-7", "1e-8"):
        fm, fund, a2 = passage_setup(ep, fam, mpfr(dist), mpfr("0.05"))
        d = parabolic_passage_distortion(fm, fund, a2, samples=16)
        rows.append((dist, max(d.passages), float(d.K)))
    ks = [k for _, _, k in rows]
    ns = [n for _, n, _ in rows]
    ok = max(ks) / min(ks) < 4 and ns[0] <= 100 and ns[-1] >= 10**4
    report(capsys, 8, ok,
           f"n(x) {ns[0]}..{ns[-1]}, K {min(ks):.2f}..{max(ks):.2f} (ratio {max(ks) / min(ks):.2f})",
           time.perf_counter() - t0, 600)


def test_criterion_09_gap_bound(capsys):
    t0 = time.perf_counter()
    fam = family("2.5", 256)
    st = first_stage(fam, saddle("2.5", 256), distortion=False)
    deltas = {}
    for a in (5, 7, 9, 11):
        _, ep = next_tongue(st, fam, a)
        with fam.ctx:
            fm = fam.at(frac(ep.omega))
            gb = gap_bound(fm, {"c": fm.c, "d": fm.d, "p": ep.point}, 4 * a)
        deltas[a] = float(gb.delta) if not gb.hit_singularity else 0.0
    lo, hi = min(deltas.values()), max(deltas.values())
    ok = lo > 0 and hi / lo < 4
    report(capsys, 9, ok, "delta_gap " + ", ".join(f"a={a}: {v:.3g}" for a, v in deltas.items()),
           time.perf_counter() - t0, 600)


def test_criterion_10_stages(capsys, tmp_path):
    t0 = time.perf_counter()
    out = str(tmp_path / "stages")
    code = main(["stages", "--config", os.path.join(CONFIGS, "stages.json"), "--out", out])
    secs = time.perf_counter() - t0
    if code != 0:
        err_path = os.path.join(out, "stages_error.json")
        detail = "stage run failed"
        if os.path.exists(err_path):
            with open(err_path, encoding="utf-8") as fh:
                detail += ": " + json.load(fh)["error"]
        report(capsys, 10, False, detail, secs, 3600)
    with open(os.path.join(out, "stages.json"), encoding="utf-8") as fh:
        body = json.load(fh)
    stages = body["stages"]
    certified = all(float(f["z"]) > float(f["required"]) and float(f["p"]) > float(f["required"])
                    for s in stages for f in s["fractions"].values())
    chain_ok = all(g["ok"] for g in body["gaps"])
    ok = len(stages) == 3 and certified and chain_ok
    report(capsys, 10, ok,
           "chain " + " -> ".join(c["rho"] for c in body["chain"]) + f"; inequalities certified: {certified}",
           secs, 3600)


def test_criterion_11_coverage(capsys):
    t0 = time.perf_counter()
    cov = wandering_coverage(tuned("2.5", 256), 10**5)
    ok = cov.total >= 0.99
    report(capsys, 11, ok, f"coverage {float(cov.total):.8f} after {cov.steps} images, 0 overlaps",
           time.perf_counter() - t0, 600)


def test_criterion_12_determinism(capsys, runs):
    t0 = time.perf_counter()
    differing = []
    for key in RUNS:
        first, _, _ = runs.get(key, 0)
        second, _, _ = runs.get(key, 1)
        for name in sorted(os.listdir(first)):
            if name == "manifest.json":
                continue
            with open(os.path.join(first, name), "rb") as f1, open(os.path.join(second, name), "rb") as f2:
                if f1.read() != f2.read():
                    differing.append(f"{key}/{name}")
    ok = not differing
    report(capsys, 12, ok, "byte-identical payloads" if ok else f"differ: {differing}",
           time.perf_counter() - t0, math.inf)

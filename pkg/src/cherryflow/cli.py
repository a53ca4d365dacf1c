"""Batch driver: one JSON config in, JSON/CSV artifacts out.

    cherryflow tune --config cfg.json --out runs/b
    cherryflow returns --config cfg.json --out runs/b
    cherryflow classify --config cfg.json --out runs/b --seed 7
    cherryflow verify --out runs/b

Numbers in the config are decimal strings parsed at the run precision.
Every artifact carries the run id (hash of the effective config); wall-clock
timings live only in manifest.json so payloads stay byte-identical across
reruns.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import tempfile
import time
from fractions import Fraction

import gmpy2

from . import __version__
from .errors import CherryFlowError, CombinatoricsError, ConfigError, StageFailed
from .flatmap import FlatCircleMap, MapFamily, SaddleSpec, check_compatible
from .numerics import MIN_PRECISION, frac, make_context
from .returns import (
    closest_returns,
    expansion_search,
    singular_mass_series,
    tau_integral,
    wandering_coverage,
)
from .rotation import (
    golden_mean,
    is_bounded_type,
    measured_continued_fraction,
    parse_rotation,
    rotation_number,
    tune_parameter,
)
from .suspension import SuspensionFlow, classify_physical, distance_cosine

COMMANDS = ("tune", "returns", "classify", "expansion", "coverage", "tongues", "stages", "verify")
MAX_STAGES = 4

DEFAULTS = {
    "geometry": {"c": "0.40", "d": "0.55", "epsilon": "0.05"},
    "rotation": "golden",
    "precision_bits": 256,
    "seed": 0,
    "saddle": {"lambda_s": "0.5", "delta_box": "0.1", "tau0": "1"},
    "tune": {"tol": "1e-10", "cf_depth": 20, "bounded_type_bound": 10},
    "returns": {"depth": 12, "check_limit": 100000, "quad_points": 16000, "refine": 4},
    "classify": {"samples": 20, "T": "1e6", "delta": "0.1", "trace_points": 200},
    "expansion": {"k_max": 8, "n_cap": 64, "grid_size": 10000},
    "coverage": {"N": 100000},
    "tongues": {"rationals": ["0/1", "1/2", "1/3"], "tol": "1e-14", "side": "lo"},
    "stages": {"count": 3, "multipliers": "auto", "a_start": 8, "a_cap": 4096, "period_cap": 50000},
}


# ---------------------------------------------------------------------------
# config


def _merge(base, over):
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path, precision=None, seed=None) -> dict:
    if path is None:
        raw = {}
    else:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    cfg = _merge(DEFAULTS, raw)
    if precision is not None:
        cfg["precision_bits"] = precision
    if seed is not None:
        cfg["seed"] = seed
    validate_config(cfg)
    return cfg


def _is_decimal(v):
    if not isinstance(v, str):
        return False
    try:
        float(v)
    except ValueError:
        return False
    return True


def validate_config(cfg):
    bits = cfg["precision_bits"]
    if not isinstance(bits, int) or bits < MIN_PRECISION:
        raise ConfigError(f"precision_bits must be an integer >= {MIN_PRECISION}")
    for k in ("c", "d", "epsilon"):
        if not _is_decimal(cfg["geometry"].get(k)):
            raise ConfigError(f"geometry.{k} must be a decimal string")
    sd = cfg["saddle"]
    if "r" not in cfg and "lambda_u" not in sd:
        raise ConfigError("give r or saddle.lambda_u")
    for k, v in sd.items():
        if not _is_decimal(v):
            raise ConfigError(f"saddle.{k} must be a decimal string")
    if "r" in cfg and not _is_decimal(cfg["r"]):
        raise ConfigError("r must be a decimal string")
    n = cfg["stages"]["count"]
    if not isinstance(n, int) or not 1 <= n <= MAX_STAGES:
        raise ConfigError(f"stages.count must be an integer in 1..{MAX_STAGES}")
    s = cfg["classify"]["samples"]
    if not isinstance(s, int) or s < 1:
        raise ConfigError("classify.samples must be a positive integer")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")


def run_id(cfg) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def build(cfg):
    """(context, family, saddle) from a validated config."""
    ctx = make_context(cfg["precision_bits"])
    g = cfg["geometry"]
    sd = cfg["saddle"]
    with ctx:
        if "lambda_u" in sd:
            saddle = SaddleSpec.make(sd["lambda_s"], sd["lambda_u"], sd.get("delta_box", "0.1"),
                                     sd.get("tau0", "1"), ctx)
            r = ctx.real(cfg["r"]) if "r" in cfg else saddle.r_derived
        else:
            saddle = SaddleSpec.from_r(cfg["r"], sd["lambda_s"], sd.get("delta_box", "0.1"),
                                       sd.get("tau0", "1"), ctx)
            r = ctx.real(cfg["r"])
        family = MapFamily(ctx.real(g["c"]), ctx.real(g["d"]), r, ctx.real(g["epsilon"]), ctx)
        check_compatible(family.at(0), saddle, rel=ctx.real("1e-12"))
    return ctx, family, saddle


# ---------------------------------------------------------------------------
# output


def _clean(obj):
    """JSON-safe copy: non-finite floats become strings, tuples lists."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else repr(obj)
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, Fraction):
        return f"{obj.numerator}/{obj.denominator}"
    if type(obj).__name__ == "mpfr":
        return repr(float(obj))
    return obj


class Artifacts:
    """Atomic writers into one output directory, stamped with the run id."""

    def __init__(self, out, cfg):
        self.out = out
        self.cfg = cfg
        self.rid = run_id(cfg)
        self.paths = []
        os.makedirs(out, exist_ok=True)

    def _atomic(self, name, text):
        fd, tmp = tempfile.mkstemp(dir=self.out, prefix=f".{name}.")
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            os.replace(tmp, os.path.join(self.out, name))
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        self.paths.append(name)
        return os.path.join(self.out, name)

    def json(self, name, payload):
        body = {"run_id": self.rid, "precision_bits": self.cfg["precision_bits"], **_clean(payload)}
        return self._atomic(name, json.dumps(body, indent=2, sort_keys=True) + "\n")

    def csv(self, name, text):
        return self._atomic(name, f"# run_id={self.rid}\n" + text)

    def manifest(self, command, timings):
        path = os.path.join(self.out, "manifest.json")
        old = {}
        if os.path.exists(path):
            with open(path, encoding="utf-8") as fh:
                old = json.load(fh)
        if old.get("run_id") != self.rid:
            old = {}
        arts = dict(old.get("artifacts", {}))
        arts[command] = sorted(set(self.paths))
        tim = dict(old.get("timings", {}))
        tim[command] = timings
        body = {
            "run_id": self.rid,
            "config": self.cfg,
            "precision_bits": self.cfg["precision_bits"],
            "seed": self.cfg["seed"],
            "artifacts": arts,
            "timings": tim,
            "version": __version__,
        }
        self._atomic("manifest.json", json.dumps(body, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def _target(cfg, ctx):
    return parse_rotation(cfg["rotation"], ctx)


def _load_map(cfg, art, family, ctx, map_path=None):
    """Map from an explicit file, the run's map.json, or a fresh tune."""
    path = map_path or os.path.join(art.out, "map.json")
    if os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            rec = json.load(fh)
        if map_path is None and rec.get("run_id") != art.rid:
            return cmd_tune(cfg, art, family, ctx)
        return FlatCircleMap.from_dict(rec["map"], ctx)
    return cmd_tune(cfg, art, family, ctx)


def cmd_tune(cfg, art, family, ctx, saddle=None):
    tc = cfg["tune"]
    target = _target(cfg, ctx)
    res = tune_parameter(family, target, tol=tc["tol"])
    with ctx:
        fmap = family.at(res.omega)
    report = {
        "target": cfg["rotation"],
        "omega": ctx.to_str(res.omega),
        "certified_level": res.certified_level,
        "bound": float(res.bound),
        "iterations": res.iterations,
        "mode_locked": res.mode_locked,
        "precision_limited": res.precision_limited,
        "notes": res.notes,
    }
    if isinstance(target, Fraction):
        est = rotation_number(fmap, max_iters=10**5)
        report["rho"] = str(est.exact) if est.exact is not None else repr(float(est.rho))
        report["tongue"] = [ctx.to_str(w) for w in res.tongue]
    else:
        cf = measured_continued_fraction(fmap, tc["cf_depth"])
        bt = is_bounded_type(cf, tc["bounded_type_bound"], min(tc["cf_depth"], cf.depth))
        with ctx:
            report["rho"] = ctx.to_str(frac(cf.rho)) if not isinstance(cf.rho, Fraction) else str(cf.rho % 1)
        report["continued_fraction"] = list(cf.quotients)
        report["cf_depth"] = cf.depth
        report["bounded_type"] = {"bounded": bt.bounded, "bound": bt.bound, "depth": bt.depth,
                                  "max_quotient": bt.max_quotient}
    payload = {"map": fmap.to_dict()}
    if saddle is not None:
        payload["saddle"] = saddle.to_dict()
    art.json("map.json", payload)
    art.json("tune_report.json", report)
    return fmap


def cmd_returns(cfg, art, family, ctx, saddle, map_path=None):
    rc = cfg["returns"]
    fmap = _load_map(cfg, art, family, ctx, map_path)
    depth = int(rc["depth"])
    try:
        table = closest_returns(fmap, depth, check_limit=int(rc["check_limit"]))
    except CombinatoricsError as e:
        art.json("returns_error.json", {
            "error": str(e),
            "predicted": list(e.predicted or []),
            "detected": list(e.detected or []),
        })
        raise
    art.csv("returns_table.csv", table.to_csv())
    series, trend = singular_mass_series(table)
    ratios = [float(r.ratio) for r in table.rows if r.ratio is not None and 4 <= r.n <= depth]
    out = {
        "depth": depth,
        "rho": ctx.to_str(table.rho),
        "q": [r.q for r in table.rows],
        "detected_returns": list(table.detected),
        "singular_mass": series,
        "trend": trend.to_dict(),
        "verdict": trend.verdict,
        "min_ratio_n4_up": min(ratios) if ratios else None,
        "ratio_n": [None if r.ratio is None else float(r.ratio) for r in table.rows],
        "log_dist_over_next_q": [
            float(r.dist.log_abs) / table.rows[i + 1].q
            for i, r in enumerate(table.rows[:-1])
        ],
    }
    Q = int(rc["quad_points"])
    if depth >= 6 and Q * int(rc["refine"]) > table.rows[-1].q:
        # the neighbours of xi in the partition would be returns past the table
        out["tau_integral"] = None
        out["tau_skipped"] = (f"quad_points x refine = {Q * int(rc['refine'])} exceeds the deepest "
                              f"closest return q = {table.rows[-1].q}")
    elif depth >= 6:
        tau = tau_integral(fmap, saddle, depth, Q, table=table)
        fine = tau_integral(fmap, saddle, depth, Q * int(rc["refine"]), table=table)
        out["tau_integral"] = {
            "coarse": tau.to_dict(),
            "refined": fine.to_dict(),
            "cauchy_gap": abs(float(fine.total_mid) - float(tau.total_mid)),
            "verdict": fine.verdict,
        }
    art.json("returns.json", out)
    return out


def cmd_classify(cfg, art, family, ctx, saddle, map_path=None, threads=1):
    cc = cfg["classify"]
    fmap = _load_map(cfg, art, family, ctx, map_path)
    flow = SuspensionFlow(fmap, saddle)
    T = float(cc["T"])
    res = classify_physical(
        flow, int(cc["samples"]), T, delta=float(cc["delta"]), seed=cfg["seed"],
        observables={"F": distance_cosine(fmap)}, trace_every=T / int(cc["trace_points"]),
        threads=threads,
    )
    body = res.to_dict()
    if cc.get("quadrature"):
        rc = cfg["returns"]
        ti = tau_integral(fmap, saddle, int(rc["depth"]), int(rc["quad_points"]) * int(rc["refine"]),
                          observable=distance_cosine(fmap))
        body["quadrature_F"] = float(ti.weighted["far"]) / float(ti.total_far)
    art.json("classify.json", body)
    art.csv("classify_samples.csv", res.summary_csv())
    art.csv("occupancy_trace.csv", res.trace_csv())
    return body


def cmd_expansion(cfg, art, family, ctx, saddle, map_path=None):
    ec = cfg["expansion"]
    fmap = _load_map(cfg, art, family, ctx, map_path)
    res = expansion_search(fmap, int(ec["k_max"]), int(ec["n_cap"]), int(ec["grid_size"]))
    art.json("expansion.json", res.to_dict())
    return res


def cmd_coverage(cfg, art, family, ctx, saddle, map_path=None):
    fmap = _load_map(cfg, art, family, ctx, map_path)
    res = wandering_coverage(fmap, int(cfg["coverage"]["N"]))
    art.json("coverage.json", res.to_dict())
    return res


def cmd_tongues(cfg, art, family, ctx, saddle):
    from .tongues import locate_tongue, parabolic_endpoint

    tc = cfg["tongues"]
    out = []
    for spec in tc["rationals"]:
        rat = Fraction(spec)
        rec = locate_tongue(family, rat, tol=tc["tol"])
        ep = parabolic_endpoint(rec, tc.get("side", "lo"))
        out.append({"tongue": rec.to_dict(), "endpoint": ep.to_dict(ctx)})
    art.json("tongues.json", {"tongues": out})
    return out


def cmd_stages(cfg, art, family, ctx, saddle, log=None):
    from .tongues import first_stage, liouville_stage, stages_transcript_csv

    sc = cfg["stages"]
    count = int(sc["count"])
    sched = sc.get("multipliers", "auto")
    if sched != "auto" and (not isinstance(sched, list) or len(sched) < count - 1):
        raise ConfigError("stages.multipliers must be 'auto' or a list of count-1 integers")
    stages = [first_stage(family, saddle)]
    try:
        while len(stages) < count:
            a = sc["a_start"] if sched == "auto" else int(sched[len(stages) - 1])
            stages.append(liouville_stage(stages[-1], stages[:-1], family, saddle, a=a,
                                          a_cap=int(sc["a_cap"]), period_cap=int(sc["period_cap"]),
                                          log=log))
    except StageFailed as e:
        art.json("stages_error.json", {"error": str(e), "diagnostics": e.diagnostics,
                                       "completed": [s.to_dict(ctx) for s in stages]})
        raise
    chain = [{"n": s.n, "rho": f"{s.rho.numerator}/{s.rho.denominator}", "b": s.b} for s in stages]
    gaps = []
    for s0, s1 in zip(stages, stages[1:]):
        gaps.append({"n": s1.n, "gap": f"{abs(s1.rho - s0.rho)}", "bound": f"1/{s1.b}",
                     "ok": abs(s1.rho - s0.rho) <= Fraction(1, s1.b)})
    art.json("stages.json", {"stages": [s.to_dict(ctx) for s in stages], "chain": chain, "gaps": gaps})
    art.csv("stages_transcript.csv", stages_transcript_csv(stages))
    return stages


def cmd_verify(out):
    """Recompute the config hash and check every artifact carries it."""
    path = os.path.join(out, "manifest.json")
    try:
        with open(path, encoding="utf-8") as fh:
            man = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"no readable manifest in {out}: {e}") from e
    rid = run_id(man["config"])
    problems = []
    if rid != man["run_id"]:
        problems.append(f"manifest run_id {man['run_id']} != hash of its config {rid}")
    for names in man.get("artifacts", {}).values():
        for name in names:
            if name == "manifest.json":
                continue
            p = os.path.join(out, name)
            if not os.path.exists(p):
                problems.append(f"missing {name}")
                continue
            with open(p, encoding="utf-8") as fh:
                head = fh.read()
            if name.endswith(".json"):
                found = json.loads(head).get("run_id")
            else:
                first = head.splitlines()[0] if head else ""
                found = first.split("=", 1)[1] if first.startswith("# run_id=") else None
            if found != rid:
                problems.append(f"{name} carries run_id {found}")
    return {"run_id": rid, "ok": not problems, "problems": problems}


# ---------------------------------------------------------------------------
# entry point


def make_parser():
    p = argparse.ArgumentParser(prog="cherryflow", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"cherryflow {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config (decimal strings)")
        sp.add_argument("--out", default="cherryflow-out", help="output directory")
        sp.add_argument("--precision", type=int, help="override precision_bits")
        sp.add_argument("--seed", type=int, help="override seed")
        sp.add_argument("--threads", type=int, default=1)
        if name in ("returns", "classify", "expansion", "coverage"):
            sp.add_argument("--map", help="map JSON written by 'tune'")
    return p


def run(argv=None):
    args = make_parser().parse_args(argv)
    if args.command == "verify":
        res = cmd_verify(args.out)
        print(json.dumps(res, indent=2))
        return 0 if res["ok"] else 3
    cfg = load_config(args.config, args.precision, args.seed)
    if args.threads < 1:
        raise ConfigError("--threads must be positive")
    ctx, family, saddle = build(cfg)
    art = Artifacts(args.out, cfg)
    t0 = time.perf_counter()
    cmd = args.command
    extra = {"map_path": getattr(args, "map", None)}
    if cmd == "tune":
        cmd_tune(cfg, art, family, ctx, saddle)
    elif cmd == "returns":
        cmd_returns(cfg, art, family, ctx, saddle, **extra)
    elif cmd == "classify":
        cmd_classify(cfg, art, family, ctx, saddle, threads=args.threads, **extra)
    elif cmd == "expansion":
        cmd_expansion(cfg, art, family, ctx, saddle, **extra)
    elif cmd == "coverage":
        cmd_coverage(cfg, art, family, ctx, saddle, **extra)
    elif cmd == "tongues":
        cmd_tongues(cfg, art, family, ctx, saddle)
    elif cmd == "stages":
        cmd_stages(cfg, art, family, ctx, saddle,
                   log=lambda e: print(json.dumps(_clean(e)), file=sys.stderr, flush=True))
    art.manifest(cmd, {"wall_seconds": round(time.perf_counter() - t0, 3)})
    print(json.dumps({"run_id": art.rid, "out": args.out, "artifacts": art.paths}))
    return 0


def main(argv=None):
    try:
        return run(argv)
    except ConfigError as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 2
    except CherryFlowError as e:
        diag = {"error": type(e).__name__, "message": str(e)}
        if getattr(e, "diagnostics", None) is not None:
            diag["diagnostics"] = _clean(e.diagnostics)
        print(json.dumps(diag), file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

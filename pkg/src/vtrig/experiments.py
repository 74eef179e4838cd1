"""Recipe-driven end-to-end experiments on synthetic traces.

A recipe names a ``kind`` and per-stage tables. Every kind runs

    period   estimate the CP length on a long jitter-free trace
    profile  denoise profiling traces with that length, fit the templates

and then one of

    attack   (kind ``vt``)        PGE curve on freshly denoised attack traces
    sweep    (kind ``precision``) the same with the length forced off by offsets
    template + attack (kind ``jitter``)  VT against pattern pullout, with and
                                  without inter-CP jitter

Traces are generated, reduced to one denoised segment and dropped, so memory
stays flat in the number of traces. Numeric artifacts are CSV files that are
byte-identical for a given recipe and seed; ``manifest.json`` adds timings.
"""

from __future__ import annotations

import csv
import json
import logging
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__, plotting
from .attack_eval import build_profile, meets_success, pge_curve, precision_sweep, register, success_step
from .config import config_hash, merge, stage_rng
from .errors import ConfigError, DataError, VtrigError
from .length_estimator import estimate_period_autocorr, refine_period
from .pattern_pullout import find_occurrences, learn_template, pullout_denoised
from .segment_aligner import AlignmentParams, denoise_pipeline
from .synthgen import SynthConfig, generate
from .trace_model import Trace, save_real_trace

log = logging.getLogger(__name__)

__all__ = ["DEFAULTS", "run_experiment", "resolve_config", "render_report", "compare_reports", "write_pge_csv"]

KINDS = ("vt", "precision", "jitter")

DEFAULTS = {
    "name": "experiment",
    "kind": "vt",
    "seed": 0,
    "synth": {
        "period_samples": 4350.09,
        "idle_len": 230,
        "noise_sigma": 0.5,
        "leak_gain": 0.02,
        "sample_rate_hz": 5e6,
        "random_lead_in": True,
    },
    "period": {
        "enabled": True,
        "n_cps": 575,
        "noise_sigma": 0.001,
        "min_period": 3000,
        "max_period": 6000,
        "interval_ns": 1000.0,
        "steps": 1000,
    },
    "denoise": {"segments": 50, "max_lag": -1, "idle_window": 230, "correlation_mode": "plain", "register_lag": 16,
                "anchored": True},
    "profile": {"n_traces": 1500, "n_poi": 3, "pooled_variance": True},
    "attack": {"n_traces": 100, "steps": [10, 20, 30, 50, 75, 100], "repetitions": 30},
    "sweep": {"offsets": [0.0, 0.0006, 0.0011, 0.0029]},
    "jitter": {"fraction": 0.05, "threshold": 0.7, "min_spacing": -1, "align": False},
}


def resolve_config(recipe):
    """Merge a recipe over the defaults and check the fields every kind needs."""
    cfg = merge(DEFAULTS, recipe)
    if cfg["kind"] not in KINDS:
        raise ConfigError(f"kind must be one of {KINDS}, got {cfg['kind']!r}")
    for section in ("synth", "period", "denoise", "profile", "attack", "sweep", "jitter"):
        if not isinstance(cfg[section], dict):
            raise ConfigError(f"[{section}] must be a table")
    unknown = set(cfg["synth"]) - set(SynthConfig.__dataclass_fields__) - {"random_lead_in"}
    if unknown:
        raise ConfigError(f"unknown synth keys: {sorted(unknown)}")
    steps = [int(s) for s in cfg["attack"]["steps"]]
    if not steps or steps != sorted(set(steps)) or steps[0] < 1:
        raise ConfigError("attack.steps must be strictly increasing positive integers")
    if steps[-1] > int(cfg["attack"]["n_traces"]):
        raise ConfigError("the largest attack step exceeds attack.n_traces")
    if int(cfg["denoise"]["segments"]) < 1:
        raise ConfigError("denoise.segments must be positive")
    return cfg


def _params(cfg):
    d = cfg["denoise"]
    lag = int(d["max_lag"])
    return AlignmentParams(
        max_lag=None if lag < 0 else lag,
        idle_window=int(d["idle_window"]),
        correlation_mode=d["correlation_mode"],
    )


def _map(fn, items, jobs):
    if jobs <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


class _Plan:
    """Per-trace seeds, plaintexts and capture delays for one stage."""

    def __init__(self, cfg, stage, n):
        rng = stage_rng(cfg["seed"], stage)
        self.seeds = rng.integers(0, 2**63, size=n, dtype=np.int64)
        self.plaintexts = [bytes(row) for row in rng.integers(0, 256, size=(n, 16), dtype=np.uint8)]
        period = int(cfg["synth"]["period_samples"])
        if cfg["synth"].get("random_lead_in", True):
            self.lead_ins = rng.integers(0, period, size=n)
        else:
            self.lead_ins = np.zeros(n, dtype=np.int64)
        self.shuffle_seed = int(rng.integers(0, 2**31))


def _keys(cfg):
    rng = stage_rng(cfg["seed"], "keys")
    return bytes(rng.integers(0, 256, 16, dtype=np.uint8)), bytes(rng.integers(0, 256, 16, dtype=np.uint8))


def _synth(cfg, *, seed, key, plaintext, n_cps, lead_in=0, jitter_max=0, **extra):
    s = {k: v for k, v in cfg["synth"].items() if k != "random_lead_in"}
    s.update(
        n_cps=int(n_cps),
        repeats_per_plaintext=int(n_cps),
        key=key,
        plaintexts=[plaintext],
        seed=int(seed),
        lead_in=int(lead_in),
        jitter_max=int(jitter_max),
    )
    s.update(extra)
    return SynthConfig.from_dict(s)


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def write_pge_csv(path, report):
    rows = (
        (int(s), b, float(report.pge[i, b])) for i, s in enumerate(report.traces_used) for b in range(16)
    )
    return _write_csv(path, ["step", "byte", "mean_pge"], rows)


def write_pge_grid(path, report):
    """gnuplot ``splot ... with pm3d`` layout: one block per step, blank-line separated."""
    with open(path, "w") as fh:
        fh.write("# step byte mean_pge\n")
        for i, s in enumerate(report.traces_used):
            for b in range(16):
                fh.write(f"{int(s)} {b} {report.pge[i, b]:.6f}\n")
            fh.write("\n")
    return path


def _summary(report):
    s = success_step(report)
    return {
        "success_step": s,
        "final_mean_pge": round(report.mean_final(), 6),
        "bytes_failed": int(np.count_nonzero(report.final() >= 4)),
        "success": bool(meets_success(report.final())),
    }


class _Run:
    def __init__(self, cfg, out_dir):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = {
            "name": cfg["name"],
            "kind": cfg["kind"],
            "version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "seed": int(cfg["seed"]),
            "config_hash": config_hash(cfg),
            "config": cfg,
            "status": "running",
            "failed_stage": None,
            "error": None,
            "stages": [],
            "warnings": [],
            "summary": {},
        }
        self.save()

    def save(self):
        with open(self.out / "manifest.json", "w") as fh:
            json.dump(self.manifest, fh, indent=1, default=str)
            fh.write("\n")

    def warn(self, msg, echo=True):
        if echo:
            log.warning(msg)
        self.manifest["warnings"].append(msg)

    @contextmanager
    def stage(self, name):
        entry = {"name": name, "status": "running", "seconds": None}
        self.manifest["stages"].append(entry)
        t0 = time.perf_counter()
        try:
            yield entry
        except BaseException as exc:
            entry["status"] = "failed"
            self.manifest["status"] = "failed"
            self.manifest["failed_stage"] = name
            self.manifest["error"] = f"{type(exc).__name__}: {exc}"
            raise
        else:
            entry["status"] = "ok"
        finally:
            entry["seconds"] = round(time.perf_counter() - t0, 4)
            self.save()


def _stage_period(run):
    cfg = run.cfg
    p = cfg["period"]
    sr = float(cfg["synth"]["sample_rate_hz"])
    truth = float(cfg["synth"]["period_samples"])
    if not p["enabled"]:
        run.manifest["summary"]["period"] = {"l_cp_samples": truth, "source": "config"}
        return truth
    rng = stage_rng(cfg["seed"], "period")
    key, _ = _keys(cfg)
    sc = _synth(
        cfg,
        seed=int(rng.integers(0, 2**63)),
        key=key,
        plaintext=bytes(rng.integers(0, 256, 16, dtype=np.uint8)),
        n_cps=p["n_cps"],
        noise_sigma=float(p["noise_sigma"]),
    )
    trace, _ = generate(sc)
    approx = estimate_period_autocorr(trace, int(p["min_period"]), int(p["max_period"]))
    interval = float(p["interval_ns"]) * sr / 1e9
    segments = p.get("segments")
    est = refine_period(trace, approx, interval, int(p["steps"]), None if not segments else int(segments))
    for w in est.warnings:
        run.warn(w)
    curve = est.distance_curve
    _write_csv(
        run.out / "distance_curve.csv",
        ["delta_ns", "delta_samples", "l1"],
        ((float(d * 1e9 / sr), float(d), float(v)) for d, v in curve),
    )
    plotting.plot_distance_curve(curve, run.out / "distance_curve.png", sr, truth - approx.l_cp_samples)
    step = interval / int(p["steps"])
    summary = {
        "approx_samples": approx.l_cp_samples,
        "l_cp_samples": est.l_cp_samples,
        "true_samples": truth,
        "error_steps": round((est.l_cp_samples - truth) / step, 3),
        "approx_error_fraction": round(abs(approx.l_cp_samples - truth) / truth, 6),
    }
    with open(run.out / "period.json", "w") as fh:
        json.dump(summary, fh, indent=1)
        fh.write("\n")
    run.manifest["summary"]["period"] = summary
    return est.l_cp_samples


def _stage_profile(run, l_cp, jobs):
    cfg = run.cfg
    pc, n_seg = cfg["profile"], int(cfg["denoise"]["segments"])
    n = int(pc["n_traces"])
    plan = _Plan(cfg, "profile", n)
    key, _ = _keys(cfg)
    params = _params(cfg)
    anchored = bool(cfg["denoise"]["anchored"])

    def one(i):
        sc = _synth(cfg, seed=plan.seeds[i], key=key, plaintext=plan.plaintexts[i], n_cps=n_seg + 2, lead_in=plan.lead_ins[i])
        return denoise_pipeline(generate(sc)[0], l_cp, n_seg, params, anchored=anchored).samples

    segs = np.array(_map(one, range(n), jobs))
    profile = build_profile(segs, plan.plaintexts, key, int(pc["n_poi"]), bool(pc["pooled_variance"]))
    for b, missing in enumerate(profile.empty_classes):
        if missing:
            run.warn(f"byte {b}: empty Hamming-weight classes {missing} interpolated", echo=False)
    with open(run.out / "profile.json", "w") as fh:
        json.dump(profile.to_dict(), fh)
    plotting.plot_segment(
        profile.reference, run.out / "denoised.png", "mean denoised profiling segment", params.idle_window
    )
    run.manifest["summary"]["profile"] = {"n_traces": n, "segment_length": profile.segment_length}
    return profile


def _attack_plan(cfg):
    return _Plan(cfg, "attack", int(cfg["attack"]["n_traces"]))


def _stage_attack_vt(run, l_cp, profile, jobs):
    cfg = run.cfg
    n_seg, params = int(cfg["denoise"]["segments"]), _params(cfg)
    lag = int(cfg["denoise"]["register_lag"])
    anchored = bool(cfg["denoise"]["anchored"])
    plan = _attack_plan(cfg)
    _, key = _keys(cfg)

    def one(i):
        sc = _synth(cfg, seed=plan.seeds[i], key=key, plaintext=plan.plaintexts[i], n_cps=n_seg + 2, lead_in=plan.lead_ins[i])
        seg = denoise_pipeline(generate(sc)[0], l_cp, n_seg, params, anchored=anchored)
        return register(seg.samples, profile.reference, lag, profile.poi_window())

    segs = np.array(_map(one, range(len(plan.seeds)), jobs))
    a = cfg["attack"]
    report = pge_curve(profile, segs, plan.plaintexts, key, a["steps"], int(a["repetitions"]), plan.shuffle_seed)
    write_pge_csv(run.out / "pge.csv", report)
    write_pge_grid(run.out / "pge_grid.dat", report)
    plotting.plot_pge_grid(report.pge, report.traces_used, run.out / "pge_grid.png")
    run.manifest["summary"]["attack"] = _summary(report)
    return report


def _stage_sweep(run, l_cp, profile):
    cfg = run.cfg
    n_seg, params = int(cfg["denoise"]["segments"]), _params(cfg)
    plan = _attack_plan(cfg)
    _, key = _keys(cfg)
    fractions = [float(f) for f in cfg["sweep"]["offsets"]]
    offsets = [f * l_cp for f in fractions]
    # the longest forced length decides how many CPs each trace must hold
    n_cps = int(np.ceil(n_seg * (l_cp + max(offsets)) / float(cfg["synth"]["period_samples"]))) + 2

    traces = (
        generate(_synth(cfg, seed=s, key=key, plaintext=pt, n_cps=n_cps, lead_in=li))[0]
        for s, pt, li in zip(plan.seeds, plan.plaintexts, plan.lead_ins)
    )
    a = cfg["attack"]
    results = precision_sweep(
        profile, traces, plan.plaintexts, key, l_cp, offsets, n_seg, params,
        steps=a["steps"], n_repetitions=int(a["repetitions"]), seed=plan.shuffle_seed,
        anchored=bool(cfg["denoise"]["anchored"]),
    )
    sr = float(cfg["synth"]["sample_rate_hz"])
    rows, curves, summary = [], {}, []
    by_offset = dict(zip(sorted(set(offsets)), sorted(set(fractions))))
    for i, (off, report) in enumerate(results.items()):
        frac = by_offset[off]
        write_pge_csv(run.out / f"pge_offset{i}.csv", report)
        s = _summary(report)
        rows.append((frac, float(off), float(off * 1e9 / sr), s["final_mean_pge"], s["bytes_failed"],
                     "" if s["success_step"] is None else s["success_step"], int(s["success"])))
        curves[f"{100 * frac:.2f} %"] = report.pge
        summary.append({"offset_fraction": frac, "offset_samples": off, **s})
    _write_csv(
        run.out / "sweep.csv",
        ["offset_fraction", "offset_samples", "offset_ns", "final_mean_pge", "bytes_failed", "success_step", "success"],
        rows,
    )
    plotting.plot_sweep(curves, list(results.values())[0].traces_used, run.out / "sweep.png")
    run.manifest["summary"]["sweep"] = summary
    return results


def _stage_template(run, l_cp):
    cfg = run.cfg
    rng = stage_rng(cfg["seed"], "template")
    key, _ = _keys(cfg)
    n_seg = int(cfg["denoise"]["segments"])
    sc = _synth(
        cfg,
        seed=int(rng.integers(0, 2**63)),
        key=key,
        plaintext=bytes(rng.integers(0, 256, 16, dtype=np.uint8)),
        n_cps=n_seg + 1,
    )
    crop = cfg["jitter"].get("crop")
    tpl = learn_template(generate(sc)[0], l_cp, n_seg, _params(cfg), crop=crop)
    save_real_trace(Trace(tpl.samples, float(cfg["synth"]["sample_rate_hz"]), "template"), run.out / "template.f32")
    run.manifest["summary"]["template"] = {"length": len(tpl), **tpl.source}
    return tpl


def _stage_attack_jitter(run, l_cp, profile, template, jobs):
    cfg = run.cfg
    n_seg, params = int(cfg["denoise"]["segments"]), _params(cfg)
    lag = int(cfg["denoise"]["register_lag"])
    anchored = bool(cfg["denoise"]["anchored"])
    j = cfg["jitter"]
    spacing = None if int(j["min_spacing"]) < 0 else int(j["min_spacing"])
    align_params = params if j["align"] else None
    plan = _attack_plan(cfg)
    _, key = _keys(cfg)
    jitter_max = int(round(float(j["fraction"]) * float(cfg["synth"]["period_samples"])))
    a = cfg["attack"]

    results, curves, rows, summary = {}, {}, [], []
    for cond, jm in (("clean", 0), ("jitter", jitter_max)):

        def synth_one(i, jm=jm):
            return _synth(cfg, seed=plan.seeds[i], key=key, plaintext=plan.plaintexts[i], n_cps=n_seg + 2,
                          lead_in=plan.lead_ins[i], jitter_max=jm)

        def one(i):
            trace, _ = generate(synth_one(i))
            vt = denoise_pipeline(trace, l_cp, n_seg, params, anchored=anchored)
            _, po = pullout_denoised(trace, template, float(j["threshold"]), align_params, spacing,
                                     align=bool(j["align"]), limit=n_seg)
            win = profile.poi_window()
            return register(vt.samples, profile.reference, lag, win), register(po.samples, profile.reference, lag, win)

        pairs = _map(one, range(len(plan.seeds)), jobs)
        for m, method in enumerate(("vt", "pullout")):
            segs = np.array([p[m] for p in pairs])
            report = pge_curve(profile, segs, plan.plaintexts, key, a["steps"], int(a["repetitions"]), plan.shuffle_seed)
            write_pge_csv(run.out / f"pge_{cond}_{method}.csv", report)
            s = _summary(report)
            results[(cond, method)] = report
            curves[f"{method} ({cond})"] = report.pge
            rows.append((cond, method, jm, s["final_mean_pge"], s["bytes_failed"],
                         "" if s["success_step"] is None else s["success_step"], int(s["success"])))
            summary.append({"condition": cond, "method": method, "jitter_max": jm, **s})
        if cond == "jitter":
            trace, truth = generate(synth_one(0))
            dets = find_occurrences(trace, template, float(j["threshold"]), spacing)
            _write_csv(run.out / "detections.csv", ["offset", "score"], ((d.offset, d.score) for d in dets))
    _write_csv(
        run.out / "jitter.csv",
        ["condition", "method", "jitter_max", "final_mean_pge", "bytes_failed", "success_step", "success"],
        rows,
    )
    plotting.plot_comparison(curves, a["steps"], run.out / "jitter.png")
    run.manifest["summary"]["jitter"] = summary
    return results


def run_experiment(recipe, out_dir, jobs=1):
    """Run a recipe; returns ``(exit_code, manifest)``.

    Artifacts of completed stages are kept when a later stage fails, and the
    manifest records which stage failed.
    """
    cfg = resolve_config(recipe)
    run = _Run(cfg, out_dir)
    try:
        with run.stage("period"):
            l_cp = _stage_period(run)
        with run.stage("profile"):
            profile = _stage_profile(run, l_cp, jobs)
        if cfg["kind"] == "vt":
            with run.stage("attack"):
                _stage_attack_vt(run, l_cp, profile, jobs)
        elif cfg["kind"] == "precision":
            with run.stage("sweep"):
                _stage_sweep(run, l_cp, profile)
        else:
            with run.stage("template"):
                template = _stage_template(run, l_cp)
            with run.stage("attack"):
                _stage_attack_jitter(run, l_cp, profile, template, jobs)
    except VtrigError as exc:
        log.error("stage %s failed: %s", run.manifest["failed_stage"], exc)
        return exc.exit_code, run.manifest
    run.manifest["status"] = "ok"
    run.save()
    return 0, run.manifest


def _load_manifest(run_dir):
    path = Path(run_dir) / "manifest.json"
    if not path.is_file():
        raise DataError(f"no manifest.json in {run_dir}")
    with open(path) as fh:
        return json.load(fh)


def render_report(run_dir):
    """Human-readable summary of one run directory."""
    m = _load_manifest(run_dir)
    lines = [f"run {m['name']} ({m['kind']}), vtrig {m['version']}, seed {m['seed']}, config {m['config_hash'][:12]}"]
    lines.append(f"status: {m['status']}")
    if m.get("failed_stage"):
        lines.append(f"failed stage: {m['failed_stage']} ({m.get('error')})")
    lines.append("stages:")
    for st in m["stages"]:
        secs = "-" if st["seconds"] is None else f"{st['seconds']:.2f} s"
        lines.append(f"  {st['name']:<10} {st['status']:<8} {secs}")
    s = m.get("summary", {})
    if "period" in s:
        p = s["period"]
        lines.append(f"period: L_cp = {p['l_cp_samples']:.4f} samples")
    if "attack" in s and isinstance(s["attack"], dict):
        a = s["attack"]
        lines.append(
            f"attack: final mean PGE {a['final_mean_pge']:.3f}, {a['bytes_failed']} byte(s) >= 4, "
            f"success at {a['success_step']}"
        )
    for e in s.get("sweep", []):
        lines.append(
            f"offset {100 * e['offset_fraction']:.2f} %: final mean PGE {e['final_mean_pge']:.3f}, "
            f"{e['bytes_failed']} byte(s) >= 4, success at {e['success_step']}"
        )
    for e in s.get("jitter", []):
        lines.append(
            f"{e['condition']:<6} {e['method']:<8} final mean PGE {e['final_mean_pge']:.3f}, "
            f"success at {e['success_step']}"
        )
    if m["warnings"]:
        lines.append("warnings:")
        lines += [f"  {w}" for w in m["warnings"]]
    return "\n".join(lines)


def compare_reports(run_a, run_b):
    """Per-stage wall-clock table of two runs with the ratio b / a."""
    ma, mb = _load_manifest(run_a), _load_manifest(run_b)
    ta = {st["name"]: st["seconds"] for st in ma["stages"]}
    tb = {st["name"]: st["seconds"] for st in mb["stages"]}
    names = list(ta) + [n for n in tb if n not in ta]
    lines = [f"{'stage':<10} {'A (s)':>10} {'B (s)':>10} {'B/A':>8}"]
    for n in names:
        a, b = ta.get(n), tb.get(n)
        ratio = f"{b / a:.3f}" if a and b is not None else "-"
        fa = "-" if a is None else f"{a:.3f}"
        fb = "-" if b is None else f"{b:.3f}"
        lines.append(f"{n:<10} {fa:>10} {fb:>10} {ratio:>8}")
    return "\n".join(lines)

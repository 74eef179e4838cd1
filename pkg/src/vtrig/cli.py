"""``vtrig`` command line.

Every option can also come from a config file given with ``--config``
(before or after the subcommand): keys of the table named after the
subcommand, or top-level keys, with dashes or underscores. Flags on the
command line win over the file.
"""

from __future__ import annotations

import json
import logging
import sys
from collections import Counter
from importlib.resources import files
from pathlib import Path

import click
import numpy as np

from . import __version__
from .attack_eval import Profile, build_profile, pge_curve, register, success_step
from .config import load_config, set_dotted
from .errors import DataError, VtrigError
from .experiments import (
    compare_reports,
    render_report,
    run_experiment,
    write_pge_csv,
    write_pge_grid,
)
from .length_estimator import estimate_period_autocorr, refine_period, samples_to_ns
from .pattern_pullout import DEFAULT_THRESHOLD, SegmentTemplate, correlation_scores, learn_template, pullout_denoised
from .segment_aligner import AlignmentParams, denoise_pipeline
from .synthgen import SynthConfig, default_round_profile, generate
from .trace_model import Trace, TraceMeta, load_real_trace, load_trace, save_real_trace, write_meta

log = logging.getLogger("vtrig")


def _section(command, data, name):
    """Config keys (flag spellings) for ``command`` mapped to its parameter names."""
    table = data.get(name)
    flat = table if isinstance(table, dict) else {k: v for k, v in data.items() if not isinstance(v, dict)}
    names = {}
    for p in command.params:
        names[p.name] = p.name
        for opt in p.opts:
            names[opt.lstrip("-").replace("-", "_")] = p.name
    return {names.get(k.replace("-", "_"), k.replace("-", "_")): v for k, v in flat.items()}


def _load_defaults(ctx, param, value):
    if value is None:
        return value
    data = load_config(value)
    if isinstance(ctx.command, click.Group):
        # group level: one table per subcommand
        ctx.default_map = {
            k: _section(ctx.command.commands[k], data, k) for k in data if k in ctx.command.commands
        }
    else:
        ctx.default_map = {**(ctx.default_map or {}), **_section(ctx.command, data, ctx.info_name)}
    return value


config_option = click.option(
    "--config",
    type=click.Path(dir_okay=False),
    callback=_load_defaults,
    is_eager=True,
    expose_value=False,
    help="TOML or JSON file supplying option defaults.",
)


def _hex16(value, what):
    try:
        b = bytes.fromhex(value)
    except ValueError:
        raise click.BadParameter(f"{what} must be hex") from None
    if len(b) != 16:
        raise click.BadParameter(f"{what} must be 16 bytes")
    return b


def _int_list(text):
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(v) for v in str(text).split(",") if v.strip()]


def _float_list(text):
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip()]


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _params(max_lag, idle_window, correlation_mode):
    return AlignmentParams(max_lag=max_lag, idle_window=idle_window, correlation_mode=correlation_mode)


def _save_matrix(path, rows):
    rows = np.asarray(rows, dtype="<f4")
    Path(path).write_bytes(rows.tobytes())
    _write_json(str(path) + ".json", {"n_rows": int(rows.shape[0]), "width": int(rows.shape[1]), "dtype": "float32le"})


def _load_segments(paths, width=None):
    """Stack segment files: matrices with a ``.json`` shape sidecar, or single segments."""
    out = []
    for p in paths:
        x = load_real_trace(p, TraceMeta(1.0)).samples
        side = Path(str(p) + ".json")
        w = width
        if w is None and side.is_file():
            w = json.loads(side.read_text()).get("width")
        w = int(w) if w else x.size
        if x.size % w:
            raise DataError(f"{p}: {x.size} samples do not form rows of {w}")
        out.append(x.reshape(-1, w))
    widths = {m.shape[1] for m in out}
    if len(widths) != 1:
        raise DataError(f"segment files have different widths {sorted(widths)}")
    return np.vstack(out)


def _read_plaintexts(path):
    try:
        lines = Path(path).read_text().split()
    except OSError as exc:
        raise DataError(f"cannot read plaintexts {path}: {exc.strerror}") from exc
    return [_hex16(t, "plaintext") for t in lines]


def _resolve_recipe(recipe):
    p = Path(recipe)
    if p.is_file():
        return p
    builtin = files("vtrig") / "recipes" / (recipe if recipe.endswith(".toml") else recipe + ".toml")
    if builtin.is_file():
        return builtin
    raise click.BadParameter(f"no recipe file or built-in recipe named {recipe!r}")


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__, prog_name="vtrig")
@click.option("-v", "--verbose", count=True, help="More log output (repeatable).")
@config_option
def cli(verbose):
    """Trigger-free side-channel trace segmentation."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@config_option
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Output trace (.f32).")
@click.option("--period-samples", type=float)
@click.option("--idle-len", type=int)
@click.option("--n-cps", type=int)
@click.option("--noise-sigma", type=float)
@click.option("--jitter-max", type=int)
@click.option("--key", help="16-byte key as hex.")
@click.option("--plaintexts", multiple=True, help="16-byte plaintext as hex (repeatable).")
@click.option("--repeats-per-plaintext", type=int)
@click.option("--leak-gain", type=float)
@click.option("--round-profile", type=int, help="Length of the default per-round waveform.")
@click.option("--seed", type=int)
@click.option("--sample-rate-hz", type=float)
@click.option("--lead-in", type=int)
@click.option("--idle-level", type=float)
@click.option("--poi-width", type=int)
def synth(out, **opts):
    """Generate a synthetic trace, its sidecar and ground truth."""
    d = {k: v for k, v in opts.items() if v is not None and v != ()}
    if "key" in d:
        d["key"] = _hex16(d["key"], "key")
    if "plaintexts" in d:
        d["plaintexts"] = [_hex16(p, "plaintext") for p in d["plaintexts"]]
    if "round_profile" in d:
        d["round_profile"] = default_round_profile(d["round_profile"])
    cfg = SynthConfig(**d)
    trace, truth = generate(cfg)
    save_real_trace(trace, out)
    write_meta(out, TraceMeta(cfg.sample_rate_hz, notes=f"synthetic, seed {cfg.seed}"))
    truth_path = Path(out).with_suffix(".truth.json")
    truth.save(truth_path)
    click.echo(f"wrote {out} ({len(trace)} samples, {cfg.n_cps} CPs) and {truth_path}")


@cli.command()
@config_option
@click.option("--trace", "trace_path", required=True, type=click.Path(dir_okay=False))
@click.option("--min-period", type=int, default=3000, show_default=True)
@click.option("--max-period", type=int, default=6000, show_default=True)
@click.option("--interval-ns", type=float, default=1000.0, show_default=True)
@click.option("--steps", type=int, default=1000, show_default=True)
@click.option("--segments", type=int, default=None, help="Segments per candidate [default: all that fit].")
@click.option("--out-dir", type=click.Path(file_okay=False), default=".", show_default=True)
@click.option("--plot/--no-plot", default=True, show_default=True)
def period(trace_path, min_period, max_period, interval_ns, steps, segments, out_dir, plot):
    """Estimate the CP length (auto-correlation, then the correction sweep)."""
    trace = load_trace(trace_path)
    sr = trace.sample_rate_hz
    approx = estimate_period_autocorr(trace, min_period, max_period)
    click.echo(f"approximate length: {approx.l_cp_samples:.3f} samples")
    est = refine_period(trace, approx, interval_ns * sr / 1e9, steps, segments)
    click.echo(
        f"refined length:     {est.l_cp_samples:.4f} samples "
        f"(delta {est.delta_samples:+.4f} samples, {samples_to_ns(est.delta_samples, sr):+.2f} ns)"
    )
    for w in est.warnings:
        click.echo(f"warning: {w}", err=True)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    curve = est.distance_curve
    with open(out / "distance_curve.csv", "w") as fh:
        fh.write("delta_ns,delta_samples,l1\n")
        for d, v in curve:
            fh.write(f"{d * 1e9 / sr:.6f},{d:.6f},{v:.9g}\n")
    _write_json(
        out / "period.json",
        {
            "approx_samples": approx.l_cp_samples,
            "l_cp_samples": est.l_cp_samples,
            "peak_spacings": approx.peak_spacings,
            "warnings": est.warnings,
        },
    )
    if plot:
        from .plotting import plot_distance_curve

        plot_distance_curve(curve, out / "distance_curve.png", sr)


def _alignment_options(f):
    f = click.option("--correlation-mode", type=click.Choice(["plain", "normalized"]), default="plain", show_default=True)(f)
    f = click.option("--idle-window", type=int, default=230, show_default=True)(f)
    f = click.option("--max-lag", type=int, default=None, help="Fine-alignment bound [default: 5% of the width].")(f)
    return f


@cli.command()
@config_option
@click.option("--trace", "trace_path", required=True, type=click.Path(dir_okay=False))
@click.option("--lcp", type=float, required=True, help="CP length in samples.")
@click.option("--segments", type=int, required=True)
@click.option("--start-offset", type=int, default=0, show_default=True)
@click.option("--anchored/--no-anchored", default=False, show_default=True, help="Re-cut at the idle instant.")
@_alignment_options
@click.option("--out", default="denoised.f32", show_default=True, type=click.Path(dir_okay=False))
def denoise(trace_path, lcp, segments, start_offset, anchored, max_lag, idle_window, correlation_mode, out):
    """Cut a same-data trace with the virtual trigger, align and average."""
    trace = load_trace(trace_path)
    params = _params(max_lag, idle_window, correlation_mode)
    seg = denoise_pipeline(trace, lcp, segments, params, start_offset, anchored=anchored)
    save_real_trace(Trace(seg.samples, trace.sample_rate_hz, "denoised"), out)
    write_meta(out, TraceMeta(trace.sample_rate_hz, notes=f"denoised from {trace_path}"))
    hist = Counter(int(s) for s in seg.shifts)
    _write_json(
        Path(out).with_suffix(".json"),
        {
            "source": str(trace_path),
            "l_cp_samples": lcp,
            "n_averaged": seg.n_averaged,
            "rotation_phase": seg.rotation_phase,
            "shifts_histogram": {str(k): hist[k] for k in sorted(hist)},
        },
    )
    click.echo(f"wrote {out}: {seg.n_averaged} segments averaged, rotation phase {seg.rotation_phase}")


@cli.command()
@config_option
@click.option("--trace", "trace_path", required=True, type=click.Path(dir_okay=False))
@click.option("--lcp", type=float, required=True)
@click.option("--segments", type=int, required=True)
@click.option("--crop", type=(int, int), default=None, help="START LENGTH of a sub-window.")
@_alignment_options
@click.option("--out", default="template.f32", show_default=True, type=click.Path(dir_okay=False))
def template(trace_path, lcp, segments, crop, max_lag, idle_window, correlation_mode, out):
    """Learn a CP template from a jitter-free profiling trace."""
    trace = load_trace(trace_path)
    tpl = learn_template(trace, lcp, segments, _params(max_lag, idle_window, correlation_mode), crop=crop)
    save_real_trace(Trace(tpl.samples, trace.sample_rate_hz, "template"), out)
    write_meta(out, TraceMeta(trace.sample_rate_hz, notes=f"template from {trace_path}"))
    _write_json(Path(out).with_suffix(".json"), tpl.source)
    click.echo(f"wrote {out} ({len(tpl)} samples)")


@cli.command()
@config_option
@click.option("--trace", "trace_path", required=True, type=click.Path(dir_okay=False))
@click.option("--template", "template_path", required=True, type=click.Path(dir_okay=False))
@click.option("--threshold", type=float, default=DEFAULT_THRESHOLD, show_default=True)
@click.option("--min-spacing", type=int, default=None, help="[default: 0.8 x template length]")
@click.option("--align/--no-align", default=False, show_default=True, help="Fine-align the pulled-out rows.")
@click.option("--out-dir", type=click.Path(file_okay=False), default=".", show_default=True)
def pullout(trace_path, template_path, threshold, min_spacing, align, out_dir):
    """Locate CPs by template correlation and extract them."""
    trace = load_trace(trace_path)
    tpl = SegmentTemplate(load_real_trace(template_path, TraceMeta(trace.sample_rate_hz)).samples)
    rows, seg = pullout_denoised(trace, tpl, threshold, AlignmentParams() if align else None, min_spacing, align=align)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _save_matrix(out / "segments.bin", rows.rows)
    scores = correlation_scores(trace, tpl)
    with open(out / "detections.csv", "w") as fh:
        fh.write("offset,score\n")
        for o in rows.origin_offsets:
            fh.write(f"{int(o)},{scores[o]:.6f}\n")
    save_real_trace(Trace(seg.samples, trace.sample_rate_hz, "pullout"), out / "denoised.f32")
    write_meta(out / "denoised.f32", TraceMeta(trace.sample_rate_hz, notes=f"pullout average of {trace_path}"))
    click.echo(f"{rows.n_rows} CPs found; wrote {out / 'segments.bin'} and {out / 'detections.csv'}")


@cli.command()
@config_option
@click.option("--segments", "segment_files", required=True, multiple=True, type=click.Path(dir_okay=False),
              help="Denoised segment file or row-major matrix (repeatable).")
@click.option("--width", type=int, default=None, help="Row width when a matrix has no shape sidecar.")
@click.option("--plaintexts", "pt_file", required=True, type=click.Path(dir_okay=False), help="One hex block per line.")
@click.option("--key", required=True)
@click.option("--n-poi", type=int, default=3, show_default=True)
@click.option("--pooled-variance/--per-class-variance", default=True, show_default=True)
@click.option("--out", default="profile.json", show_default=True, type=click.Path(dir_okay=False))
def profile(segment_files, width, pt_file, key, n_poi, pooled_variance, out):
    """Build Hamming-weight templates from profiling segments."""
    x = _load_segments(segment_files, width)
    prof = build_profile(x, _read_plaintexts(pt_file), _hex16(key, "key"), n_poi, pooled_variance)
    with open(out, "w") as fh:
        json.dump(prof.to_dict(), fh)
    click.echo(f"wrote {out}: {prof.n_profiling} segments of {prof.segment_length} samples, {n_poi} POIs per byte")


@cli.command()
@config_option
@click.option("--profile", "profile_path", required=True, type=click.Path(dir_okay=False))
@click.option("--segments", "segment_files", required=True, multiple=True, type=click.Path(dir_okay=False))
@click.option("--width", type=int, default=None)
@click.option("--plaintexts", "pt_file", required=True, type=click.Path(dir_okay=False))
@click.option("--key", required=True, help="True key (hex), used to rank.")
@click.option("--steps", default=None, help="Comma-separated segment counts [default: all].")
@click.option("--repetitions", type=int, default=30, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--register-lag", type=int, default=16, show_default=True, help="0 disables registration.")
@click.option("--out-dir", type=click.Path(file_okay=False), default=".", show_default=True)
def attack(profile_path, segment_files, width, pt_file, key, steps, repetitions, seed, register_lag, out_dir):
    """Attack segments with a profile and write the PGE curve."""
    try:
        with open(profile_path) as fh:
            prof = Profile.from_dict(json.load(fh))
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read profile {profile_path}: {exc}") from exc
    x = _load_segments(segment_files, width)
    if register_lag > 0 and prof.reference is not None:
        x = np.array([register(row, prof.reference, register_lag, prof.poi_window()) for row in x])
    steps = _int_list(steps) if steps else [x.shape[0]]
    report = pge_curve(prof, x, _read_plaintexts(pt_file), _hex16(key, "key"), steps, repetitions, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_pge_csv(out / "pge.csv", report)
    write_pge_grid(out / "pge_grid.dat", report)
    from .plotting import plot_pge_grid

    plot_pge_grid(report.pge, report.traces_used, out / "pge_grid.png")
    fails = int(np.count_nonzero(report.final() >= 4))
    click.echo(
        f"final mean PGE {report.mean_final():.3f}, {fails} byte(s) >= 4, success at {success_step(report)}"
    )


def _run_recipe(recipe, out, seed, jobs, overrides, extra=None):
    path = _resolve_recipe(recipe)
    cfg = load_config(path)
    for o in overrides:
        set_dotted(cfg, o)
    if extra:
        for k, v in extra.items():
            set_dotted(cfg, f"{k}={v}")
    if seed is not None:
        cfg["seed"] = seed
    out = out or Path("runs") / cfg.get("name", path.stem)
    code, _ = run_experiment(cfg, out, jobs=jobs)
    click.echo(render_report(out))
    return code


def _recipe_options(f):
    f = click.option("--set", "overrides", multiple=True, help="Override a recipe value, e.g. attack.repetitions=10.")(f)
    f = click.option("--jobs", type=int, default=1, show_default=True, help="Worker threads for per-trace work.")(f)
    f = click.option("--seed", type=int, default=None, help="Root seed [default: the recipe's].")(f)
    f = click.option("--out", type=click.Path(file_okay=False), default=None, help="Run directory [default: runs/<name>].")(f)
    return f


@cli.command()
@config_option
@click.argument("recipe")
@_recipe_options
def run(recipe, out, seed, jobs, overrides):
    """Run an experiment recipe (a file or a built-in name such as fig7_vt)."""
    sys.exit(_run_recipe(recipe, out, seed, jobs, overrides))


@cli.command()
@config_option
@click.argument("recipe", default="fig8_precision")
@click.option("--offsets", default=None, help="Comma-separated fractions of the CP length.")
@_recipe_options
def sweep(recipe, offsets, out, seed, jobs, overrides):
    """Length-precision sweep: attack with the CP length forced off by offsets."""
    extra = {"kind": '"precision"'}
    if offsets:
        extra["sweep.offsets"] = "[" + ", ".join(repr(v) for v in _float_list(offsets)) + "]"
    sys.exit(_run_recipe(recipe, out, seed, jobs, overrides, extra))


@cli.command()
@click.argument("run_dir", type=click.Path(file_okay=False))
@click.option("--compare", "other", type=click.Path(file_okay=False), default=None, help="Second run directory.")
def report(run_dir, other):
    """Summarise a run directory, or compare stage timings of two runs."""
    click.echo(render_report(run_dir))
    if other:
        click.echo("")
        click.echo(compare_reports(run_dir, other))


def main(argv=None):
    try:
        cli.main(args=argv, prog_name="vtrig", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except VtrigError as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.exit_code
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 0
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface: simulate -> fit -> render -> eval, plus the
exterior-domain baseline, field plots and a render benchmark.

Exit codes: 0 success, 2 usage error (bad flags, missing inputs), 1 runtime
failure.  ``--json`` switches every report to one machine-readable JSON
object on stdout.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
import time
import warnings
from pathlib import Path

import click
import numpy as np

from .scene import SCHEMA_NAME, SCHEMA_VERSION, MicArraySpec, SchemaError, load_scene, save_scene
from .spectral import read_wav, write_wav

HELP = f"""Acoustic primitives: render, simulate and fit human-body soundfields.

\b
Scene files are JSON with "schema": "{SCHEMA_NAME}" and "version": {SCHEMA_VERSION}.
Top-level fields: stft {{window_len, hop, fft_len, sample_rate}}, num_samples,
r_ref, v_sound, pose_rate, order, tracks [{{joint_id, positions}}] and
primitives [{{joint, offset_raw, weight_logits, coeffs}}].  Coefficients are
stored inline as {{shape, data: [[re, im], ...]}} or, for large scenes, as
{{shape, file, index}} pointing at a <name>.coeffs.npy array of shape
(K, Q, F, T) next to the JSON.
"""

PLOT_HELP = """Band-averaged |field| on a horizontal grid.

\b
Writes field.png, field.pgm and field.csv (and field_p<i>.* per primitive with
--per-primitive).  Quantisation: pixel = 1 + round(254 * v / v_max), where
v_max is the largest finite magnitude on the grid; cells within r_min of a
primitive are masked, written as NaN in the CSV and as pixel 0.  Image row 0
is the largest y; column 0 the smallest x.  The CSV has columns
x, y, magnitude, pixel.
"""

log = logging.getLogger("acoustic_primitives")


class RuntimeFailure(click.ClickException):
    exit_code = 1


def _emit(ctx, data: dict, lines: list[str] | None = None):
    if ctx.obj.get("json"):
        click.echo(json.dumps(data, default=_jsonable, sort_keys=True))
    else:
        for line in lines if lines is not None else [f"{k}: {v}" for k, v in data.items()]:
            click.echo(line)


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o)}")


def _runtime(fn):
    """Map library failures to exit code 1, keeping click usage errors at 2."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except (SchemaError, ValueError, OSError, ArithmeticError) as exc:
            raise RuntimeFailure(str(exc)) from None

    return wrapper


def _floats(text: str, n: int | None = None, flag: str = "value") -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise click.BadParameter(f"expected comma-separated numbers, got {text!r}", param_hint=flag) from None
    if n is not None and len(vals) != n:
        raise click.BadParameter(f"expected {n} comma-separated numbers", param_hint=flag)
    return vals


def _channels(text: str | None, flag: str) -> list[int] | None:
    """Comma list of channel indices, or ``@report.json`` to read its held-out channels."""
    if text is None:
        return None
    if text.startswith("@"):
        path = Path(text[1:])
        if not path.exists():
            raise click.BadParameter(f"{path} does not exist", param_hint=flag)
        d = json.loads(path.read_text())
        if "heldout_channels" not in d:
            raise click.BadParameter(f"{path} has no 'heldout_channels'", param_hint=flag)
        return [int(c) for c in d["heldout_channels"]]
    try:
        return [int(c) for c in text.split(",") if c != ""]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {text!r}", param_hint=flag) from None


def _load_array(path: Path) -> MicArraySpec:
    """Mic array from a truth file (``array`` field) or a bare array JSON."""
    d = json.loads(Path(path).read_text())
    d = d.get("array", d)
    if "positions" not in d or "sample_rate" not in d:
        raise click.BadParameter(f"{path} has no mic array (positions, sample_rate)", param_hint="--array")
    return MicArraySpec(np.asarray(d["positions"], float), int(d["sample_rate"]))


def _load_labels(text: str | None, K: int):
    from .fitting import ClipLabels

    if text is None:
        return None
    p = Path(text)
    if p.exists():
        vals = json.loads(p.read_text())
        vals = vals["labels"] if isinstance(vals, dict) else vals
    else:
        try:
            vals = [bool(int(v)) for v in text.split(",")]
        except ValueError:
            raise click.BadParameter("expected a JSON file or comma-separated 0/1 flags", param_hint="--labels") from None
    if len(vals) != K:
        raise click.BadParameter(f"{len(vals)} labels for {K} primitives", param_hint="--labels")
    try:
        return ClipLabels(tuple(bool(v) for v in vals))
    except ValueError as exc:
        raise click.BadParameter(str(exc), param_hint="--labels") from None


@click.group(help=HELP)
@click.option("--json", "as_json", is_flag=True, help="Emit machine-readable JSON reports.")
@click.option("-v", "--verbose", count=True, help="Log progress (-vv for debug).")
@click.pass_context
def cli(ctx, as_json, verbose):
    ctx.ensure_object(dict)
    ctx.obj["json"] = as_json
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


@cli.command()
@click.option("--k", "K", type=click.IntRange(min=1), default=12, show_default=True, help="Number of primitives.")
@click.option("--order", type=click.IntRange(min=0), default=2, show_default=True, help="Harmonic order N.")
@click.option("--mics", type=click.IntRange(min=1), default=128, show_default=True, help="Microphones on the capture sphere.")
@click.option("--seconds", type=click.FloatRange(min=0.0, min_open=True), default=1.0, show_default=True)
@click.option("--seed", type=int, default=7, show_default=True)
@click.option("--motion", type=click.Choice(["static", "linear", "circular"]), default="static", show_default=True)
@click.option("--source", type=click.Choice(["noise", "tone"]), default="noise", show_default=True)
@click.option("--band", default="100,8000", show_default=True, help="Source band in Hz, LOW,HIGH.")
@click.option("--noise-db", type=float, default=None, help="Sensor noise relative to channel RMS (dB); noiseless if omitted.")
@click.option("--mic-radius", type=click.FloatRange(min=0.0, min_open=True), default=1.8, show_default=True)
@click.option("--silent", default="", help="Comma-separated indices of silent primitives.")
@click.option("-o", "--out", "out", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.pass_context
@_runtime
def simulate(ctx, K, order, mics, seconds, seed, motion, source, band, noise_db, mic_radius, silent, out):
    """Simulate a scene and its microphone recordings.

    Writes scene.json (ground-truth scene), mics.wav (one channel per mic) and
    truth.json (simulation settings, hidden offsets, labels and the mic array).
    """
    from .simulate import SimSpec, make_mic_array, make_scene, synthesize_recordings

    lo, hi = _floats(band, 2, "--band")
    sil = tuple(_channels(silent, "--silent") or ())
    try:
        spec = SimSpec(
            K=K, order=order, clip_seconds=seconds, mics=mics, mic_radius=mic_radius, motion=motion,
            source=source, band=(lo, hi), noise_floor_db=-np.inf if noise_db is None else noise_db,
            silent=sil, seed=seed,
        )
    except ValueError as exc:
        raise click.UsageError(str(exc)) from None
    scene, truth = make_scene(spec)
    array = make_mic_array(mics, mic_radius, spec.stft.sample_rate)
    rec = synthesize_recordings(scene, array, spec.noise_floor_db, seed)
    out.mkdir(parents=True, exist_ok=True)
    save_scene(out / "scene.json", scene)
    write_wav(out / "mics.wav", rec, spec.stft.sample_rate)
    truth["array"] = {"sample_rate": array.sample_rate, "positions": array.positions.tolist()}
    (out / "truth.json").write_text(json.dumps(truth, indent=1, sort_keys=True))
    data = {"K": K, "N": order, "M": mics, "seconds": seconds, "samples": scene.num_samples, "out": str(out)}
    _emit(ctx, data, [
        f"{'K':>4} {'N':>3} {'M':>5} {'duration_s':>11}",
        f"{K:>4} {order:>3} {mics:>5} {seconds:>11.3f}",
        f"wrote {out / 'scene.json'}, {out / 'mics.wav'}, {out / 'truth.json'}",
    ])


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def _holdout(M: int, count: int, explicit: list[int] | None) -> list[int]:
    if explicit is not None:
        bad = [c for c in explicit if not 0 <= c < M]
        if bad:
            raise click.BadParameter(f"channels {bad} outside 0..{M - 1}", param_hint="--holdout-channels")
        return sorted(set(explicit))
    if count == 0:
        return []
    if count >= M:
        raise click.BadParameter(f"cannot hold out {count} of {M} channels", param_hint="--holdout")
    return sorted(set(np.linspace(0, M - 1, count).round().astype(int).tolist()))


@cli.command()
@click.option("--recordings", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True, help="Multichannel WAV.")
@click.option("--scene", "scene_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True,
              help="Scene skeleton: tracks, joints, order and STFT settings.")
@click.option("--array", "array_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True,
              help="Mic array JSON or truth.json.")
@click.option("--labels", default=None, help="Clip labels: JSON file (list or {labels}) or comma-separated 0/1.")
@click.option("--holdout", type=click.IntRange(min=0), default=0, show_default=True, help="Evenly spaced channels kept out of the fit.")
@click.option("--holdout-channels", default=None, help="Explicit held-out channel list (overrides --holdout).")
@click.option("--max-iters", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--grad-steps", type=click.IntRange(min=0), default=5, show_default=True)
@click.option("--learning-rate", type=click.FloatRange(min=0.0, min_open=True), default=0.1, show_default=True)
@click.option("--tol", type=click.FloatRange(min=0.0, min_open=True), default=1e-4, show_default=True)
@click.option("--max-shift", type=click.IntRange(min=0), default=16, show_default=True)
@click.option("--ridge", type=click.FloatRange(min=0.0), default=1e-30, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--lambda-amp", type=click.FloatRange(min=0.0), default=7.0, show_default=True)
@click.option("--lambda-ri", type=click.FloatRange(min=0.0), default=3.0, show_default=True)
@click.option("--lambda-sl1", type=click.FloatRange(min=0.0), default=0.5, show_default=True)
@click.option("--lambda-cts", type=click.FloatRange(min=0.0), default=1.0, show_default=True)
@click.option("--fixed-offsets", is_flag=True, help="Keep the initial offsets.")
@click.option("--fixed-weights", is_flag=True, help="Keep the initial weight logits.")
@click.option("--keep-init", is_flag=True, help="Start from the skeleton's offsets, logits and coefficients instead of zeros.")
@click.option("-o", "--out", "out", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.pass_context
@_runtime
def fit(ctx, recordings, scene_path, array_path, labels, holdout, holdout_channels, max_iters, grad_steps,
        learning_rate, tol, max_shift, ridge, seed, lambda_amp, lambda_ri, lambda_sl1, lambda_cts,
        fixed_offsets, fixed_weights, keep_init, out):
    """Fit coefficients, offsets and weights to recordings.

    Writes fitted.json and fit_report.json (loss history, convergence and the
    held-out channels).
    """
    from .fitting import FitConfig, fit_scene
    from .losses import LossWeights

    skel = load_scene(scene_path)
    array = _load_array(array_path)
    sig, rate = read_wav(recordings)
    if len(sig) != len(array):
        raise click.UsageError(f"{recordings} has {len(sig)} channels but the array has {len(array)} mics")
    if rate != skel.sample_rate:
        raise click.UsageError(f"sample rate {rate} does not match the scene's {skel.sample_rate}")
    if sig.shape[1] != skel.num_samples:
        raise click.UsageError(f"recordings have {sig.shape[1]} samples, the scene expects {skel.num_samples}")
    y = _load_labels(labels, skel.K)
    held = _holdout(len(array), holdout, _channels(holdout_channels, "--holdout-channels"))
    train = [m for m in range(len(array)) if m not in held]
    cfg = FitConfig(
        max_iters=max_iters, grad_steps=grad_steps, learning_rate=learning_rate, convergence_tol=tol,
        max_shift=max_shift, ridge=ridge, rng_seed=seed, fit_offsets=not fixed_offsets,
        fit_weights=not fixed_weights, loss_weights=LossWeights(lambda_amp, lambda_ri, lambda_sl1, lambda_cts),
    )
    init = skel
    if not keep_init:
        init = skel.with_params(
            coeffs=np.zeros_like(skel.coeff_array()),
            offset_raw=np.zeros((skel.K, 3)),
            logits=np.zeros((skel.K, skel.n_frames)),
        )
    t0 = time.perf_counter()
    res = fit_scene(sig[train], array.subset(train), init, y, cfg)
    elapsed = time.perf_counter() - t0
    out.mkdir(parents=True, exist_ok=True)
    save_scene(out / "fitted.json", res.scene)
    report = {
        "converged": res.converged,
        "iterations": res.iterations,
        "history": res.history,
        "final_loss": res.history[-1]["total"],
        "train_channels": train,
        "heldout_channels": held,
        "train_sdr_mean": float(np.mean(res.diagnostics["train_sdr"])),
        "warm_start": res.diagnostics.get("warm_start", []),
        "ls": res.diagnostics.get("ls", {}),
        "refine": res.diagnostics.get("refine", {}),
        "offsets": (0.2 * np.tanh(res.scene.offset_raw_array())).tolist(),
        "seconds": elapsed,
    }
    (out / "fit_report.json").write_text(json.dumps(report, indent=1, default=_jsonable))
    _emit(ctx, {k: report[k] for k in ("converged", "iterations", "final_loss", "train_sdr_mean", "heldout_channels", "seconds")}, [
        f"iterations {res.iterations} converged {res.converged} final loss {report['final_loss']:.6g}",
        f"train SDR {report['train_sdr_mean']:.2f} dB, held-out channels {held}",
        f"wrote {out / 'fitted.json'}, {out / 'fit_report.json'}",
    ])


# ---------------------------------------------------------------------------
# render
# ---------------------------------------------------------------------------


@cli.command()
@click.option("--scene", "scene_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--at", "at", multiple=True, help="Listener position x,y,z in metres; repeat for more channels.")
@click.option("--array", "array_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None,
              help="Render at mic positions from a mic array JSON or truth.json.")
@click.option("--channels", default=None, help="Mic indices for --array (comma list or @fit_report.json).")
@click.option("--track", "track_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None,
              help="JSON {positions: [[x, y, z], ...]} with one listener position per STFT frame.")
@click.option("--stems", is_flag=True, help="Also write per-primitive stems next to the output.")
@click.option("-o", "--out", "out", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.pass_context
@_runtime
def render(ctx, scene_path, at, array_path, channels, track_path, stems, out):
    """Render a scene at listener positions to a WAV file."""
    from .renderer import render_scene

    given = sum([bool(at), array_path is not None, track_path is not None])
    if given != 1:
        raise click.UsageError("give exactly one of --at, --array or --track")
    if channels is not None and array_path is None:
        raise click.UsageError("--channels requires --array")
    scene = load_scene(scene_path)
    if at:
        listeners = [np.array(_floats(a, 3, "--at")) for a in at]
    elif array_path is not None:
        array = _load_array(array_path)
        idx = _channels(channels, "--channels")
        idx = list(range(len(array))) if idx is None else idx
        if any(not 0 <= i < len(array) for i in idx):
            raise click.BadParameter("channel outside the array", param_hint="--channels")
        listeners = [array.positions[i] for i in idx]
    else:
        track = np.asarray(json.loads(track_path.read_text())["positions"], float)
        if track.shape != (scene.n_frames, 3):
            raise click.UsageError(f"track must have shape ({scene.n_frames}, 3), got {track.shape}")
        listeners = [track]
    outs, parts = [], []
    for pos in listeners:
        if stems:
            w, s = render_scene(scene, pos, stems=True)
            parts.append(s)
        else:
            w = render_scene(scene, pos)
        outs.append(w)
    write_wav(out, np.stack(outs), scene.sample_rate)
    written = [str(out)]
    if stems:
        for c, s in enumerate(parts):
            p = out.with_name(f"{out.stem}.stems{c}.wav")
            write_wav(p, s, scene.sample_rate)
            written.append(str(p))
    _emit(ctx, {"channels": len(outs), "samples": scene.num_samples, "files": written},
          [f"rendered {len(outs)} channel(s), {scene.num_samples} samples", *[f"wrote {w}" for w in written]])


# ---------------------------------------------------------------------------
# baseline
# ---------------------------------------------------------------------------


def _probe_directions(n: int, seed: int) -> np.ndarray:
    d = np.random.default_rng(seed).standard_normal((n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


@cli.command()
@click.option("--recordings", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--array", "array_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--order", type=click.IntRange(min=0), default=4, show_default=True, help="Expansion order N_b.")
@click.option("--center", default="0,0,0", show_default=True)
@click.option("--boundary-radius", type=click.FloatRange(min=0.0, min_open=True), required=True,
              help="Radius R_0 of the sphere enclosing all sources.")
@click.option("--ridge", type=click.FloatRange(min=0.0), default=1e-6, show_default=True)
@click.option("--at", "at", multiple=True, help="Decode position x,y,z; repeat for more channels.")
@click.option("--truth", "truth_scene", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None,
              help="Ground-truth scene for decode-error probes.")
@click.option("--probe-radii", default="0.3,1.5", show_default=True, help="Probe radii as multiples of R_0.")
@click.option("--probes", type=click.IntRange(min=1), default=8, show_default=True, help="Probe directions per radius.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("-o", "--out", "out", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="WAV for the --at decodes; a JSON report goes next to it.")
@click.pass_context
@_runtime
def baseline(ctx, recordings, array_path, order, center, boundary_radius, ridge, at, truth_scene, probe_radii,
             probes, seed, out):
    """Single-sphere exterior-domain baseline: encode and decode.

    With --truth the expansion is compared with the true field at probe points
    on spheres of radius r * R_0; the report gives the relative l2 error per
    radius and the ratio of the first to the last.  Probe points within r_min
    of a primitive are skipped.
    """
    from .renderer import exterior_decode, exterior_encode, exterior_probe_error, render_scene
    from .spectral import StftConfig

    if at and out is None:
        raise click.UsageError("--at requires --out")
    if not at and truth_scene is None:
        raise click.UsageError("nothing to do: give --at positions or --truth")
    array = _load_array(array_path)
    sig, rate = read_wav(recordings)
    cfg = StftConfig(sample_rate=rate)
    c = np.array(_floats(center, 3, "--center"))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        field_ = exterior_encode(sig, array, c, order, boundary_radius, cfg, ridge=ridge)
    report: dict = {"order": order, "boundary_radius": boundary_radius, "metadata": field_.metadata}
    lines = [f"encoded order {order} about {c.tolist()} (max condition {field_.metadata['max_condition']:.3g})"]
    if at:
        dec = np.stack([exterior_decode(field_, _floats(a, 3, "--at"), sig.shape[1]) for a in at])
        write_wav(out, dec, rate)
        report["decoded"] = str(out)
        lines.append(f"wrote {out}")
    if truth_scene is not None:
        scene = load_scene(truth_scene)
        errs = {}
        for frac in _floats(probe_radii, None, "--probe-radii"):
            pts = c + frac * boundary_radius * _probe_directions(probes, seed)
            errs[frac], used = exterior_probe_error(field_, lambda p: render_scene(scene, p), pts)
            if used == 0:
                raise RuntimeFailure(f"every probe at {frac} R_0 lies within r_min of a primitive")
            lines.append(f"r = {frac:g} R_0: relative l2 error {errs[frac]:.4g} ({used} probes)")
        report["errors"] = {str(k): v for k, v in errs.items()}
        keys = list(errs)
        if len(keys) >= 2:
            report["error_ratio"] = errs[keys[0]] / errs[keys[-1]]
            lines.append(f"error ratio {report['error_ratio']:.4g}")
    if out is not None:
        out.with_suffix(".json").write_text(json.dumps(report, indent=1, default=_jsonable))
    _emit(ctx, report, lines)


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


@cli.command(name="eval")
@click.option("--pred", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--ref", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--ref-channels", default=None, help="Reference channels matching the prediction (comma list or @fit_report.json).")
@click.option("-o", "--out", "out", type=click.Path(dir_okay=False, path_type=Path), default=None, help="JSON report.")
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False, path_type=Path), default=None, help="CSV report.")
@click.pass_context
@_runtime
def eval_cmd(ctx, pred, ref, ref_channels, out, csv_path):
    """SDR, amplitude error and phase error of predictions against references."""
    from .metrics import evaluate
    from .spectral import StftConfig

    p, rp = read_wav(pred)
    g, rg = read_wav(ref)
    if rp != rg:
        raise click.UsageError(f"sample rates differ: {rp} vs {rg}")
    idx = _channels(ref_channels, "--ref-channels")
    idx = list(range(len(g))) if idx is None else idx
    if any(not 0 <= i < len(g) for i in idx):
        raise click.BadParameter("channel outside the reference", param_hint="--ref-channels")
    g = g[idx]
    if p.shape != g.shape:
        raise click.UsageError(f"prediction shape {p.shape} does not match reference {g.shape}")
    rep = evaluate(p, g, StftConfig(sample_rate=rp), idx)
    if out is not None:
        rep.to_json(out)
    if csv_path is not None:
        rep.to_csv(csv_path)
    lines = [f"{'mic':>5} {'sdr_db':>9} {'amp_err':>9} {'phase_err':>9}"]
    lines += [f"{r['mic']:>5} {r['sdr']:>9.3f} {r['amp_err']:>9.4f} {r['phase_err']:>9.4f}" for r in rep.per_mic]
    lines.append(f"{'mean':>5} {rep.sdr:>9.3f} {rep.amp_err:>9.4f} {rep.phase_err:>9.4f}")
    _emit(ctx, {"sdr": rep.sdr, "amp_err": rep.amp_err, "phase_err": rep.phase_err, "per_mic": rep.per_mic}, lines)


# ---------------------------------------------------------------------------
# plot
# ---------------------------------------------------------------------------


def quantise(mag: np.ndarray) -> np.ndarray:
    """Grey levels for a magnitude grid: 1..255 linear in magnitude, 0 where masked."""
    finite = np.isfinite(mag)
    vmax = float(np.max(mag[finite])) if finite.any() else 0.0
    pix = np.zeros(mag.shape, dtype=np.uint8)
    if vmax > 0:
        pix[finite] = (1 + np.round(254 * mag[finite] / vmax)).astype(np.uint8)
    else:
        pix[finite] = 1
    return pix


def _write_field(stem: Path, xs, ys, mag):
    import csv

    from PIL import Image

    pix = quantise(mag)
    img = Image.fromarray(pix[::-1])  # row 0 = largest y
    img.save(stem.with_suffix(".png"))
    img.save(stem.with_suffix(".pgm"))
    with open(stem.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "magnitude", "pixel"])
        for i, yv in enumerate(ys):
            for j, xv in enumerate(xs):
                w.writerow([f"{xv:.6g}", f"{yv:.6g}", repr(float(mag[i, j])), int(pix[i, j])])


@cli.command(help=PLOT_HELP)
@click.option("--scene", "scene_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--band", default="1000,2000", show_default=True, help="Frequency band in Hz, LOW,HIGH.")
@click.option("--size", type=click.FloatRange(min=0.0, min_open=True), default=4.0, show_default=True, help="Grid side (m).")
@click.option("--step", type=click.FloatRange(min=0.0, min_open=True), default=0.05, show_default=True, help="Grid step (m).")
@click.option("--center", default="0,0", show_default=True, help="Grid centre x,y.")
@click.option("--z", type=float, default=0.0, show_default=True, help="Plane height (m).")
@click.option("--frame", type=click.IntRange(min=0), default=None, help="STFT frame (default: middle).")
@click.option("--per-primitive", is_flag=True, help="Also write one panel per primitive.")
@click.option("-o", "--out", "out", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.pass_context
@_runtime
def plot(ctx, scene_path, band, size, step, center, z, frame, per_primitive, out):
    from .renderer import field_magnitude_grid

    lo, hi = _floats(band, 2, "--band")
    cx, cy = _floats(center, 2, "--center")
    scene = load_scene(scene_path)
    if frame is not None and frame >= scene.n_frames:
        raise click.BadParameter(f"scene has {scene.n_frames} frames", param_hint="--frame")
    n = int(round(size / step)) + 1
    xs = cx + np.linspace(-size / 2, size / 2, n)
    ys = cy + np.linspace(-size / 2, size / 2, n)
    out.mkdir(parents=True, exist_ok=True)
    mag = field_magnitude_grid(scene, xs, ys, z, (lo, hi), frame)
    _write_field(out / "field", xs, ys, mag)
    written = ["field"]
    if per_primitive:
        for i in range(scene.K):
            _write_field(out / f"field_p{i}", xs, ys, field_magnitude_grid(scene, xs, ys, z, (lo, hi), frame, i))
            written.append(f"field_p{i}")
    _emit(ctx, {"grid": [n, n], "masked": int(np.isnan(mag).sum()), "panels": written, "out": str(out)},
          [f"{n} x {n} grid, {int(np.isnan(mag).sum())} masked cells", f"wrote {len(written)} panel(s) to {out}"])


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def bench_render(K: int = 12, order: int = 2, seconds: float = 1.0, runs: int = 10, warmup: int = 1, seed: int = 0):
    """Wall time of rendering ``seconds`` of audio at one listener."""
    from .renderer import render_scene
    from .simulate import SimSpec, make_scene

    scene, _ = make_scene(SimSpec(K=K, order=order, clip_seconds=seconds, seed=seed))
    listener = np.array([1.8, 0.0, 0.0])
    for _ in range(warmup):
        render_scene(scene, listener)
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        render_scene(scene, listener)
        times.append(time.perf_counter() - t0)
    t = np.array(times)
    return {
        "K": K, "N": order, "audio_seconds": seconds, "runs": runs,
        "mean_s": float(t.mean()), "std_s": float(t.std()), "min_s": float(t.min()),
        "seconds_per_audio_second": float(t.mean() / seconds),
        "reference_full_network_s": 0.24,
    }


@cli.command()
@click.option("--k", "K", type=click.IntRange(min=1), default=12, show_default=True)
@click.option("--order", type=click.IntRange(min=0), default=2, show_default=True)
@click.option("--seconds", type=click.FloatRange(min=0.0, min_open=True), default=1.0, show_default=True)
@click.option("--runs", type=click.IntRange(min=10), default=10, show_default=True)
@click.option("--warmup", type=click.IntRange(min=0), default=1, show_default=True)
@click.pass_context
@_runtime
def bench(ctx, K, order, seconds, runs, warmup):
    """Time rendering of one listener channel (mean of the timed runs after warm-up)."""
    r = bench_render(K, order, seconds, runs, warmup)
    _emit(ctx, r, [
        f"K={K} N={order}: {r['mean_s']:.4f} s per {seconds:g} s of audio "
        f"(std {r['std_s']:.4f}, min {r['min_s']:.4f}, {runs} runs)",
        f"seconds per audio second: {r['seconds_per_audio_second']:.4f} (full-network reference 0.24 s)",
    ])


def main(argv=None):
    cli.main(args=argv, prog_name="acoustic-primitives")


if __name__ == "__main__":
    main()

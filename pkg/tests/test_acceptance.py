"""Acceptance criteria 1-8, one pass/fail line each.

Every check returns ``(ok, detail)``; the tests record a line per criterion
which is printed in the terminal summary.  Run this file directly to print the
lines without pytest.
"""

import re
import subprocess
import sys
import time
from itertools import permutations
from pathlib import Path

import numpy as np
import pytest
from scipy.signal.windows import tukey
from scipy.special import spherical_jn, spherical_yn

from acoustic_primitives.cli import bench_render
from acoustic_primitives.fitting import ClipLabels, FitConfig, fit_scene, solve_scene_coefficients
from acoustic_primitives.metrics import sdr
from acoustic_primitives.renderer import exterior_encode, exterior_probe_error, render_at_mics, render_scene
from acoustic_primitives.scene import OFFSET_SCALE, AcousticPrimitive, Scene, static_track
from acoustic_primitives.simulate import (
    SimSpec,
    make_mic_array,
    make_scene,
    monopole_field,
    monopole_scene,
    point_sources,
    synthesize_recordings,
    synthesize_spectrograms,
)
from acoustic_primitives.spectral import StftConfig, istft, stft
from acoustic_primitives.sphmath import radial_gain, sph_hankel_all, sph_harmonics, wavenumber
from oracles import ACCEPTANCE, finite_difference_trial

TESTS = Path(__file__).parent
CFG = StftConfig()


# ---------------------------------------------------------------------------
# 1. special functions
# ---------------------------------------------------------------------------


def criterion_1():
    # orthonormality by Gauss-Legendre in cos(theta) times a uniform phi rule,
    # exact for products of degree <= 4 harmonics
    x, wx = np.polynomial.legendre.leggauss(16)
    phi = 2 * np.pi * np.arange(32) / 32
    T, P = np.meshgrid(np.arccos(x), phi, indexing="ij")
    w = np.outer(wx, np.full(32, 2 * np.pi / 32)).ravel()
    Y = sph_harmonics(2, T, P).reshape(9, -1)
    ortho = float(np.abs((Y * w) @ Y.conj().T - np.eye(9)).max())

    z = np.geomspace(0.1, 100, 2000)
    h = sph_hankel_all(3, z)
    recur = max(
        float(np.max(np.abs(h[n - 1] + h[n + 1] - (2 * n + 1) / z * h[n]) / np.abs(h[n + 1]))) for n in (1, 2)
    )
    ref = np.stack([spherical_jn(n, z) + 1j * spherical_yn(n, z) for n in range(4)])
    vs_scipy = float(np.max(np.abs(h - ref) / np.abs(ref)))

    mono = float(np.max(np.abs(np.abs(h[0]) * z - 1.0)))
    k = wavenumber(np.array([100.0, 1000.0, 8000.0]))[:, None]
    r = np.geomspace(0.05, 20.0, 50)[None]
    gain = float(np.max(np.abs(np.abs(radial_gain(0, k, r, 0.5)) * r / 0.5 - 1.0)))

    ok = ortho < 1e-6 and recur < 1e-10 and vs_scipy < 1e-10 and mono < 1e-12 and gain < 1e-12
    return ok, (f"orthonormality {ortho:.1e}, recurrence {recur:.1e}, vs scipy {vs_scipy:.1e}, "
                f"|h0| decay {mono:.1e}, monopole gain {gain:.1e}")


# ---------------------------------------------------------------------------
# 2. STFT round trip
# ---------------------------------------------------------------------------


def criterion_2():
    rng = np.random.default_rng(2)
    edge = CFG.window_len // 2
    worst = np.inf
    for _ in range(100):
        x = rng.standard_normal(CFG.sample_rate)
        y = istft(stft(x, CFG), CFG, len(x))
        e = x[edge:-edge] - y[edge:-edge]
        worst = min(worst, 10 * np.log10(np.sum(x[edge:-edge] ** 2) / np.sum(e**2)))
    return worst > 100, f"worst interior SNR {worst:.1f} dB over 100 signals"


# ---------------------------------------------------------------------------
# 3. physical rendering
# ---------------------------------------------------------------------------


def _noise_scene(seeds, positions, order=0, n=4800, logits=None):
    """Static primitives with band-limited noise coefficients."""
    tracks, prims = {}, []
    f = np.fft.rfftfreq(n, 1 / CFG.sample_rate)
    for i, (seed, p) in enumerate(zip(seeds, positions)):
        X = np.fft.rfft(np.random.default_rng(seed).standard_normal(((order + 1) ** 2, n)), axis=-1)
        X[:, (f < 200) | (f > 4000)] = 0
        c = stft(np.fft.irfft(X, n, axis=-1), CFG).bins
        tracks[f"j{i}"] = static_track(f"j{i}", p, n / CFG.sample_rate)
        wl = None if logits is None else logits[i]
        prims.append(AcousticPrimitive(f"j{i}", c, np.zeros(3), wl))
    return Scene(tracks, tuple(prims), CFG, n)


def criterion_3():
    # 1/r: a tapered burst keeps every delayed copy inside the clip
    sig = point_sources(1, band=(200.0, 4000.0), clip_seconds=0.25, seed=2)
    L = sig.shape[1]
    w = np.zeros(L)
    w[2000 : L - 2000] = tukey(L - 4000, 0.5)
    mono = monopole_scene([[0.0, 0.0, 0.0]], sig * w)
    r = np.array([0.5, 0.8, 1.2, 1.9, 2.6, 3.0])
    d = np.random.default_rng(0).standard_normal((6, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    rms = [np.sqrt(np.mean(render_scene(mono, di * ri) ** 2)) for di, ri in zip(d, r)]
    slope_err = abs(np.polyfit(np.log(r), np.log(rms), 1)[0] + 1.0)

    # time of flight from the cross-correlation peak
    s = _noise_scene([9], [[0.0, 0.0, 0.0]])
    n = s.num_samples
    x1 = render_scene(s, [0.6, 0, 0])
    tof_err = 0.0
    for dr in (0.1, 0.5, 1.3, 2.0):
        x2 = render_scene(s, [0.6 + dr, 0, 0])
        lag = int(np.argmax(np.correlate(x2, x1, mode="full"))) - (n - 1)
        tof_err = max(tof_err, abs(lag - dr / 343.0 * CFG.sample_rate))

    # linearity in the coefficients, and equal-weight superposition of primitives
    listener = [0.7, -1.1, 0.4]
    a = _noise_scene([3], [[0.1, 0.0, 0.0]], order=2)
    b = _noise_scene([4], [[0.1, 0.0, 0.0]], order=2)
    combo = a.with_params(coeffs=2.5 * a.coeff_array() - 0.7 * b.coeff_array())
    ya, yb = render_scene(a, listener), render_scene(b, listener)
    lin = np.linalg.norm(render_scene(combo, listener) - (2.5 * ya - 0.7 * yb)) / np.linalg.norm(2.5 * ya)
    pos = [[0.1, 0.0, 0.0], [-0.2, 0.3, 0.1]]
    both = _noise_scene([3, 5], pos, order=2)
    parts = [render_scene(_noise_scene([s_], [p], order=2), listener) for s_, p in zip([3, 5], pos)]
    total = 0.5 * (parts[0] + parts[1])
    sup = np.linalg.norm(render_scene(both, listener) - total) / np.linalg.norm(total)
    lin_err = float(max(lin, sup))

    ok = slope_err < 1e-4 and tof_err <= 1.0 and lin_err < 1e-10
    return ok, (f"1/r slope error {slope_err:.1e}, time of flight within {tof_err:.2f} samples, "
                f"linearity/superposition {lin_err:.1e}")


# ---------------------------------------------------------------------------
# 4. gradients
# ---------------------------------------------------------------------------


def criterion_4():
    worst = {}
    for seed in range(50):
        for name, e in finite_difference_trial(seed, rel_eps=1e-6).items():
            worst[name] = max(worst.get(name, 0.0), e)
    ok = max(worst.values()) < 1e-4
    return ok, "worst relative error over 50 trials: " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())


# ---------------------------------------------------------------------------
# 5. inverse rendering
# ---------------------------------------------------------------------------


def _holdout_split(M, n=8):
    held = np.linspace(0, M - 1, n).round().astype(int)
    return held, np.setdiff1d(np.arange(M), held)


def _heldout_sdr(scene, array, clean):
    """Mean SDR of the scene's renders against clean held-out waveforms."""
    pred = render_at_mics(scene, array)
    return float(np.mean([sdr(p, g) for p, g in zip(pred, clean)]))


def _offset_error(fitted, truth):
    """Worst offset error, matching primitives that share a joint."""
    est = OFFSET_SCALE * np.tanh(fitted.offset_raw_array())
    ref = np.asarray(truth["offsets"])
    joints = truth["joints"]
    worst = 0.0
    for j in set(joints):
        idx = [i for i, x in enumerate(joints) if x == j]
        best = min(np.max(np.linalg.norm(est[list(p)] - ref[idx], axis=1)) for p in permutations(idx))
        worst = max(worst, float(best))
    return worst


def criterion_5():
    # noiseless least squares at full size
    sc, _ = make_scene(SimSpec(K=12, order=2, clip_seconds=0.5, seed=7))
    arr = make_mic_array(128, 1.8)
    obs = synthesize_spectrograms(sc, arr)
    fit, _ = solve_scene_coefficients(sc, arr, obs)
    C, C0 = fit.coeff_array(), sc.coeff_array()
    num = np.linalg.norm((C - C0).reshape(12, 9, -1), axis=-1)
    den = np.linalg.norm(C0.reshape(12, 9, -1), axis=-1)
    ls_err = float(np.max(num / den))

    # -40 dB noise on 128 training mics, 8 clean held-out mics
    arr_h = make_mic_array(136, 1.8)
    held, train = _holdout_split(136)
    noisy = synthesize_spectrograms(sc, arr_h.subset(train), noise_floor_db=-40.0, seed=11)
    fit, _ = solve_scene_coefficients(sc, arr_h.subset(train), noisy)
    clean = synthesize_recordings(sc, arr_h.subset(held))
    noisy_sdr = _heldout_sdr(fit, arr_h.subset(held), clean)

    # full fits from joint positions with hidden offsets: distinct joints,
    # shared joints, and waveform observations
    fit_offsets, fit_sdr = [], []
    for K, order, mics, seed, waveforms in [(4, 1, 48, 3, False), (12, 1, 72, 5, False), (4, 1, 48, 3, True)]:
        sc, truth = make_scene(SimSpec(K=K, order=order, clip_seconds=0.25, seed=seed))
        arr = make_mic_array(mics, 1.8)
        held, train = _holdout_split(mics)
        synth = synthesize_recordings if waveforms else synthesize_spectrograms
        obs = synth(sc, arr.subset(train))
        init = sc.with_params(offset_raw=np.zeros_like(sc.offset_raw_array()),
                              coeffs=np.zeros_like(sc.coeff_array()))
        res = fit_scene(obs, arr.subset(train), init, ClipLabels(tuple(truth["labels"])), FitConfig())
        fit_offsets.append(_offset_error(res.scene, truth))
        fit_sdr.append(_heldout_sdr(res.scene, arr.subset(held), synthesize_recordings(sc, arr.subset(held))))

    ok = ls_err < 1e-6 and noisy_sdr > 30 and max(fit_offsets) < 0.01 and min(fit_sdr) > 20
    return ok, (f"noiseless LS error {ls_err:.1e}, -40 dB held-out SDR {noisy_sdr:.1f} dB, "
                f"fit offsets within {100 * max(fit_offsets):.2f} cm, fit held-out SDR >= {min(fit_sdr):.1f} dB")


# ---------------------------------------------------------------------------
# 6. near field
# ---------------------------------------------------------------------------


def criterion_6():
    pos = np.array([[0.1, 0.0, 0.0], [-0.08, 0.05, 0.03]])
    sig = point_sources(2, band=(200.0, 500.0), clip_seconds=0.25, seed=3)
    scene = monopole_scene(pos, sig)
    arr = make_mic_array(64, 1.8)
    field_ = exterior_encode(synthesize_recordings(scene, arr), arr, order=4, boundary_radius=0.3)

    d = np.random.default_rng(0).standard_normal((16, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    # probes at 0.3 and 1.5 times the boundary radius, clear of the sources
    inner, outer = 0.09 * d, 0.45 * d
    inner = inner[np.min(np.linalg.norm(inner[:, None] - pos, axis=-1), axis=1) > 0.05]

    def truth(p):
        return monopole_field(pos, sig, p)

    e_in, n_in = exterior_probe_error(field_, truth, inner)
    e_out, _ = exterior_probe_error(field_, truth, outer)
    ratio = e_in / e_out
    guard = CFG.window_len
    worst = min(sdr(render_scene(scene, p)[guard:-guard], truth(p)[guard:-guard]) for p in inner)
    ok = ratio > 10 and worst > 40
    return ok, (f"baseline error inside {e_in:.3f} vs outside {e_out:.4f} (ratio {ratio:.0f}), "
                f"primitive renderer SDR >= {worst:.1f} dB at {n_in} interior probes")


# ---------------------------------------------------------------------------
# 7. real time
# ---------------------------------------------------------------------------


def criterion_7():
    rep = bench_render()
    return rep["mean_s"] < 1.0, f"K=12 N=2 1 s render {rep['mean_s']:.3f} s mean over {rep['runs']} runs"


# ---------------------------------------------------------------------------
# 8. unit suite
# ---------------------------------------------------------------------------


def criterion_8():
    files = sorted(str(p) for p in TESTS.glob("test_*.py") if p.name != Path(__file__).name)
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-rf", "-p", "no:cacheprovider", *files],
                          capture_output=True, text=True, cwd=TESTS.parent)
    out = proc.stdout
    counts = dict((k, int(v)) for v, k in re.findall(r"(\d+) (passed|failed|error)", out.splitlines()[-1]))
    failed = [ln.split()[1] for ln in out.splitlines() if ln.startswith("FAILED ")]
    detail = f"{counts.get('passed', 0)} passed, {counts.get('failed', 0)} failed"
    if failed:
        detail += " (" + ", ".join(f.split("::", 1)[1] for f in failed) + ")"
    return proc.returncode == 0, detail


CRITERIA = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4,
            5: criterion_5, 6: criterion_6, 7: criterion_7, 8: criterion_8}
BUDGET_S = {1: 10, 2: 30, 3: 60, 4: 300, 5: 900, 6: 300}


def check(n):
    """Run criterion ``n`` against its time budget and record its line."""
    t0 = time.perf_counter()
    ok, detail = CRITERIA[n]()
    dt = time.perf_counter() - t0
    budget = BUDGET_S.get(n)
    if budget is not None:
        ok = ok and dt < budget
        detail += f"; {dt:.1f} s of {budget} s"
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE[n] = line
    print(line)
    return ok, line


@pytest.mark.parametrize("n", sorted(CRITERIA))
def test_criterion(n):
    ok, line = check(n)
    assert ok, line


if __name__ == "__main__":
    results = [check(n)[0] for n in sorted(CRITERIA)]
    sys.exit(0 if all(results) else 1)

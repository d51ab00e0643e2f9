"""Forward rendering of primitive scenes and the single-sphere exterior-domain
baseline."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import next_fast_len

from .scene import AcousticPrimitive, MicArraySpec, Scene, positions_at_frames
from .spectral import ComplexSpectrogram, StftConfig, istft, stft
from .sphmath import (
    R_MIN,
    DomainError,
    harmonic_orders,
    num_harmonics,
    propagation_gains,
    sph_harmonics_unit,
    wavenumber,
)


def relative_geometry(positions: np.ndarray, listener, r_min: float = R_MIN):
    """Distance and unit direction from each primitive to the listener.

    ``positions`` is (K, T, 3); ``listener`` a 3-vector or a (T, 3) track.
    Returns ``r`` (K, T) and ``unit`` (K, T, 3).
    """
    L = np.asarray(listener, dtype=float)
    d = L - positions  # broadcasts (3,) and (T, 3)
    r = np.linalg.norm(d, axis=-1)
    if np.any(r < r_min):
        raise DomainError(
            f"listener within r_min={r_min} m of a primitive (r={float(r.min()):.4g} m)"
        )
    return r, d / r[..., None]


def _check_grid(coeffs: np.ndarray, cfg: StftConfig, n_frames: int):
    if coeffs.shape[-2:] != (cfg.n_bins, n_frames):
        raise ValueError(
            f"coefficient grid {coeffs.shape[-2:]} does not match ({cfg.n_bins}, {n_frames})"
        )


def _primitive_bins(coeffs, weight, r, unit, k, order, r_ref):
    """W(t) * sum_nm c_nm(f,t) g_n(k_f, r_t) Y_nm(t) for one primitive."""
    Y = sph_harmonics_unit(order, unit)  # (Q, T)
    G = propagation_gains(order, k[:, None], r[None, :], r_ref)  # (N+1, F, T)
    out = np.zeros(coeffs.shape[1:], dtype=complex)
    for n in range(order + 1):
        sl = slice(n * n, (n + 1) ** 2)
        out += G[n] * np.einsum("qft,qt->ft", coeffs[sl], Y[sl])
    return out * weight


def render_primitive_spec(
    prim: AcousticPrimitive | np.ndarray,
    weight,
    rel_pos,
    cfg: StftConfig = StftConfig(),
    r_ref: float = 0.5,
    v_sound: float = 343.0,
) -> ComplexSpectrogram:
    """Spectrogram radiated by one primitive at per-frame relative positions.

    Parameters
    ----------
    prim : AcousticPrimitive or ndarray ((N+1)^2, F, T)
    weight : float or ndarray (T,)
        Per-frame primitive weight.
    rel_pos : tuple of arrays (r, theta, phi), each scalar or (T,)
        Listener position relative to the primitive.
    """
    coeffs = prim.coeffs if isinstance(prim, AcousticPrimitive) else np.asarray(prim, complex)
    Q, F, T = coeffs.shape
    order = int(round(np.sqrt(Q))) - 1
    if num_harmonics(order) != Q:
        raise ValueError("coefficient channel count is not (N+1)^2")
    _check_grid(coeffs, cfg, T)
    r, theta, phi = (np.broadcast_to(np.asarray(a, float), (T,)) for a in rel_pos)
    if np.any(r < R_MIN):
        raise DomainError(f"listener within r_min={R_MIN} m of the primitive")
    st = np.sin(theta)
    unit = np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)
    k = wavenumber(cfg.frequencies, v_sound)
    w = np.broadcast_to(np.asarray(weight, float), (T,))
    return ComplexSpectrogram(_primitive_bins(coeffs, w, r, unit, k, order, r_ref), cfg)


def render_scene_spec(scene: Scene, listener, stems: bool = False):
    """Bin-wise sum of all primitive spectrograms at ``listener``.

    ``listener`` is a 3-vector or a per-frame (T, 3) track.  With ``stems`` a
    (K, F, T) array of per-primitive contributions is returned as well.
    """
    pos = positions_at_frames(scene)
    r, unit = relative_geometry(pos, listener)
    W = scene.weights()
    k = wavenumber(scene.stft_config.frequencies, scene.v_sound)
    cfg = scene.stft_config
    total = np.zeros((cfg.n_bins, scene.n_frames), dtype=complex)
    parts = [] if stems else None
    for i, p in enumerate(scene.primitives):
        b = _primitive_bins(p.coeffs, W[i], r[i], unit[i], k, scene.order, scene.r_ref)
        total += b
        if stems:
            parts.append(b)
    spec = ComplexSpectrogram(total, cfg)
    if stems:
        return spec, np.stack(parts)
    return spec


def render_scene(scene: Scene, listener, out_len: int | None = None, stems: bool = False):
    """Waveform received at ``listener`` (optionally with per-primitive stems)."""
    out_len = scene.num_samples if out_len is None else out_len
    if stems:
        spec, parts = render_scene_spec(scene, listener, stems=True)
        return istft(spec, out_len=out_len), istft(parts, scene.stft_config, out_len)
    return istft(render_scene_spec(scene, listener), out_len=out_len)


def render_at_mics(scene: Scene, array: MicArraySpec | np.ndarray, spectrograms: bool = False) -> np.ndarray:
    """Render at every mic; returns (M, L) waveforms or (M, F, T) bins."""
    positions = array.positions if isinstance(array, MicArraySpec) else np.asarray(array, float)
    out = []
    for p in positions:
        s = render_scene_spec(scene, p)
        out.append(s.bins if spectrograms else istft(s, out_len=scene.num_samples))
    return np.stack(out)


# ---------------------------------------------------------------------------
# Field sampling for visualisation
# ---------------------------------------------------------------------------


def field_magnitude_grid(
    scene: Scene,
    xs: np.ndarray,
    ys: np.ndarray,
    z: float,
    band=(1000.0, 2000.0),
    frame: int | None = None,
    primitive: int | None = None,
):
    """Band-averaged |field| on a horizontal grid at height ``z``.

    Cells closer than ``r_min`` to any primitive are returned as NaN.  Uses the
    middle frame unless ``frame`` is given.
    """
    cfg = scene.stft_config
    t = scene.n_frames // 2 if frame is None else frame
    f = cfg.frequencies
    sel = np.nonzero((f >= band[0]) & (f <= band[1]))[0]
    if len(sel) == 0:
        raise ValueError("frequency band contains no STFT bins")
    k = wavenumber(f[sel], scene.v_sound)
    pos = positions_at_frames(scene)[:, t]  # (K, 3)
    W = scene.weights()[:, t]
    X, Yg = np.meshgrid(xs, ys)
    pts = np.stack([X, Yg, np.full_like(X, z)], axis=-1).reshape(-1, 3)
    d = pts[None] - pos[:, None]  # (K, P, 3)
    r = np.linalg.norm(d, axis=-1)
    masked = np.any(r < R_MIN, axis=0)
    r = np.maximum(r, R_MIN)
    unit = d / r[..., None]
    acc = np.zeros((len(sel), len(pts)), dtype=complex)
    prims = range(scene.K) if primitive is None else [primitive]
    orders = harmonic_orders(scene.order)
    for i in prims:
        c = scene.primitives[i].coeffs[:, sel, t]  # (Q, Fs)
        Y = sph_harmonics_unit(scene.order, unit[i])  # (Q, P)
        G = propagation_gains(scene.order, k[:, None], r[i][None, :], scene.r_ref)  # (N+1, Fs, P)
        acc += W[i] * np.einsum("qf,qfp,qp->fp", c, G[orders], Y)
    mag = np.abs(acc).mean(axis=0)
    mag[masked] = np.nan
    return mag.reshape(X.shape)


# ---------------------------------------------------------------------------
# Exterior-domain baseline
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ExteriorField:
    """Single high-order outgoing-wave expansion about ``center``; only valid
    for evaluation outside ``boundary_radius``.

    Coefficients are normalised at ``r_ref`` (the median microphone distance),
    so each basis function is ``h_n(kr) / h_n(k r_ref) Y_nm``.  This keeps the
    coefficients in the time framing of the recordings; decoding applies the
    remaining bulk delay ``(r - r_ref) / c`` to the whole waveform.
    """

    coeffs: np.ndarray  # ((N_b+1)^2, F, T)
    order: int
    center: np.ndarray
    boundary_radius: float
    r_ref: float = 1.0
    config: StftConfig = field(default_factory=StftConfig)
    v_sound: float = 343.0
    metadata: dict = field(default_factory=dict)


def _exterior_basis(order, positions, center, k, r_ref):
    """Basis values ``h_n(kr) / h_n(k r_ref) Y_nm`` as (Q, F, P)."""
    d = np.asarray(positions, float) - np.asarray(center, float)
    r = np.linalg.norm(d, axis=-1)
    if np.any(r <= 0):
        raise DomainError("evaluation point coincides with the expansion centre")
    Y = sph_harmonics_unit(order, d / r[:, None])  # (Q, P)
    G = propagation_gains(order, k[:, None], r[None, :], r_ref, r_min=0.0)  # (N+1, F, P)
    return G[harmonic_orders(order)] * Y[:, None, :]


def exterior_encode(
    mic_signals,
    array: MicArraySpec,
    center=(0.0, 0.0, 0.0),
    order: int = 4,
    boundary_radius: float | None = None,
    cfg: StftConfig = StftConfig(),
    v_sound: float = 343.0,
    ridge: float = 1e-6,
    cond_warn: float = 1e8,
) -> ExteriorField:
    """Least-squares outgoing-wave coefficients from microphone signals.

    ``mic_signals`` are (M, L) waveforms or an (M, F, T) spectrogram stack.
    A trace-normalised ridge keeps low-``kr`` high-order columns in check.
    """
    M = len(array)
    Q = num_harmonics(order)
    if M < Q:
        raise ValueError(f"underdetermined: order {order} needs {Q} mics, got {M}")
    if isinstance(mic_signals, ComplexSpectrogram):
        obs = mic_signals.bins
    else:
        sig = np.asarray(mic_signals)
        obs = sig if np.iscomplexobj(sig) else stft(sig, cfg).bins
    if obs.shape[0] != M:
        raise ValueError("number of signals does not match the array")
    center = np.asarray(center, float)
    rm = np.linalg.norm(array.positions - center, axis=-1)
    if boundary_radius is None:
        boundary_radius = float(rm.min())
    if np.any(rm < boundary_radius):
        raise ValueError("all microphones must lie outside the boundary radius")
    r_ref = float(np.median(rm))
    k = wavenumber(cfg.frequencies, v_sound)
    B = _exterior_basis(order, array.positions, center, k, r_ref)  # (Q, F, M)
    A = np.transpose(B, (1, 2, 0))  # (F, M, Q)
    coeffs = np.zeros((Q,) + obs.shape[1:], dtype=complex)
    conds = np.zeros(len(k))
    for f in range(len(k)):
        if k[f] == 0:
            continue
        Af = A[f]
        N = Af.conj().T @ Af
        lam = ridge * np.real(np.trace(N)) / Q
        conds[f] = np.linalg.cond(N)
        coeffs[:, f, :] = np.linalg.solve(N + lam * np.eye(Q), Af.conj().T @ obs[:, f, :])
    meta = {"max_condition": float(conds.max()), "ridge": ridge, "mic_radius_max": float(rm.max())}
    if conds.max() > cond_warn:
        meta["ill_conditioned"] = True
        warnings.warn(f"exterior encode is ill-conditioned (cond={conds.max():.3g})", RuntimeWarning)
    return ExteriorField(coeffs, order, center, boundary_radius, r_ref, cfg, v_sound, meta)


def exterior_decode_spec(field_: ExteriorField, position) -> np.ndarray:
    """Expansion evaluated per STFT bin at ``position``.

    A position well inside ``r_ref`` needs a time advance larger than the
    frame padding, so these bins are only a faithful per-frame view near the
    microphones; :func:`exterior_decode` is exact for any radius.
    """
    k = wavenumber(field_.config.frequencies, field_.v_sound)
    B = _exterior_basis(field_.order, np.asarray(position, float)[None], field_.center, k, field_.r_ref)
    return np.einsum("qf,qft->ft", B[..., 0], field_.coeffs)


def exterior_decode(field_: ExteriorField, position, out_len: int | None = None) -> np.ndarray:
    """Evaluate the expansion at ``position`` and return the waveform.

    Each order's angular sum is resynthesised at ``r_ref`` and then carried to
    radius ``r`` by its radial transfer function, applied to the whole signal
    so that long delays and dispersive tails do not wrap inside a frame.
    """
    cfg = field_.config
    T = field_.coeffs.shape[-1]
    out_len = (T - 1) * cfg.hop + cfg.window_len if out_len is None else out_len
    d = np.asarray(position, float) - field_.center
    r = float(np.linalg.norm(d))
    if r <= 0:
        raise DomainError("evaluation point coincides with the expansion centre")
    Y = sph_harmonics_unit(field_.order, d / r)  # (Q,)
    shift = abs(r - field_.r_ref) / field_.v_sound * cfg.sample_rate
    n_fft = next_fast_len(2 * (out_len + int(np.ceil(shift)) + cfg.fft_len))
    f = np.fft.rfftfreq(n_fft, 1.0 / cfg.sample_rate)
    H = propagation_gains(field_.order, wavenumber(f, field_.v_sound), r, field_.r_ref, r_min=0.0)
    out = np.zeros(n_fft // 2 + 1, dtype=complex)
    for n in range(field_.order + 1):
        sl = slice(n * n, (n + 1) ** 2)
        ang = np.einsum("q,qft->ft", Y[sl], field_.coeffs[sl])
        x = istft(ang, cfg, out_len)
        out += np.fft.rfft(x, n_fft) * H[n]
    return np.fft.irfft(out, n_fft)[:out_len]


def exterior_guard(field_: ExteriorField, position) -> int:
    """Samples at each end of a decoded waveform that the recordings cannot
    determine: one window plus the travel time from the farthest microphone."""
    cfg = field_.config
    r = float(np.linalg.norm(np.asarray(position, float) - field_.center))
    reach = field_.metadata.get("mic_radius_max", field_.r_ref) + r
    return cfg.window_len + int(np.ceil(reach / field_.v_sound * cfg.sample_rate))


def exterior_probe_error(field_: ExteriorField, truth, positions) -> tuple[float, int]:
    """Pooled relative l2 error of decoded waveforms against ``truth(p)``.

    Compared over the part of the clip the recordings determine (see
    :func:`exterior_guard`).  Probes where ``truth`` raises
    :class:`DomainError` (too close to a source) are skipped; returns the
    error and the number of probes used.
    """
    num = den = 0.0
    used = 0
    for p in np.atleast_2d(np.asarray(positions, float)):
        try:
            ref = truth(p)
        except DomainError:
            continue
        g = exterior_guard(field_, p)
        if 2 * g >= len(ref):
            raise ValueError("clip too short for the decode guard interval")
        dec = exterior_decode(field_, p, len(ref))
        num += float(np.sum((dec[g:-g] - ref[g:-g]) ** 2))
        den += float(np.sum(ref[g:-g] ** 2))
        used += 1
    if used == 0:
        return float("nan"), 0
    return float(np.sqrt(num / den)), used

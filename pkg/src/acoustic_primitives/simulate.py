"""Synthetic ground truth: microphone arrays, scenes with hidden parameters and
the recordings they produce."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .renderer import render_scene_spec
from .scene import (
    JOINT_LAYOUTS,
    OFFSET_SCALE,
    REST_POSE,
    AcousticPrimitive,
    JointTrack,
    MicArraySpec,
    Scene,
    static_track,
)
from .spectral import StftConfig, fractional_delay, istft, stft
from .sphmath import R_MIN, DomainError
from .sphmath import num_harmonics

MOTIONS = ("static", "linear", "circular")


@dataclass(frozen=True)
class SimSpec:
    K: int = 12
    order: int = 2
    clip_seconds: float = 1.0
    mics: int = 128
    mic_radius: float = 1.8
    motion: str = "static"
    source: str = "noise"  # noise | tone
    band: tuple[float, float] = (100.0, 8000.0)
    noise_floor_db: float = -np.inf
    max_offset: float = 0.15
    silent: tuple[int, ...] = ()
    seed: int = 7
    stft: StftConfig = field(default_factory=StftConfig)
    pose_rate: float = 30.0
    r_ref: float = 0.5
    v_sound: float = 343.0

    def __post_init__(self):
        if self.K < 1 or self.order < 0 or self.mics < 1:
            raise ValueError("K >= 1, order >= 0 and mics >= 1 are required")
        if self.motion not in MOTIONS:
            raise ValueError(f"motion must be one of {MOTIONS}")
        if self.source not in ("noise", "tone"):
            raise ValueError("source must be 'noise' or 'tone'")
        if not 0 <= self.max_offset < OFFSET_SCALE * np.sqrt(3):
            raise ValueError("max_offset outside the offset envelope")
        # body extent + offset bound must stay inside the array
        extent = max(np.linalg.norm(p) for p in REST_POSE.values())
        if self.motion == "linear":
            extent += 0.3 * self.clip_seconds
        if self.mic_radius <= extent + OFFSET_SCALE:
            raise ValueError(f"mic_radius must exceed {extent + OFFSET_SCALE:.2f} m")

    @property
    def num_samples(self) -> int:
        return int(round(self.clip_seconds * self.stft.sample_rate))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stft"] = self.stft.to_dict()
        d["band"] = list(self.band)
        d["silent"] = list(self.silent)
        d["noise_floor_db"] = None if np.isinf(self.noise_floor_db) else self.noise_floor_db
        return d


def make_mic_array(M: int, radius: float = 1.8, sample_rate: int = 48000) -> MicArraySpec:
    """``M`` points on a Fibonacci sphere of the given radius (first at +z)."""
    if M < 1:
        raise ValueError("M must be >= 1")
    if M == 1:
        return MicArraySpec(np.array([[0.0, 0.0, radius]]), sample_rate)
    i = np.arange(M)
    z = 1.0 - 2.0 * i / (M - 1)
    rho = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    golden = np.pi * (3.0 - np.sqrt(5.0))
    a = golden * i
    pts = np.stack([rho * np.cos(a), rho * np.sin(a), z], axis=-1) * radius
    return MicArraySpec(pts, sample_rate)


def joint_layout(K: int) -> list[str]:
    """Joint per primitive; small scenes use distinct joints."""
    if K in JOINT_LAYOUTS:
        return list(JOINT_LAYOUTS[K])
    if K < 9:
        return list(JOINT_LAYOUTS[9][:K])
    base = JOINT_LAYOUTS[12]
    return [base[i % len(base)] for i in range(K)]


def make_tracks(joints, motion: str, seconds: float, pose_rate: float = 30.0) -> dict[str, JointTrack]:
    n = int(np.ceil(seconds * pose_rate - 1e-9)) + 1
    t = np.arange(n) / pose_rate
    tracks = {}
    for j in dict.fromkeys(joints):
        p = np.asarray(REST_POSE[j], float)
        if motion == "static":
            pos = np.repeat(p[None], n, axis=0)
        elif motion == "linear":
            pos = p[None] + np.outer(t, [0.3, 0.0, 0.0])
        else:
            ang = 0.5 * np.pi * t
            c, s = np.cos(ang), np.sin(ang)
            pos = np.stack([c * p[0] - s * p[1], s * p[0] + c * p[1], np.full(n, p[2])], axis=-1)
        tracks[j] = JointTrack(j, pos)
    return tracks


def band_limited_source(rng, n: int, sample_rate: int, band, kind: str = "noise") -> np.ndarray:
    if kind == "tone":
        f0 = rng.uniform(*band)
        return np.sin(2 * np.pi * f0 * np.arange(n) / sample_rate + rng.uniform(0, 2 * np.pi))
    X = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / sample_rate)
    X[(f < band[0]) | (f > band[1])] = 0.0
    x = np.fft.irfft(X, n)
    return x / np.sqrt(np.mean(x * x))


def random_offsets(rng, K: int, max_offset: float) -> np.ndarray:
    """Raw offsets whose effective offset lies in a ball of radius max_offset."""
    v = rng.standard_normal((K, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    rad = max_offset * rng.uniform(0.0, 1.0, K) ** (1 / 3)
    delta = v * rad[:, None]
    return np.arctanh(delta / OFFSET_SCALE)


def make_scene(spec: SimSpec = SimSpec()) -> tuple[Scene, dict]:
    """Random scene plus a ground-truth record for test oracles."""
    rng = np.random.default_rng(spec.seed)
    cfg = spec.stft
    L = spec.num_samples
    joints = joint_layout(spec.K)
    tracks = make_tracks(joints, spec.motion, spec.clip_seconds, spec.pose_rate)
    Q = num_harmonics(spec.order)
    # higher orders carry less energy, as for real radiators
    order_gain = np.array([0.5 ** int(np.sqrt(q)) for q in range(Q)])
    u = random_offsets(rng, spec.K, spec.max_offset)
    # DC renders to silence; above 0.9 Nyquist only far window leakage remains
    f = cfg.frequencies
    quiet = (f == 0) | (f > 0.45 * cfg.sample_rate)
    prims = []
    for i in range(spec.K):
        sig = np.stack([band_limited_source(rng, L, cfg.sample_rate, spec.band, spec.source) for _ in range(Q)])
        c = stft(sig, cfg).bins * (0.1 * order_gain)[:, None, None]
        c[:, quiet] = 0.0
        if i in spec.silent:
            c[:] = 0.0
        prims.append(AcousticPrimitive(joints[i], c, u[i]))
    scene = Scene(tracks, tuple(prims), cfg, L, spec.r_ref, spec.v_sound, spec.pose_rate)
    truth = {
        "sim_spec": spec.to_dict(),
        "offset_raw": u.tolist(),
        "offsets": (OFFSET_SCALE * np.tanh(u)).tolist(),
        "labels": [i not in spec.silent for i in range(spec.K)],
        "joints": joints,
    }
    return scene, truth


def _noise(rng, clean: np.ndarray, noise_floor_db: float) -> np.ndarray:
    rms = np.sqrt(np.mean(clean**2, axis=-1, keepdims=True))
    return rng.standard_normal(clean.shape) * rms * 10 ** (noise_floor_db / 20)


def synthesize_spectrograms(
    scene: Scene, array: MicArraySpec, noise_floor_db: float = -np.inf, seed: int = 0
) -> np.ndarray:
    """Rendered (M, F, T) spectrograms at the mics, before resynthesis.

    Noise is white noise in the waveform domain, added through its STFT.
    """
    bins = np.stack([render_scene_spec(scene, p).bins for p in array.positions])
    return add_noise_spectrograms(bins, scene.stft_config, scene.num_samples, noise_floor_db, seed)


def add_noise_spectrograms(bins, cfg: StftConfig, num_samples: int, noise_floor_db: float, seed: int = 0):
    """Add white noise ``noise_floor_db`` below each channel's RMS, in the STFT domain."""
    if not np.isfinite(noise_floor_db):
        return bins
    clean = istft(bins, cfg, num_samples)
    return bins + stft(_noise(np.random.default_rng(seed), clean, noise_floor_db), cfg).bins


def synthesize_recordings(
    scene: Scene, array: MicArraySpec, noise_floor_db: float = -np.inf, seed: int = 0
) -> np.ndarray:
    """(M, L) recordings: rendered signal plus white noise ``noise_floor_db``
    below each channel's RMS."""
    out = np.stack(
        [istft(render_scene_spec(scene, p), out_len=scene.num_samples) for p in array.positions]
    )
    if np.isfinite(noise_floor_db):
        out = out + _noise(np.random.default_rng(seed), out, noise_floor_db)
    return out


def point_sources(n: int, band=(200.0, 500.0), clip_seconds: float = 0.25, seed: int = 0,
                  sample_rate: int = 48000) -> np.ndarray:
    """``n`` independent unit-RMS band-limited noise signals, (n, L)."""
    rng = np.random.default_rng(seed)
    L = int(round(clip_seconds * sample_rate))
    return np.stack([band_limited_source(rng, L, sample_rate, band) for _ in range(n)])


def monopole_field(positions, signals, listener, r_ref: float = 0.5, v_sound: float = 343.0,
                   sample_rate: int = 48000) -> np.ndarray:
    """Pressure of point monopoles at ``listener``, computed in the time domain.

    Source ``i`` contributes ``s_i(t - (r_i - r_ref) / c) * r_ref / r_i``, the
    same normalisation as an order-0 primitive, so this is an oracle for the
    renderer that never touches an STFT.
    """
    pos = np.atleast_2d(np.asarray(positions, float))
    r = np.linalg.norm(np.asarray(listener, float) - pos, axis=-1)
    if np.any(r < R_MIN):
        raise DomainError(f"listener within r_min={R_MIN} m of a source")
    out = np.zeros(np.shape(signals)[-1])
    for ri, s in zip(r, signals):
        out += fractional_delay(s, (ri - r_ref) / v_sound * sample_rate) * (r_ref / ri)
    return out


def monopole_scene(positions, signals, cfg: StftConfig = StftConfig(), r_ref: float = 0.5,
                   v_sound: float = 343.0) -> Scene:
    """Static order-0 primitives reproducing :func:`monopole_field`.

    Coefficients are the source STFTs divided by ``Y_00`` and scaled by ``K``
    to undo the equal softmax weights ``1/K``.
    """
    pos = np.atleast_2d(np.asarray(positions, float))
    signals = np.asarray(signals, float)
    K, L = len(pos), signals.shape[-1]
    y00 = 0.5 / np.sqrt(np.pi)
    tracks, prims = {}, []
    for i, p in enumerate(pos):
        name = f"p{i}"
        tracks[name] = static_track(name, p, L / cfg.sample_rate)
        prims.append(AcousticPrimitive(name, stft(signals[i], cfg).bins[None] * (K / y00)))
    return Scene(tracks, tuple(prims), cfg, L, r_ref, v_sound, 30.0)

"""Scene data model: joint tracks, acoustic primitives, microphone arrays,
coordinate transforms and JSON persistence."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .spectral import StftConfig
from .sphmath import R_MIN, V_SOUND, DomainError, num_harmonics

OFFSET_SCALE = 0.2
SCHEMA_NAME = "acoustic-primitives/scene"
SCHEMA_VERSION = 1
INLINE_LIMIT = 250_000
_TANH_MAX = np.nextafter(1.0, 0.0)

# Primitive-to-joint layouts for 5, 9 and 12 primitives.
JOINT_LAYOUTS = {
    5: ["head", "left_hand", "right_hand", "left_foot", "right_foot"],
    9: [
        "head", "left_hand", "right_hand", "left_foot", "right_foot",
        "left_shoulder", "right_shoulder", "left_hip", "right_hip",
    ],
    12: [
        "head", "head", "left_hand", "left_hand", "right_hand", "right_hand",
        "left_foot", "right_foot", "left_shoulder", "right_shoulder", "left_hip", "right_hip",
    ],
}

# Neutral standing pose (metres), origin at the body centre.
REST_POSE = {
    "head": (0.0, 0.0, 0.70),
    "left_shoulder": (-0.20, 0.0, 0.45),
    "right_shoulder": (0.20, 0.0, 0.45),
    "left_hand": (-0.35, 0.15, 0.0),
    "right_hand": (0.35, 0.15, 0.0),
    "left_hip": (-0.12, 0.0, -0.05),
    "right_hip": (0.12, 0.0, -0.05),
    "left_foot": (-0.15, 0.05, -0.80),
    "right_foot": (0.15, 0.05, -0.80),
}


class SchemaError(ValueError):
    """Scene file does not match the schema; the message names the field path."""


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class JointTrack:
    joint_id: str
    positions: np.ndarray  # (T_p, 3)

    def __post_init__(self):
        pos = _frozen(self.positions)
        if pos.ndim != 2 or pos.shape[1] != 3 or len(pos) == 0:
            raise ValueError(f"track {self.joint_id!r}: positions must have shape (T, 3)")
        if not np.all(np.isfinite(pos)):
            raise ValueError(f"track {self.joint_id!r}: non-finite coordinates")
        object.__setattr__(self, "positions", pos)


@dataclass(frozen=True, eq=False)
class AcousticPrimitive:
    """One primitive: harmonic coefficients per time-frequency bin attached to
    a joint, a raw offset and per-frame weight logits."""

    joint: str
    coeffs: np.ndarray  # ((N+1)^2, F, T) complex
    offset_raw: np.ndarray = field(default_factory=lambda: np.zeros(3))
    weight_logits: np.ndarray | None = None  # (T,)

    def __post_init__(self):
        c = _frozen(self.coeffs, complex)
        if c.ndim != 3:
            raise ValueError("coeffs must have shape ((N+1)^2, F, T)")
        order = int(round(np.sqrt(c.shape[0]))) - 1
        if num_harmonics(order) != c.shape[0]:
            raise ValueError(f"{c.shape[0]} harmonic channels is not a square number")
        object.__setattr__(self, "coeffs", c)
        u = _frozen(self.offset_raw)
        if u.shape != (3,):
            raise ValueError("offset_raw must be a 3-vector")
        object.__setattr__(self, "offset_raw", u)
        wl = np.zeros(c.shape[2]) if self.weight_logits is None else self.weight_logits
        wl = _frozen(wl)
        if wl.shape != (c.shape[2],):
            raise ValueError("weight_logits must have one entry per STFT frame")
        object.__setattr__(self, "weight_logits", wl)

    @property
    def order(self) -> int:
        return int(round(np.sqrt(self.coeffs.shape[0]))) - 1

    @property
    def offset(self) -> np.ndarray:
        return apply_offset(self.offset_raw)


@dataclass(frozen=True, eq=False)
class MicArraySpec:
    positions: np.ndarray  # (M, 3)
    sample_rate: int = 48000

    def __post_init__(self):
        pos = _frozen(self.positions)
        if pos.ndim != 2 or pos.shape[1] != 3 or len(pos) < 1:
            raise ValueError("mic positions must have shape (M, 3) with M >= 1")
        if len(pos) > 1:
            d = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
            d[np.diag_indices(len(pos))] = np.inf
            if d.min() == 0:
                raise ValueError("mic positions must be distinct")
        object.__setattr__(self, "positions", pos)

    def __len__(self) -> int:
        return len(self.positions)

    def subset(self, idx) -> "MicArraySpec":
        return MicArraySpec(self.positions[np.asarray(idx)], self.sample_rate)


@dataclass(frozen=True, eq=False)
class Scene:
    tracks: dict[str, JointTrack]
    primitives: tuple[AcousticPrimitive, ...]
    stft_config: StftConfig = field(default_factory=StftConfig)
    num_samples: int = 48000
    r_ref: float = 0.5
    v_sound: float = V_SOUND
    pose_rate: float = 30.0

    def __post_init__(self):
        prims = tuple(self.primitives)
        object.__setattr__(self, "primitives", prims)
        if not prims:
            raise ValueError("a scene needs at least one primitive")
        T = self.stft_config.n_frames(self.num_samples)
        F = self.stft_config.n_bins
        orders = {p.order for p in prims}
        if len(orders) != 1:
            raise ValueError("all primitives must share one harmonic order")
        for i, p in enumerate(prims):
            if p.coeffs.shape[1:] != (F, T):
                raise ValueError(
                    f"primitive {i}: coefficient grid {p.coeffs.shape[1:]} does not match STFT grid {(F, T)}"
                )
            if p.joint not in self.tracks:
                raise ValueError(f"primitive {i}: unknown joint {p.joint!r}")
        if self.r_ref <= 0 or self.v_sound <= 0 or self.pose_rate <= 0:
            raise ValueError("r_ref, v_sound and pose_rate must be positive")

    @property
    def order(self) -> int:
        return self.primitives[0].order

    @property
    def K(self) -> int:
        return len(self.primitives)

    @property
    def n_frames(self) -> int:
        return self.stft_config.n_frames(self.num_samples)

    @property
    def frame_times(self) -> np.ndarray:
        return self.stft_config.frame_times(self.n_frames)

    @property
    def sample_rate(self) -> int:
        return self.stft_config.sample_rate

    def coeff_array(self) -> np.ndarray:
        """All coefficients stacked, shape (K, Q, F, T)."""
        return np.stack([p.coeffs for p in self.primitives])

    def offset_raw_array(self) -> np.ndarray:
        return np.stack([p.offset_raw for p in self.primitives])

    def logits_array(self) -> np.ndarray:
        return np.stack([p.weight_logits for p in self.primitives])

    def weights(self) -> np.ndarray:
        return primitive_weights(self.logits_array())

    def with_params(self, coeffs=None, offset_raw=None, logits=None) -> "Scene":
        """New scene with replaced parameter arrays (stacked over primitives)."""
        prims = []
        for i, p in enumerate(self.primitives):
            prims.append(
                replace(
                    p,
                    coeffs=p.coeffs if coeffs is None else coeffs[i],
                    offset_raw=p.offset_raw if offset_raw is None else offset_raw[i],
                    weight_logits=p.weight_logits if logits is None else logits[i],
                )
            )
        return replace(self, primitives=tuple(prims))


# ---------------------------------------------------------------------------
# Parameter transforms
# ---------------------------------------------------------------------------


def apply_offset(u) -> np.ndarray:
    """Bounded offset ``0.2 * tanh(u)`` in metres, strictly inside +-0.2."""
    # tanh rounds to exactly 1 for |u| > ~19; keep the bound strict
    t = np.clip(np.tanh(np.asarray(u, dtype=float)), -_TANH_MAX, _TANH_MAX)
    return OFFSET_SCALE * t


def primitive_weights(logits) -> np.ndarray:
    """Softmax across the primitive axis (axis 0) of a ``(K, T)`` array."""
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def to_listener_spherical(primitive_pos, listener_pos, r_min: float = R_MIN):
    """Listener position relative to a primitive as ``(r, theta, phi)``.

    Broadcasts over leading dimensions; ``phi`` is wrapped into ``[0, 2 pi)``.
    """
    d = np.asarray(listener_pos, dtype=float) - np.asarray(primitive_pos, dtype=float)
    r = np.linalg.norm(d, axis=-1)
    if np.any(r < r_min):
        raise DomainError(f"listener within r_min={r_min} m of a primitive (r={float(np.min(r)):.4g} m)")
    # arctan2 keeps full precision near the poles, where arccos(z / r) does not
    theta = np.arctan2(np.hypot(d[..., 0], d[..., 1]), d[..., 2])
    phi = np.mod(np.arctan2(d[..., 1], d[..., 0]), 2 * np.pi)
    # mod of a tiny negative angle rounds up to exactly 2 pi
    phi = np.where(phi >= 2 * np.pi, 0.0, phi)
    return r, theta, phi


def from_spherical(r, theta, phi) -> np.ndarray:
    r, theta, phi = (np.asarray(a, dtype=float) for a in (r, theta, phi))
    st = np.sin(theta)
    return np.stack([r * st * np.cos(phi), r * st * np.sin(phi), r * np.cos(theta)], axis=-1)


def interpolate_track(track: JointTrack, times, pose_rate: float) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    t_pose = np.arange(len(track.positions)) / pose_rate
    eps = 1e-9
    if np.any(times < -eps) or np.any(times > t_pose[-1] + eps):
        raise ValueError(
            f"track {track.joint_id!r} covers [0, {t_pose[-1]:.4f}] s; requested "
            f"[{times.min():.4f}, {times.max():.4f}] s"
        )
    if len(t_pose) == 1:
        return np.repeat(track.positions, len(times), axis=0)
    return np.stack([np.interp(times, t_pose, track.positions[:, c]) for c in range(3)], axis=-1)


def base_positions_at_frames(scene: Scene, frame_times=None) -> np.ndarray:
    """Joint positions (without offsets) per primitive and frame, (K, T, 3)."""
    times = scene.frame_times if frame_times is None else frame_times
    cache = {}
    out = []
    for p in scene.primitives:
        if p.joint not in cache:
            cache[p.joint] = interpolate_track(scene.tracks[p.joint], times, scene.pose_rate)
        out.append(cache[p.joint])
    return np.stack(out)


def positions_at_frames(scene: Scene, frame_times=None) -> np.ndarray:
    """Primitive positions per frame, (K, T, 3): interpolated joint + offset."""
    base = base_positions_at_frames(scene, frame_times)
    return base + apply_offset(scene.offset_raw_array())[:, None, :]


def static_track(joint_id: str, position, duration: float, pose_rate: float = 30.0) -> JointTrack:
    n = int(np.ceil(duration * pose_rate - 1e-9)) + 1
    return JointTrack(joint_id, np.repeat(np.asarray(position, float)[None], n, axis=0))


# ---------------------------------------------------------------------------
# JSON persistence
# ---------------------------------------------------------------------------


def _complex_to_pairs(a: np.ndarray) -> list:
    flat = a.reshape(-1)
    return [[float(z.real), float(z.imag)] for z in flat]


def scene_to_dict(scene: Scene, coeffs_file: str | None = None) -> dict:
    prims = []
    for i, p in enumerate(scene.primitives):
        entry = {
            "joint": p.joint,
            "offset_raw": [float(v) for v in p.offset_raw],
            "weight_logits": [float(v) for v in p.weight_logits],
        }
        if coeffs_file is None:
            entry["coeffs"] = {"shape": list(p.coeffs.shape), "data": _complex_to_pairs(p.coeffs)}
        else:
            entry["coeffs"] = {"shape": list(p.coeffs.shape), "file": coeffs_file, "index": i}
        prims.append(entry)
    return {
        "schema": SCHEMA_NAME,
        "version": SCHEMA_VERSION,
        "stft": scene.stft_config.to_dict(),
        "num_samples": scene.num_samples,
        "r_ref": scene.r_ref,
        "v_sound": scene.v_sound,
        "pose_rate": scene.pose_rate,
        "order": scene.order,
        "tracks": [
            {"joint_id": t.joint_id, "positions": t.positions.tolist()} for t in scene.tracks.values()
        ],
        "primitives": prims,
    }


def save_scene(path, scene: Scene, inline: bool | None = None) -> Path:
    """Write a scene as JSON.

    Coefficient grids are stored inline as ``[re, im]`` pairs; when the total
    number of coefficients exceeds ``INLINE_LIMIT`` (or ``inline=False``) they
    go to a ``<name>.coeffs.npy`` file next to the JSON instead.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    total = sum(p.coeffs.size for p in scene.primitives)
    if inline is None:
        inline = total <= INLINE_LIMIT
    coeffs_file = None
    if not inline:
        coeffs_file = path.name.rsplit(".", 1)[0] + ".coeffs.npy"
        np.save(path.parent / coeffs_file, scene.coeff_array(), allow_pickle=False)
    text = json.dumps(scene_to_dict(scene, coeffs_file), separators=(",", ":"))
    path.write_text(text)
    return path


def _req(d: dict, key: str, where: str):
    if not isinstance(d, dict) or key not in d:
        raise SchemaError(f"missing field '{where}{key}'")
    return d[key]


def _num(d: dict, key: str, where: str, kind=float):
    v = _req(d, key, where)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SchemaError(f"field '{where}{key}' must be a number")
    if kind is int and int(v) != v:
        raise SchemaError(f"field '{where}{key}' must be an integer")
    return kind(v)


def scene_from_dict(d: dict, base_dir: Path | None = None) -> Scene:
    if _req(d, "schema", "") != SCHEMA_NAME:
        raise SchemaError(f"field 'schema' must be {SCHEMA_NAME!r}")
    if _num(d, "version", "", int) != SCHEMA_VERSION:
        raise SchemaError(f"unsupported scene version {d['version']}")
    st = _req(d, "stft", "")
    cfg = StftConfig(
        _num(st, "window_len", "stft.", int),
        _num(st, "hop", "stft.", int),
        _num(st, "fft_len", "stft.", int),
        _num(st, "sample_rate", "stft.", int),
    )
    num_samples = _num(d, "num_samples", "", int)
    r_ref = _num(d, "r_ref", "")
    v_sound = _num(d, "v_sound", "")
    pose_rate = _num(d, "pose_rate", "")
    order = _num(d, "order", "", int)
    tracks = {}
    for i, t in enumerate(_req(d, "tracks", "")):
        jid = _req(t, "joint_id", f"tracks[{i}].")
        try:
            tracks[jid] = JointTrack(jid, _req(t, "positions", f"tracks[{i}]."))
        except ValueError as exc:
            raise SchemaError(f"tracks[{i}].positions: {exc}") from None
    sidecars: dict[str, np.ndarray] = {}
    prims = []
    for i, p in enumerate(_req(d, "primitives", "")):
        where = f"primitives[{i}]."
        c = _req(p, "coeffs", where)
        shape = tuple(_req(c, "shape", where + "coeffs."))
        if len(shape) != 3 or shape[0] != num_harmonics(order):
            raise SchemaError(f"field '{where}coeffs.shape' inconsistent with order {order}")
        if "data" in c:
            arr = np.asarray(c["data"], dtype=float)
            if arr.shape != (int(np.prod(shape)), 2):
                raise SchemaError(f"field '{where}coeffs.data' has wrong size")
            coeffs = (arr[:, 0] + 1j * arr[:, 1]).reshape(shape)
        elif "file" in c:
            fname = c["file"]
            if fname not in sidecars:
                fp = (base_dir or Path(".")) / fname
                if not fp.exists():
                    raise SchemaError(f"field '{where}coeffs.file': {fp} not found")
                sidecars[fname] = np.load(fp, allow_pickle=False)
            coeffs = sidecars[fname][_num(c, "index", where + "coeffs.", int)]
            if coeffs.shape != shape:
                raise SchemaError(f"field '{where}coeffs.file' has shape {coeffs.shape}, expected {shape}")
        else:
            raise SchemaError(f"missing field '{where}coeffs.data'")
        try:
            prims.append(
                AcousticPrimitive(
                    _req(p, "joint", where),
                    coeffs,
                    np.asarray(_req(p, "offset_raw", where), dtype=float),
                    np.asarray(_req(p, "weight_logits", where), dtype=float),
                )
            )
        except ValueError as exc:
            raise SchemaError(f"{where[:-1]}: {exc}") from None
    try:
        return Scene(tracks, tuple(prims), cfg, num_samples, r_ref, v_sound, pose_rate)
    except ValueError as exc:
        raise SchemaError(str(exc)) from None


def load_scene(path) -> Scene:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from None
    return scene_from_dict(d, path.parent)


def save_mic_array(path, array: MicArraySpec) -> None:
    Path(path).write_text(
        json.dumps({"sample_rate": array.sample_rate, "positions": array.positions.tolist()})
    )


def load_mic_array(path) -> MicArraySpec:
    d = json.loads(Path(path).read_text())
    return MicArraySpec(np.asarray(_req(d, "positions", "")), int(_req(d, "sample_rate", "")))

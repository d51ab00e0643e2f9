"""Independent oracles shared by the unit and acceptance tests."""

import numpy as np

from acoustic_primitives.fitting import gradients
from acoustic_primitives.losses import LossWeights
from acoustic_primitives.renderer import render_scene_spec
from acoustic_primitives.scene import AcousticPrimitive, Scene, static_track
from acoustic_primitives.simulate import make_mic_array
from acoustic_primitives.spectral import StftConfig

# criterion number -> "criterion N: PASS|FAIL detail", printed after the run
ACCEPTANCE: dict[int, str] = {}

# 16 frequency bins: window 16, hop 4, FFT 30
DESK_CFG = StftConfig(16, 4, 30, 48000)


def desk_scene(seed, K=2, order=1, L=2048):
    """Random small scene on the 16-bin grid with static primitives."""
    rng = np.random.default_rng(seed)
    cfg = DESK_CFG
    T = cfg.n_frames(L)
    Q = (order + 1) ** 2
    joints = [f"j{i}" for i in range(K)]
    tracks = {j: static_track(j, rng.uniform(-0.3, 0.3, 3), L / cfg.sample_rate) for j in joints}
    prims = tuple(
        AcousticPrimitive(
            j,
            0.1 * (rng.standard_normal((Q, cfg.n_bins, T)) + 1j * rng.standard_normal((Q, cfg.n_bins, T))),
            0.5 * rng.standard_normal(3),
            rng.standard_normal(T),
        )
        for j in joints
    )
    return Scene(tracks, prims, cfg, L)


def finite_difference_trial(seed, n_dirs=4, rel_eps=1e-5, lam=LossWeights(), gt_scale=1.0):
    """Relative error of analytic against central-difference gradients.

    Each parameter class is probed along ``n_dirs`` random directions with a
    step of ``rel_eps`` times the norm of that class, so the loss change sits
    far above roundoff even for classes with thousands of entries.  The
    target recordings are independent noise at the scale of the prediction.
    Returns ``{class: relative l2 error over the directions}``.
    """
    rng = np.random.default_rng(10_000 + seed)
    sc = desk_scene(seed)
    arr = make_mic_array(4, 1.0)
    gt = gt_scale * rng.standard_normal((len(arr), sc.num_samples))
    labels = np.array([1.0, 0.0])
    params = {"C": sc.coeff_array(), "u": sc.offset_raw_array(), "logits": sc.logits_array()}
    _, _, g = gradients(sc, arr, gt, labels, lam, **params)
    grads = {"C": g["coeffs"], "u": g["offset_raw"], "logits": g["weight_logits"]}
    names = {"C": "coeffs", "u": "offset_raw", "logits": "weight_logits"}

    def f(name, value):
        return gradients(sc, arr, gt, labels, lam, **{**params, name: value})[0]

    out = {}
    for name, base in params.items():
        fd, an = [], []
        for _ in range(n_dirs):
            d = rng.standard_normal(base.shape)
            if np.iscomplexobj(base):
                d = d + 1j * rng.standard_normal(base.shape)
            h = rel_eps * np.linalg.norm(base) / np.linalg.norm(d)
            fd.append((f(name, base + h * d) - f(name, base - h * d)) / (2 * h))
            # g holds dL/dRe + i dL/dIm, so the directional derivative is Re(conj(g) d)
            an.append(float(np.sum(np.real(np.conj(grads[name]) * d))))
        fd, an = np.array(fd), np.array(an)
        out[names[name]] = float(np.linalg.norm(fd - an) / np.linalg.norm(an))
    return out


def render_columns(scene, mic, f, t):
    """Design row for one bin: the rendered value at ``mic`` for each unit
    coefficient, built by rendering one-hot scenes (weights included)."""
    C0 = scene.coeff_array()
    K, Q = C0.shape[:2]
    row = np.empty(K * Q, dtype=complex)
    for k in range(K):
        for q in range(Q):
            C = np.zeros_like(C0)
            C[k, q, f, t] = 1.0
            row[k * Q + q] = render_scene_spec(scene.with_params(coeffs=C), mic).bins[f, t]
    return row

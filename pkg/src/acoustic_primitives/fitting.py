"""Inverse rendering: recover primitive coefficients, offsets and weight logits
from microphone observations.

Coefficients enter the renderer linearly and are solved per time-frequency bin
by ridge-regularised least squares.  Offsets and weight logits are refined by
gradient descent with a backtracking (Armijo) line search, using analytic
gradients of the training loss through the renderer.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .losses import LossWeights, _cts, combine, loss_total, loss_total_with_grad
from .metrics import sdr
from .scene import OFFSET_SCALE, MicArraySpec, Scene, apply_offset, base_positions_at_frames, primitive_weights
from .spectral import ComplexSpectrogram, StftConfig, istft, istft_adjoint, istft_ls, istft_ls_adjoint, stft, stft_adjoint
from .sphmath import DomainError, harmonic_orders, num_harmonics, propagation_gains, sph_harmonics_unit, wavenumber

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FitConfig:
    max_iters: int = 10
    grad_steps: int = 5
    learning_rate: float = 0.1  # initial offset trial step on the sup-normalised gradient
    logit_step: float = 1.0
    logit_steps: int = 100
    convergence_tol: float = 1e-4
    max_shift: int = 16
    ridge: float = 1e-30
    rng_seed: int = 0
    armijo_c: float = 1e-4
    max_halvings: int = 10
    fit_offsets: bool = True
    fit_weights: bool = True
    warm_bands: tuple[float, ...] = (500.0, 1000.0, 2000.0, 4000.0)
    warm_iters: int = 30
    warm_frames: int = 16
    share_jitter: float = 0.02  # metres, spread for primitives sharing a joint
    refine_iters: int = 40  # waveform-domain coefficient refinement for waveform input
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.max_iters < 1 or self.grad_steps < 0 or self.max_shift < 0:
            raise ValueError("max_iters >= 1, grad_steps >= 0 and max_shift >= 0 required")
        if self.learning_rate <= 0 or self.convergence_tol <= 0 or self.ridge < 0:
            raise ValueError("learning_rate and convergence_tol must be positive, ridge non-negative")


@dataclass(frozen=True)
class ClipLabels:
    """Which primitives emit sound in the clip."""

    y: tuple[bool, ...]

    def __post_init__(self):
        y = tuple(bool(v) for v in self.y)
        if not any(y):
            raise ValueError("at least one primitive must be labelled active")
        object.__setattr__(self, "y", y)

    def as_array(self) -> np.ndarray:
        return np.array(self.y, dtype=float)


@dataclass
class FitResult:
    scene: Scene
    history: list[dict]
    converged: bool
    iterations: int
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Geometry helpers
# ---------------------------------------------------------------------------


def _listener_tracks(array, T: int) -> np.ndarray:
    """Mic positions as (M, T, 3) tracks."""
    pos = np.asarray(array.positions if isinstance(array, MicArraySpec) else array, float)
    if pos.ndim == 2:
        return np.broadcast_to(pos[:, None, :], (len(pos), T, 3))
    return pos


def relative_vectors(scene: Scene, array, offset_raw=None) -> np.ndarray:
    """Listener-minus-primitive vectors, shape (M, K, T, 3)."""
    u = scene.offset_raw_array() if offset_raw is None else offset_raw
    pos = base_positions_at_frames(scene) + apply_offset(u)[:, None, :]
    mics = _listener_tracks(array, scene.n_frames)
    return mics[:, None, :, :] - pos[None]


# ---------------------------------------------------------------------------
# Linear coefficient solve
# ---------------------------------------------------------------------------


def _design(rel_t: np.ndarray, order: int, k: np.ndarray, r_ref: float, grad: bool = False):
    """Unweighted render matrix for one frame, (F, M, K*Q).

    With ``grad`` also its derivative with respect to the mic-minus-primitive
    vector, (F, M, K*Q, 3).
    """
    M, K, _ = rel_t.shape
    Q = num_harmonics(order)
    orders = harmonic_orders(order)
    r = np.linalg.norm(rel_t, axis=-1)  # (M, K)
    if np.any(r < 0.05):
        raise DomainError("a microphone is within r_min of a primitive")
    unit = rel_t / r[..., None]
    if not grad:
        Y = sph_harmonics_unit(order, unit)  # (Q, M, K)
        G = propagation_gains(order, k[:, None, None], r[None], r_ref)  # (N+1, F, M, K)
        B = G[orders] * Y[:, None]  # (Q, F, M, K)
        return np.transpose(B, (1, 2, 3, 0)).reshape(len(k), M, K * Q)
    Y, dY = sph_harmonics_unit(order, unit, grad=True)  # (Q, M, K), (Q, 3, M, K)
    G, dG = propagation_gains(order, k[:, None, None], r[None], r_ref, grad=True)
    Gq, dGq = G[orders], dG[orders]
    B = Gq * Y[:, None]
    ut = np.moveaxis(unit, -1, 0)  # (3, M, K)
    # angular part: tangential component of dY/du divided by r
    dYt = (dY - np.sum(dY * ut[None], axis=1, keepdims=True) * ut[None]) / r
    dB = dGq[:, :, None] * Y[:, None, None] * ut[None, None] + Gq[:, :, None] * dYt[:, None]  # (Q, F, 3, M, K)
    B = np.transpose(B, (1, 2, 3, 0)).reshape(len(k), M, K * Q)
    dB = np.transpose(dB, (1, 3, 4, 0, 2)).reshape(len(k), M, K * Q, 3)
    return B, dB


def _geometry_groups(rel):
    """First frame of each distinct geometry and the group index of every frame."""
    T = rel.shape[2]
    flat = np.ascontiguousarray(np.transpose(rel, (2, 0, 1, 3)).reshape(T, -1))
    _, first, inverse = np.unique(flat, axis=0, return_index=True, return_inverse=True)
    return first, inverse.reshape(-1)


def _render_design(C, W, rel, order, k, r_ref):
    """(M, F, T) mic spectrograms through per-geometry design matrices."""
    M, K, T, _ = rel.shape
    F = len(k)
    V = (W[:, None, None, :] * C).transpose(2, 0, 1, 3).reshape(F, -1, T)
    Z = np.empty((M, F, T), dtype=complex)
    first, inverse = _geometry_groups(rel)
    for g, t0 in enumerate(first):
        frames = np.nonzero(inverse == g)[0]
        B = _design(rel[:, :, t0], order, k, r_ref)
        # contiguous operands keep matmul on the BLAS path
        Z[:, :, frames] = (B @ np.ascontiguousarray(V[:, :, frames])).transpose(1, 0, 2)
    return Z


DEFAULT_RIDGE = 1e-30
RANK_COND = 1e12


def solve_coefficients_ls(
    observations,
    rel: np.ndarray,
    order: int,
    weights: np.ndarray,
    cfg,
    r_ref: float = 0.5,
    v_sound: float = 343.0,
    ridge: float = DEFAULT_RIDGE,
):
    """Per-bin ridge least squares for all primitive coefficients.

    Each bin's design matrix is column-equilibrated and the ridge is appended
    as extra rows, so the system is solved by QR without forming the normal
    equations.  Closely spaced primitives seen from afar make low-frequency
    bins very ill-conditioned (condition numbers near 1e10 at 100 Hz for a
    12-primitive body), which squaring would push past double precision.

    Parameters
    ----------
    observations : ndarray (M, F, T) complex
        Observed spectrograms at the microphones.
    rel : ndarray (M, K, T, 3)
        Microphone-minus-primitive vectors per frame.
    order : int
    weights : ndarray (K, T)
        Fixed primitive weights.
    ridge : float
        Tikhonov weight relative to the unit column norms of the equilibrated
        design.  It acts on the weighted coefficients ``W * c``.  The default
        only guards exactly singular bins; values above about 1e-20 bias the
        poorly conditioned low-frequency bins.

    Returns
    -------
    coeffs : ndarray (K, Q, F, T)
    diagnostics : dict
        ``frame_groups``, ``rank_deficient_bins`` (condition number above
        ``RANK_COND`` or fewer observations than unknowns), ``max_condition``
        and ``unknowns``.
    """
    Yobs = observations.bins if isinstance(observations, ComplexSpectrogram) else np.asarray(observations)
    M, K, T, _ = rel.shape
    if Yobs.shape != (M, cfg.n_bins, T):
        raise ValueError(f"observations have shape {Yobs.shape}, expected {(M, cfg.n_bins, T)}")
    return _solve_bins(Yobs, rel, order, weights, wavenumber(cfg.frequencies, v_sound), r_ref, ridge)


def _solve_bins(Yobs, rel, order, weights, k, r_ref, ridge):
    """LS core on the bins whose wavenumbers are ``k``; Yobs is (M, len(k), T)."""
    M, K, T, _ = rel.shape
    Q = num_harmonics(order)
    F = len(k)
    n_unk = K * Q
    if M < n_unk and ridge == 0:
        raise ValueError(f"underdetermined: {M} observations for {n_unk} unknowns and ridge disabled")
    # frames sharing identical geometry share one factorisation
    first, inverse = _geometry_groups(rel)
    V = np.zeros((F, n_unk, T), dtype=complex)
    rank_def = np.zeros(F, dtype=bool)
    max_cond = 0.0
    damp = np.sqrt(ridge) * np.eye(n_unk)
    # conditioning is checked on a handful of geometry groups to bound the cost
    checked = set(np.linspace(0, len(first) - 1, min(len(first), 8)).astype(int).tolist())
    for g, t0 in enumerate(first):
        frames = np.nonzero(inverse == g)[0]
        B = _design(rel[:, :, t0], order, k, r_ref)  # (F, M, n_unk)
        scale = np.linalg.norm(B, axis=1)  # (F, n_unk)
        ok = np.all(scale > 0, axis=1)
        if not ok.any():
            continue
        Bs = B[ok] / scale[ok, None, :]
        A = np.concatenate([Bs, np.broadcast_to(damp, (len(Bs), n_unk, n_unk))], axis=1)
        Qm, R = np.linalg.qr(A)
        Yg = np.ascontiguousarray(Yobs[:, ok][:, :, frames].transpose(1, 0, 2))
        rhs = np.ascontiguousarray(np.conj(np.swapaxes(Qm[:, :M], 1, 2))) @ Yg
        x = np.linalg.solve(R, rhs) / scale[ok, :, None]
        V[np.ix_(np.nonzero(ok)[0], np.arange(n_unk), frames)] = x
        if g in checked:
            s = np.linalg.svd(Bs, compute_uv=False)
            cond = s[:, 0] / np.maximum(s[:, -1], np.finfo(float).tiny)
            max_cond = max(max_cond, float(cond.max()))
            rank_def[np.nonzero(ok)[0]] |= (cond > RANK_COND) if M >= n_unk else True
    W = np.asarray(weights, float)
    C = V.reshape(F, K, Q, T).transpose(1, 2, 0, 3) / W[:, None, None, :]
    diag = {
        "frame_groups": int(len(first)),
        "rank_deficient_bins": int(rank_def.sum()),
        "max_condition": max_cond,
        "unknowns": n_unk,
    }
    return C, diag


def solve_scene_coefficients(scene: Scene, array, observations, ridge: float = DEFAULT_RIDGE):
    """LS coefficients for ``scene``'s geometry and weights; returns a new scene."""
    rel = relative_vectors(scene, array)
    C, diag = solve_coefficients_ls(
        observations, rel, scene.order, scene.weights(), scene.stft_config, scene.r_ref, scene.v_sound, ridge
    )
    return scene.with_params(coeffs=C), diag


def _render_design_adjoint(GZ, rel, order, k, r_ref):
    """Adjoint of :func:`_render_design` at unit weights: (M, F, T) -> (F, K*Q, T)."""
    M, K, T, _ = rel.shape
    out = np.empty((len(k), K * num_harmonics(order), T), dtype=complex)
    first, inverse = _geometry_groups(rel)
    for g, t0 in enumerate(first):
        frames = np.nonzero(inverse == g)[0]
        Bh = np.conj(np.swapaxes(_design(rel[:, :, t0], order, k, r_ref), 1, 2))
        out[:, :, frames] = np.ascontiguousarray(Bh) @ np.ascontiguousarray(GZ[:, :, frames].transpose(1, 0, 2))
    return out


def refine_coefficients_waveform(waveforms, rel, order, weights, C0, cfg: StftConfig, r_ref=0.5, v_sound=343.0,
                                 iters: int = 40, rtol: float = 1e-6):
    """Coefficients minimising the waveform residual ``||istft(render) - w||``.

    A per-bin solve against ``stft(w)`` is biased: each frame of a rendered
    spectrogram describes emission time, while the STFT of a recording
    windows arrival time, and the delay differs per mic and primitive.  Here
    each weighted coefficient channel ``W * c`` is constrained to be the STFT
    of a signal, which removes the unobservable inconsistent part, and the
    waveform residual is minimised by conjugate gradients (CGLS) with
    per-bin column scaling, starting from ``C0``.

    Returns the coefficients (K, Q, F, T) and a diagnostics dict.
    """
    w = np.asarray(waveforms, float)
    M, L = w.shape
    K, Q, F, T = C0.shape
    n = K * Q
    k = wavenumber(cfg.frequencies, v_sound)
    W = np.asarray(weights, float)
    first, inverse = _geometry_groups(rel)
    sq = np.zeros((F, n))
    for g, t0 in enumerate(first):
        sq += np.sum(inverse == g) * np.sum(np.abs(_design(rel[:, :, t0], order, k, r_ref)) ** 2, axis=1)
    scale = np.sqrt(sq / T).T  # (n, F)
    scale[scale == 0] = 1.0
    ones = np.ones((K, T))

    def synth(U):
        return istft_ls(U / scale[:, :, None], cfg, L)

    def forward(U):
        C = stft(synth(U), cfg).bins.reshape(K, Q, F, T)
        return istft(_render_design(C, ones, rel, order, k, r_ref), cfg, L)

    def adjoint(r):
        G = _render_design_adjoint(istft_adjoint(r, cfg, T), rel, order, k, r_ref).transpose(1, 0, 2)
        return istft_ls_adjoint(stft_adjoint(G, cfg, L), cfg, T) / scale[:, :, None]

    def dot(a, b):
        return float(np.real(np.vdot(a, b)))

    V0 = (W[:, None, None, :] * C0).reshape(n, F, T)
    U = V0 * scale[:, :, None]
    r = w - forward(U)
    norm0 = float(np.linalg.norm(r))
    s = adjoint(r)
    p = s.copy()
    gamma = gamma0 = dot(s, s)
    done = 0
    for done in range(1, iters + 1):
        if gamma == 0:
            break
        q = forward(p)
        qq = dot(q, q)
        if qq == 0:
            break
        a = gamma / qq
        U += a * p
        r -= a * q
        s = adjoint(r)
        g2 = dot(s, s)
        p = s + (g2 / gamma) * p
        gamma = g2
        if g2 <= rtol**2 * gamma0 or np.linalg.norm(r) <= rtol * np.linalg.norm(w):
            break
    V = stft(synth(U), cfg).bins.reshape(K, Q, F, T)
    C = V / W[:, None, None, :]
    info = {"iterations": done, "initial_residual": norm0 / max(float(np.linalg.norm(w)), 1e-300),
            "residual": float(np.linalg.norm(r)) / max(float(np.linalg.norm(w)), 1e-300)}
    return C, info


# ---------------------------------------------------------------------------
# Forward model and analytic gradients
# ---------------------------------------------------------------------------


def render_params(scene: Scene, array, C=None, u=None, logits=None, spectrograms=False):
    """Render at the mics from explicit parameter arrays, (M, L) or (M, F, T)."""
    C = scene.coeff_array() if C is None else C
    logits = scene.logits_array() if logits is None else logits
    rel = relative_vectors(scene, array, u)
    k = wavenumber(scene.stft_config.frequencies, scene.v_sound)
    W = primitive_weights(logits)
    Z = _render_design(C, W, rel, scene.order, k, scene.r_ref)
    if spectrograms:
        return Z
    return istft(Z, scene.stft_config, scene.num_samples)


def _backprop(C, W, rel, GZ, order, k, r_ref, chunk: int = 64):
    """Chain ``dL/dRe Z + i dL/dIm Z`` at the mics (M, F, T) back to
    coefficients, weights and primitive positions (K, T, 3)."""
    K, Q, F, T = C.shape
    n = K * Q
    Cf = C.transpose(2, 0, 1, 3).reshape(F, n, T)
    V = W.repeat(Q, axis=0)[None] * Cf  # (F, n, T)
    gV = np.empty((F, n, T), dtype=complex)
    g_rel = np.zeros((n, 3, T))
    first, inverse = _geometry_groups(rel)
    for g, t0 in enumerate(first):
        frames = np.nonzero(inverse == g)[0]
        B, dB = _design(rel[:, :, t0], order, k, r_ref, grad=True)
        Bh = np.ascontiguousarray(np.conj(np.swapaxes(B, 1, 2)))  # (F, n, M)
        dBt = np.ascontiguousarray(np.transpose(dB, (0, 2, 3, 1)).reshape(F, n * 3, -1))  # (F, 3n, M)
        for s0 in range(0, len(frames), chunk):
            fr = frames[s0 : s0 + chunk]
            Gf = np.ascontiguousarray(GZ[:, :, fr].transpose(1, 0, 2))  # (F, M, t)
            gV[:, :, fr] = Bh @ Gf
            X = (dBt @ np.conj(Gf)).reshape(F, n, 3, len(fr))
            g_rel[:, :, fr] = np.real(np.einsum("fnct,fnt->nct", X, V[:, :, fr]))
    gC = (W.repeat(Q, axis=0)[None] * gV).reshape(F, K, Q, T).transpose(1, 2, 0, 3)
    gW = np.real(np.einsum("fnt,fnt->nt", Cf, np.conj(gV))).reshape(K, Q, T).sum(axis=1)
    # rel = mic - primitive, hence the sign
    g_pos = -g_rel.reshape(K, Q, 3, T).sum(axis=1).transpose(0, 2, 1)
    return gC, gW, g_pos


def _offset_chain(g_pos, u):
    return np.sum(g_pos, axis=1) * OFFSET_SCALE * (1.0 - np.tanh(u) ** 2)


def gradients(scene: Scene, array, gt, labels=None, lam: LossWeights = LossWeights(),
              max_shift: int = 16, C=None, u=None, logits=None):
    """Loss and analytic gradients with respect to every parameter class.

    Returns ``(loss, terms, grads)`` where ``grads`` has ``coeffs`` (complex,
    ``dL/dRe + i dL/dIm``), ``offset_raw`` (K, 3) and ``weight_logits`` (K, T).
    """
    C = scene.coeff_array() if C is None else C
    u = scene.offset_raw_array() if u is None else u
    logits = scene.logits_array() if logits is None else logits
    cfg = scene.stft_config
    order = scene.order
    k = wavenumber(cfg.frequencies, scene.v_sound)
    W = primitive_weights(logits)
    rel = relative_vectors(scene, array, u)
    Z = _render_design(C, W, rel, order, k, scene.r_ref)
    pred = istft(Z, cfg, scene.num_samples)
    gt = np.asarray(gt, float).reshape(pred.shape)
    y = None if labels is None else (labels.as_array() if isinstance(labels, ClipLabels) else np.asarray(labels, float))
    total, terms, g_pred, gW_cts = loss_total_with_grad(
        pred, gt, W if y is not None else None, y, lam, max_shift, cfg.sample_rate
    )
    GZ = istft_adjoint(g_pred, cfg, scene.n_frames)  # (M, F, T)
    gC, gW, g_pos = _backprop(C, W, rel, GZ, order, k, scene.r_ref)
    if gW_cts is not None:
        gW = gW + gW_cts
    g_logits = W * (gW - np.sum(W * gW, axis=0, keepdims=True))
    g_u = _offset_chain(g_pos, u)
    return total, terms, {"coeffs": gC, "offset_raw": g_u, "weight_logits": g_logits}


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------


def _scaled_direction(g: np.ndarray) -> np.ndarray:
    gmax = np.max(np.abs(g))
    if gmax == 0 or not np.isfinite(gmax):
        return np.zeros_like(g)
    return -g / gmax


def _as_waveforms(observations, scene: Scene):
    obs = observations.bins if isinstance(observations, ComplexSpectrogram) else np.asarray(observations)
    if np.iscomplexobj(obs):
        return istft(obs, scene.stft_config, scene.num_samples), obs
    return obs, stft(obs, scene.stft_config).bins


def _band_objective(init: Scene, array, Ysel, k, W, frames):
    """Relative LS residual over a band and a subset of frames after
    re-solving the coefficients, and its gradient in the raw offsets.

    The coefficients minimise the residual, so the gradient at fixed
    coefficients is the gradient of the reduced objective.
    """
    Ysel = Ysel[:, :, frames]
    W = W[:, frames]
    norm = float(np.sum(np.abs(Ysel) ** 2))

    def fun(u_flat):
        u = u_flat.reshape(-1, 3)
        rel = relative_vectors(init, array, u)[:, :, frames]
        C, _ = _solve_bins(Ysel, rel, init.order, W, k, init.r_ref, DEFAULT_RIDGE)
        D = _render_design(C, W, rel, init.order, k, init.r_ref) - Ysel
        _, _, g_pos = _backprop(C, W, rel, 2.0 * D / norm, init.order, k, init.r_ref)
        return float(np.sum(np.abs(D) ** 2)) / norm, _offset_chain(g_pos, u).ravel()

    return fun


def warm_start_offsets(Yobs, array, init: Scene, u0, W, bands, max_iter: int = 30, max_frames: int = 16):
    """Coarse-to-fine offset estimate from the LS residual.

    At low frequencies the residual varies slowly with position, so each band
    refines the previous estimate without getting caught between the
    wavelength-spaced minima present at high frequencies.  Offsets do not
    change over time, so an evenly spaced subset of frames suffices.
    """
    from scipy.optimize import minimize

    freqs = init.stft_config.frequencies
    k_all = wavenumber(freqs, init.v_sound)
    T = Yobs.shape[-1]
    frames = np.unique(np.linspace(0, T - 1, min(T, max_frames)).round().astype(int))
    u = np.asarray(u0, float).copy()
    trace = []
    for f_max in bands:
        sel = (freqs > 0) & (freqs <= f_max)
        if not sel.any():
            continue
        fun = _band_objective(init, array, Yobs[:, sel], k_all[sel], W, frames)
        try:
            res = minimize(fun, u.ravel(), jac=True, method="L-BFGS-B", options={"maxiter": max_iter})
        except DomainError:
            log.warning("warm start left the valid region in band <= %.0f Hz", f_max)
            break
        u = res.x.reshape(u.shape)
        trace.append({"band_hz": float(f_max), "residual": float(res.fun), "iterations": int(res.nit)})
    return u, trace


def fit_scene(observations, array: MicArraySpec, init: Scene, labels: ClipLabels | None = None,
              cfg: FitConfig = FitConfig()) -> FitResult:
    """Alternate LS coefficient solves with gradient steps on offsets and logits.

    ``observations`` are (M, L) waveforms or (M, F, T) spectrograms at the
    microphones of ``array``.  Offsets are first warm-started band by band
    (``cfg.warm_bands``).  Each outer iteration then solves the coefficients
    and takes backtracking gradient steps on the offsets and on the weight
    logits.  Logit steps rescale the coefficients so that ``W * c`` and hence
    the rendered signal are unchanged; only the activity term moves.  The
    loss history is non-increasing: LS updates that raise the training loss
    are rejected.  Running out of iterations is reported in the result, not
    raised.
    """
    from_waveforms = not np.iscomplexobj(
        observations.bins if isinstance(observations, ComplexSpectrogram) else np.asarray(observations)
    )
    gt, Yobs = _as_waveforms(observations, init)
    lam = cfg.loss_weights
    y = None if labels is None else labels.as_array()
    if y is not None and len(y) != init.K:
        raise ValueError("labels must have one entry per primitive")
    rng = np.random.default_rng(cfg.rng_seed)
    C = init.coeff_array()
    u = init.offset_raw_array().copy()
    logits = init.logits_array() + 1e-3 * rng.standard_normal(init.logits_array().shape)
    diagnostics: dict = {}
    if cfg.fit_offsets and cfg.share_jitter > 0:
        # primitives on the same joint start coincident, a saddle of the
        # residual; a small seeded spread lets them separate
        joints = [p.joint for p in init.primitives]
        for j in set(joints):
            idx = [i for i, name in enumerate(joints) if name == j]
            if len(idx) > 1:
                delta = apply_offset(u[idx]) + cfg.share_jitter * rng.standard_normal((len(idx), 3))
                u[idx] = np.arctanh(np.clip(delta / OFFSET_SCALE, -0.99, 0.99))
    if cfg.fit_offsets and cfg.warm_bands:
        u, diagnostics["warm_start"] = warm_start_offsets(
            Yobs, array, init, u, primitive_weights(logits), cfg.warm_bands, cfg.warm_iters, cfg.warm_frames
        )

    def evaluate(C_, u_, lg_):
        pred = render_params(init, array, C_, u_, lg_)
        W = primitive_weights(lg_)
        return loss_total(pred, gt, W if y is not None else None, y, lam, cfg.max_shift, init.stft_config.sample_rate)

    def with_cts(terms_, lg_):
        t = dict(terms_)
        t["cts"] = _cts(primitive_weights(lg_), y)[0] if y is not None and lam.cts else 0.0
        return combine(t, lam), t

    def ls(u_, lg_):
        rel = relative_vectors(init, array, u_)
        return solve_coefficients_ls(
            Yobs, rel, init.order, primitive_weights(lg_), init.stft_config, init.r_ref, init.v_sound, cfg.ridge
        )

    current, terms = evaluate(C, u, logits)
    history = [{"iteration": 0, "total": current, **terms, "step": "init"}]
    converged = False
    u_step = cfg.learning_rate
    it = 0
    for it in range(1, cfg.max_iters + 1):
        start = current
        C_try, diag = ls(u, logits)
        diagnostics["ls"] = diag
        val, t_try = evaluate(C_try, u, logits)
        if val <= current:
            C, current, terms = C_try, val, t_try
        for _ in range(cfg.grad_steps if cfg.fit_offsets else 0):
            _, _, grads = gradients(init, array, gt, y, lam, cfg.max_shift, C, u, logits)
            du = _scaled_direction(grads["offset_raw"])
            slope = float(np.sum(grads["offset_raw"] * du))
            alpha = min(2.0 * u_step, cfg.learning_rate)
            moved = False
            for _h in range(cfg.max_halvings if slope < 0 else 0):
                try:
                    val, t_try = evaluate(C, u + alpha * du, logits)
                except DomainError:
                    alpha *= 0.5
                    continue
                if val <= current + cfg.armijo_c * alpha * slope:
                    u, current, terms, moved, u_step = u + alpha * du, val, t_try, True, alpha
                    break
                alpha *= 0.5
            if not moved:
                break
        # logit steps leave W * c, hence the rendering, unchanged and cost no render
        for _ in range(cfg.logit_steps if cfg.fit_weights and y is not None and lam.cts else 0):
            W = primitive_weights(logits)
            _, gW = _cts(W, y)
            g_l = W * (gW - np.sum(W * gW, axis=0, keepdims=True))
            dl = _scaled_direction(g_l)
            slope = float(np.sum(g_l * dl))
            alpha = cfg.logit_step
            moved = False
            for _h in range(cfg.max_halvings if slope < 0 else 0):
                lg_try = logits + alpha * dl
                val, t_try = with_cts(terms, lg_try)
                if val <= current + cfg.armijo_c * alpha * slope:
                    C = C * (W / primitive_weights(lg_try))[:, None, None, :]
                    logits, current, terms, moved = lg_try, val, t_try, True
                    break
                alpha *= 0.5
            if not moved:
                break
        history.append({"iteration": it, "total": current, **terms, "step": "ls+grad"})
        log.info("fit iteration %d: loss %.6g", it, current)
        if start - current <= cfg.convergence_tol * max(abs(start), 1e-30):
            converged = True
            break
    if from_waveforms and cfg.refine_iters > 0:
        C_try, info = refine_coefficients_waveform(
            gt, relative_vectors(init, array, u), init.order, primitive_weights(logits), C,
            init.stft_config, init.r_ref, init.v_sound, cfg.refine_iters,
        )
        diagnostics["refine"] = info
        val, t_try = evaluate(C_try, u, logits)
        if val <= current:
            C, current, terms = C_try, val, t_try
            history.append({"iteration": it, "total": current, **terms, "step": "refine"})
    fitted = init.with_params(coeffs=C, offset_raw=u, logits=logits)
    pred = render_params(fitted, array)
    diagnostics["train_sdr"] = [sdr(p, g) for p, g in zip(pred, gt)]
    return FitResult(fitted, history, converged, it, diagnostics)

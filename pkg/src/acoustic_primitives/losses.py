"""Training losses between predicted and reference waveforms.

Every loss accepts waveforms of shape ``(L,)`` or ``(M, L)`` and averages over
channels.  The ``*_grad`` variants return the gradient with respect to the
predicted waveform; they drive the analytic gradients in :mod:`fitting`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .spectral import MULTISCALE_WINDOWS, multiscale_configs, stft, stft_adjoint

CTS_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    amp: float = 7.0
    ri: float = 3.0
    sl1: float = 0.5
    cts: float = 1.0

    def __post_init__(self):
        if min(self.amp, self.ri, self.sl1, self.cts) < 0:
            raise ValueError("loss weights must be non-negative")


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def _inner(X):
    # first and last frames are dropped (edge windows)
    return X[..., 1:-1] if X.shape[-1] > 2 else X


def _scales(sample_rate, windows):
    return multiscale_configs(sample_rate, windows)


def loss_amp(pred, gt, sample_rate: int = 48000, windows=MULTISCALE_WINDOWS) -> float:
    """Mean over scales of the mean absolute difference of STFT magnitudes."""
    pred, gt = _pair(pred, gt)
    vals = []
    for cfg in _scales(sample_rate, windows):
        P = _inner(stft(pred, cfg).bins)
        G = _inner(stft(gt, cfg).bins)
        vals.append(np.mean(np.abs(np.abs(P) - np.abs(G))))
    return float(np.mean(vals))


def loss_ri(pred, gt, sample_rate: int = 48000, windows=MULTISCALE_WINDOWS) -> float:
    """Mean over scales of the mean absolute difference of real and imaginary parts."""
    pred, gt = _pair(pred, gt)
    vals = []
    for cfg in _scales(sample_rate, windows):
        D = _inner(stft(pred, cfg).bins) - _inner(stft(gt, cfg).bins)
        vals.append(0.5 * (np.mean(np.abs(D.real)) + np.mean(np.abs(D.imag))))
    return float(np.mean(vals))


def _spectral_grads(pred, gt, sample_rate, windows):
    """Values and waveform gradients of the amplitude and real/imag losses."""
    L = pred.shape[-1]
    n_scales = len(windows)
    amp = ri = 0.0
    g_amp = np.zeros_like(pred)
    g_ri = np.zeros_like(pred)
    for cfg in _scales(sample_rate, windows):
        P = stft(pred, cfg).bins
        G = stft(gt, cfg).bins
        Pi, Gi = _inner(P), _inner(G)
        n = Pi.size
        mag = np.abs(Pi)
        dm = mag - np.abs(Gi)
        amp += np.mean(np.abs(dm)) / n_scales
        D = Pi - Gi
        ri += 0.5 * (np.mean(np.abs(D.real)) + np.mean(np.abs(D.imag))) / n_scales
        # d|P|/dP = P/|P| (zero at the origin)
        unit = np.divide(Pi, mag, out=np.zeros_like(Pi), where=mag > 0)
        Ga = np.zeros_like(P)
        Gr = np.zeros_like(P)
        sl = (Ellipsis, slice(1, -1)) if P.shape[-1] > 2 else (Ellipsis,)
        Ga[sl] = np.sign(dm) * unit / (n * n_scales)
        Gr[sl] = (np.sign(D.real) + 1j * np.sign(D.imag)) * (0.5 / (n * n_scales))
        g_amp += stft_adjoint(Ga, cfg, L)
        g_ri += stft_adjoint(Gr, cfg, L)
    return amp, ri, g_amp, g_ri


def _shift_view(pred, gt, tau):
    """Overlapping segments comparing pred(t + tau) with gt(t)."""
    L = pred.shape[-1]
    if tau >= 0:
        return pred[..., tau:], gt[..., : L - tau]
    return pred[..., : L + tau], gt[..., -tau:]


def best_shifts(pred, gt, max_shift: int = 16) -> np.ndarray:
    """Per-channel shift minimising the mean absolute difference."""
    pred, gt = _pair(pred, gt)
    p2 = np.atleast_2d(pred)
    g2 = np.atleast_2d(gt)
    costs = np.stack(
        [np.mean(np.abs(np.subtract(*_shift_view(p2, g2, tau))), axis=-1) for tau in range(-max_shift, max_shift + 1)]
    )
    return np.argmin(costs, axis=0) - max_shift, costs.min(axis=0)


def loss_shift_l1(pred, gt, max_shift: int = 16) -> float:
    """Mean absolute waveform difference minimised over integer shifts in
    ``[-max_shift, max_shift]``; ``pred(t + tau)`` is compared with ``gt(t)``
    on the overlap, so a prediction delayed by ``d`` samples scores zero at
    ``tau = d``."""
    if max_shift < 0:
        raise ValueError("max_shift must be non-negative")
    pred, gt = _pair(pred, gt)
    if pred.shape[-1] <= max_shift:
        raise ValueError("signal shorter than the shift range")
    _, best = best_shifts(pred, gt, max_shift)
    return float(np.mean(best))


def _shift_l1_grad(pred, gt, max_shift):
    taus, best = best_shifts(pred, gt, max_shift)
    p2 = np.atleast_2d(pred)
    g2 = np.atleast_2d(gt)
    grad = np.zeros_like(p2)
    L = p2.shape[-1]
    for c, tau in enumerate(taus):
        a, b = _shift_view(p2[c], g2[c], int(tau))
        s = np.sign(a - b) / (len(a) * len(p2))
        if tau >= 0:
            grad[c, tau:] = s
        else:
            grad[c, : L + tau] = s
    return float(np.mean(best)), grad.reshape(pred.shape)


def loss_cts(weights, labels) -> float:
    """Binary cross-entropy between each primitive's peak weight over time
    and its clip-level activity label."""
    return _cts(weights, labels)[0]


def _cts(weights, labels):
    W = np.asarray(weights, dtype=float)
    y = np.asarray(labels, dtype=float)
    if W.ndim != 2 or y.shape != (W.shape[0],):
        raise ValueError("weights must be (K, T) and labels length K")
    idx = np.argmax(W, axis=1)
    peak = W[np.arange(len(W)), idx]
    pc = np.clip(peak, CTS_EPS, 1 - CTS_EPS)
    K = len(y)
    val = -np.sum(y * np.log(pc) + (1 - y) * np.log(1 - pc)) / K
    active = (peak > CTS_EPS) & (peak < 1 - CTS_EPS)
    dpeak = np.where(active, (-y / pc + (1 - y) / (1 - pc)) / K, 0.0)
    gW = np.zeros_like(W)
    gW[np.arange(len(W)), idx] = dpeak
    return float(val), gW


def loss_total(pred, gt, weights=None, labels=None, lam: LossWeights = LossWeights(),
               max_shift: int = 16, sample_rate: int = 48000, windows=MULTISCALE_WINDOWS):
    """Weighted sum of the four loss terms.

    Returns ``(total, breakdown)``; the cross-entropy term is skipped (zero)
    when its weight is zero or no weights/labels are given.
    """
    terms = {
        "amp": loss_amp(pred, gt, sample_rate, windows) if lam.amp else 0.0,
        "ri": loss_ri(pred, gt, sample_rate, windows) if lam.ri else 0.0,
        "sl1": loss_shift_l1(pred, gt, max_shift) if lam.sl1 else 0.0,
        "cts": loss_cts(weights, labels) if lam.cts and weights is not None and labels is not None else 0.0,
    }
    return combine(terms, lam), terms


def combine(terms: dict, lam: LossWeights) -> float:
    return float(lam.amp * terms["amp"] + lam.ri * terms["ri"] + lam.sl1 * terms["sl1"] + lam.cts * terms["cts"])


def loss_total_with_grad(pred, gt, weights, labels, lam: LossWeights = LossWeights(),
                         max_shift: int = 16, sample_rate: int = 48000, windows=MULTISCALE_WINDOWS):
    """Total loss, breakdown, d/d(pred) and d/d(weights).

    The shift term uses the subgradient at its current best shift.
    """
    pred, gt = _pair(pred, gt)
    amp, ri, g_amp, g_ri = _spectral_grads(pred, gt, sample_rate, windows)
    sl1, g_sl1 = _shift_l1_grad(pred, gt, max_shift)
    if weights is not None and labels is not None:
        cts, gW = _cts(weights, labels)
    else:
        cts, gW = 0.0, None
    terms = {"amp": amp, "ri": ri, "sl1": sl1, "cts": cts}
    g_pred = lam.amp * g_amp + lam.ri * g_ri + lam.sl1 * g_sl1
    gW = None if gW is None else lam.cts * gW
    return combine(terms, lam), terms, g_pred, gW

"""Evaluation metrics: SDR, amplitude-spectrogram error and phase error."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .spectral import StftConfig, stft

SDR_CAP = 120.0


class ZeroReferenceError(ValueError):
    pass


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def sdr(pred, gt) -> float:
    """Signal-to-distortion ratio in dB, capped at +120 dB."""
    pred, gt = _pair(pred, gt)
    ref = float(np.sum(gt * gt))
    if ref == 0.0:
        raise ZeroReferenceError("reference signal is all zeros")
    res = float(np.sum((gt - pred) ** 2))
    if res <= ref * 10 ** (-SDR_CAP / 10):
        return SDR_CAP
    return float(10 * np.log10(ref / res))


def amplitude_error(pred, gt, cfg: StftConfig = StftConfig()) -> float:
    """Mean squared difference of STFT magnitudes, times 1000."""
    pred, gt = _pair(pred, gt)
    P = np.abs(stft(pred, cfg).bins)
    G = np.abs(stft(gt, cfg).bins)
    return float(1000.0 * np.mean((P - G) ** 2))


def wrap_phase(x):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(x) + np.pi, 2 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


def phase_error(pred, gt, cfg: StftConfig = StftConfig()) -> float:
    """|gt|-weighted mean absolute wrapped phase difference, in radians."""
    pred, gt = _pair(pred, gt)
    P = stft(pred, cfg).bins
    G = stft(gt, cfg).bins
    w = np.abs(G)
    if w.sum() == 0:
        raise ZeroReferenceError("reference spectrogram is all zeros")
    d = np.abs(wrap_phase(np.angle(P) - np.angle(G)))
    return float(np.sum(w * d) / np.sum(w))


@dataclass
class EvalReport:
    sdr: float
    amp_err: float
    phase_err: float
    per_mic: list[dict] = field(default_factory=list)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["mic", "sdr_db", "amp_err_x1000", "phase_err_rad"])
            for row in self.per_mic:
                wr.writerow([row["mic"], row["sdr"], row["amp_err"], row["phase_err"]])
            wr.writerow(["mean", self.sdr, self.amp_err, self.phase_err])


def evaluate(pred, gt, cfg: StftConfig = StftConfig(), mic_ids=None) -> EvalReport:
    """Per-channel metrics for (M, L) signals and their means."""
    pred, gt = _pair(np.atleast_2d(pred), np.atleast_2d(gt))
    ids = list(range(len(pred))) if mic_ids is None else list(mic_ids)
    rows = []
    for i, p, g in zip(ids, pred, gt):
        rows.append(
            {
                "mic": int(i),
                "sdr": sdr(p, g),
                "amp_err": amplitude_error(p, g, cfg),
                "phase_err": phase_error(p, g, cfg),
            }
        )
    return EvalReport(
        float(np.mean([r["sdr"] for r in rows])),
        float(np.mean([r["amp_err"] for r in rows])),
        float(np.mean([r["phase_err"] for r in rows])),
        rows,
    )

"""STFT / ISTFT on a fixed Hann grid, the multiscale transform set and WAV I/O.

Frame ``t`` analyses samples ``[t*hop, t*hop + window_len)``.  The windowed
frame is placed at offset :attr:`StftConfig.lead` inside a zero buffer of
``fft_len`` samples, so buffer index ``j`` corresponds to signal sample
``t*hop - lead + j``.  The inverse overlap-adds the whole buffer back at that
position and divides by the analysis-window envelope.  Multiplying a frame by
a transfer function therefore behaves as a linear convolution as long as the
impulse response fits inside the zero padding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import next_fast_len
from scipy.io import wavfile
from scipy.signal import get_window

MULTISCALE_WINDOWS = (2048, 1024, 512, 256)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StftConfig:
    window_len: int = 512
    hop: int = 128
    fft_len: int = 1022
    sample_rate: int = 48000

    def __post_init__(self):
        if self.window_len <= 0 or self.hop <= 0:
            raise ConfigError("window_len and hop must be positive")
        if self.fft_len < self.window_len:
            raise ConfigError("fft_len must be >= window_len")
        if self.fft_len % 2:
            raise ConfigError("fft_len must be even")
        if self.hop > self.window_len:
            raise ConfigError("hop must not exceed window_len")
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")

    @property
    def n_bins(self) -> int:
        return self.fft_len // 2 + 1

    @property
    def lead(self) -> int:
        """Zeros in front of the window inside the FFT buffer."""
        return (self.fft_len - self.window_len) // 8

    @cached_property
    def window(self) -> np.ndarray:
        w = get_window("hann", self.window_len, fftbins=True)
        w.flags.writeable = False
        return w

    @property
    def frequencies(self) -> np.ndarray:
        return np.arange(self.n_bins) * self.sample_rate / self.fft_len

    def n_frames(self, length: int) -> int:
        if length < self.window_len:
            raise ConfigError(
                f"signal of {length} samples is shorter than the window ({self.window_len})"
            )
        return (length - self.window_len) // self.hop + 1

    def frame_times(self, n_frames: int) -> np.ndarray:
        """Centre time (seconds) of each frame."""
        return (np.arange(n_frames) * self.hop + self.window_len / 2) / self.sample_rate

    def to_dict(self) -> dict:
        return {
            "window_len": self.window_len,
            "hop": self.hop,
            "fft_len": self.fft_len,
            "sample_rate": self.sample_rate,
        }


def multiscale_configs(sample_rate: int = 48000, windows=MULTISCALE_WINDOWS) -> list[StftConfig]:
    return [StftConfig(w, w // 4, w, sample_rate) for w in windows]


@dataclass(frozen=True)
class ComplexSpectrogram:
    """Complex STFT grid; ``bins`` has shape ``(..., F, T)``."""

    bins: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        if self.bins.shape[-2] != self.config.n_bins:
            raise ConfigError(
                f"spectrogram has {self.bins.shape[-2]} bins, config expects {self.config.n_bins}"
            )

    @property
    def n_frames(self) -> int:
        return self.bins.shape[-1]

    @property
    def frame_times(self) -> np.ndarray:
        return self.config.frame_times(self.n_frames)

    @property
    def frequencies(self) -> np.ndarray:
        return self.config.frequencies


def _frames(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    T = cfg.n_frames(x.shape[-1])
    fr = sliding_window_view(x, cfg.window_len, axis=-1)[..., : (T - 1) * cfg.hop + 1 : cfg.hop, :]
    return fr


def stft(signal, cfg: StftConfig = StftConfig()) -> ComplexSpectrogram:
    """One-sided STFT of a real signal of shape ``(..., L)``."""
    x = np.asarray(signal, dtype=float)
    fr = _frames(x, cfg) * cfg.window
    buf = np.zeros(fr.shape[:-1] + (cfg.fft_len,))
    buf[..., cfg.lead : cfg.lead + cfg.window_len] = fr
    X = np.fft.rfft(buf, axis=-1)
    return ComplexSpectrogram(np.swapaxes(X, -1, -2), cfg)


def _envelope(cfg: StftConfig, n_frames: int, out_len: int) -> np.ndarray:
    env = np.zeros(max(out_len, (n_frames - 1) * cfg.hop + cfg.window_len))
    w = cfg.window
    for t in range(n_frames):
        env[t * cfg.hop : t * cfg.hop + cfg.window_len] += w
    env = env[:out_len]
    # Edges fall back to half the steady-state overlap sum rather than blowing up.
    floor = 0.5 * cfg.window.sum() / cfg.hop
    return np.maximum(env, floor)


def _overlap_add(frames: np.ndarray, cfg: StftConfig, out_len: int) -> np.ndarray:
    """Add full FFT buffers (..., T, fft_len) back at their signal positions."""
    T = frames.shape[-2]
    out = np.zeros(frames.shape[:-2] + (out_len,))
    for t in range(T):
        start = t * cfg.hop - cfg.lead
        lo, hi = max(start, 0), min(start + cfg.fft_len, out_len)
        if hi > lo:
            out[..., lo:hi] += frames[..., t, lo - start : hi - start]
    return out


def istft(spec, cfg: StftConfig | None = None, out_len: int | None = None) -> np.ndarray:
    """Inverse of :func:`stft` by envelope-normalised overlap-add."""
    if isinstance(spec, ComplexSpectrogram):
        if cfg is not None and cfg != spec.config:
            raise ConfigError("spectrogram config does not match requested config")
        cfg = spec.config
        Z = spec.bins
    else:
        if cfg is None:
            raise ConfigError("a StftConfig is required for raw arrays")
        Z = np.asarray(spec)
        if Z.shape[-2] != cfg.n_bins:
            raise ConfigError(f"expected {cfg.n_bins} bins, got {Z.shape[-2]}")
    T = Z.shape[-1]
    if out_len is None:
        out_len = (T - 1) * cfg.hop + cfg.window_len
    frames = np.fft.irfft(np.swapaxes(Z, -1, -2), n=cfg.fft_len, axis=-1)
    return _overlap_add(frames, cfg, out_len) / _envelope(cfg, T, out_len)


def _envelope_sq(cfg: StftConfig, n_frames: int, out_len: int) -> np.ndarray:
    env = np.zeros(max(out_len, (n_frames - 1) * cfg.hop + cfg.window_len))
    for t in range(n_frames):
        env[t * cfg.hop : t * cfg.hop + cfg.window_len] += cfg.window**2
    env = env[:out_len]
    return np.where(env > 1e-12, 1.0 / np.where(env > 1e-12, env, 1.0), 0.0)


def istft_ls(spec, cfg: StftConfig, out_len: int) -> np.ndarray:
    """Least-squares inverse: the signal whose STFT is closest to ``spec``.

    Windowed overlap-add divided by the squared-window envelope, so
    ``stft(istft_ls(Z))`` is the orthogonal projection of ``Z`` onto valid
    spectrograms, exact at the edges too.  Samples no frame sees are zero.
    """
    Z = np.asarray(spec)
    T = Z.shape[-1]
    fr = np.fft.irfft(np.swapaxes(Z, -1, -2), n=cfg.fft_len, axis=-1)
    fr = fr[..., cfg.lead : cfg.lead + cfg.window_len] * cfg.window
    out = np.zeros(fr.shape[:-2] + (out_len,))
    for t in range(T):
        out[..., t * cfg.hop : t * cfg.hop + cfg.window_len] += fr[..., t, :]
    return out * _envelope_sq(cfg, T, out_len)


# Adjoints (with respect to the real inner product) used by the analytic gradients.


def istft_ls_adjoint(g: np.ndarray, cfg: StftConfig, n_frames: int) -> np.ndarray:
    """Complex gradient with respect to the input of :func:`istft_ls`."""
    g = np.asarray(g, dtype=float)
    g = g * _envelope_sq(cfg, n_frames, g.shape[-1])
    frames = np.zeros(g.shape[:-1] + (n_frames, cfg.fft_len))
    for t in range(n_frames):
        frames[..., t, cfg.lead : cfg.lead + cfg.window_len] = g[..., t * cfg.hop : t * cfg.hop + cfg.window_len] * cfg.window
    G = np.fft.rfft(frames, axis=-1) * (_bin_weights(cfg) / cfg.fft_len)
    return np.swapaxes(G, -1, -2)


def _bin_weights(cfg: StftConfig) -> np.ndarray:
    c = np.full(cfg.n_bins, 2.0)
    c[0] = c[-1] = 1.0
    return c


def stft_adjoint(G: np.ndarray, cfg: StftConfig, length: int) -> np.ndarray:
    """Gradient w.r.t. the signal given ``G = dL/dRe X + i dL/dIm X``."""
    G = np.swapaxes(np.asarray(G), -1, -2) / _bin_weights(cfg)
    buf = np.fft.irfft(G, n=cfg.fft_len, axis=-1) * cfg.fft_len
    fr = buf[..., cfg.lead : cfg.lead + cfg.window_len] * cfg.window
    T = fr.shape[-2]
    out = np.zeros(fr.shape[:-2] + (length,))
    for t in range(T):
        out[..., t * cfg.hop : t * cfg.hop + cfg.window_len] += fr[..., t, :]
    return out


def istft_adjoint(g: np.ndarray, cfg: StftConfig, n_frames: int) -> np.ndarray:
    """Complex gradient ``dL/dRe Z + i dL/dIm Z`` given ``g = dL/dy``."""
    g = np.asarray(g, dtype=float)
    out_len = g.shape[-1]
    g = g / _envelope(cfg, n_frames, out_len)
    frames = np.zeros(g.shape[:-1] + (n_frames, cfg.fft_len))
    for t in range(n_frames):
        start = t * cfg.hop - cfg.lead
        lo, hi = max(start, 0), min(start + cfg.fft_len, out_len)
        if hi > lo:
            frames[..., t, lo - start : hi - start] = g[..., lo:hi]
    G = np.fft.rfft(frames, axis=-1) * (_bin_weights(cfg) / cfg.fft_len)
    return np.swapaxes(G, -1, -2)


def fractional_delay(x, delay: float) -> np.ndarray:
    """Delay (or advance, if negative) a waveform by ``delay`` samples.

    Band-limited interpolation by a phase ramp on a zero-padded FFT, so
    nothing wraps around; content shifted past either end is dropped.
    """
    x = np.asarray(x, dtype=float)
    L = x.shape[-1]
    n = next_fast_len(2 * (L + int(np.ceil(abs(delay)))))
    n += n % 2
    f = np.fft.rfftfreq(n)
    y = np.fft.irfft(np.fft.rfft(x, n, axis=-1) * np.exp(-2j * np.pi * f * delay), n, axis=-1)
    return y[..., :L]


def multiscale_stft(signal, sample_rate: int = 48000, windows=MULTISCALE_WINDOWS, magnitude: bool = True):
    """Spectrograms at each window size (hop = window/4, fft = window)."""
    x = np.asarray(signal, dtype=float)
    if x.shape[-1] < max(windows):
        raise ConfigError(f"multiscale STFT needs at least {max(windows)} samples, got {x.shape[-1]}")
    out = []
    for cfg in multiscale_configs(sample_rate, windows):
        X = stft(x, cfg).bins
        out.append(np.abs(X) if magnitude else X)
    return out


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a WAV file as float64 of shape ``(channels, samples)``."""
    rate, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        data = data.astype(np.float64)
    else:
        raise ValueError(f"unsupported WAV sample format {data.dtype}")
    if data.ndim == 1:
        data = data[None, :]
    else:
        data = data.T
    return np.ascontiguousarray(data), int(rate)


def write_wav(path, signals, sample_rate: int = 48000) -> None:
    """Write ``(channels, samples)`` (or 1-D) float data as 32-bit float WAV."""
    data = np.asarray(signals, dtype=np.float32)
    if data.ndim == 2:
        data = data.T
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), int(sample_rate), np.ascontiguousarray(data))

"""Soundfield rendering with low-order spherical-harmonic sources on body joints.

Modules
-------
sphmath
    Spherical harmonics, spherical Hankel functions and radial gains.
spectral
    STFT grid, inverses, multiscale transforms and WAV I/O.
scene
    Primitives, joint tracks, microphone arrays and JSON persistence.
renderer
    Forward rendering, field sampling and the exterior-domain baseline.
losses, fitting
    Training losses and inverse rendering of coefficients, offsets and weights.
metrics
    SDR, amplitude and phase errors.
simulate
    Synthetic scenes, arrays and recordings.
cli
    The ``acoustic-primitives`` command.
"""

__version__ = "0.1.0"

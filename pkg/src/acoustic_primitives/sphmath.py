"""Spherical harmonics, associated Legendre functions and spherical Hankel
radial gains.

Angles follow the physics convention used everywhere in the package: ``theta``
is the polar angle measured from +z and ``phi`` the azimuth measured from +x
towards +y.  Harmonics are stored in ACN order, ``l = n**2 + n + m``.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from numpy.polynomial import legendre as npleg

V_SOUND = 343.0
R_MIN = 0.05


class DomainError(ValueError):
    """Raised when a special function is evaluated outside its domain."""


def num_harmonics(order: int) -> int:
    return (order + 1) ** 2


def acn_index(n: int, m: int) -> int:
    if n < 0 or abs(m) > n:
        raise DomainError(f"invalid harmonic index (n={n}, m={m})")
    return n * n + n + m


def acn_to_nm(index: int) -> tuple[int, int]:
    if index < 0:
        raise DomainError(f"invalid linear harmonic index {index}")
    n = math.isqrt(index)
    return n, index - n * n - n


def harmonic_orders(order: int) -> np.ndarray:
    """Order ``n`` of every ACN channel up to ``order``."""
    return np.array([acn_to_nm(i)[0] for i in range(num_harmonics(order))])


def wavenumber(freq, v_sound: float = V_SOUND):
    """k = 2 pi f / v_sound."""
    freq = np.asarray(freq, dtype=float)
    if np.any(freq < 0):
        raise DomainError("frequency must be non-negative")
    return 2.0 * np.pi * freq / v_sound


# ---------------------------------------------------------------------------
# Legendre / spherical harmonics
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _reduced_legendre(n: int, m: int) -> np.ndarray:
    # Coefficients (power basis) of (-1)^m d^m/dx^m P_n(x), i.e. P_nm(x) with the
    # (1 - x^2)^(m/2) factor removed.
    c = npleg.leg2poly(npleg.Legendre.basis(n).coef)
    c = np.polynomial.polynomial.polyder(c, m) if m else c
    return (-1) ** m * np.atleast_1d(c)


def assoc_legendre(n: int, m: int, x):
    """Associated Legendre function ``P_n^m(x)`` including the Condon-Shortley
    phase ``(-1)^m``.

    Parameters
    ----------
    n : int
        Order, ``n >= 0``.
    m : int
        Degree, ``0 <= m <= n``.
    x : float or ndarray
        Argument in ``[-1, 1]``.
    """
    if n < 0 or m < 0 or m > n:
        raise DomainError(f"assoc_legendre requires 0 <= m <= n, got n={n}, m={m}")
    x = np.asarray(x, dtype=float)
    if np.any(np.abs(x) > 1.0):
        raise DomainError("assoc_legendre requires |x| <= 1")
    poly = np.polynomial.polynomial.polyval(x, _reduced_legendre(n, m))
    out = poly * (1.0 - x * x) ** (0.5 * m)
    return out if out.ndim else float(out)


def _norm(n: int, m: int) -> float:
    return math.sqrt(
        (2 * n + 1) / (4 * math.pi) * math.factorial(n - m) / math.factorial(n + m)
    )


def _check_angles(theta, phi):
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if np.any(theta < -1e-12) or np.any(theta > np.pi + 1e-12):
        raise DomainError("theta must lie in [0, pi]")
    return theta, phi


def sph_harmonic(n: int, m: int, theta, phi):
    """Complex spherical harmonic ``Y_nm(theta, phi)``.

    Negative degrees follow ``Y_{n,-m} = (-1)^m conj(Y_nm)``.
    """
    if n < 0 or abs(m) > n:
        raise DomainError(f"invalid harmonic index (n={n}, m={m})")
    theta, phi = _check_angles(theta, phi)
    am = abs(m)
    y = (
        _norm(n, am)
        * assoc_legendre(n, am, np.clip(np.cos(theta), -1.0, 1.0))
        * np.exp(1j * am * phi)
    )
    if m < 0:
        y = (-1) ** am * np.conj(y)
    return y if np.ndim(y) else complex(y)


def sph_harmonics_unit(order: int, unit: np.ndarray, grad: bool = False):
    """All harmonics up to ``order`` evaluated at unit vectors.

    Parameters
    ----------
    order : int
        Maximum order ``N``.
    unit : ndarray, shape (..., 3)
        Unit direction vectors.
    grad : bool
        Also return the partial derivatives with respect to the three unit
        vector components (treating ``Y`` as a polynomial in ``x, y, z``).

    Returns
    -------
    Y : ndarray, shape ((N+1)**2, ...)
    dY : ndarray, shape ((N+1)**2, 3, ...), only when ``grad`` is set
    """
    unit = np.asarray(unit, dtype=float)
    ux, uy, uz = unit[..., 0], unit[..., 1], unit[..., 2]
    xy = ux + 1j * uy
    shape = ux.shape
    Q = num_harmonics(order)
    Y = np.empty((Q,) + shape, dtype=complex)
    dY = np.empty((Q, 3) + shape, dtype=complex) if grad else None
    for n in range(order + 1):
        for m in range(n + 1):
            c = _reduced_legendre(n, m)
            q = np.polynomial.polynomial.polyval(uz, c)
            xym = xy**m
            y = _norm(n, m) * q * xym
            Y[acn_index(n, m)] = y
            if m:
                Y[acn_index(n, -m)] = (-1) ** m * np.conj(y)
            if grad:
                dq = np.polynomial.polynomial.polyval(uz, np.polynomial.polynomial.polyder(c)) if len(c) > 1 else np.zeros(shape)
                dxy = m * xy ** (m - 1) if m else np.zeros(shape, dtype=complex)
                g = _norm(n, m) * np.stack(
                    [q * dxy, 1j * q * dxy, dq * xym + 0j], axis=0
                )
                dY[acn_index(n, m)] = g
                if m:
                    dY[acn_index(n, -m)] = (-1) ** m * np.conj(g)
    if grad:
        return Y, dY
    return Y


def sph_harmonics(order: int, theta, phi):
    """All harmonics up to ``order`` at angles, shape ``((N+1)**2, ...)``."""
    theta, phi = _check_angles(theta, phi)
    st = np.sin(theta)
    unit = np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)
    return sph_harmonics_unit(order, unit)


# ---------------------------------------------------------------------------
# Spherical Hankel functions
# ---------------------------------------------------------------------------


def sph_hankel(n: int, z):
    """Spherical Hankel function of the first kind ``h_n(z)`` for ``z > 0``.

    Orders 0 and 1 are closed forms; higher orders use the upward recurrence
    ``h_{n+1} = (2n+1)/z h_n - h_{n-1}``.
    """
    return sph_hankel_all(n, z)[n]


def sph_hankel_all(order: int, z) -> np.ndarray:
    """``h_0 .. h_order`` stacked along a new leading axis."""
    if order < 0:
        raise DomainError("order must be non-negative")
    z = np.asarray(z, dtype=float)
    if np.any(z <= 0):
        raise DomainError("sph_hankel requires z > 0")
    e = np.exp(1j * z)
    out = np.empty((order + 1,) + z.shape, dtype=complex)
    out[0] = -1j * e / z
    if order >= 1:
        out[1] = -(z + 1j) * e / (z * z)
    for n in range(1, order):
        out[n + 1] = (2 * n + 1) / z * out[n] - out[n - 1]
    return out


def sph_hankel_deriv_all(order: int, z) -> tuple[np.ndarray, np.ndarray]:
    """``h_n`` and ``h_n'`` for ``n = 0 .. order``."""
    h = sph_hankel_all(max(order, 1), z)
    z = np.asarray(z, dtype=float)
    dh = np.empty((order + 1,) + z.shape, dtype=complex)
    dh[0] = -h[1]
    for n in range(1, order + 1):
        dh[n] = h[n - 1] - (n + 1) / z * h[n]
    return h[: order + 1], dh


def radial_gain(n: int, k, r, r_ref: float = 0.5, r_min: float = R_MIN):
    """``h_n(k r) / h_n(k r_ref)``; zero where ``k == 0`` (DC band)."""
    return radial_gains(n, k, r, r_ref, r_min)[n]


def radial_gains(order: int, k, r, r_ref: float = 0.5, r_min: float = R_MIN, grad: bool = False):
    """Radial gains of all orders, broadcasting ``k`` against ``r``.

    Returns an array of shape ``(order+1,) + broadcast(k, r).shape``; with
    ``grad`` also the derivative with respect to ``r``.
    """
    k = np.asarray(k, dtype=float)
    r = np.asarray(r, dtype=float)
    if np.any(r < r_min):
        raise DomainError(f"listener distance {float(np.min(r)):.4g} m is below r_min={r_min} m")
    if r_ref <= 0:
        raise DomainError("r_ref must be positive")
    if np.any(k < 0):
        raise DomainError("wavenumber must be non-negative")
    dc = k == 0
    ks = np.where(dc, 1.0, k)
    z = ks * r
    # h_n(z) = e^{iz} p_n(z): the ratio needs a single complex exponential.
    p = _reduced_hankel(max(order, 1) if grad else order, z)
    pref = _reduced_hankel(order, ks * r_ref)
    phase = np.exp(1j * ks * (r - r_ref)) * np.where(dc, 0.0, 1.0)
    g = p[: order + 1] * (phase / pref)
    if not grad:
        return g
    dp = np.empty_like(g)
    dp[0] = -p[1]
    for n in range(1, order + 1):
        dp[n] = p[n - 1] - (n + 1) / z * p[n]
    return g, dp * (phase / pref) * ks


def propagation_gains(order: int, k, r, r_ref: float = 0.5, r_min: float = R_MIN, grad: bool = False):
    """Radial gains in the STFT's sign convention.

    The gains above assume time dependence ``e^{-i w t}``, where the outgoing
    factor ``e^{ikr}`` is a delay.  numpy's FFT synthesises with ``e^{+i w t}``,
    so the same wave is the complex conjugate.  Rendering into STFT bins uses
    these conjugated gains so that distance delays the signal.
    """
    if not grad:
        return np.conj(radial_gains(order, k, r, r_ref, r_min))
    g, dg = radial_gains(order, k, r, r_ref, r_min, grad=True)
    return np.conj(g), np.conj(dg)


def _reduced_hankel(order: int, z: np.ndarray) -> np.ndarray:
    """``h_n(z) e^{-iz}`` for n = 0..order (the e^{iz} factor is shared)."""
    out = np.empty((order + 1,) + z.shape, dtype=complex)
    inv = 1.0 / z
    out[0] = -1j * inv
    if order >= 1:
        out[1] = -(inv + 1j * inv * inv)
    for n in range(1, order):
        out[n + 1] = (2 * n + 1) * inv * out[n] - out[n - 1]
    return out

"""Spherical harmonics, Legendre functions and Hankel radial gains."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from acoustic_primitives.sphmath import (
    R_MIN,
    DomainError,
    acn_index,
    acn_to_nm,
    assoc_legendre,
    harmonic_orders,
    num_harmonics,
    radial_gain,
    radial_gains,
    sph_hankel,
    sph_hankel_all,
    sph_hankel_deriv_all,
    sph_harmonic,
    sph_harmonics,
    sph_harmonics_unit,
    wavenumber,
)


def closed_form_Y(n, m, theta, phi):
    """Y_nm from the factorial formula with an explicitly written P_nm."""
    x = math.cos(theta)
    s = math.sin(theta)
    P = {
        (0, 0): 1.0,
        (1, 0): x,
        (1, 1): -s,
        (2, 0): 0.5 * (3 * x * x - 1),
        (2, 1): -3 * x * s,
        (2, 2): 3 * s * s,
    }
    am = abs(m)
    y = math.sqrt((2 * n + 1) / (4 * math.pi) * math.factorial(n - am) / math.factorial(n + am))
    y = y * P[(n, am)] * complex(math.cos(am * phi), math.sin(am * phi))
    return (-1) ** am * y.conjugate() if m < 0 else y


def h_closed(n, z):
    e = complex(math.cos(z), math.sin(z))
    if n == 0:
        return -1j * e / z
    if n == 1:
        return -(z + 1j) * e / z**2
    if n == 2:
        return (1j / z) * (1 + 3j / z - 3 / z**2) * e
    raise ValueError(n)


class TestIndexing:
    def test_acn_bijection(self):
        seen = []
        for n in range(4):
            for m in range(-n, n + 1):
                idx = acn_index(n, m)
                assert acn_to_nm(idx) == (n, m)
                seen.append(idx)
        assert sorted(seen) == list(range(num_harmonics(3)))

    def test_invalid_index(self):
        with pytest.raises(DomainError):
            acn_index(1, 2)
        with pytest.raises(DomainError):
            acn_to_nm(-1)

    def test_harmonic_orders(self):
        np.testing.assert_array_equal(harmonic_orders(2), [0, 1, 1, 1, 2, 2, 2, 2, 2])

    def test_wavenumber(self):
        assert wavenumber(343.0) == pytest.approx(2 * np.pi)
        assert wavenumber(1000.0, 340.0) == pytest.approx(2 * np.pi * 1000 / 340)
        with pytest.raises(DomainError):
            wavenumber(-1.0)


class TestAssocLegendre:
    def test_examples(self):
        assert assoc_legendre(0, 0, 0.3) == 1.0
        assert assoc_legendre(1, 0, 0.5) == pytest.approx(0.5, abs=1e-15)
        assert assoc_legendre(2, 2, 0.0) == pytest.approx(3.0, abs=1e-14)

    @pytest.mark.parametrize("n,m", [(n, m) for n in range(4) for m in range(n + 1)])
    def test_matches_scipy(self, n, m):
        # scipy's lpmv includes the Condon-Shortley phase as well
        x = np.linspace(-1, 1, 41)
        np.testing.assert_allclose(assoc_legendre(n, m, x), special.lpmv(m, n, x), atol=1e-12)

    def test_domain_errors(self):
        with pytest.raises(DomainError):
            assoc_legendre(1, 0, 1.5)
        with pytest.raises(DomainError):
            assoc_legendre(1, 2, 0.0)


class TestSphHarmonic:
    def test_monopole(self):
        for theta, phi in [(0.0, 0.0), (1.0, 2.0), (np.pi, 6.0)]:
            y = sph_harmonic(0, 0, theta, phi)
            assert y.real == pytest.approx(0.2820948, abs=1e-7)
            assert y.imag == 0.0

    def test_equator_zero(self):
        assert abs(sph_harmonic(1, 0, np.pi / 2, 0.0)) < 1e-16

    def test_closed_form_n2_m1(self):
        assert sph_harmonic(2, 1, 0.7, 1.1) == pytest.approx(closed_form_Y(2, 1, 0.7, 1.1), abs=1e-14)

    @pytest.mark.parametrize("n,m", [(n, m) for n in range(3) for m in range(-n, n + 1)])
    def test_all_closed_forms(self, n, m):
        rng = np.random.default_rng(n * 10 + m)
        for theta, phi in zip(rng.uniform(0, np.pi, 5), rng.uniform(0, 2 * np.pi, 5)):
            assert sph_harmonic(n, m, theta, phi) == pytest.approx(closed_form_Y(n, m, theta, phi), abs=1e-13)

    def test_orthonormality(self):
        # Gauss-Legendre in cos(theta) is exact for these polynomial degrees
        x, wx = np.polynomial.legendre.leggauss(16)
        nphi = 32
        phi = 2 * np.pi * np.arange(nphi) / nphi
        T, P = np.meshgrid(np.arccos(x), phi, indexing="ij")
        w = np.outer(wx, np.full(nphi, 2 * np.pi / nphi))
        Y = sph_harmonics(2, T, P).reshape(9, -1)
        G = (Y * w.ravel()) @ Y.conj().T
        np.testing.assert_allclose(G, np.eye(9), atol=1e-6)

    def test_unit_vector_form_matches_angles(self):
        rng = np.random.default_rng(0)
        theta, phi = rng.uniform(0, np.pi, 50), rng.uniform(0, 2 * np.pi, 50)
        u = np.stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], -1)
        for q in range(9):
            n, m = acn_to_nm(q)
            np.testing.assert_allclose(sph_harmonics_unit(2, u)[q], sph_harmonic(n, m, theta, phi), atol=1e-13)

    def test_unit_gradient_finite_difference(self):
        rng = np.random.default_rng(1)
        u = rng.standard_normal((6, 3))
        _, dY = sph_harmonics_unit(2, u, grad=True)
        eps = 1e-6
        for a in range(3):
            e = np.zeros(3)
            e[a] = eps
            fd = (sph_harmonics_unit(2, u + e) - sph_harmonics_unit(2, u - e)) / (2 * eps)
            np.testing.assert_allclose(dY[:, a], fd, atol=1e-8)

    def test_theta_out_of_range(self):
        with pytest.raises(DomainError):
            sph_harmonic(1, 0, -0.5, 0.0)

    @settings(max_examples=60, deadline=None)
    @given(
        st.integers(0, 2).flatmap(lambda n: st.tuples(st.just(n), st.integers(-n, n))),
        st.floats(0, np.pi),
        st.floats(0, 2 * np.pi, exclude_max=True),
    )
    def test_conjugate_symmetry(self, nm, theta, phi):
        n, m = nm
        lhs = sph_harmonic(n, -m, theta, phi)
        rhs = (-1) ** m * np.conj(sph_harmonic(n, m, theta, phi))
        assert abs(lhs - rhs) < 1e-14


class TestHankel:
    def test_h0_at_one(self):
        h = sph_hankel(0, 1.0)
        assert h.real == pytest.approx(0.841471, abs=1e-6)
        assert h.imag == pytest.approx(-0.540302, abs=1e-6)

    def test_h1_at_one(self):
        h = sph_hankel(1, 1.0)
        assert h.real == pytest.approx(0.301169, abs=1e-6)
        assert h.imag == pytest.approx(-1.381773, abs=1e-6)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(1e-3, 1e4))
    def test_h0_magnitude(self, z):
        assert abs(sph_hankel(0, z)) == pytest.approx(1.0 / z, rel=1e-12)

    @pytest.mark.parametrize("n", [0, 1, 2, 3])
    def test_matches_scipy(self, n):
        z = np.geomspace(0.1, 100, 200)
        ref = special.spherical_jn(n, z) + 1j * special.spherical_yn(n, z)
        np.testing.assert_allclose(sph_hankel(n, z), ref, rtol=1e-10)

    @pytest.mark.parametrize("n", [0, 1, 2])
    def test_closed_forms(self, n):
        for z in [0.1, 0.7, 3.0, 42.0]:
            assert sph_hankel(n, z) == pytest.approx(h_closed(n, z), rel=1e-12)

    def test_recurrence(self):
        z = np.geomspace(0.1, 100, 500)
        h = sph_hankel_all(2, z)
        np.testing.assert_allclose(h[2], 3 / z * h[1] - h[0], rtol=1e-10)

    def test_derivative(self):
        z = np.geomspace(0.2, 50, 40)
        _, dh = sph_hankel_deriv_all(2, z)
        for n in range(3):
            ref = special.spherical_jn(n, z, derivative=True) + 1j * special.spherical_yn(n, z, derivative=True)
            np.testing.assert_allclose(dh[n], ref, rtol=1e-9)

    def test_domain(self):
        with pytest.raises(DomainError):
            sph_hankel(0, 0.0)
        with pytest.raises(DomainError):
            sph_hankel(1, -1.0)


class TestRadialGain:
    def test_unity_at_reference(self):
        for k in [0.5, 10.0, 300.0]:
            assert radial_gain(0, k, 0.5, 0.5) == pytest.approx(1.0, abs=1e-14)

    def test_monopole_example(self):
        g = radial_gain(0, 10.0, 1.0, 0.5)
        assert abs(g) == pytest.approx(0.5, abs=1e-14)
        assert np.angle(g) == pytest.approx(5.0 - 2 * np.pi, abs=1e-12)

    def test_second_order_closed_form(self):
        g = radial_gain(2, 20.0, 0.8, 0.5)
        assert g == pytest.approx(h_closed(2, 16.0) / h_closed(2, 10.0), rel=1e-12)

    def test_dc_is_zero(self):
        np.testing.assert_array_equal(radial_gains(2, 0.0, 1.0), np.zeros(3))

    def test_r_min(self):
        with pytest.raises(DomainError):
            radial_gain(0, 1.0, R_MIN / 2)
        radial_gain(0, 1.0, R_MIN)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.1, 200.0), st.floats(0.05, 20.0), st.floats(0.05, 20.0))
    def test_monopole_decay(self, k, r1, r2):
        g1, g2 = radial_gain(0, k, r1), radial_gain(0, k, r2)
        assert abs(g1) * r1 == pytest.approx(abs(g2) * r2, rel=1e-12)

    @pytest.mark.parametrize("n", [0, 1, 2])
    def test_far_field_phase(self, n):
        # arg h_n(z) - z approaches its limit as n(n+1)/(2z); for n = 2 the
        # change between kr = 1e3 and 1e4 is 2.7e-3 rad
        k, r_ref = 10.0, 0.5
        resid = []
        for kr in [1e3, 1e4]:
            r = kr / k
            resid.append(np.angle(radial_gain(n, k, r, r_ref) * np.exp(-1j * k * (r - r_ref))))
        assert abs(resid[0] - resid[1]) < 1e-3

    def test_gradient_in_r(self):
        k = np.array([3.0, 30.0])[:, None]
        r = np.array([0.3, 1.2, 2.5])[None, :]
        _, dg = radial_gains(2, k, r, grad=True)
        eps = 1e-7
        fd = (radial_gains(2, k, r + eps) - radial_gains(2, k, r - eps)) / (2 * eps)
        np.testing.assert_allclose(dg, fd, rtol=1e-6, atol=1e-9)

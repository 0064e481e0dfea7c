"""Spherical harmonics basis and feature decoding."""

import numpy as np
import pytest

from ccfield.shading import ShadingConfig, decode, eval_sh_basis, softplus


def uniform_sphere(n, seed=0):
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def reference_sh(d, l_max):
    """Associated-Legendre recurrence, Condon-Shortley-free; independent of
    the hardcoded polynomial table."""
    x, y, z = d
    phi = np.arctan2(y, x)
    ct = z
    st = np.sqrt(max(0.0, 1.0 - z * z))
    # P[l][m] without the (-1)^m phase
    P = np.zeros((l_max + 1, l_max + 1))
    P[0][0] = 1.0
    for m in range(1, l_max + 1):
        P[m][m] = (2 * m - 1) * st * P[m - 1][m - 1]
    for m in range(l_max):
        P[m + 1][m] = (2 * m + 1) * ct * P[m][m]
    for m in range(l_max + 1):
        for l in range(m + 2, l_max + 1):
            P[l][m] = ((2 * l - 1) * ct * P[l - 1][m] - (l + m - 1) * P[l - 2][m]) / (l - m)
    from math import factorial, pi, sqrt

    out = []
    for l in range(l_max + 1):
        for m in range(-l, l + 1):
            am = abs(m)
            k = sqrt((2 * l + 1) / (4 * pi) * factorial(l - am) / factorial(l + am))
            if m == 0:
                out.append(k * P[l][0])
            elif m > 0:
                out.append(sqrt(2.0) * k * np.cos(m * phi) * P[l][m])
            else:
                out.append(sqrt(2.0) * k * np.sin(am * phi) * P[l][am])
    return np.array(out)


class TestBasis:
    def test_degree_zero_constant(self):
        d = uniform_sphere(20, seed=1)
        vals = eval_sh_basis(d, 0)
        np.testing.assert_allclose(vals[:, 0], 1.0 / (2.0 * np.sqrt(np.pi)), atol=1e-7)

    def test_l1_m0_along_z(self):
        v = eval_sh_basis(np.array([0.0, 0.0, 1.0]), 1)
        np.testing.assert_allclose(v[2], np.sqrt(3.0 / (4.0 * np.pi)), atol=1e-9)

    def test_monte_carlo_orthonormality_degree3(self):
        d = uniform_sphere(1_000_000, seed=2).astype(np.float64)
        Y = eval_sh_basis(d, 3)
        gram = (Y.T @ Y) * (4.0 * np.pi / len(d))
        assert np.abs(gram - np.eye(16)).max() < 5e-3

    def test_matches_recurrence_reference_degree4(self):
        d = uniform_sphere(200, seed=3).astype(np.float64)
        Y = eval_sh_basis(d, 4)
        for i in range(len(d)):
            np.testing.assert_allclose(Y[i], reference_sh(d[i], 4), atol=1e-10)

    def test_normalizes_slightly_off_unit(self):
        v1 = eval_sh_basis(np.array([0.0, 0.0, 2.0]), 2)
        v2 = eval_sh_basis(np.array([0.0, 0.0, 1.0]), 2)
        np.testing.assert_allclose(v1, v2, atol=1e-7)

    def test_zero_direction_rejected(self):
        with pytest.raises(ValueError):
            eval_sh_basis(np.zeros(3), 2)


class TestDecode:
    def test_density_activation_at_zero(self):
        cfg = ShadingConfig()
        sigma, _ = decode(
            np.array([-cfg.density_shift]), np.zeros((1, 48)),
            np.array([[0.0, 0.0, 1.0]]), cfg,
        )
        np.testing.assert_allclose(sigma, np.log(2.0), atol=1e-6)

    def test_zero_coefficients_give_mid_gray(self):
        cfg = ShadingConfig()
        _, rgb = decode(np.zeros(1), np.zeros((1, 48)), np.array([[0.0, 0.0, 1.0]]), cfg)
        np.testing.assert_allclose(rgb, 0.5, atol=1e-7)

    def test_dc_only_is_view_independent(self):
        cfg = ShadingConfig()
        raw = np.zeros((100, 48))
        k = 1.7
        raw[:, 0] = k          # red channel's l=0 coefficient
        d = uniform_sphere(100, seed=4)
        _, rgb = decode(np.zeros(100), raw, d, cfg)
        expect = 1.0 / (1.0 + np.exp(-k / (2.0 * np.sqrt(np.pi))))
        np.testing.assert_allclose(rgb[:, 0], expect, atol=1e-6)
        assert np.ptp(rgb[:, 0]) < 1e-7
        np.testing.assert_allclose(rgb[:, 1:], 0.5, atol=1e-7)

    def test_outputs_bounded(self):
        cfg = ShadingConfig(sh_degree=2)
        rng = np.random.default_rng(5)
        raw_c = 50.0 * rng.standard_normal((200, cfg.color_channels))
        raw_d = 50.0 * rng.standard_normal(200)
        sigma, rgb = decode(raw_d, raw_c, uniform_sphere(200, seed=6), cfg)
        assert np.all(sigma >= 0.0)
        assert np.all((rgb > 0.0) & (rgb < 1.0))

    def test_channel_count_validated(self):
        with pytest.raises(ValueError):
            decode(np.zeros(1), np.zeros((1, 27)), np.array([[0, 0, 1.0]]),
                   ShadingConfig(sh_degree=3))

    def test_config_channel_arithmetic(self):
        assert ShadingConfig(sh_degree=3).color_channels == 48
        assert ShadingConfig(sh_degree=0).color_channels == 3
        with pytest.raises(ValueError):
            ShadingConfig(sh_degree=5)


def test_softplus_stable_extremes():
    assert softplus(np.array([-1000.0]))[0] == 0.0
    np.testing.assert_allclose(softplus(np.array([1000.0]))[0], 1000.0)
    np.testing.assert_allclose(softplus(np.array([0.0]))[0], np.log(2.0))

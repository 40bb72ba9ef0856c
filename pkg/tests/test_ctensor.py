import numpy as np
import pytest

from unrollmri import ctensor
from unrollmri.ctensor import (WhitenStats, cdot, check_finite, fft2c, ifft2c,
                               rss, whiten, whiten_stats)


def centered_dft_matrix(n: int) -> np.ndarray:
    # independent oracle: unitary DFT with zero frequency at index n//2
    # in both domains
    c = n // 2
    k = np.arange(n) - c
    return np.exp(-2j * np.pi * np.outer(k, k) / n) / np.sqrt(n)


@pytest.mark.parametrize("h,w", [(8, 8), (6, 10), (5, 7), (1, 4), (9, 9)])
def test_fft2c_matches_dense_dft(h, w):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((h, w)) + 1j * rng.standard_normal((h, w))
    fh = centered_dft_matrix(h)
    fw = centered_dft_matrix(w)
    expected = fh @ x @ fw.T
    np.testing.assert_allclose(fft2c(x), expected, atol=1e-10)
    np.testing.assert_allclose(ifft2c(expected), x, atol=1e-10)


def test_fft2c_round_trip_and_batched():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((3, 12, 16)) + 1j * rng.standard_normal((3, 12, 16))
    np.testing.assert_allclose(ifft2c(fft2c(x)), x, atol=1e-12)
    np.testing.assert_allclose(fft2c(ifft2c(x)), x, atol=1e-12)
    # batched equals per-slice
    for q in range(3):
        np.testing.assert_allclose(fft2c(x)[q], fft2c(x[q]), atol=0)


def test_fft2c_unitary_and_adjoint():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((10, 14)) + 1j * rng.standard_normal((10, 14))
    y = rng.standard_normal((10, 14)) + 1j * rng.standard_normal((10, 14))
    assert np.linalg.norm(fft2c(x)) == pytest.approx(np.linalg.norm(x), rel=1e-12)
    # <F x, y> == <x, F^H y> with F^H = ifft2c
    lhs = cdot(fft2c(x), y)
    rhs = cdot(x, ifft2c(y))
    assert abs(lhs - rhs) < 1e-10 * abs(lhs)


@pytest.mark.parametrize("h,w", [(8, 8), (6, 10), (5, 7)])
def test_fft1c_matches_dense_dft_and_separates(h, w):
    rng = np.random.default_rng(11)
    x = rng.standard_normal((h, w)) + 1j * rng.standard_normal((h, w))
    fh = centered_dft_matrix(h)
    np.testing.assert_allclose(ctensor.fft1c(x, axis=-2), fh @ x, atol=1e-10)
    np.testing.assert_allclose(ctensor.ifft1c(ctensor.fft1c(x, axis=-2), axis=-2),
                               x, atol=1e-12)
    # the 2D transform factors into the two 1D transforms
    np.testing.assert_allclose(
        ctensor.fft1c(ctensor.fft1c(x, axis=-2), axis=-1), fft2c(x), atol=1e-12)


def test_fft2c_linearity():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((8, 8)) + 1j * rng.standard_normal((8, 8))
    y = rng.standard_normal((8, 8)) + 1j * rng.standard_normal((8, 8))
    a, b = 2.5 - 0.5j, -1.25 + 3j
    np.testing.assert_allclose(fft2c(a * x + b * y), a * fft2c(x) + b * fft2c(y),
                               atol=1e-12)


def test_cdot_oracle_and_shape_check():
    rng = np.random.default_rng(7)
    a = rng.standard_normal((4, 5)) + 1j * rng.standard_normal((4, 5))
    b = rng.standard_normal((4, 5)) + 1j * rng.standard_normal((4, 5))
    slow = sum(complex(np.conj(a[i, j]) * b[i, j])
               for i in range(4) for j in range(5))
    assert cdot(a, b) == pytest.approx(slow, rel=1e-13)
    assert cdot(a, a).real == pytest.approx(np.linalg.norm(a) ** 2, rel=1e-13)
    with pytest.raises(ValueError):
        cdot(a, b[:, :4])


def test_rss_oracle():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((6, 9, 11)) + 1j * rng.standard_normal((6, 9, 11))
    out = rss(x)
    assert out.shape == (9, 11)
    assert not np.iscomplexobj(out)
    for i in range(9):
        for j in range(11):
            expected = np.sqrt(sum(abs(x[q, i, j]) ** 2 for q in range(6)))
            assert out[i, j] == pytest.approx(expected, rel=1e-13)
    assert np.all(out >= 0)


def test_whiten_self_stats_gives_unit_moments():
    rng = np.random.default_rng(9)
    # correlated re/im parts
    re = rng.standard_normal(4000) * 3.0 + 1.0
    im = 0.8 * re + rng.standard_normal(4000) * 0.5 - 2.0
    x = re + 1j * im
    stats = whiten_stats(x)
    z = whiten(x, stats, "normalize")
    assert abs(z.mean()) < 1e-10
    planes = np.stack([z.real, z.imag])
    cov = planes @ planes.T / planes.shape[1]
    np.testing.assert_allclose(cov, np.eye(2), atol=1e-8)


def test_whiten_round_trip():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((2, 16, 16)) + 1j * rng.standard_normal((2, 16, 16))
    stats = whiten_stats(rng.standard_normal(500) * 2 + 1j * rng.standard_normal(500))
    z = whiten(x, stats, "normalize")
    back = whiten(z, stats, "denormalize")
    np.testing.assert_allclose(back, x, atol=1e-10)


def test_whiten_degenerate_input_floored():
    # constant sample: covariance is zero, floor keeps the map finite
    x = np.full(64, 2.0 + 1.0j)
    stats = whiten_stats(x)
    z = whiten(x, stats, "normalize")
    assert np.all(np.isfinite(z))
    np.testing.assert_allclose(z, 0)
    # purely real sample: rank-1 covariance
    xr = np.linspace(-1, 1, 64).astype(complex)
    zr = whiten(xr, whiten_stats(xr), "normalize")
    assert np.all(np.isfinite(zr))


def test_whiten_stats_validation():
    with pytest.raises(ValueError):
        WhitenStats(mean=0j, cov=np.eye(3))
    with pytest.raises(ValueError):
        WhitenStats(mean=complex(np.nan), cov=np.eye(2))
    with pytest.raises(ValueError):
        whiten(np.zeros(4, complex), whiten_stats(np.zeros(4, complex)), "sideways")


def test_whiten_stats_uses_biased_covariance():
    x = np.array([1.0 + 0j, -1.0 + 0j])
    stats = whiten_stats(x)
    assert stats.cov[0, 0] == pytest.approx(1.0)  # 1/N, not 1/(N-1)


def test_check_finite():
    check_finite(np.ones(3))
    with pytest.raises(ValueError, match="kspace"):
        check_finite(np.array([1.0, np.nan]), "kspace")
    with pytest.raises(ValueError):
        check_finite(np.array([1.0 + 1j * np.inf]))


def test_cov_eig_floor_constant():
    assert ctensor.COV_EIG_FLOOR == 1e-8

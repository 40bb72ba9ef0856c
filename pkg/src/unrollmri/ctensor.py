"""Complex image-stack utilities: centered orthonormal FFTs, inner products,
root-sum-of-squares combination and complex-valued whitening.

Arrays follow the convention ``[channels, height, width]`` with complex dtype;
``.real``/``.imag`` give the split real/imaginary planes. All functions are
pure and safe to call from multiple threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Eigenvalue floor applied to whitening covariances before inversion.
COV_EIG_FLOOR = 1e-8

_FFT_AXES = (-2, -1)


def _as_complex(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.complex128)


def check_finite(x: np.ndarray, what: str = "array") -> None:
    """Raise ValueError if ``x`` contains NaN or Inf."""
    if not np.all(np.isfinite(x.view(np.float64) if np.iscomplexobj(x) else x)):
        raise ValueError(f"non-finite values in {what}")


def fft2c(x: np.ndarray, axes: tuple[int, int] = _FFT_AXES) -> np.ndarray:
    """Centered, orthonormal 2D FFT over the trailing image axes.

    The zero-frequency component sits at ``(H//2, W//2)`` in both domains, and
    the transform is unitary, so the adjoint equals the inverse.
    """
    x = np.asarray(x)
    t = np.fft.ifftshift(x, axes=axes)
    t = np.fft.fft2(t, axes=axes, norm="ortho")
    return np.fft.fftshift(t, axes=axes)


def ifft2c(y: np.ndarray, axes: tuple[int, int] = _FFT_AXES) -> np.ndarray:
    """Inverse of :func:`fft2c`; exact (to rounding) for any H, W >= 1."""
    y = np.asarray(y)
    t = np.fft.ifftshift(y, axes=axes)
    t = np.fft.ifft2(t, axes=axes, norm="ortho")
    return np.fft.fftshift(t, axes=axes)


def fft1c(x: np.ndarray, axis: int = -2) -> np.ndarray:
    """Centered, orthonormal FFT along a single axis (default: rows)."""
    x = np.asarray(x)
    t = np.fft.ifftshift(x, axes=axis)
    t = np.fft.fft(t, axis=axis, norm="ortho")
    return np.fft.fftshift(t, axes=axis)


def ifft1c(y: np.ndarray, axis: int = -2) -> np.ndarray:
    """Inverse of :func:`fft1c` along the same axis."""
    y = np.asarray(y)
    t = np.fft.ifftshift(y, axes=axis)
    t = np.fft.ifft(t, axis=axis, norm="ortho")
    return np.fft.fftshift(t, axes=axis)


def cdot(a: np.ndarray, b: np.ndarray) -> complex:
    """Complex inner product ``sum(conj(a) * b)``.

    Raises ValueError on shape mismatch.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"cdot shape mismatch: {a.shape} vs {b.shape}")
    return complex(np.sum(np.conj(a) * b))


def rss(x: np.ndarray, axis: int = 0) -> np.ndarray:
    """Root-sum-of-squares combination over the channel axis."""
    x = np.asarray(x)
    return np.sqrt(np.sum(np.abs(x) ** 2, axis=axis))


@dataclass
class WhitenStats:
    """First/second moments of a complex sample treated as (re, im) pairs.

    ``cov`` is the full 2x2 real covariance of the stacked real and imaginary
    parts; its eigenvalues are floored at ``COV_EIG_FLOOR`` before inversion so
    degenerate (e.g. purely real) inputs stay invertible.
    """

    mean: complex
    cov: np.ndarray  # (2, 2) real symmetric

    def __post_init__(self) -> None:
        self.mean = complex(self.mean)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.cov.shape != (2, 2):
            raise ValueError(f"cov must be 2x2, got {self.cov.shape}")
        if not (np.isfinite(self.mean).all() and np.isfinite(self.cov).all()):
            raise ValueError("non-finite whitening statistics")
        self.cov = 0.5 * (self.cov + self.cov.T)

    def sqrt_and_inv_sqrt(self) -> tuple[np.ndarray, np.ndarray]:
        """(cov^{1/2}, cov^{-1/2}) with floored eigenvalues."""
        w, v = np.linalg.eigh(self.cov)
        w = np.maximum(w, COV_EIG_FLOOR)
        sq = (v * np.sqrt(w)) @ v.T
        isq = (v / np.sqrt(w)) @ v.T
        return sq, isq


def whiten_stats(x: np.ndarray) -> WhitenStats:
    """Estimate :class:`WhitenStats` from the entries of a complex array.

    Uses the biased (1/N) covariance so that whitening the same sample yields
    unit empirical covariance.
    """
    x = _as_complex(x).ravel()
    mean = complex(x.mean())
    z = x - mean
    planes = np.stack([z.real, z.imag])  # (2, N)
    cov = (planes @ planes.T) / planes.shape[1]
    return WhitenStats(mean=mean, cov=cov)


def _real_2x2_to_complex_pair(mat: np.ndarray) -> tuple[complex, complex]:
    """Represent the R-linear map ``v -> mat @ v`` on (re, im) pairs as
    ``z -> a*z + b*conj(z)``."""
    m00, m01 = mat[0, 0], mat[0, 1]
    m10, m11 = mat[1, 0], mat[1, 1]
    a = 0.5 * (m00 + m11) + 0.5j * (m10 - m01)
    b = 0.5 * (m00 - m11) + 0.5j * (m10 + m01)
    return complex(a), complex(b)


def whiten_coeffs(stats: WhitenStats, direction: str) -> tuple[complex, complex, complex]:
    """Coefficients (a, b, shift) such that the whitening map is
    ``z -> a*(z - shift) + b*conj(z - shift)`` for ``normalize`` and
    ``z -> a*z + b*conj(z) + shift`` for ``denormalize``."""
    sq, isq = stats.sqrt_and_inv_sqrt()
    if direction == "normalize":
        a, b = _real_2x2_to_complex_pair(isq)
        return a, b, stats.mean
    if direction == "denormalize":
        a, b = _real_2x2_to_complex_pair(sq)
        return a, b, stats.mean
    raise ValueError(f"unknown whiten direction {direction!r}")


def whiten(x: np.ndarray, stats: WhitenStats, direction: str = "normalize") -> np.ndarray:
    """Complex-valued whitening / un-whitening.

    ``normalize`` subtracts the mean and applies ``cov^{-1/2}`` to the (re, im)
    pairs; ``denormalize`` inverts it, so the round trip is the identity to
    ~1e-10.
    """
    x = _as_complex(x)
    a, b, shift = whiten_coeffs(stats, direction)
    if direction == "normalize":
        z = x - shift
        return a * z + b * np.conj(z)
    return a * x + b * np.conj(x) + shift

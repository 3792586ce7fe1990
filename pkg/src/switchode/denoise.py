"""Wavelet-shrinkage trajectory recovery and integrated basis features.

Coefficients returned by :func:`dwt` are those of the orthonormal periodic
Daubechies-3 transform of the raw sample vector. They equal ``sqrt(N)``
times the L2[0, 1] coefficients of the step-function interpolant, so the
L2-scale threshold ``lam`` acts on them as ``lam * sqrt(N)``.
"""
from dataclasses import dataclass

import numpy as np
import pywt

from .errors import DataError

WAVELET = "db3"
MODE = "periodization"
MAD_CONSTANT = 0.6745


@dataclass
class WaveletCoeffs:
    j0: int
    J: int
    approx: np.ndarray
    details: list  # details[j - j0] has 2**j entries, j = j0..J-1

    def __len__(self):
        return self.approx.size + sum(d.size for d in self.details)

    def flat(self):
        return np.concatenate([self.approx, *self.details])


@dataclass
class DenoiseConfig:
    """Shrinkage settings.

    ``sigma`` is a noise s.d. or ``"estimate"``. Setting ``highdim_p``
    inflates the tail term to ``log(N/delta) + 3 log p`` (a union bound over
    ``p`` nodes).
    """

    delta: float = 0.1
    j0: int = 3
    sigma: object = "estimate"
    highdim_p: int = None

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise DataError("delta must lie in (0, 1)")
        if self.j0 < 0:
            raise DataError("j0 must be non-negative")
        if not (self.sigma == "estimate" or float(self.sigma) >= 0):
            raise DataError("sigma must be 'estimate' or a non-negative number")


@dataclass
class PsiFeatures:
    """``psi[n-1, j] = int_{t_{n-1}}^{t_n} g(xhat_j(u)) du`` for n = 1..N."""

    psi: np.ndarray
    h: float

    def __post_init__(self):
        self.psi = np.asarray(self.psi, dtype=float)
        if self.psi.ndim != 3:
            raise DataError(f"psi must be (N, p, m), got {self.psi.shape}")
        if not np.all(np.isfinite(self.psi)):
            raise DataError("psi contains non-finite values")

    @property
    def N(self):
        return self.psi.shape[0]

    @property
    def p(self):
        return self.psi.shape[1]

    @property
    def m(self):
        return self.psi.shape[2]


def _levels(n, j0):
    J = int(np.log2(n)) if n > 0 else 0
    if n < 2 or 2**J != n:
        raise DataError(f"series length {n} is not a power of two")
    if not 0 <= j0 < J:
        raise DataError(f"need 0 <= j0 < J, got j0={j0}, J={J}")
    return J


def dwt(series, j0=3):
    series = np.asarray(series, dtype=float)
    J = _levels(series.size, j0)
    coeffs = pywt.wavedec(series, WAVELET, mode=MODE, level=J - j0)
    return WaveletCoeffs(j0, J, coeffs[0], list(coeffs[1:]))


def idwt(coeffs):
    return pywt.waverec([coeffs.approx, *coeffs.details], WAVELET, mode=MODE)


def soft_threshold(coeffs, lam):
    """Shrink every detail coefficient toward zero by ``lam``.

    ``lam`` is a scalar or one value per detail level; approximation
    coefficients are left untouched.
    """
    lam = np.broadcast_to(np.asarray(lam, dtype=float), (len(coeffs.details),))
    if np.any(lam < 0):
        raise DataError("threshold must be non-negative")
    details = [np.sign(d) * np.maximum(np.abs(d) - t, 0.0) for d, t in zip(coeffs.details, lam)]
    return WaveletCoeffs(coeffs.j0, coeffs.J, coeffs.approx.copy(), details)


def estimate_noise_sigma(series):
    """Median absolute finest-level detail coefficient over 0.6745."""
    series = np.asarray(series, dtype=float)
    if series.size < 4:
        raise DataError("need at least 4 samples to estimate the noise level")
    _, detail = pywt.dwt(series, WAVELET, mode=MODE)
    return float(np.median(np.abs(detail)) / MAD_CONSTANT)


def shrinkage_threshold(sigma, n, delta, highdim_p=None):
    """L2-scale threshold ``3 sigma sqrt(2 log(n/delta) / n)``."""
    tail = np.log(n / delta)
    if highdim_p:
        tail += 3.0 * np.log(highdim_p)
    return 3.0 * sigma * np.sqrt(2.0 * tail / n)


def _pad_pow2(series):
    n = series.size
    target = 1 << max(int(np.ceil(np.log2(n))), 1)
    if target == n:
        return series, 0
    left = (target - n) // 2
    return np.pad(series, (left, target - n - left), mode="symmetric"), left


def denoise_trajectory(series, config=None):
    """Soft-threshold wavelet estimate of one node's trajectory.

    Lengths that are not a power of two are symmetric-padded to the next
    power of two and cropped back. Returns ``(xhat, sigma_used)``.
    """
    config = config or DenoiseConfig()
    series = np.asarray(series, dtype=float)
    n = series.size
    padded, left = _pad_pow2(series)
    if config.sigma == "estimate":
        sigma = estimate_noise_sigma(padded)
    else:
        sigma = float(config.sigma)
    coeffs = dwt(padded, config.j0)
    lam = shrinkage_threshold(sigma, padded.size, config.delta, config.highdim_p)
    shrunk = soft_threshold(coeffs, lam * np.sqrt(padded.size))
    return idwt(shrunk)[left:left + n], sigma


def denoise_observations(y, config=None):
    """Denoise each column of ``y``; returns ``(xhat, sigmas)``."""
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    out = np.empty_like(y)
    sigmas = np.empty(y.shape[1])
    for j in range(y.shape[1]):
        out[:, j], sigmas[j] = denoise_trajectory(y[:, j], config)
    return out, sigmas


def compute_psi_features(x_hat, basis, h):
    """Trapezoid-rule integrated basis features over each sampling interval."""
    x_hat = np.asarray(x_hat, dtype=float)
    if x_hat.ndim == 1:
        x_hat = x_hat[:, None]
    if x_hat.shape[0] < 2:
        raise DataError("need at least two grid points")
    g = basis.eval(x_hat)  # (N+1, p, m)
    return PsiFeatures(0.5 * h * (g[1:] + g[:-1]), h)

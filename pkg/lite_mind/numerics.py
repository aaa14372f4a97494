"""Complex arithmetic, token-axis DFTs and the brute-force oracles they are checked against.

Conventions: 0-based indices, unnormalized forward transform, 1/n on the inverse.
Canonical spectra are full length (n bins, no half-spectrum packing). Everything here
runs on numpy in double precision and is pure.
"""
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from lite_mind.constants import EPS
from lite_mind.errors import NumericalError, ShapeError

logger = logging.getLogger(__name__)

ComplexPair = Tuple[float, float]


@dataclass(frozen=True)
class ComplexTensor:
    """Dense complex array held as separate real and imaginary parts"""
    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        if self.re.shape != self.im.shape:
            raise ShapeError(f"re {self.re.shape} and im {self.im.shape} differ")
        if not (np.isfinite(self.re).all() and np.isfinite(self.im).all()):
            raise NumericalError("ComplexTensor entries must be finite")

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.re.shape

    @classmethod
    def from_array(cls, z: np.ndarray) -> "ComplexTensor":
        z = np.asarray(z, dtype=np.complex128)
        return cls(re=np.ascontiguousarray(z.real), im=np.ascontiguousarray(z.imag))

    def to_array(self) -> np.ndarray:
        return self.re + 1j * self.im


def as_real_tensor(t) -> np.ndarray:
    """Validate a RealTensor: real, finite, at least one token"""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0 or t.shape[0] < 1:
        raise ShapeError(f"expected at least one token, got shape {t.shape}")
    if not np.isfinite(t).all():
        raise NumericalError("RealTensor entries must be finite")
    return t


def complex_mul(z1: ComplexPair, z2: ComplexPair) -> ComplexPair:
    """(a+jb)(c+jd) = (ac-bd) + j(ad+bc)"""
    a, b = z1
    c, d = z2
    return a * c - b * d, a * d + b * c


def dft_1d(t) -> ComplexTensor:
    """Forward DFT along the token (first) axis, independently per channel"""
    t = as_real_tensor(t)
    return ComplexTensor.from_array(np.fft.fft(t, axis=0))


def idft_1d(X: ComplexTensor) -> ComplexTensor:
    """Inverse DFT along the token axis with 1/n normalization"""
    if len(X.shape) == 0 or X.shape[0] < 1:
        raise ShapeError(f"expected at least one frequency bin, got shape {X.shape}")
    return ComplexTensor.from_array(np.fft.ifft(X.to_array(), axis=0))


def take_real(X: ComplexTensor) -> Tuple[np.ndarray, float]:
    """Drop imaginary parts; also return max |im| as a diagnostic"""
    residue = float(np.abs(X.im).max()) if X.im.size else 0.0
    logger.debug(f"take_real residue {residue:.3e} over shape {X.shape}")
    return X.re.copy(), residue


def _phase_matrix(n: int, sign: float) -> np.ndarray:
    # k*i reduced mod n keeps the phase argument small for large n
    ki = np.outer(np.arange(n), np.arange(n)) % n
    return np.exp(sign * 2j * np.pi * ki / n)


def naive_dft(t) -> np.ndarray:
    """O(n^2) DFT by explicit summation (oracle)"""
    t = as_real_tensor(t).astype(np.complex128)
    return _phase_matrix(t.shape[0], -1.0) @ t


def naive_idft(X: np.ndarray) -> np.ndarray:
    """O(n^2) inverse DFT by explicit summation (oracle)"""
    X = np.asarray(X, dtype=np.complex128)
    n = X.shape[0]
    return (_phase_matrix(n, 1.0) @ X) / n


def circular_convolve(x, h) -> np.ndarray:
    """y[i] = sum_tau x[tau] * h[(i - tau) mod n], by direct summation"""
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if x.shape != h.shape or x.ndim != 1:
        raise ShapeError(f"circular_convolve needs equal-length vectors, got {x.shape} and {h.shape}")
    n = x.shape[0]
    lag = (np.arange(n)[:, None] - np.arange(n)[None, :]) % n
    return h[lag] @ x


def parseval_gap(t) -> float:
    """Relative gap between spatial energy and (1/n)-scaled spectral energy"""
    t = as_real_tensor(t)
    X = dft_1d(t)
    spatial = float(np.sum(t ** 2))
    spectral = float(np.sum(X.re ** 2 + X.im ** 2)) / t.shape[0]
    return abs(spatial - spectral) / max(spatial, EPS)


def complex_matmul_naive(A: ComplexTensor, B: ComplexTensor) -> ComplexTensor:
    """Scalar-loop complex matrix product built from complex_mul (oracle)"""
    if len(A.shape) != 2 or len(B.shape) != 2 or A.shape[1] != B.shape[0]:
        raise ShapeError(f"cannot multiply {A.shape} by {B.shape}")
    rows, inner = A.shape
    cols = B.shape[1]
    re = np.zeros((rows, cols))
    im = np.zeros((rows, cols))
    for r in range(rows):
        for c in range(cols):
            acc_re, acc_im = 0.0, 0.0
            for k in range(inner):
                pr, pi = complex_mul((A.re[r, k], A.im[r, k]), (B.re[k, c], B.im[k, c]))
                acc_re += pr
                acc_im += pi
            re[r, c] = acc_re
            im[r, c] = acc_im
    return ComplexTensor(re=re, im=im)

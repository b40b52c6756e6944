"""Pseudothermal speckle fields on the focusing-element plane.

Each frame gets an independent fully developed speckle pattern: circular
complex Gaussian white noise low-pass filtered by a Gaussian kernel of
standard deviation ``sigma_c`` (per axis, um) using periodic convolution,
scaled so the expected intensity equals the requested mean (the empirical
mean then matches it to within sampling error).  With that convention the
normalized intensity covariance of the field is

    Cov(I(r), I(r + d)) / <I>^2 = exp(-|d|^2 / (2 sigma_c^2)),

so the intensity-correlation grain has 1/e half-width sigma_c * sqrt(2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ValidationError, axis_centers

# Domain separation tags so speckle and detector draws differ even for equal
# user seeds (SeedSequence entropy prefixes).
_SPECKLE_TAG = 0x5BEC_C1E0


@dataclass(frozen=True)
class SpeckleGrid:
    """Sampling grid on the focusing-element plane: dims (width, height), pitch um."""

    dims: tuple[int, int]
    pitch: float

    def __post_init__(self):
        w, h = self.dims
        if w < 1 or h < 1:
            raise ValidationError("speckle grid dims must be >= 1")
        if not (np.isfinite(self.pitch) and self.pitch > 0):
            raise ValidationError("speckle grid pitch must be positive")

    @property
    def n_cells(self) -> int:
        return self.dims[0] * self.dims[1]

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        return axis_centers(self.dims[0], self.pitch), axis_centers(self.dims[1], self.pitch)

    def extent(self) -> tuple[float, float]:
        return self.dims[0] * self.pitch, self.dims[1] * self.pitch


@dataclass(frozen=True)
class SpeckleField:
    """One realization: complex amplitudes on ``grid``; intensity = |amplitude|^2."""

    grid: SpeckleGrid
    amplitude: np.ndarray     # complex128, shape (height, width)
    sigma_c: float
    mean_intensity: float

    def intensity(self) -> np.ndarray:
        return np.abs(self.amplitude) ** 2


def _gaussian_kernel_fft(grid: SpeckleGrid, sigma_c: float):
    """Periodic (torus-wrapped) Gaussian smoothing kernel and its FFT."""
    w, h = grid.dims
    # minimum-image distances on the torus, in um
    dx = np.minimum(np.arange(w), w - np.arange(w)) * grid.pitch
    dy = np.minimum(np.arange(h), h - np.arange(h)) * grid.pitch
    kern = np.exp(-(dy[:, None] ** 2 + dx[None, :] ** 2) / (2.0 * sigma_c ** 2))
    return kern, np.fft.rfft2(kern)


def generate_speckle(seed: int, frame_index: int, grid: SpeckleGrid,
                     sigma_c: float, mean_intensity: float) -> SpeckleField:
    """Deterministic speckle realization for (seed, frame_index).

    Frames with different indices are statistically independent and can be
    generated in any order by any worker with identical results.
    """
    if sigma_c < grid.pitch:
        raise ValidationError("sigma_c below the grid pitch undersamples the speckle")
    if not (np.isfinite(mean_intensity) and mean_intensity > 0):
        raise ValidationError("mean_intensity must be positive")
    rng = np.random.default_rng([_SPECKLE_TAG, int(seed) & 0xFFFFFFFFFFFFFFFF, int(frame_index)])
    w, h = grid.dims
    noise = rng.standard_normal((h, w)) + 1j * rng.standard_normal((h, w))
    kern, kern_f = _gaussian_kernel_fft(grid, sigma_c)
    field = np.fft.irfft2(np.fft.rfft2(noise.real) * kern_f, s=(h, w)) \
        + 1j * np.fft.irfft2(np.fft.rfft2(noise.imag) * kern_f, s=(h, w))
    # deterministic scaling to the expected mean: an exact per-frame rescale
    # would couple all cells and bias the intensity covariance rank-one
    field *= np.sqrt(mean_intensity / (2.0 * np.sum(kern ** 2)))
    return SpeckleField(grid=grid, amplitude=field, sigma_c=sigma_c,
                        mean_intensity=mean_intensity)


def speckle_covariance_kernel(sigma_c: float):
    """Normalized intensity-covariance kernel d -> Cov(I, I_shifted)/<I>^2.

    Returns a callable accepting a transverse distance (um, scalar or array).
    The value at d=0 is 1 (unit contrast of chaotic light) and the 1/e point
    sits at d = sigma_c * sqrt(2).
    """
    if not (np.isfinite(sigma_c) and sigma_c > 0):
        raise ValidationError("sigma_c must be positive")

    def kernel(delta):
        delta = np.asarray(delta, dtype=np.float64)
        return np.exp(-(delta ** 2) / (2.0 * sigma_c ** 2))

    return kernel

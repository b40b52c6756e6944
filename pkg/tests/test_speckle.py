import numpy as np
import pytest

from cpisim.core import ValidationError
from cpisim.speckle import (SpeckleGrid, generate_speckle,
                            speckle_covariance_kernel)

GRID = SpeckleGrid((256, 256), 10.0)


class TestGeneration:
    def test_deterministic_per_seed_and_index(self):
        a = generate_speckle(7, 3, GRID, 25.0, 1.0)
        b = generate_speckle(7, 3, GRID, 25.0, 1.0)
        assert np.array_equal(a.amplitude, b.amplitude)

    def test_different_index_differs(self):
        a = generate_speckle(7, 3, GRID, 25.0, 1.0)
        b = generate_speckle(7, 4, GRID, 25.0, 1.0)
        assert not np.array_equal(a.amplitude, b.amplitude)

    def test_undersampled_coherence_rejected(self):
        with pytest.raises(ValidationError, match="undersamples"):
            generate_speckle(0, 0, GRID, 5.0, 1.0)

    def test_nonpositive_intensity_rejected(self):
        with pytest.raises(ValidationError):
            generate_speckle(0, 0, GRID, 25.0, 0.0)

    def test_mean_intensity_within_one_percent(self):
        # ensemble over a few frames; a single frame fluctuates with the
        # finite number of speckle grains
        means = [generate_speckle(11, i, GRID, 20.0, 3.0).intensity().mean()
                 for i in range(20)]
        assert abs(np.mean(means) / 3.0 - 1.0) < 0.01


class TestStatistics:
    def test_contrast_is_unity(self):
        big = SpeckleGrid((1024, 1024), 10.0)
        inten = generate_speckle(3, 0, big, 25.0, 2.0).intensity()
        assert inten.size >= 10 ** 6
        contrast = inten.std() / inten.mean()
        assert abs(contrast - 1.0) < 0.05

    def test_intensity_negative_exponential(self):
        big = SpeckleGrid((1024, 1024), 10.0)
        inten = generate_speckle(5, 0, big, 25.0, 1.0).intensity().ravel()
        # exponential law: P(I > t<I>) = exp(-t)
        for t in (0.5, 1.0, 2.0):
            frac = (inten > t * inten.mean()).mean()
            assert frac == pytest.approx(np.exp(-t), rel=0.05)

    def test_autocorrelation_width(self):
        big = SpeckleGrid((1024, 1024), 10.0)
        sigma_c = 25.0
        inten = generate_speckle(9, 0, big, sigma_c, 1.0).intensity()
        centered = inten - inten.mean()
        spec = np.abs(np.fft.rfft2(centered)) ** 2
        ac = np.fft.irfft2(spec, s=centered.shape) / centered.size
        prof = ac[0, :64] / ac[0, 0]
        d = np.arange(64) * big.pitch
        i = int(np.argmax(prof < 1 / np.e))
        cross = d[i - 1] + (prof[i - 1] - 1 / np.e) / (prof[i - 1] - prof[i]) * big.pitch
        assert cross == pytest.approx(sigma_c * np.sqrt(2), rel=0.10)

    def test_frames_are_independent(self):
        a = generate_speckle(13, 0, GRID, 20.0, 1.0).intensity().ravel()
        b = generate_speckle(13, 1, GRID, 20.0, 1.0).intensity().ravel()
        r = np.corrcoef(a, b)[0, 1]
        grain_cells = 2 * np.pi * (20.0 / GRID.pitch) ** 2
        n_eff = a.size / grain_cells
        assert abs(r) < 3.0 / np.sqrt(n_eff)

    def test_stationary_mean(self):
        big = SpeckleGrid((512, 512), 10.0)
        inten = np.zeros((512, 512))
        for i in range(24):
            inten += generate_speckle(17, i, big, 20.0, 1.0).intensity()
        inten /= 24
        quadrants = [inten[:256, :256], inten[:256, 256:],
                     inten[256:, :256], inten[256:, 256:]]
        means = [q.mean() for q in quadrants]
        assert max(means) / min(means) < 1.05


class TestCovarianceKernel:
    def test_zero_displacement_is_unit_contrast(self):
        assert speckle_covariance_kernel(30.0)(0.0) == pytest.approx(1.0)

    def test_large_displacement_decorrelates(self):
        assert speckle_covariance_kernel(30.0)(1e5) < 1e-12

    def test_one_over_e_point(self):
        sigma_c = 30.0
        k = speckle_covariance_kernel(sigma_c)
        assert k(sigma_c * np.sqrt(2)) == pytest.approx(np.exp(-1), rel=1e-12)

    def test_matches_monte_carlo_covariance(self):
        sigma_c = 30.0
        big = SpeckleGrid((512, 512), 10.0)
        k = speckle_covariance_kernel(sigma_c)
        # empirical covariance at a few lags, averaged over frames
        lags = [1, 2, 4, 6]
        cov = np.zeros(len(lags))
        n_frames = 30
        for f in range(n_frames):
            inten = generate_speckle(23, f, big, sigma_c, 1.0).intensity()
            c = inten - inten.mean()
            for j, lag in enumerate(lags):
                cov[j] += (c * np.roll(c, lag, axis=1)).mean()
        cov /= n_frames
        for j, lag in enumerate(lags):
            assert cov[j] == pytest.approx(k(lag * big.pitch), abs=0.03)

    def test_invalid_sigma_rejected(self):
        with pytest.raises(ValidationError):
            speckle_covariance_kernel(0.0)

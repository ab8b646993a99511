"""Unit tests for the PCA projection of embeddings."""

import numpy as np
import pytest

from gpa_align.errors import InvalidInputError
from gpa_align.projection import fit_pca, pca_project


class TestFitPca:
    """Test cases for fit_pca() and pca_project()."""

    def test_axis_aligned_identity(self):
        """2-d data with decreasing variance along the axes projects onto itself."""
        x = np.array([[3.0, 0.0], [-3.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        np.testing.assert_allclose(np.abs(pca_project(x)), np.abs(x), atol=1e-12)

    def test_sign_convention(self):
        """The largest loading of every component is positive."""
        x = np.array([[3.0, 0.0], [-3.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        result = fit_pca(x)
        np.testing.assert_allclose(result.components, np.eye(2), atol=1e-12)
        np.testing.assert_allclose(result.projected, x, atol=1e-12)

    def test_rank_one(self):
        """Collinear points have no variance along the second component."""
        t = np.linspace(-2.0, 3.0, 11)
        x = t[:, None] * np.array([1.0, 2.0, 3.0])
        projected = pca_project(x)
        np.testing.assert_allclose(projected[:, 1], 0.0, atol=1e-10)
        np.testing.assert_allclose(np.abs(projected[:, 0]), np.abs(t - t.mean()) * np.sqrt(14.0), atol=1e-10)

    def test_reconstruction_error_matches_eigenvalues(self, rng):
        """Residual sum of squares equals (n - 1) times the discarded covariance eigenvalues."""
        for _ in range(20):
            x = rng.normal(size=(30, 5)) * np.array([3.0, 2.0, 1.0, 0.5, 0.2])
            result = fit_pca(x)
            reconstructed = result.projected @ result.components + result.mean
            residual = float(np.sum((x - reconstructed) ** 2))
            eigenvalues = np.sort(np.linalg.eigvalsh(np.cov(x, rowvar=False)))[::-1]
            assert residual == pytest.approx((x.shape[0] - 1) * eigenvalues[2:].sum(), rel=1e-9)
            np.testing.assert_allclose(result.explained_variance, eigenvalues, rtol=1e-9, atol=1e-12)

    def test_components_orthonormal(self, rng):
        """The two components are orthonormal."""
        result = fit_pca(rng.normal(size=(40, 6)))
        np.testing.assert_allclose(result.components @ result.components.T, np.eye(2), atol=1e-12)

    def test_projection_centered(self, rng):
        """Projected coordinates have zero mean."""
        projected = pca_project(rng.normal(3.0, 1.0, size=(25, 4)))
        np.testing.assert_allclose(projected.mean(axis=0), 0.0, atol=1e-12)

    @pytest.mark.parametrize("shape", [(10, 1), (1, 4), (0, 3)])
    def test_too_small(self, shape):
        """Needs d >= 2 and at least 2 points."""
        with pytest.raises(InvalidInputError):
            fit_pca(np.zeros(shape))

    def test_not_a_matrix(self):
        """Embeddings must be 2-d."""
        with pytest.raises(InvalidInputError):
            fit_pca(np.zeros(5))

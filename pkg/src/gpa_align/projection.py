"""Principal-component projection of embeddings for visualization."""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError


@dataclass(frozen=True, eq=False)
class PcaResult:
    mean: np.ndarray  # (d,)
    components: np.ndarray  # (2, d), unit rows
    explained_variance: np.ndarray  # (d,), eigenvalues of the sample covariance, descending
    projected: np.ndarray  # (N, 2)


def fit_pca(embeddings: np.ndarray) -> PcaResult:
    """Top-2 principal components via SVD of the centered data.

    Each component's sign is chosen so that its largest-magnitude loading is positive.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidInputError(f"Embeddings must be a matrix, got shape {x.shape}")
    n, d = x.shape
    if d < 2:
        raise InvalidInputError(f"Projection to 2 components needs d >= 2, got {d}")
    if n < 2:
        raise InvalidInputError(f"Projection needs at least 2 points, got {n}")

    mean = x.mean(axis=0)
    centered = x - mean
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:2].copy()
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0

    variance = np.zeros(d)
    variance[: singular.size] = singular**2 / (n - 1)
    return PcaResult(
        mean=mean,
        components=components,
        explained_variance=variance,
        projected=centered @ components.T,
    )


def pca_project(embeddings: np.ndarray) -> np.ndarray:
    """Project N x d embeddings onto their top-2 principal components."""
    return fit_pca(embeddings).projected

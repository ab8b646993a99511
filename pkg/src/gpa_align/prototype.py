"""Confidence-guided prototype merging and focal-style class weights."""

import numpy as np

from .errors import InvalidInputError, InvalidParameterError
from .models import AggregatedBatch, Domain, PrototypeSet


def merge_prototypes(agg: AggregatedBatch, domain: Domain = Domain.SOURCE) -> PrototypeSet:
    """c_k = sum_i P~_ik F~_i / sum_i P~_ik; classes with zero mass are absent with a zero vector."""
    features = np.asarray(agg.features, dtype=np.float64)
    confidences = np.asarray(agg.confidences, dtype=np.float64)
    if features.shape[0] != confidences.shape[0]:
        raise InvalidInputError(
            f"Features have {features.shape[0]} rows but confidences have {confidences.shape[0]}"
        )
    mass = confidences.sum(axis=0)  # (C,)
    present = mass > 0
    vectors = np.zeros((confidences.shape[1], features.shape[1]))
    np.divide(confidences.T @ features, mass[:, None], out=vectors, where=present[:, None])
    return PrototypeSet(vectors=vectors, present=present, domain=Domain(domain))


def max_confidences(agg: AggregatedBatch) -> np.ndarray:
    """p_k = max_i P~_ik."""
    return np.asarray(np.max(agg.confidences, axis=0))


def class_weights(
    agg: AggregatedBatch,
    gamma: float,
    threshold_classes: int | None = None,
) -> np.ndarray:
    """alpha_k = (1 - p_k)^gamma if p_k > 1/C else 0.

    C defaults to the total column count including background. Propagated confidences
    can exceed 1 on densely connected proposals, so p_k is clipped to 1 before the power.
    """
    if gamma < 0:
        raise InvalidParameterError(f"gamma must be >= 0, got {gamma}", key="gamma", value=gamma)
    num_classes = agg.num_classes if threshold_classes is None else threshold_classes
    if num_classes < 1:
        raise InvalidParameterError("threshold_classes must be >= 1", key="threshold_classes")
    peak = max_confidences(agg)
    weights = np.power(1.0 - np.minimum(peak, 1.0), gamma)
    return np.asarray(np.where(peak > 1.0 / num_classes, weights, 0.0))


def build_prototypes(
    agg: AggregatedBatch,
    gamma: float,
    domain: Domain = Domain.SOURCE,
    threshold_classes: int | None = None,
) -> PrototypeSet:
    """Merged prototypes carrying their class weights."""
    return merge_prototypes(agg, domain).with_weights(class_weights(agg, gamma, threshold_classes))

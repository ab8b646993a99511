"""Class-reweighted contrastive loss between source and target prototypes.

The loss is

    L_da = L_intra(S, T) + (L_inter(S, S) + L_inter(S, T) + L_inter(T, T)) / 3

with Phi the Euclidean distance between prototypes. `da_loss_backward` differentiates
the whole chain  F -> F~ (graph propagation) -> c_k (confidence-weighted merge) -> L_da
in closed form. Class weights alpha are always treated as constants.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, InvalidParameterError
from .graph import normalize
from .models import AggregatedBatch, AlignmentLoss, Domain, ProposalBatch, PrototypeSet, RelationGraph
from .prototype import class_weights, merge_prototypes

DEFAULT_MARGIN = 1.0


@dataclass(frozen=True)
class _Term:
    """One loss term with its gradients with respect to both prototype matrices."""

    value: float
    grad_first: np.ndarray
    grad_second: np.ndarray


def _check_margin(margin: float) -> None:
    """Raise InvalidParameterError unless the hinge margin is positive."""
    if not margin > 0:
        raise InvalidParameterError(f"margin must be positive, got {margin}", key="margin", value=margin)


def _check_compatible(first: PrototypeSet, second: PrototypeSet) -> None:
    """Raise InvalidInputError unless both sets have the same classes and width."""
    if first.vectors.shape != second.vectors.shape:
        raise InvalidInputError(
            f"Prototype sets differ in shape: {first.vectors.shape} vs {second.vectors.shape}"
        )


def _unit_rows(vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalized vectors and the row norms; zero rows stay zero."""
    norms = np.linalg.norm(vectors, axis=1)
    units = np.zeros_like(vectors)
    np.divide(vectors, norms[:, None], out=units, where=norms[:, None] > 0)
    return units, norms


def _embed(prototypes: PrototypeSet, normalize_embeddings: bool) -> np.ndarray:
    """Prototype vectors as the loss sees them."""
    if normalize_embeddings:
        return _unit_rows(prototypes.vectors)[0]
    return prototypes.vectors


def _unembed_grad(prototypes: PrototypeSet, grad: np.ndarray, normalize_embeddings: bool) -> np.ndarray:
    """Chain a gradient w.r.t. the embedded prototypes back to the raw prototype vectors."""
    if not normalize_embeddings:
        return grad
    units, norms = _unit_rows(prototypes.vectors)
    radial = np.sum(units * grad, axis=1, keepdims=True)
    out = np.zeros_like(grad)
    np.divide(grad - units * radial, norms[:, None], out=out, where=norms[:, None] > 0)
    return out


def _intra(source: np.ndarray, alpha_s: np.ndarray, target: np.ndarray, alpha_t: np.ndarray) -> _Term:
    """Intra-class term with its gradients w.r.t. both embedded prototype sets."""
    weights = alpha_s * alpha_t
    total = weights.sum()
    if total <= 0:
        return _Term(0.0, np.zeros_like(source), np.zeros_like(target))
    diff = source - target
    dist = np.linalg.norm(diff, axis=1)
    direction = np.zeros_like(diff)
    # Phi is not differentiable at coincident prototypes; subgradient 0 there.
    np.divide(diff, dist[:, None], out=direction, where=dist[:, None] > 0)
    grad = (weights / total)[:, None] * direction
    return _Term(float(np.dot(weights, dist) / total), grad, -grad)


def _inter(first: np.ndarray, alpha_1: np.ndarray, second: np.ndarray, alpha_2: np.ndarray, margin: float) -> _Term:
    """Inter-class hinge term with its gradients w.r.t. both embedded prototype sets."""
    weights = np.outer(alpha_1, alpha_2)
    np.fill_diagonal(weights, 0.0)
    total = weights.sum()
    if total <= 0:
        return _Term(0.0, np.zeros_like(first), np.zeros_like(second))
    diff = first[:, None, :] - second[None, :, :]  # (C, C, d)
    dist = np.linalg.norm(diff, axis=2)
    hinge = np.maximum(0.0, margin - dist)
    value = float(np.sum(weights * hinge) / total)

    # d hinge / d diff = -diff / dist on the active side; 0 at the kink and at dist == 0
    active = (margin - dist > 0) & (dist > 0)
    coef = np.zeros_like(dist)
    np.divide(-weights / total, dist, out=coef, where=active)
    weighted = coef[:, :, None] * diff
    return _Term(value, weighted.sum(axis=1), -weighted.sum(axis=0))


def _weights(prototypes: PrototypeSet) -> np.ndarray:
    """Class weights with absent classes zeroed."""
    weights = prototypes.require_weights()
    return np.where(prototypes.present, weights, 0.0)


def intra_loss(source: PrototypeSet, target: PrototypeSet, normalize_embeddings: bool = False) -> float:
    """Weighted mean distance between same-class prototypes of two domains."""
    _check_compatible(source, target)
    return _intra(
        _embed(source, normalize_embeddings),
        _weights(source),
        _embed(target, normalize_embeddings),
        _weights(target),
    ).value


def inter_loss(
    first: PrototypeSet,
    second: PrototypeSet,
    margin: float = DEFAULT_MARGIN,
    normalize_embeddings: bool = False,
) -> float:
    """Weighted mean hinge max(0, m - Phi) over ordered pairs of different classes, background included."""
    _check_margin(margin)
    _check_compatible(first, second)
    return _inter(
        _embed(first, normalize_embeddings),
        _weights(first),
        _embed(second, normalize_embeddings),
        _weights(second),
        margin,
    ).value


def _loss_with_prototype_grads(
    source: PrototypeSet,
    target: PrototypeSet,
    margin: float,
    normalize_embeddings: bool,
) -> tuple[AlignmentLoss, np.ndarray, np.ndarray]:
    """Loss terms and their gradients w.r.t. the raw prototype vectors."""
    _check_margin(margin)
    _check_compatible(source, target)
    c_s = _embed(source, normalize_embeddings)
    c_t = _embed(target, normalize_embeddings)
    a_s = _weights(source)
    a_t = _weights(target)

    intra = _intra(c_s, a_s, c_t, a_t)
    inter_ss = _inter(c_s, a_s, c_s, a_s, margin)
    inter_st = _inter(c_s, a_s, c_t, a_t, margin)
    inter_tt = _inter(c_t, a_t, c_t, a_t, margin)

    grad_s = intra.grad_first + (inter_ss.grad_first + inter_ss.grad_second + inter_st.grad_first) / 3.0
    grad_t = intra.grad_second + (inter_st.grad_second + inter_tt.grad_first + inter_tt.grad_second) / 3.0

    loss = AlignmentLoss(
        intra=intra.value,
        inter_ss=inter_ss.value,
        inter_st=inter_st.value,
        inter_tt=inter_tt.value,
        total=intra.value + (inter_ss.value + inter_st.value + inter_tt.value) / 3.0,
        source_prototypes=source,
        target_prototypes=target,
    )
    return (
        loss,
        _unembed_grad(source, grad_s, normalize_embeddings),
        _unembed_grad(target, grad_t, normalize_embeddings),
    )


def total_da_loss(
    source: PrototypeSet,
    target: PrototypeSet,
    margin: float = DEFAULT_MARGIN,
    normalize_embeddings: bool = False,
) -> AlignmentLoss:
    """All four loss terms and their composition; no gradients."""
    loss, _, _ = _loss_with_prototype_grads(source, target, margin, normalize_embeddings)
    return loss


@dataclass(frozen=True)
class _Forward:
    propagation: np.ndarray  # D^-1/2 A D^-1/2
    propagated: np.ndarray  # A_hat F, before the optional transform
    features: np.ndarray  # F~
    confidences: np.ndarray  # P~
    prototypes: PrototypeSet


def _forward(
    batch: ProposalBatch,
    graph: RelationGraph,
    transform: np.ndarray | None,
    gamma: float,
    domain: Domain,
    threshold_classes: int | None,
    weights: np.ndarray | None,
) -> _Forward:
    """Graph aggregation and prototype merging for one domain, keeping what the backward pass needs."""
    if graph.num_nodes != batch.num_proposals:
        raise InvalidInputError(
            f"{domain.value} graph has {graph.num_nodes} nodes but the batch has {batch.num_proposals} proposals"
        )
    propagation = normalize(graph)
    propagated = propagation @ batch.features
    features = propagated if transform is None else propagated @ transform
    confidences = propagation @ batch.confidences

    agg = AggregatedBatch(features=features, confidences=confidences)
    prototypes = merge_prototypes(agg, domain)
    if weights is None:
        weights = class_weights(agg, gamma, threshold_classes)
    return _Forward(propagation, propagated, features, confidences, prototypes.with_weights(weights))


def _merge_backward(forward: _Forward, grad_prototypes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the loss w.r.t. F~ and P~ given the gradient w.r.t. the prototypes."""
    mass = forward.confidences.sum(axis=0)
    scaled = np.zeros_like(grad_prototypes)
    np.divide(grad_prototypes, mass[:, None], out=scaled, where=mass[:, None] > 0)
    grad_features = forward.confidences @ scaled
    # d c_k / d P~_ik = (F~_i - c_k) / mass_k
    grad_confidences = forward.features @ scaled.T - np.sum(forward.prototypes.vectors * scaled, axis=1)[None, :]
    return grad_features, grad_confidences


def da_loss_backward(
    source: ProposalBatch,
    target: ProposalBatch,
    source_graph: RelationGraph,
    target_graph: RelationGraph,
    gamma: float = 2.0,
    margin: float = DEFAULT_MARGIN,
    confidence_grad: bool = False,
    transform: np.ndarray | None = None,
    normalize_embeddings: bool = False,
    threshold_classes: int | None = None,
    frozen_weights: tuple[np.ndarray, np.ndarray] | None = None,
) -> AlignmentLoss:
    """Loss terms plus dL_da/dF for both domains.

    By default confidences are constants (stop-gradient). With `confidence_grad` the
    gradient also flows through the merge weights P~ into dL_da/dP; it never flows through
    the column max or the hard threshold that produce alpha. `frozen_weights` replaces
    the computed alpha of (source, target), e.g. to hold them fixed under perturbation.
    """
    if gamma < 0:
        raise InvalidParameterError(f"gamma must be >= 0, got {gamma}", key="gamma", value=gamma)
    _check_margin(margin)
    if source.embedding_dim != target.embedding_dim or source.num_classes != target.num_classes:
        raise InvalidInputError(
            "Source and target batches differ in embedding size or class count: "
            f"({source.embedding_dim}, {source.num_classes}) vs ({target.embedding_dim}, {target.num_classes})"
        )
    if transform is not None:
        transform = np.asarray(transform, dtype=np.float64)
        d = source.embedding_dim
        if transform.shape != (d, d):
            raise InvalidInputError(f"Transform must have shape ({d}, {d}), got {transform.shape}")

    weights_s, weights_t = frozen_weights if frozen_weights is not None else (None, None)
    fwd_s = _forward(source, source_graph, transform, gamma, Domain.SOURCE, threshold_classes, weights_s)
    fwd_t = _forward(target, target_graph, transform, gamma, Domain.TARGET, threshold_classes, weights_t)

    loss, grad_c_s, grad_c_t = _loss_with_prototype_grads(
        fwd_s.prototypes, fwd_t.prototypes, margin, normalize_embeddings
    )
    grad_ft_s, grad_pt_s = _merge_backward(fwd_s, grad_c_s)
    grad_ft_t, grad_pt_t = _merge_backward(fwd_t, grad_c_t)

    grad_transform = None
    if transform is not None:
        grad_transform = fwd_s.propagated.T @ grad_ft_s + fwd_t.propagated.T @ grad_ft_t
        grad_ft_s = grad_ft_s @ transform.T
        grad_ft_t = grad_ft_t @ transform.T

    # The normalized adjacency is symmetric, so it is its own transpose.
    return AlignmentLoss(
        intra=loss.intra,
        inter_ss=loss.inter_ss,
        inter_st=loss.inter_st,
        inter_tt=loss.inter_tt,
        total=loss.total,
        grad_f_source=fwd_s.propagation @ grad_ft_s,
        grad_f_target=fwd_t.propagation @ grad_ft_t,
        grad_p_source=fwd_s.propagation @ grad_pt_s if confidence_grad else None,
        grad_p_target=fwd_t.propagation @ grad_pt_t if confidence_grad else None,
        grad_transform=grad_transform,
        source_prototypes=fwd_s.prototypes,
        target_prototypes=fwd_t.prototypes,
    )

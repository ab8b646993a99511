"""Relation graphs over region proposals and graph-based aggregation."""

import math

import numpy as np
from scipy.linalg import block_diag

from .errors import DegenerateGraphError, InvalidInputError, InvalidParameterError
from .geometry import box_areas, pairwise_iou, pairwise_squared_center_distance
from .models import AggregatedBatch, GraphKind, ProposalBatch, RelationGraph, boxes_to_array

# Entries below this count as "no edge" when measuring sparsity.
SPARSITY_THRESHOLD = 1e-3


def gaussian_adjacency(boxes: np.ndarray, sigma: float) -> RelationGraph:
    """A_ij = exp(-||o_i - o_j||^2 / (2 sigma^2)) over box centers."""
    if not sigma > 0:
        raise InvalidParameterError(f"sigma must be positive, got {sigma}", key="sigma", value=sigma)
    boxes = boxes_to_array(boxes)
    if boxes.shape[0] < 1:
        raise InvalidInputError("A relation graph needs at least one proposal")
    adjacency = np.exp(-pairwise_squared_center_distance(boxes) / (2.0 * sigma**2))
    np.fill_diagonal(adjacency, 1.0)
    return RelationGraph(adjacency, GraphKind.GAUSSIAN, sigma=float(sigma))


def iou_adjacency(boxes: np.ndarray) -> RelationGraph:
    """A_ij = IoU(r_i, r_j)."""
    boxes = boxes_to_array(boxes)
    if boxes.shape[0] < 1:
        raise InvalidInputError("A relation graph needs at least one proposal")
    if np.any(box_areas(boxes) <= 0):
        raise InvalidInputError("IoU graphs require boxes with positive area")
    adjacency = pairwise_iou(boxes)
    np.fill_diagonal(adjacency, 1.0)
    return RelationGraph(adjacency, GraphKind.IOU)


def identity_graph(num_nodes: int) -> RelationGraph:
    """Graph without edges: aggregation leaves proposals untouched."""
    if num_nodes < 1:
        raise InvalidInputError("A relation graph needs at least one proposal")
    return RelationGraph(np.eye(num_nodes), GraphKind.NONE)


def build_graph(boxes: np.ndarray, kind: GraphKind | str, sigma: float | None = None) -> RelationGraph:
    """Relation graph of the requested kind; Gaussian graphs need sigma."""
    kind = GraphKind(kind)
    if kind is GraphKind.IOU:
        return iou_adjacency(boxes)
    if kind is GraphKind.GAUSSIAN:
        if sigma is None:
            raise InvalidParameterError("Gaussian graphs need sigma", key="sigma")
        return gaussian_adjacency(boxes, sigma)
    return identity_graph(boxes_to_array(boxes).shape[0])


def combine_graphs(graphs: list[RelationGraph]) -> RelationGraph:
    """Block-diagonal union of per-scene graphs; proposals of different scenes stay unconnected."""
    if not graphs:
        raise InvalidInputError("Cannot combine an empty list of graphs")
    kinds = {g.kind for g in graphs}
    if len(kinds) != 1:
        raise InvalidInputError(f"Cannot combine graphs of different kinds: {sorted(k.value for k in kinds)}")
    sigmas = {g.sigma for g in graphs}
    sigma = sigmas.pop() if len(sigmas) == 1 else None
    return RelationGraph(block_diag(*[g.adjacency for g in graphs]), graphs[0].kind, sigma=sigma)


def batch_graph(batch: ProposalBatch, kind: GraphKind | str, sigma: float | None = None) -> RelationGraph:
    """Build one graph per scene of the batch and join them block-diagonally."""
    if batch.scene_ids is None:
        return build_graph(batch.boxes, kind, sigma)
    order = np.argsort(batch.scene_ids, kind="stable")
    if not np.array_equal(order, np.arange(batch.num_proposals)):
        raise InvalidInputError("Proposals must be grouped by scene (scene_ids non-decreasing)")
    _, starts = np.unique(batch.scene_ids, return_index=True)
    bounds = list(starts) + [batch.num_proposals]
    return combine_graphs([build_graph(batch.boxes[lo:hi], kind, sigma) for lo, hi in zip(bounds[:-1], bounds[1:])])


def normalize(graph: RelationGraph) -> np.ndarray:
    """Symmetric normalization D^{-1/2} A D^{-1/2}."""
    degree = graph.degree
    if np.any(degree <= 0):
        raise DegenerateGraphError(f"Graph has {int(np.sum(degree <= 0))} vertices with zero degree")
    inv_sqrt = 1.0 / np.sqrt(degree)
    return np.asarray(inv_sqrt[:, None] * graph.adjacency * inv_sqrt[None, :])


def aggregate(
    batch: ProposalBatch,
    graph: RelationGraph,
    transform: np.ndarray | None = None,
) -> AggregatedBatch:
    """Propagate features and confidences over the normalized graph.

    The optional d x d transform is the learnable parameter matrix of a conventional graph
    convolution. It is applied to features only; confidences must stay nonnegative.
    """
    if graph.num_nodes != batch.num_proposals:
        raise InvalidInputError(
            f"Graph has {graph.num_nodes} nodes but the batch has {batch.num_proposals} proposals"
        )
    propagation = normalize(graph)
    features = propagation @ batch.features
    if transform is not None:
        transform = np.asarray(transform, dtype=np.float64)
        d = batch.embedding_dim
        if transform.shape != (d, d):
            raise InvalidInputError(f"Transform must have shape ({d}, {d}), got {transform.shape}")
        features = features @ transform
    return AggregatedBatch(features=features, confidences=propagation @ batch.confidences)


def sparsity(graph: RelationGraph, threshold: float = SPARSITY_THRESHOLD) -> float:
    """Fraction of adjacency entries below the threshold."""
    return float(np.mean(graph.adjacency < threshold))


def calibrate_sigma(
    boxes: np.ndarray,
    threshold: float = SPARSITY_THRESHOLD,
    max_iterations: int = 200,
) -> float:
    """Find sigma whose Gaussian graph is as sparse as the IoU graph over the same boxes.

    Gaussian sparsity is non-increasing in sigma, so bisection on log(sigma) brackets the
    step where it first drops to the IoU sparsity; the upper end of the bracket is returned.
    """
    boxes = boxes_to_array(boxes)
    target = sparsity(iou_adjacency(boxes), threshold)
    distances = np.sqrt(pairwise_squared_center_distance(boxes))
    positive = distances[distances > 0]
    if positive.size == 0:
        return 1.0

    # sigma at which the pair with distance d crosses the threshold
    crossing = positive / math.sqrt(2.0 * math.log(1.0 / threshold))
    lo = math.log(float(crossing.min()) / 2.0)
    hi = math.log(float(crossing.max()) * 2.0)

    def gaussian_sparsity(log_sigma: float) -> float:
        return sparsity(gaussian_adjacency(boxes, math.exp(log_sigma)), threshold)

    if gaussian_sparsity(lo) <= target:
        return math.exp(lo)
    for _ in range(max_iterations):
        mid = (lo + hi) / 2.0
        if gaussian_sparsity(mid) > target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12:
            break
    return math.exp(hi)

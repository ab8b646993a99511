"""Data models for gpa-align."""

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import InvalidInputError, InvalidSpecError

# Row sums of a confidence matrix must match 1 to this tolerance.
SIMPLEX_TOLERANCE = 1e-9


class Stage(str, Enum):
    """Detector stage a proposal batch belongs to."""

    RPN = "rpn"
    RCNN = "rcnn"


class GraphKind(str, Enum):
    """How the relation graph over proposals is built."""

    IOU = "iou"
    GAUSSIAN = "gaussian"
    NONE = "none"  # identity adjacency: prototypes from the raw proposals


class Domain(str, Enum):
    SOURCE = "source"
    TARGET = "target"


@dataclass(frozen=True)
class BBox:
    """Axis-aligned rectangle in continuous corner coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        if not (self.x_min <= self.x_max and self.y_min <= self.y_max):
            raise InvalidInputError(f"Invalid box {self.as_tuple()}: min corner must not exceed max corner")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def area(self) -> float:
        return self.width * self.height

    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2)

    def translated(self, dx: float, dy: float) -> "BBox":
        """Box shifted by (dx, dy)."""
        return BBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def scaled(self, s: float) -> "BBox":
        """Scale about the origin."""
        return BBox(self.x_min * s, self.y_min * s, self.x_max * s, self.y_max * s)


def boxes_to_array(boxes: "list[BBox] | tuple[BBox, ...] | np.ndarray") -> np.ndarray:
    """Stack boxes into an (N, 4) float64 array, validating corner order."""
    if isinstance(boxes, np.ndarray):
        array = np.asarray(boxes, dtype=np.float64)
        if array.ndim != 2 or array.shape[1] != 4:
            raise InvalidInputError(f"Box array must have shape (N, 4), got {array.shape}")
        if np.any(array[:, 0] > array[:, 2]) or np.any(array[:, 1] > array[:, 3]):
            raise InvalidInputError("Box array contains a box whose min corner exceeds its max corner")
        return array
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64).reshape(-1, 4)


@dataclass(frozen=True, eq=False)
class ProposalBatch:
    """Region proposals of one domain at one stage: boxes, embeddings F and confidences P."""

    boxes: np.ndarray  # (N_p, 4)
    features: np.ndarray  # F, (N_p, d)
    confidences: np.ndarray  # P, (N_p, C); column 0 is background
    stage: Stage = Stage.RCNN
    labels: np.ndarray | None = None  # ground-truth class per proposal, hidden from target training
    scene_ids: np.ndarray | None = None  # proposal -> scene; graphs never cross scenes

    def __post_init__(self) -> None:
        boxes = boxes_to_array(self.boxes)
        features = np.asarray(self.features, dtype=np.float64)
        confidences = np.asarray(self.confidences, dtype=np.float64)
        object.__setattr__(self, "boxes", boxes)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "confidences", confidences)
        object.__setattr__(self, "stage", Stage(self.stage))

        n = boxes.shape[0]
        if n < 1:
            raise InvalidInputError("A proposal batch needs at least one proposal")
        if np.any((boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1]) <= 0):
            raise InvalidInputError("Proposals must have positive area")
        if features.ndim != 2 or features.shape[0] != n or features.shape[1] < 1:
            raise InvalidInputError(f"Features must have shape ({n}, d >= 1), got {features.shape}")
        if confidences.ndim != 2 or confidences.shape[0] != n or confidences.shape[1] < 2:
            raise InvalidInputError(f"Confidences must have shape ({n}, C >= 2), got {confidences.shape}")
        if self.stage is Stage.RPN and confidences.shape[1] != 2:
            raise InvalidInputError(f"RPN-stage confidences must have 2 columns, got {confidences.shape[1]}")
        if np.any(confidences < 0) or np.any(confidences > 1):
            raise InvalidInputError("Confidences must lie in [0, 1]")
        if np.any(np.abs(confidences.sum(axis=1) - 1.0) > SIMPLEX_TOLERANCE):
            raise InvalidInputError("Every confidence row must sum to 1")
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (n,):
                raise InvalidInputError(f"Labels must have shape ({n},), got {labels.shape}")
            object.__setattr__(self, "labels", labels)
        if self.scene_ids is not None:
            scene_ids = np.asarray(self.scene_ids, dtype=np.int64)
            if scene_ids.shape != (n,):
                raise InvalidInputError(f"Scene ids must have shape ({n},), got {scene_ids.shape}")
            object.__setattr__(self, "scene_ids", scene_ids)

    @property
    def num_proposals(self) -> int:
        return int(self.features.shape[0])

    @property
    def embedding_dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def num_classes(self) -> int:
        return int(self.confidences.shape[1])

    def bboxes(self) -> list[BBox]:
        return [BBox(*map(float, row)) for row in self.boxes]

    def with_features(self, features: np.ndarray) -> "ProposalBatch":
        return replace(self, features=features)

    def with_confidences(self, confidences: np.ndarray) -> "ProposalBatch":
        return replace(self, confidences=confidences)


@dataclass(frozen=True, eq=False)
class RelationGraph:
    """Symmetric adjacency over proposals."""

    adjacency: np.ndarray  # A, (N_p, N_p)
    kind: GraphKind
    sigma: float | None = None  # set for Gaussian graphs

    def __post_init__(self) -> None:
        adjacency = np.asarray(self.adjacency, dtype=np.float64)
        if adjacency.ndim != 2 or adjacency.shape[0] != adjacency.shape[1]:
            raise InvalidInputError(f"Adjacency must be square, got {adjacency.shape}")
        if not np.array_equal(adjacency, adjacency.T):
            raise InvalidInputError("Adjacency must be symmetric")
        if np.any(adjacency < 0) or np.any(adjacency > 1):
            raise InvalidInputError("Adjacency entries must lie in [0, 1]")
        adjacency.setflags(write=False)
        object.__setattr__(self, "adjacency", adjacency)
        object.__setattr__(self, "kind", GraphKind(self.kind))

    @property
    def num_nodes(self) -> int:
        return int(self.adjacency.shape[0])

    @property
    def degree(self) -> np.ndarray:
        """Diagonal of D: D_ii = sum_j A_ij."""
        return np.asarray(self.adjacency.sum(axis=1))


@dataclass(frozen=True, eq=False)
class AggregatedBatch:
    """Graph-propagated features and confidences. Rows of the confidences need not sum to 1."""

    features: np.ndarray  # F~, (N_p, d)
    confidences: np.ndarray  # P~, (N_p, C)

    @property
    def num_classes(self) -> int:
        return int(self.confidences.shape[1])


@dataclass(frozen=True, eq=False)
class PrototypeSet:
    """One prototype per class (background = class 0) with presence mask and class weights."""

    vectors: np.ndarray  # (C, d)
    present: np.ndarray  # (C,) bool
    weights: np.ndarray | None = None  # alpha, (C,)
    domain: Domain = Domain.SOURCE

    @property
    def num_classes(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def embedding_dim(self) -> int:
        return int(self.vectors.shape[1])

    def with_weights(self, weights: np.ndarray) -> "PrototypeSet":
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (self.num_classes,):
            raise InvalidInputError(f"Expected {self.num_classes} class weights, got shape {weights.shape}")
        return replace(self, weights=weights)

    def require_weights(self) -> np.ndarray:
        if self.weights is None:
            raise InvalidInputError(f"Prototype set for domain '{self.domain.value}' has no class weights")
        return self.weights


@dataclass(frozen=True, eq=False)
class AlignmentLoss:
    """Class-reweighted contrastive loss terms and, after a backward pass, their gradients."""

    intra: float
    inter_ss: float
    inter_st: float
    inter_tt: float
    total: float
    grad_f_source: np.ndarray | None = None
    grad_f_target: np.ndarray | None = None
    # Only filled when the gradient flows through the confidence-weighted merge.
    grad_p_source: np.ndarray | None = None
    grad_p_target: np.ndarray | None = None
    grad_transform: np.ndarray | None = None
    source_prototypes: PrototypeSet | None = None
    target_prototypes: PrototypeSet | None = None


@dataclass(frozen=True, eq=False)
class DomainSpec:
    """Generative description of one domain of the synthetic detection task."""

    class_modes: np.ndarray  # (K, M, r): appearance mode means of foreground classes 1..K
    class_frequencies: np.ndarray  # (K,)
    background_mean: np.ndarray  # (r,)
    mode_scale: float = 0.3
    background_scale: float = 0.5
    shift_rotation: np.ndarray | None = None  # (r, r) orthogonal; None = identity
    shift_offset: np.ndarray | None = None  # (r,); None = zero
    scene_extent: tuple[float, float] = (100.0, 100.0)
    instances_per_scene: tuple[int, int] = (2, 4)
    proposals_per_instance: tuple[int, int] = (3, 5)
    background_proposals: tuple[int, int] = (6, 12)
    instance_size: tuple[float, float] = (12.0, 30.0)
    jitter: float = 0.15
    feature_noise: float = 0.1
    name: Domain = Domain.SOURCE

    @property
    def raw_dim(self) -> int:
        return int(self.class_modes.shape[2])

    @property
    def num_foreground(self) -> int:
        return int(self.class_modes.shape[0])

    @property
    def num_classes(self) -> int:
        """Class count including background."""
        return self.num_foreground + 1

    def rotation(self) -> np.ndarray:
        if self.shift_rotation is None:
            return np.eye(self.raw_dim)
        return np.asarray(self.shift_rotation, dtype=np.float64)

    def offset(self) -> np.ndarray:
        if self.shift_offset is None:
            return np.zeros(self.raw_dim)
        return np.asarray(self.shift_offset, dtype=np.float64)

    def validate(self) -> None:
        """Raise InvalidSpecError if the spec cannot generate scenes."""
        modes = np.asarray(self.class_modes)
        if modes.ndim != 3 or 0 in modes.shape:
            raise InvalidSpecError(f"class_modes must have shape (K, M, r) with all sizes >= 1, got {modes.shape}")
        frequencies = np.asarray(self.class_frequencies, dtype=np.float64)
        if frequencies.shape != (self.num_foreground,):
            raise InvalidSpecError(
                f"Expected {self.num_foreground} class frequencies, got shape {frequencies.shape}",
                key="class_frequencies",
            )
        if np.any(frequencies < 0) or abs(frequencies.sum() - 1.0) > SIMPLEX_TOLERANCE:
            raise InvalidSpecError("Class frequencies must be nonnegative and sum to 1", key="class_frequencies")
        if np.asarray(self.background_mean).shape != (self.raw_dim,):
            raise InvalidSpecError("background_mean must match the appearance dimension", key="background_mean")
        if self.rotation().shape != (self.raw_dim, self.raw_dim):
            raise InvalidSpecError("shift_rotation must be square in the appearance dimension", key="shift_rotation")
        if not np.allclose(self.rotation() @ self.rotation().T, np.eye(self.raw_dim), atol=1e-9):
            raise InvalidSpecError("shift_rotation must be orthogonal", key="shift_rotation")
        if self.offset().shape != (self.raw_dim,):
            raise InvalidSpecError("shift_offset must match the appearance dimension", key="shift_offset")
        for key, (lo, hi) in (
            ("instances_per_scene", self.instances_per_scene),
            ("proposals_per_instance", self.proposals_per_instance),
        ):
            if lo < 1 or hi < lo:
                raise InvalidSpecError(f"Range must satisfy 1 <= lo <= hi, got [{lo}, {hi}]", key=key)
        lo, hi = self.background_proposals
        if lo < 0 or hi < lo:
            raise InvalidSpecError(f"Range must satisfy 0 <= lo <= hi, got [{lo}, {hi}]", key="background_proposals")
        size_lo, size_hi = self.instance_size
        if size_lo <= 0 or size_hi < size_lo:
            raise InvalidSpecError("instance_size must satisfy 0 < lo <= hi", key="instance_size")
        width, height = self.scene_extent
        if width < size_hi or height < size_hi:
            raise InvalidSpecError("scene_extent must fit the largest instance", key="scene_extent")
        if self.jitter < 0:
            raise InvalidSpecError("jitter must be >= 0", key="jitter")
        if self.feature_noise < 0 or self.mode_scale < 0 or self.background_scale < 0:
            raise InvalidSpecError("noise scales must be >= 0")


@dataclass(frozen=True, eq=False)
class Instance:
    """Ground-truth object of a scene."""

    box: BBox
    label: int  # 1..K
    mode: int
    appearance: np.ndarray  # (r,), already mapped into the scene's domain


@dataclass(frozen=True, eq=False)
class Scene:
    """One synthetic image: instances and the proposals generated around them."""

    instances: tuple[Instance, ...]
    proposal_boxes: np.ndarray  # (N, 4)
    proposal_features: np.ndarray  # (N, r)
    proposal_labels: np.ndarray  # (N,); 0 = background
    proposal_sources: np.ndarray  # (N,); generating instance index, -1 for background proposals

    @property
    def num_proposals(self) -> int:
        return int(self.proposal_boxes.shape[0])


@dataclass(frozen=True)
class LossReport:
    """Every term of the two-stage objective for one step."""

    l_det: float
    l_da_rpn: float
    l_da_rcnn: float
    total: float
    lambda1: float
    lambda2: float
    rpn: AlignmentLoss | None = field(default=None, compare=False)
    rcnn: AlignmentLoss | None = field(default=None, compare=False)


@dataclass(frozen=True, eq=False)
class MetricsReport:
    """Proposal-classification proxy metrics for one domain."""

    accuracy: float
    per_class_accuracy: np.ndarray  # (C,), NaN where a class has no proposals
    prototype_distances: np.ndarray  # (C,), Phi(c_k, reference c_k); NaN where a side is absent
    fg_bg_margin: float  # distance between stage-1 background and foreground prototypes
    num_proposals: int

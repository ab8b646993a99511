"""Graph-induced prototype alignment for cross-domain detection."""

__version__ = "0.1.0"

from .alignment import da_loss_backward, inter_loss, intra_loss, total_da_loss  # noqa: E402
from .cli import main  # noqa: E402
from .graph import aggregate, calibrate_sigma, gaussian_adjacency, iou_adjacency, normalize  # noqa: E402
from .models import AlignmentLoss, BBox, ProposalBatch, PrototypeSet, RelationGraph  # noqa: E402
from .prototype import class_weights, merge_prototypes  # noqa: E402

__all__ = [
    "__version__",
    "main",
    "AlignmentLoss",
    "BBox",
    "ProposalBatch",
    "PrototypeSet",
    "RelationGraph",
    "aggregate",
    "calibrate_sigma",
    "class_weights",
    "da_loss_backward",
    "gaussian_adjacency",
    "inter_loss",
    "intra_loss",
    "iou_adjacency",
    "merge_prototypes",
    "normalize",
    "total_da_loss",
]

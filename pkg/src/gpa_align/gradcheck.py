"""Finite-difference verification of the analytic alignment gradients."""

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from .alignment import da_loss_backward
from .config import TrainConfig
from .errors import GpaError, InvalidParameterError
from .graph import build_graph
from .models import AlignmentLoss, GraphKind, ProposalBatch, RelationGraph
from .toy_model import ToyModel, softmax, softmax_backward
from .training import DomainBatch, alignment_snapshot, objective

DEFAULT_EPS = 1e-6
DEFAULT_TOLERANCE = 1e-5
# Draws with a prototype distance this close to the margin (or to zero) are redrawn.
MARGIN_GUARD = 1e-3
ZERO_GUARD = 1e-2
MAX_DRAWS = 1000

STOP_GRADIENT = "stop-gradient"
CONFIDENCE_GRADIENT = "confidence-grad"


@dataclass(frozen=True)
class GradcheckTrial:
    """One analytic-vs-numerical comparison."""

    kind: str  # "da_loss" or "objective"
    graph: str
    convention: str
    shape: tuple[int, ...]  # (N_source, N_target, d, C)
    relative_error: float


@dataclass(frozen=True)
class GradcheckReport:
    trials: tuple[GradcheckTrial, ...]
    tolerance: float

    @property
    def max_relative_error(self) -> float:
        return max((t.relative_error for t in self.trials), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_relative_error <= self.tolerance

    @property
    def failures(self) -> list[GradcheckTrial]:
        return [t for t in self.trials if t.relative_error > self.tolerance]


def numerical_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Central differences (f(x + eps e_i) - f(x - eps e_i)) / 2 eps for every entry of x."""
    if not eps > 0:
        raise InvalidParameterError(f"eps must be positive, got {eps}", key="eps", value=eps)
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        original = x[index]
        x[index] = original + eps
        plus = f(x.copy())
        x[index] = original - eps
        minus = f(x.copy())
        x[index] = original
        grad[index] = (plus - minus) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """||a - n||_inf / max(||a||_inf, ||n||_inf, floor)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def _embedded(vectors: np.ndarray, normalize_embeddings: bool) -> np.ndarray:
    if not normalize_embeddings:
        return vectors
    return vectors / np.linalg.norm(vectors, axis=1, keepdims=True)


def near_kink(loss: AlignmentLoss, margin: float, normalize_embeddings: bool = False) -> bool:
    """True if any weighted prototype pair sits near a point where the loss is not smooth."""
    source, target = loss.source_prototypes, loss.target_prototypes
    if source is None or target is None:
        return False
    if normalize_embeddings:
        norms = np.concatenate([np.linalg.norm(source.vectors, axis=1), np.linalg.norm(target.vectors, axis=1)])
        if np.any(norms < ZERO_GUARD):
            return True
    c_s = _embedded(source.vectors, normalize_embeddings)
    c_t = _embedded(target.vectors, normalize_embeddings)
    a_s = np.where(source.present, source.require_weights(), 0.0)
    a_t = np.where(target.present, target.require_weights(), 0.0)

    for first, alpha_1, second, alpha_2, same_domain in (
        (c_s, a_s, c_s, a_s, True),
        (c_s, a_s, c_t, a_t, False),
        (c_t, a_t, c_t, a_t, True),
    ):
        dist = np.linalg.norm(first[:, None, :] - second[None, :, :], axis=2)
        active = np.outer(alpha_1, alpha_2) > 0
        if same_domain:
            np.fill_diagonal(active, False)
        if np.any(active & ((dist < ZERO_GUARD) | (np.abs(dist - margin) < MARGIN_GUARD))):
            return True
    return False


def _random_boxes(n: int, rng: np.random.Generator) -> np.ndarray:
    """n random boxes with positive area."""
    centers = rng.uniform(0.0, 40.0, size=(n, 2))
    sizes = rng.uniform(8.0, 24.0, size=(n, 2))
    return np.hstack([centers - sizes / 2, centers + sizes / 2])


def _random_graph(boxes: np.ndarray, kind: GraphKind, sigma: float) -> RelationGraph:
    """Graph of the given kind over `boxes`."""
    return build_graph(boxes, kind, sigma if kind is GraphKind.GAUSSIAN else None)


def _alignment_trial(trial: int, rng: np.random.Generator, eps: float) -> GradcheckTrial:
    """Check dL_da/dF, and dL_da/dlogits or dL_da/dT when they apply, on one random draw."""
    kind = GraphKind.IOU if trial % 2 == 0 else GraphKind.GAUSSIAN
    confidence_grad = (trial // 2) % 2 == 1
    use_transform = trial % 3 == 2
    normalize_embeddings = trial % 5 == 4

    for _ in range(MAX_DRAWS):
        n_s, n_t = (int(v) for v in rng.integers(2, 17, size=2))
        d = int(rng.integers(2, 9))
        c = int(rng.integers(2, 10))
        sigma = float(rng.uniform(5.0, 20.0))
        margin = float(rng.uniform(0.5, 2.0))
        gamma = float(rng.choice([0.0, 1.0, 2.0, 3.5]))
        logits_s = rng.normal(0.0, 2.5, size=(n_s, c))
        logits_t = rng.normal(0.0, 2.5, size=(n_t, c))
        boxes_s, boxes_t = _random_boxes(n_s, rng), _random_boxes(n_t, rng)
        source = ProposalBatch(boxes_s, rng.normal(size=(n_s, d)), softmax(logits_s))
        target = ProposalBatch(boxes_t, rng.normal(size=(n_t, d)), softmax(logits_t))
        graph_s, graph_t = _random_graph(boxes_s, kind, sigma), _random_graph(boxes_t, kind, sigma)
        transform = np.eye(d) + rng.normal(0.0, 0.3, size=(d, d)) if use_transform else None

        probe = da_loss_backward(
            source,
            target,
            graph_s,
            graph_t,
            gamma=gamma,
            margin=margin,
            transform=transform,
            normalize_embeddings=normalize_embeddings,
        )
        if near_kink(probe, margin, normalize_embeddings):
            continue
        assert probe.source_prototypes is not None and probe.target_prototypes is not None
        weights = (probe.source_prototypes.require_weights(), probe.target_prototypes.require_weights())

        def loss_at(
            src: ProposalBatch = source,
            tgt: ProposalBatch = target,
            matrix: np.ndarray | None = transform,
            grad: bool = False,
        ) -> AlignmentLoss:
            return da_loss_backward(
                src,
                tgt,
                graph_s,
                graph_t,
                gamma=gamma,
                margin=margin,
                confidence_grad=grad,
                transform=matrix,
                normalize_embeddings=normalize_embeddings,
                frozen_weights=weights,
            )

        analytic = loss_at(grad=confidence_grad)
        assert analytic.grad_f_source is not None and analytic.grad_f_target is not None
        if max(np.max(np.abs(analytic.grad_f_source)), np.max(np.abs(analytic.grad_f_target))) < 1e-6:
            continue  # no class pair carries weight; nothing to verify

        def check(analytic_grad: np.ndarray, f: Callable[[np.ndarray], float], x: np.ndarray) -> float:
            return relative_error(analytic_grad, numerical_grad(f, x, eps))

        errors = [
            check(analytic.grad_f_source, lambda f: loss_at(src=source.with_features(f)).total, source.features),
            check(analytic.grad_f_target, lambda f: loss_at(tgt=target.with_features(f)).total, target.features),
        ]
        if confidence_grad:
            assert analytic.grad_p_source is not None and analytic.grad_p_target is not None
            errors.append(
                check(
                    softmax_backward(source.confidences, analytic.grad_p_source),
                    lambda z: loss_at(src=source.with_confidences(softmax(z))).total,
                    logits_s,
                )
            )
            errors.append(
                check(
                    softmax_backward(target.confidences, analytic.grad_p_target),
                    lambda z: loss_at(tgt=target.with_confidences(softmax(z))).total,
                    logits_t,
                )
            )
        if transform is not None:
            assert analytic.grad_transform is not None
            errors.append(check(analytic.grad_transform, lambda t: loss_at(matrix=t).total, transform))
        return GradcheckTrial(
            kind="da_loss",
            graph=kind.value,
            convention=CONFIDENCE_GRADIENT if confidence_grad else STOP_GRADIENT,
            shape=(n_s, n_t, d, c),
            relative_error=max(errors),
        )
    raise GpaError(f"No smooth random draw found in {MAX_DRAWS} attempts")


def _tiny_batch(n: int, raw_dim: int, num_classes: int, kind: GraphKind, rng: np.random.Generator) -> DomainBatch:
    """Small collated batch with random boxes, features and labels."""
    boxes = _random_boxes(n, rng)
    return DomainBatch(
        inputs=rng.normal(size=(n, raw_dim)),
        boxes=boxes,
        labels=rng.integers(0, num_classes, size=n),
        scene_ids=np.zeros(n, dtype=np.int64),
        graph=_random_graph(boxes, kind, 12.0),
    )


def _objective_trial(trial: int, rng: np.random.Generator, eps: float) -> GradcheckTrial:
    """Check every parameter gradient of the full two-stage objective on a tiny model (d = 4, N_p = 6)."""
    kind = GraphKind.IOU if trial % 2 == 0 else GraphKind.GAUSSIAN
    confidence_grad = trial % 2 == 1
    learnable_transform = trial >= 2
    raw_dim, hidden_dim, d, c, n = 3, 5, 4, 3, 6

    for _ in range(MAX_DRAWS):
        cfg = TrainConfig(
            gamma=2.0,
            margin_rpn=float(rng.uniform(0.5, 1.5)),
            margin_rcnn=float(rng.uniform(0.5, 1.5)),
            lambda1=1.0,
            lambda2=0.7,
            graph_kind=kind,
            confidence_grad=confidence_grad,
            learnable_transform=learnable_transform,
        )
        model = ToyModel.initialize(raw_dim, hidden_dim, d, c, rng, learnable_transform=learnable_transform)
        if learnable_transform:
            model.params["transform"] += rng.normal(0.0, 0.3, size=(d, d))
        source = _tiny_batch(n, raw_dim, c, kind, rng)
        target = _tiny_batch(n, raw_dim, c, kind, rng)

        snapshot = alignment_snapshot(model, source, target, cfg)
        report, grads = objective(model, source, target, cfg, frozen=snapshot)
        if report.rpn is None or report.rcnn is None:
            continue
        if near_kink(report.rpn, cfg.margin_rpn) or near_kink(report.rcnn, cfg.margin_rcnn):
            continue

        names = sorted(model.params)
        analytic = np.concatenate([grads[name].ravel() for name in names])
        numeric_parts = []
        for name in names:

            def total_at(value: np.ndarray) -> float:
                perturbed = model.copy()
                perturbed.params[name] = value
                return objective(perturbed, source, target, cfg, frozen=snapshot)[0].total

            numeric_parts.append(numerical_grad(total_at, model.params[name], eps).ravel())
        return GradcheckTrial(
            kind="objective",
            graph=kind.value,
            convention=CONFIDENCE_GRADIENT if confidence_grad else STOP_GRADIENT,
            shape=(n, n, d, c),
            relative_error=relative_error(analytic, np.concatenate(numeric_parts)),
        )
    raise GpaError(f"No smooth random draw found in {MAX_DRAWS} attempts")


def run_gradcheck(
    trials: int = 100,
    seed: int = 0,
    tolerance: float = DEFAULT_TOLERANCE,
    eps: float = DEFAULT_EPS,
    objective_trials: int = 4,
) -> GradcheckReport:
    """Random alignment-loss draws cycling through graph kinds and gradient conventions,
    followed by full-objective checks on a tiny model."""
    if trials < 0 or objective_trials < 0:
        raise InvalidParameterError("Trial counts must be >= 0", key="trials")
    rng = np.random.default_rng(seed)
    results = [_alignment_trial(i, rng, eps) for i in range(trials)]
    results += [_objective_trial(i, rng, eps) for i in range(objective_trials)]
    return GradcheckReport(trials=tuple(results), tolerance=tolerance)

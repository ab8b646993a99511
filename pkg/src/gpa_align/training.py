"""Two-stage alignment training of the toy detector.

The objective per step is

    L_det + lambda1 * L_da(stage 1, 2 classes) + lambda2 * L_da(stage 2, C classes)

where L_det is the classification surrogate on labeled source proposals and both
alignment terms compare source and target prototypes built from graph-aggregated
proposals of the current mini-batch.
"""

import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from .alignment import da_loss_backward
from .config import ModelConfig, TrainConfig
from .errors import InvalidInputError, InvariantViolation
from .graph import SPARSITY_THRESHOLD, aggregate, build_graph, calibrate_sigma, combine_graphs, iou_adjacency
from .models import (
    AlignmentLoss,
    Domain,
    GraphKind,
    LossReport,
    MetricsReport,
    ProposalBatch,
    PrototypeSet,
    RelationGraph,
    Scene,
    Stage,
)
from .prototype import build_prototypes, class_weights
from .simulator import Dataset
from .toy_model import DECAYED_PARAMS, ModelOutput, ToyModel, detection_loss_terms, softmax_backward
from .utils import stream_seed

# Objective terms must add up to the reported total to this tolerance.
ADDITIVITY_TOLERANCE = 1e-12

MODEL_STREAM = 5
SHUFFLE_STREAM = 6


# =============================================================================
# Batches
# =============================================================================


@dataclass(frozen=True, eq=False)
class DomainBatch:
    """Proposals of several scenes of one domain, ready for the model."""

    inputs: np.ndarray  # raw proposal features, (N, r)
    boxes: np.ndarray  # (N, 4)
    labels: np.ndarray  # (N,); used for the target domain only by evaluation
    scene_ids: np.ndarray  # (N,)
    graph: RelationGraph  # block-diagonal over scenes

    @property
    def num_proposals(self) -> int:
        return int(self.inputs.shape[0])


def scene_graphs(scenes: list[Scene], kind: GraphKind, sigma: float | None = None) -> list[RelationGraph]:
    """One relation graph per scene; proposals of different scenes are never related."""
    return [build_graph(scene.proposal_boxes, kind, sigma) for scene in scenes]


def collate(scenes: list[Scene], graphs: list[RelationGraph]) -> DomainBatch:
    """Concatenate scenes of one domain and join their graphs block-diagonally."""
    if not scenes:
        raise InvalidInputError("Cannot collate an empty list of scenes")
    if len(graphs) != len(scenes):
        raise InvalidInputError(f"Got {len(graphs)} graphs for {len(scenes)} scenes")
    return DomainBatch(
        inputs=np.concatenate([s.proposal_features for s in scenes]),
        boxes=np.concatenate([s.proposal_boxes for s in scenes]),
        labels=np.concatenate([s.proposal_labels for s in scenes]),
        scene_ids=np.concatenate([np.full(s.num_proposals, i, dtype=np.int64) for i, s in enumerate(scenes)]),
        graph=combine_graphs(graphs),
    )


def calibrate_scene_sigma(scenes: list[Scene], threshold: float = SPARSITY_THRESHOLD) -> tuple[float, float]:
    """Median of the per-scene sparsity-matched sigmas, and the pooled sparsity gap it leaves."""
    if not scenes:
        raise InvalidInputError("Cannot calibrate sigma without scenes")
    sigma = np.median([calibrate_sigma(s.proposal_boxes, threshold) for s in scenes])
    gaussian_sparse = iou_sparse = total = 0
    for scene in scenes:
        gaussian = build_graph(scene.proposal_boxes, GraphKind.GAUSSIAN, sigma).adjacency
        gaussian_sparse += int(np.sum(gaussian < threshold))
        iou_sparse += int(np.sum(iou_adjacency(scene.proposal_boxes).adjacency < threshold))
        total += gaussian.size
    return float(sigma), abs(gaussian_sparse - iou_sparse) / total


def _stage_batch(
    output: ModelOutput,
    batch: DomainBatch,
    stage: Stage,
    confidences: np.ndarray | None = None,
) -> ProposalBatch:
    """Proposal batch of one stage from a forward pass."""
    if confidences is None:
        confidences = output.rpn_probs if stage is Stage.RPN else output.cls_probs
    return ProposalBatch(
        boxes=batch.boxes,
        features=output.features,
        confidences=confidences,
        stage=stage,
        scene_ids=batch.scene_ids,
    )


# =============================================================================
# Objective
# =============================================================================


@dataclass(frozen=True, eq=False)
class StageSnapshot:
    """Alignment inputs of one stage held fixed while the parameters are perturbed."""

    source_confidences: np.ndarray
    target_confidences: np.ndarray
    source_weights: np.ndarray
    target_weights: np.ndarray


def alignment_snapshot(
    model: ToyModel,
    source: DomainBatch,
    target: DomainBatch,
    cfg: TrainConfig,
) -> dict[Stage, StageSnapshot]:
    """Confidences and class weights of both stages at the current parameters."""
    out_s = model.forward(source.inputs)
    out_t = model.forward(target.inputs)
    snapshot = {}
    for stage in Stage:
        batch_s = _stage_batch(out_s, source, stage)
        batch_t = _stage_batch(out_t, target, stage)
        agg_s = aggregate(batch_s, source.graph)
        agg_t = aggregate(batch_t, target.graph)
        snapshot[stage] = StageSnapshot(
            source_confidences=batch_s.confidences,
            target_confidences=batch_t.confidences,
            source_weights=class_weights(agg_s, cfg.gamma, cfg.threshold_classes),
            target_weights=class_weights(agg_t, cfg.gamma, cfg.threshold_classes),
        )
    return snapshot


def _stage_settings(cfg: TrainConfig) -> tuple[tuple[Stage, float, float], ...]:
    return ((Stage.RPN, cfg.lambda1, cfg.margin_rpn), (Stage.RCNN, cfg.lambda2, cfg.margin_rcnn))


def objective(
    model: ToyModel,
    source: DomainBatch,
    target: DomainBatch,
    cfg: TrainConfig,
    frozen: dict[Stage, StageSnapshot] | None = None,
) -> tuple[LossReport, dict[str, np.ndarray]]:
    """Two-stage objective and its parameter gradients.

    Alignment terms with a zero trade-off weight are not evaluated and reported as 0.
    `frozen` pins the class weights (and, under stop-gradient, the confidences) of the
    alignment terms so the objective is differentiable everywhere it is evaluated.
    """
    out_s = model.forward(source.inputs)
    out_t = model.forward(target.inputs)
    l_det, grad_rpn_s, grad_cls_s = detection_loss_terms(out_s, source.labels)

    outputs = {Domain.SOURCE: out_s, Domain.TARGET: out_t}
    grad_features = {domain: np.zeros_like(out.features) for domain, out in outputs.items()}
    grad_logits = {
        (Domain.SOURCE, Stage.RPN): grad_rpn_s,
        (Domain.SOURCE, Stage.RCNN): grad_cls_s,
        (Domain.TARGET, Stage.RPN): np.zeros_like(out_t.rpn_probs),
        (Domain.TARGET, Stage.RCNN): np.zeros_like(out_t.cls_probs),
    }
    grad_transform = None if model.transform is None else np.zeros_like(model.transform)
    stage_losses: dict[Stage, AlignmentLoss] = {}

    for stage, weight, margin in _stage_settings(cfg):
        if weight == 0:
            continue
        snap = frozen[stage] if frozen is not None else None
        pinned_s = pinned_t = None
        frozen_weights = None
        if snap is not None:
            frozen_weights = (snap.source_weights, snap.target_weights)
            if not cfg.confidence_grad:
                pinned_s, pinned_t = snap.source_confidences, snap.target_confidences
        batch_s = _stage_batch(out_s, source, stage, pinned_s)
        batch_t = _stage_batch(out_t, target, stage, pinned_t)
        expected = 2 if stage is Stage.RPN else model.num_classes
        if batch_s.num_classes != expected or batch_t.num_classes != expected:
            raise InvariantViolation(
                f"{stage.value} alignment must compare {expected} classes, got {batch_s.num_classes}",
                key=stage.value,
            )
        loss = da_loss_backward(
            batch_s,
            batch_t,
            source.graph,
            target.graph,
            gamma=cfg.gamma,
            margin=margin,
            confidence_grad=cfg.confidence_grad,
            transform=model.transform,
            normalize_embeddings=cfg.normalize_embeddings,
            threshold_classes=cfg.threshold_classes,
            frozen_weights=frozen_weights,
        )
        stage_losses[stage] = loss
        for domain, grad_f, grad_p in (
            (Domain.SOURCE, loss.grad_f_source, loss.grad_p_source),
            (Domain.TARGET, loss.grad_f_target, loss.grad_p_target),
        ):
            assert grad_f is not None
            grad_features[domain] += weight * grad_f
            if grad_p is not None:
                output = outputs[domain]
                probs = output.rpn_probs if stage is Stage.RPN else output.cls_probs
                grad_logits[(domain, stage)] += weight * softmax_backward(probs, grad_p)
        if grad_transform is not None and loss.grad_transform is not None:
            grad_transform += weight * loss.grad_transform

    def backward(domain: Domain) -> dict[str, np.ndarray]:
        return model.backward(
            outputs[domain],
            grad_features=grad_features[domain],
            grad_rpn_logits=grad_logits[(domain, Stage.RPN)],
            grad_cls_logits=grad_logits[(domain, Stage.RCNN)],
        )

    grads = backward(Domain.SOURCE)
    if stage_losses:
        target_grads = backward(Domain.TARGET)
        grads = {name: grads[name] + target_grads[name] for name in grads}
    if grad_transform is not None:
        grads["transform"] = grad_transform

    rpn = stage_losses.get(Stage.RPN)
    rcnn = stage_losses.get(Stage.RCNN)
    l_da_rpn = rpn.total if rpn is not None else 0.0
    l_da_rcnn = rcnn.total if rcnn is not None else 0.0
    report = LossReport(
        l_det=l_det,
        l_da_rpn=l_da_rpn,
        l_da_rcnn=l_da_rcnn,
        total=l_det + cfg.lambda1 * l_da_rpn + cfg.lambda2 * l_da_rcnn,
        lambda1=cfg.lambda1,
        lambda2=cfg.lambda2,
        rpn=rpn,
        rcnn=rcnn,
    )
    check_report(report)
    return report, grads


def check_report(report: LossReport) -> None:
    """Raise InvariantViolation unless the reported terms compose to the total."""
    terms = (report.l_det, report.l_da_rpn, report.l_da_rcnn)
    if any(not math.isfinite(t) or t < 0 for t in terms):
        raise InvariantViolation(f"Loss terms must be finite and nonnegative, got {terms}", key="loss")
    expected = report.l_det + report.lambda1 * report.l_da_rpn + report.lambda2 * report.l_da_rcnn
    if abs(report.total - expected) > ADDITIVITY_TOLERANCE:
        raise InvariantViolation(f"Total {report.total!r} differs from the sum of its terms {expected!r}", key="total")


# =============================================================================
# Optimization
# =============================================================================


class MomentumSGD:
    """SGD with heavy-ball momentum and L2 weight decay on the weight matrices.

    v <- mu * v + (g + wd * w);  w <- w - lr * v   (the first step uses v = g + wd * w)
    """

    def __init__(
        self,
        learning_rate: float,
        momentum: float = 0.9,
        weight_decay: float = 0.0,
        decayed: tuple[str, ...] = DECAYED_PARAMS,
    ) -> None:
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decayed = decayed
        self.velocity: dict[str, np.ndarray] = {}

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "MomentumSGD":
        return cls(cfg.learning_rate, cfg.momentum, cfg.weight_decay)

    def step(self, model: ToyModel, grads: dict[str, np.ndarray]) -> None:
        for name, param in model.params.items():
            grad = grads[name]
            if self.weight_decay and name in self.decayed:
                grad = grad + self.weight_decay * param
            velocity = self.velocity.get(name)
            velocity = grad.copy() if velocity is None else self.momentum * velocity + grad
            self.velocity[name] = velocity
            param -= self.learning_rate * velocity


def two_stage_step(
    model: ToyModel,
    source: DomainBatch,
    target: DomainBatch,
    cfg: TrainConfig,
    optimizer: MomentumSGD | None = None,
) -> tuple[ToyModel, LossReport]:
    """One update on the full objective; the model is updated in place and returned."""
    report, grads = objective(model, source, target, cfg)
    (optimizer or MomentumSGD.from_config(cfg)).step(model, grads)
    return model, report


def source_only_step(
    model: ToyModel,
    source: DomainBatch,
    target: DomainBatch,
    cfg: TrainConfig,
    optimizer: MomentumSGD | None = None,
) -> tuple[ToyModel, LossReport]:
    """One update on the detection surrogate alone; the target batch is ignored."""
    output = model.forward(source.inputs)
    l_det, grad_rpn, grad_cls = detection_loss_terms(output, source.labels)
    grads = model.backward(output, grad_rpn_logits=grad_rpn, grad_cls_logits=grad_cls)
    (optimizer or MomentumSGD.from_config(cfg)).step(model, grads)
    return model, LossReport(l_det, 0.0, 0.0, l_det, cfg.lambda1, cfg.lambda2)


# =============================================================================
# Evaluation
# =============================================================================


def stage_prototypes(
    model: ToyModel,
    batch: DomainBatch,
    cfg: TrainConfig,
    stage: Stage = Stage.RCNN,
    domain: Domain = Domain.SOURCE,
    output: ModelOutput | None = None,
) -> PrototypeSet:
    """Weighted prototypes of one stage, built the way the alignment loss builds them."""
    if output is None:
        output = model.forward(batch.inputs)
    agg = aggregate(_stage_batch(output, batch, stage), batch.graph, model.transform)
    return build_prototypes(agg, cfg.gamma, domain, cfg.threshold_classes)


def prototype_distances(prototypes: PrototypeSet, reference: PrototypeSet | None) -> np.ndarray:
    """Phi(c_k, reference c_k) per class; NaN where either side is absent."""
    distances = np.full(prototypes.num_classes, np.nan)
    if reference is None:
        return distances
    if reference.vectors.shape != prototypes.vectors.shape:
        raise InvalidInputError("Reference prototypes differ in shape")
    both = prototypes.present & reference.present
    distances[both] = np.linalg.norm(prototypes.vectors[both] - reference.vectors[both], axis=1)
    return distances


def evaluate(
    model: ToyModel,
    batch: DomainBatch,
    cfg: TrainConfig,
    reference: PrototypeSet | None = None,
    domain: Domain = Domain.TARGET,
) -> MetricsReport:
    """Proposal classification accuracy, prototype distances to `reference`, and the stage-1 margin."""
    output = model.forward(batch.inputs)
    predictions = np.argmax(output.cls_probs, axis=1)
    correct = predictions == batch.labels
    per_class = np.full(model.num_classes, np.nan)
    for k in range(model.num_classes):
        mask = batch.labels == k
        if mask.any():
            per_class[k] = float(np.mean(correct[mask]))

    prototypes = stage_prototypes(model, batch, cfg, Stage.RCNN, domain, output)
    stage1 = stage_prototypes(model, batch, cfg, Stage.RPN, domain, output)
    margin = math.nan
    if stage1.present.all():
        margin = float(np.linalg.norm(stage1.vectors[1] - stage1.vectors[0]))
    return MetricsReport(
        accuracy=float(np.mean(correct)),
        per_class_accuracy=per_class,
        prototype_distances=prototype_distances(prototypes, reference),
        fg_bg_margin=margin,
        num_proposals=batch.num_proposals,
    )


# =============================================================================
# Training loop
# =============================================================================


@dataclass(frozen=True, eq=False)
class EpochRecord:
    """Mean step losses of one epoch and end-of-epoch metrics on the test splits."""

    epoch: int
    l_det: float
    l_da_rpn: float
    l_da_rcnn: float
    total: float
    source: MetricsReport
    target: MetricsReport


@dataclass(eq=False)
class TrainResult:
    model: ToyModel
    history: list[EpochRecord] = field(default_factory=list)
    sigma: float | None = None
    sigma_gap: float | None = None
    source_test: DomainBatch | None = None
    target_test: DomainBatch | None = None

    @property
    def final(self) -> EpochRecord:
        return self.history[-1]


def resolve_sigma(dataset: Dataset, cfg: TrainConfig) -> tuple[float | None, float | None]:
    """Sigma for Gaussian graphs: the configured value, or sparsity-matched on the training scenes."""
    if cfg.graph_kind is not GraphKind.GAUSSIAN:
        return None, None
    if cfg.sigma is not None:
        return cfg.sigma, None
    return calibrate_scene_sigma(dataset.splits["source_train"] + dataset.splits["target_train"])


def train(
    dataset: Dataset,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    source_only: bool = False,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Train a freshly initialized toy model; deterministic given the dataset and `cfg.seed`.

    Every variant shares the detection-only pretraining epochs, so two configs that differ
    only in their alignment settings start aligning from the same parameters.
    """
    source_train = dataset.splits["source_train"]
    target_train = dataset.splits["target_train"]
    if not source_train or not target_train:
        raise InvalidInputError("Training needs at least one source and one target scene")
    sigma, gap = resolve_sigma(dataset, cfg)

    def graphs_for(scenes: list[Scene]) -> list[RelationGraph]:
        return scene_graphs(scenes, cfg.graph_kind, sigma)

    graphs_s = graphs_for(source_train)
    graphs_t = graphs_for(target_train)
    source_test = collate(dataset.splits["source_test"], graphs_for(dataset.splits["source_test"]))
    target_test = collate(dataset.splits["target_test"], graphs_for(dataset.splits["target_test"]))

    model = ToyModel.initialize(
        dataset.source.raw_dim,
        model_cfg.hidden_dim,
        model_cfg.embedding_dim,
        dataset.num_classes,
        np.random.default_rng(stream_seed(cfg.seed, MODEL_STREAM)),
        learnable_transform=cfg.learnable_transform,
    )
    optimizer = MomentumSGD.from_config(cfg)
    rng = np.random.default_rng(stream_seed(cfg.seed, SHUFFLE_STREAM))
    size = cfg.batch_scenes
    steps = max(1, min(len(source_train), len(target_train)) // size)

    result = TrainResult(model=model, sigma=sigma, sigma_gap=gap, source_test=source_test, target_test=target_test)
    for epoch in range(1, cfg.epochs + 1):
        order_s = rng.permutation(len(source_train))
        order_t = rng.permutation(len(target_train))
        # the first pretrain_epochs fit the detector on source labels before alignment joins
        step = source_only_step if source_only or epoch <= cfg.pretrain_epochs else two_stage_step
        sums = np.zeros(4)
        for i in range(steps):
            idx_s = order_s[i * size : (i + 1) * size]
            idx_t = order_t[i * size : (i + 1) * size]
            batch_s = collate([source_train[j] for j in idx_s], [graphs_s[j] for j in idx_s])
            batch_t = collate([target_train[j] for j in idx_t], [graphs_t[j] for j in idx_t])
            _, report = step(model, batch_s, batch_t, cfg, optimizer)
            sums += (report.l_det, report.l_da_rpn, report.l_da_rcnn, report.total)
        means = sums / steps

        source_metrics = evaluate(model, source_test, cfg, domain=Domain.SOURCE)
        reference = stage_prototypes(model, source_test, cfg, Stage.RCNN, Domain.SOURCE)
        target_metrics = evaluate(model, target_test, cfg, reference=reference, domain=Domain.TARGET)
        record = EpochRecord(
            epoch=epoch,
            l_det=float(means[0]),
            l_da_rpn=float(means[1]),
            l_da_rcnn=float(means[2]),
            total=float(means[3]),
            source=source_metrics,
            target=target_metrics,
        )
        result.history.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return result

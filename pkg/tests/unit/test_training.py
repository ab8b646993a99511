"""Unit tests for two-stage alignment training and evaluation."""

import math
from dataclasses import replace

import numpy as np
import pytest

from gpa_align.config import ModelConfig, TrainConfig
from gpa_align.errors import InvalidInputError, InvariantViolation
from gpa_align.graph import iou_adjacency
from gpa_align.models import Domain, GraphKind, LossReport, Stage
from gpa_align.simulator import generate_dataset
from gpa_align.toy_model import ToyModel
from gpa_align.training import (
    MomentumSGD,
    alignment_snapshot,
    calibrate_scene_sigma,
    check_report,
    collate,
    evaluate,
    objective,
    prototype_distances,
    scene_graphs,
    source_only_step,
    stage_prototypes,
    train,
    two_stage_step,
)


@pytest.fixture
def dataset(small_simulation):
    return generate_dataset(small_simulation, seed=3)


@pytest.fixture
def batches(dataset):
    source = dataset.splits["source_train"][:2]
    target = dataset.splits["target_train"][:2]
    return (
        collate(source, scene_graphs(source, GraphKind.IOU)),
        collate(target, scene_graphs(target, GraphKind.IOU)),
    )


@pytest.fixture
def model(dataset):
    return ToyModel.initialize(dataset.source.raw_dim, 8, 4, dataset.num_classes, np.random.default_rng(0))


def assert_same_params(first, second):
    assert first.params.keys() == second.params.keys()
    for name in first.params:
        np.testing.assert_array_equal(first.params[name], second.params[name], err_msg=name)


# =============================================================================
# Tests for batching
# =============================================================================


class TestCollate:
    """Test cases for joining scenes into one domain batch."""

    def test_concatenates_scenes(self, dataset):
        """Proposals of all scenes are stacked with their scene ids."""
        scenes = dataset.splits["source_train"][:3]
        batch = collate(scenes, scene_graphs(scenes, GraphKind.IOU))
        sizes = [s.num_proposals for s in scenes]
        assert batch.num_proposals == sum(sizes)
        np.testing.assert_array_equal(np.bincount(batch.scene_ids), sizes)
        assert batch.inputs.shape[1] == dataset.source.raw_dim

    def test_graph_is_block_diagonal(self, dataset):
        """No edges between proposals of different scenes."""
        scenes = dataset.splits["source_train"][:3]
        batch = collate(scenes, scene_graphs(scenes, GraphKind.IOU))
        cross = batch.scene_ids[:, None] != batch.scene_ids[None, :]
        assert np.all(batch.graph.adjacency[cross] == 0.0)

    def test_graph_count_mismatch(self, dataset):
        """One graph per scene is required."""
        scenes = dataset.splits["source_train"][:2]
        with pytest.raises(InvalidInputError):
            collate(scenes, scene_graphs(scenes[:1], GraphKind.IOU))

    def test_empty(self):
        """At least one scene is required."""
        with pytest.raises(InvalidInputError):
            collate([], [])

    def test_calibrated_scene_sigma(self, dataset):
        """Median per-scene sigma is positive and the pooled gap is a fraction."""
        sigma, gap = calibrate_scene_sigma(dataset.splits["source_train"])
        assert sigma > 0
        assert 0.0 <= gap <= 1.0


# =============================================================================
# Tests for objective()
# =============================================================================


class TestObjective:
    """Test cases for the two-stage objective."""

    def test_terms_add_up(self, model, batches):
        """total = L_det + lambda1 L_da_rpn + lambda2 L_da_rcnn."""
        cfg = TrainConfig(lambda1=0.3, lambda2=1.7)
        report, _ = objective(model, *batches, cfg)
        expected = report.l_det + 0.3 * report.l_da_rpn + 1.7 * report.l_da_rcnn
        assert abs(report.total - expected) <= 1e-12

    def test_stage_class_counts(self, model, batches, dataset):
        """Stage 1 aligns 2 classes, stage 2 all C classes."""
        report, _ = objective(model, *batches, TrainConfig())
        assert report.rpn.source_prototypes.num_classes == 2
        assert report.rcnn.source_prototypes.num_classes == dataset.num_classes

    def test_zero_lambda_skips_alignment(self, model, batches):
        """Terms with a zero weight are not evaluated and reported as 0."""
        report, grads = objective(model, *batches, TrainConfig(lambda1=0.0, lambda2=0.0))
        assert report.rpn is None and report.rcnn is None
        assert report.l_da_rpn == 0.0 and report.l_da_rcnn == 0.0
        assert report.total == report.l_det
        assert set(grads) == set(model.params)

    def test_transform_gradient_present(self, dataset, batches):
        """A learnable transform receives a gradient."""
        model = ToyModel.initialize(
            dataset.source.raw_dim, 8, 4, dataset.num_classes, np.random.default_rng(0), learnable_transform=True
        )
        _, grads = objective(model, *batches, TrainConfig(learnable_transform=True))
        assert grads["transform"].shape == (4, 4)

    def test_frozen_snapshot_matches_live_values(self, model, batches):
        """Freezing at the current parameters does not change the objective value."""
        cfg = TrainConfig()
        live, _ = objective(model, *batches, cfg)
        frozen, _ = objective(model, *batches, cfg, frozen=alignment_snapshot(model, *batches, cfg))
        assert frozen.total == pytest.approx(live.total, abs=1e-12)

    def test_check_report_accepts_consistent(self):
        """A consistent report passes."""
        check_report(LossReport(1.0, 0.5, 0.25, 1.0 + 0.5 * 2.0 + 0.25 * 4.0, 2.0, 4.0))

    def test_check_report_rejects_mismatch(self):
        """A total that is not the sum of its terms is an invariant violation."""
        with pytest.raises(InvariantViolation):
            check_report(LossReport(1.0, 0.5, 0.25, 3.5, 1.0, 1.0))

    def test_check_report_rejects_negative(self):
        """Negative terms are an invariant violation."""
        with pytest.raises(InvariantViolation):
            check_report(LossReport(-1.0, 0.0, 0.0, -1.0, 1.0, 1.0))

    def test_check_report_rejects_nan(self):
        """Non-finite terms are an invariant violation."""
        with pytest.raises(InvariantViolation):
            check_report(LossReport(math.nan, 0.0, 0.0, math.nan, 1.0, 1.0))


# =============================================================================
# Tests for MomentumSGD
# =============================================================================


class TestMomentumSGD:
    """Test cases for the optimizer."""

    def test_first_step_plain_gradient(self, model):
        """The first step moves by lr * g."""
        before = model.copy()
        grads = {name: np.ones_like(v) for name, v in model.params.items()}
        MomentumSGD(learning_rate=0.1, momentum=0.9).step(model, grads)
        np.testing.assert_allclose(model.params["b1"], before.params["b1"] - 0.1)

    def test_momentum_accumulates(self, model):
        """The second step uses v = mu * v + g."""
        before = model.copy()
        grads = {name: np.ones_like(v) for name, v in model.params.items()}
        optimizer = MomentumSGD(learning_rate=0.1, momentum=0.5)
        optimizer.step(model, grads)
        optimizer.step(model, grads)
        np.testing.assert_allclose(model.params["b2"], before.params["b2"] - 0.1 - 0.1 * 1.5)

    def test_weight_decay_on_weights_only(self, model):
        """Biases are not decayed."""
        before = model.copy()
        grads = model.zeros_like()
        MomentumSGD(learning_rate=0.1, momentum=0.0, weight_decay=0.5).step(model, grads)
        np.testing.assert_allclose(model.params["w1"], before.params["w1"] * (1 - 0.05))
        np.testing.assert_array_equal(model.params["b1"], before.params["b1"])

    def test_from_config(self):
        """Hyper-parameters are taken from the training config."""
        optimizer = MomentumSGD.from_config(TrainConfig(learning_rate=0.2, momentum=0.8, weight_decay=0.01))
        assert (optimizer.learning_rate, optimizer.momentum, optimizer.weight_decay) == (0.2, 0.8, 0.01)


# =============================================================================
# Tests for the training steps
# =============================================================================


class TestSteps:
    """Test cases for single updates."""

    def test_zero_lambdas_equal_source_only(self, model, batches):
        """With lambda1 = lambda2 = 0 the two-stage step is the source-only step, bit for bit."""
        cfg = TrainConfig(lambda1=0.0, lambda2=0.0)
        aligned, baseline = model.copy(), model.copy()
        opt_a, opt_b = MomentumSGD.from_config(cfg), MomentumSGD.from_config(cfg)
        for _ in range(3):
            _, report_a = two_stage_step(aligned, *batches, cfg, opt_a)
            _, report_b = source_only_step(baseline, *batches, cfg, opt_b)
            assert report_a.total == report_b.total
        assert_same_params(aligned, baseline)

    def test_step_changes_parameters(self, model, batches):
        """A step with alignment moves the parameters."""
        before = model.copy()
        two_stage_step(model, *batches, TrainConfig())
        assert not np.array_equal(model.params["w2"], before.params["w2"])

    def test_source_only_ignores_target(self, model, batches, dataset):
        """The source-only step does not depend on the target batch."""
        other_scenes = dataset.splits["target_train"][2:4]
        other = collate(other_scenes, scene_graphs(other_scenes, GraphKind.IOU))
        cfg = TrainConfig()
        first, second = model.copy(), model.copy()
        source_only_step(first, batches[0], batches[1], cfg)
        source_only_step(second, batches[0], other, cfg)
        assert_same_params(first, second)


# =============================================================================
# Tests for evaluation
# =============================================================================


class TestEvaluate:
    """Test cases for proxy metrics."""

    def test_oracle_classifier(self, model, batches):
        """A head that outputs the true label gets accuracy 1."""
        source, _ = batches
        oracle = model.copy()
        c = oracle.num_classes
        # embedding carries the one-hot label through a linear read-out of the inputs
        inputs = np.eye(c)[source.labels] * 10.0
        oracle_batch = replace(source, inputs=inputs)
        oracle.params = {
            "w1": np.eye(c),
            "b1": np.zeros(c),
            "w2": np.eye(c),
            "b2": np.zeros(c),
            "w_rpn": np.zeros((c, 2)),
            "b_rpn": np.zeros(2),
            "w_cls": np.eye(c) * 10.0,
            "b_cls": np.zeros(c),
        }
        metrics = evaluate(oracle, oracle_batch, TrainConfig())
        assert metrics.accuracy == 1.0
        present = ~np.isnan(metrics.per_class_accuracy)
        np.testing.assert_array_equal(metrics.per_class_accuracy[present], 1.0)

    def test_constant_classifier_chance_level(self, model, batches):
        """A head that always predicts one class scores that class's share."""
        source, _ = batches
        constant = model.copy()
        constant.params["w_cls"] = np.zeros_like(constant.params["w_cls"])
        constant.params["b_cls"] = np.arange(constant.num_classes, dtype=np.float64) * -1.0
        metrics = evaluate(constant, source, TrainConfig())
        assert metrics.accuracy == pytest.approx(float(np.mean(source.labels == 0)))

    def test_self_reference_distance_zero(self, model, batches):
        """Distances to one's own prototypes are 0 for present classes."""
        source, _ = batches
        cfg = TrainConfig()
        reference = stage_prototypes(model, source, cfg, Stage.RCNN, Domain.SOURCE)
        metrics = evaluate(model, source, cfg, reference=reference)
        distances = metrics.prototype_distances[reference.present]
        np.testing.assert_allclose(distances, 0.0, atol=1e-12)

    def test_no_reference_gives_nan(self, model, batches):
        """Without a reference the distances are undefined."""
        metrics = evaluate(model, batches[0], TrainConfig())
        assert np.all(np.isnan(metrics.prototype_distances))

    def test_prototype_distance_shape_checked(self, model, batches):
        """Reference prototypes must match in shape."""
        cfg = TrainConfig()
        rcnn = stage_prototypes(model, batches[0], cfg, Stage.RCNN)
        rpn = stage_prototypes(model, batches[0], cfg, Stage.RPN)
        with pytest.raises(InvalidInputError):
            prototype_distances(rcnn, rpn)

    def test_metrics_fields(self, model, batches):
        """Margin is finite and the proposal count is recorded."""
        metrics = evaluate(model, batches[1], TrainConfig())
        assert math.isfinite(metrics.fg_bg_margin)
        assert metrics.num_proposals == batches[1].num_proposals


# =============================================================================
# Tests for train()
# =============================================================================


class TestTrain:
    """Test cases for the training loop."""

    def test_history_length(self, dataset):
        """One record per epoch, reported through the callback too."""
        seen = []
        cfg = TrainConfig(epochs=3, pretrain_epochs=0, batch_scenes=2)
        result = train(dataset, ModelConfig(8, 4), cfg, on_epoch=seen.append)
        assert [r.epoch for r in result.history] == [1, 2, 3]
        assert seen == result.history

    def test_deterministic(self, dataset):
        """Same dataset and seed: identical parameters and losses."""
        cfg = TrainConfig(epochs=2, pretrain_epochs=0, batch_scenes=2)
        first = train(dataset, ModelConfig(8, 4), cfg)
        second = train(dataset, ModelConfig(8, 4), cfg)
        assert_same_params(first.model, second.model)
        assert [r.total for r in first.history] == [r.total for r in second.history]

    def test_zero_lambdas_equal_source_only(self, dataset):
        """Two-stage training with zero weights reproduces source-only training exactly."""
        cfg = TrainConfig(epochs=2, pretrain_epochs=0, batch_scenes=2, lambda1=0.0, lambda2=0.0)
        aligned = train(dataset, ModelConfig(8, 4), cfg)
        baseline = train(dataset, ModelConfig(8, 4), cfg, source_only=True)
        assert_same_params(aligned.model, baseline.model)
        assert all(r.l_da_rpn == 0.0 and r.l_da_rcnn == 0.0 for r in baseline.history)

    def test_pretraining_is_detection_only(self, dataset):
        """Pretraining epochs report no alignment loss and match source-only training exactly."""
        cfg = TrainConfig(epochs=2, pretrain_epochs=2, batch_scenes=2)
        aligned = train(dataset, ModelConfig(8, 4), cfg)
        baseline = train(dataset, ModelConfig(8, 4), cfg, source_only=True)
        assert_same_params(aligned.model, baseline.model)
        assert all(r.l_da_rpn == 0.0 and r.l_da_rcnn == 0.0 for r in aligned.history)

    def test_alignment_starts_after_pretraining(self, dataset):
        """The epoch after pretraining evaluates both alignment terms."""
        result = train(dataset, ModelConfig(8, 4), TrainConfig(epochs=3, pretrain_epochs=2, batch_scenes=2))
        assert [r.l_da_rcnn > 0.0 for r in result.history] == [False, False, True]

    def test_variants_share_pretrained_start(self, dataset):
        """Alignment settings do not change the pretrained parameters."""
        base = TrainConfig(epochs=1, pretrain_epochs=1, batch_scenes=2)
        first = train(dataset, ModelConfig(8, 4), base)
        second = train(dataset, ModelConfig(8, 4), replace(base, gamma=0.0, lambda1=2.0, graph_kind=GraphKind.NONE))
        assert_same_params(first.model, second.model)

    def test_gaussian_graph_calibrates_sigma(self, dataset):
        """Gaussian graphs without sigma are sparsity-matched on the training scenes."""
        result = train(dataset, ModelConfig(8, 4), TrainConfig(epochs=1, graph_kind=GraphKind.GAUSSIAN))
        assert result.sigma is not None and result.sigma > 0
        assert result.sigma_gap is not None

    def test_fixed_sigma_used(self, dataset):
        """A configured sigma is used as is."""
        cfg = TrainConfig(epochs=1, graph_kind=GraphKind.GAUSSIAN, sigma=7.5)
        result = train(dataset, ModelConfig(8, 4), cfg)
        assert result.sigma == 7.5
        assert result.sigma_gap is None

    def test_no_training_scenes(self, small_simulation):
        """Training needs scenes in both domains."""
        empty = generate_dataset(small_simulation, seed=0, train_scenes=0)
        with pytest.raises(InvalidInputError):
            train(empty, ModelConfig(8, 4), TrainConfig(epochs=1))

    def test_iou_graph_over_test_split(self, dataset):
        """Evaluation graphs are built per scene like the training graphs."""
        result = train(dataset, ModelConfig(8, 4), TrainConfig(epochs=1))
        scenes = dataset.splits["target_test"]
        first = scenes[0].num_proposals
        np.testing.assert_array_equal(
            result.target_test.graph.adjacency[:first, :first], iou_adjacency(scenes[0].proposal_boxes).adjacency
        )

"""Pytest configuration for gpa-align unit tests."""

import numpy as np
import pytest

from gpa_align.config import ExperimentConfig, ModelConfig, SimulationConfig, TrainConfig
from gpa_align.models import ProposalBatch, Stage
from gpa_align.toy_model import softmax


@pytest.fixture
def rng():
    """Seeded generator; every test gets the same stream."""
    return np.random.default_rng(20240607)


@pytest.fixture
def make_boxes():
    """Factory for N random boxes with positive area that overlap often."""

    def make(rng, n, extent=40.0, size=(6.0, 20.0)):
        centers = rng.uniform(0.0, extent, size=(n, 2))
        sizes = rng.uniform(size[0], size[1], size=(n, 2))
        return np.hstack([centers - sizes / 2, centers + sizes / 2])

    return make


@pytest.fixture
def make_batch(make_boxes):
    """Factory for a random ProposalBatch with softmax confidences."""

    def make(rng, n=6, d=3, c=4, stage=Stage.RCNN, scale=2.0):
        if stage is Stage.RPN:
            c = 2
        return ProposalBatch(
            boxes=make_boxes(rng, n),
            features=rng.normal(size=(n, d)),
            confidences=softmax(rng.normal(0.0, scale, size=(n, c))),
            stage=stage,
        )

    return make


@pytest.fixture
def small_simulation():
    """A few small scenes per split."""
    return SimulationConfig(
        train_scenes=4,
        test_scenes=3,
        instances_per_scene=(1, 2),
        proposals_per_instance=(2, 3),
        background_proposals=(2, 3),
    )


@pytest.fixture
def small_config(small_simulation, tmp_path):
    """Experiment config that trains in well under a second per seed."""
    return ExperimentConfig(
        simulation=small_simulation,
        model=ModelConfig(hidden_dim=8, embedding_dim=4),
        train=TrainConfig(epochs=2, pretrain_epochs=1, batch_scenes=2),
        output_dir=str(tmp_path / "runs"),
        seeds=(0,),
    )

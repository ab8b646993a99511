"""Unit tests for the finite-difference gradient check."""

import numpy as np
import pytest

from gpa_align.alignment import da_loss_backward
from gpa_align.errors import InvalidParameterError
from gpa_align.gradcheck import (
    GradcheckReport,
    GradcheckTrial,
    near_kink,
    numerical_grad,
    relative_error,
    run_gradcheck,
)
from gpa_align.graph import identity_graph


def trial(error):
    return GradcheckTrial(kind="da_loss", graph="iou", convention="stop-gradient", shape=(2, 2, 2, 2), relative_error=error)


class TestNumericalGrad:
    """Test cases for numerical_grad() and relative_error()."""

    def test_quadratic(self, rng):
        """Central differences are exact up to rounding on a quadratic."""
        a = rng.uniform(0.5, 2.0, size=(3, 4))
        x = rng.normal(size=(3, 4))
        grad = numerical_grad(lambda v: float(np.sum(a * v**2)), x)
        np.testing.assert_allclose(grad, 2 * a * x, rtol=1e-7, atol=1e-8)

    def test_input_untouched(self, rng):
        """The point of evaluation is not modified."""
        x = rng.normal(size=5)
        before = x.copy()
        numerical_grad(lambda v: float(np.sum(np.sin(v))), x)
        np.testing.assert_array_equal(x, before)

    def test_eps_positive(self):
        """A zero step is rejected."""
        with pytest.raises(InvalidParameterError):
            numerical_grad(lambda v: 0.0, np.zeros(2), eps=0.0)

    def test_relative_error(self):
        """Max-norm difference over the larger max norm."""
        assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.2])) == pytest.approx(0.2 / 2.2)

    def test_relative_error_floor(self):
        """Two zero gradients agree."""
        assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


class TestNearKink:
    """Test cases for near_kink()."""

    def test_prototypes_at_margin(self, make_batch, rng):
        """Prototypes exactly one margin apart are flagged."""
        source = make_batch(rng, n=2, d=2, c=2)
        source = source.with_features(np.array([[0.0, 0.0], [1.0, 0.0]]))
        source = source.with_confidences(np.array([[0.0, 1.0], [1.0, 0.0]]))
        loss = da_loss_backward(source, source, identity_graph(2), identity_graph(2), gamma=0.0, margin=1.0)
        assert near_kink(loss, margin=1.0)

    def test_smooth_draw(self, make_batch, rng):
        """Well separated prototypes away from the margin are not flagged."""
        source = make_batch(rng, n=2, d=2, c=2)
        source = source.with_features(np.array([[0.0, 0.0], [3.0, 0.0]]))
        source = source.with_confidences(np.array([[0.0, 1.0], [1.0, 0.0]]))
        target = source.with_features(source.features + np.array([0.1, 0.2]))
        loss = da_loss_backward(source, target, identity_graph(2), identity_graph(2), gamma=0.0, margin=1.0)
        assert not near_kink(loss, margin=1.0)


class TestGradcheckReport:
    """Test cases for report summaries."""

    def test_passed(self):
        """All trials under tolerance: passed with no failures."""
        report = GradcheckReport(trials=(trial(1e-8), trial(3e-7)), tolerance=1e-5)
        assert report.passed
        assert report.failures == []
        assert report.max_relative_error == 3e-7

    def test_failed(self):
        """One trial over tolerance fails the report."""
        report = GradcheckReport(trials=(trial(1e-8), trial(1e-3)), tolerance=1e-5)
        assert not report.passed
        assert [t.relative_error for t in report.failures] == [1e-3]

    def test_empty(self):
        """No trials trivially pass."""
        assert GradcheckReport(trials=(), tolerance=1e-5).passed


class TestRunGradcheck:
    """Test cases for run_gradcheck()."""

    def test_small_run_passes(self):
        """Every convention and graph kind agrees with finite differences."""
        report = run_gradcheck(trials=10, seed=3, objective_trials=4)
        assert len(report.trials) == 14
        assert {t.graph for t in report.trials} == {"iou", "gaussian"}
        assert {t.convention for t in report.trials} == {"stop-gradient", "confidence-grad"}
        assert report.passed, report.failures

    def test_deterministic(self):
        """Same seed, same errors."""
        first = run_gradcheck(trials=3, seed=5, objective_trials=0)
        second = run_gradcheck(trials=3, seed=5, objective_trials=0)
        assert [t.relative_error for t in first.trials] == [t.relative_error for t in second.trials]

    def test_negative_trials(self):
        """Trial counts must be non-negative."""
        with pytest.raises(InvalidParameterError):
            run_gradcheck(trials=-1)

    @pytest.mark.slow
    def test_full_check(self):
        """100 random draws stay within 1e-5."""
        report = run_gradcheck(trials=100, seed=0)
        assert report.passed, report.max_relative_error

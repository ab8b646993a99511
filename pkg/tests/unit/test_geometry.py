"""Unit tests for bounding-box geometry."""

import math

import numpy as np
import pytest

from gpa_align.errors import InvalidInputError
from gpa_align.geometry import (
    box_areas,
    box_centers,
    center_distance,
    intersection_area,
    iou,
    pairwise_iou,
    pairwise_squared_center_distance,
    union_area,
)
from gpa_align.models import BBox


def raster_iou(a, b, size=64):
    """IoU by counting unit cells of an integer grid."""
    mask_a = np.zeros((size, size), dtype=bool)
    mask_b = np.zeros((size, size), dtype=bool)
    mask_a[int(a.y_min) : int(a.y_max), int(a.x_min) : int(a.x_max)] = True
    mask_b[int(b.y_min) : int(b.y_max), int(b.x_min) : int(b.x_max)] = True
    union = np.sum(mask_a | mask_b)
    if union == 0:
        return 0.0
    return float(np.sum(mask_a & mask_b)) / float(union)


def random_integer_box(rng, size=64):
    x0, x1 = sorted(int(v) for v in rng.integers(0, size + 1, size=2))
    y0, y1 = sorted(int(v) for v in rng.integers(0, size + 1, size=2))
    return BBox(x0, y0, x1, y1)


# =============================================================================
# Tests for BBox
# =============================================================================


class TestBBox:
    """Test cases for the BBox value type."""

    def test_area_and_center(self):
        """Area is width times height; center is the midpoint."""
        box = BBox(0, 0, 4, 2)
        assert box.area() == 8
        assert box.center() == (2, 1)

    def test_degenerate_box_allowed(self):
        """A zero-width box is valid and has zero area."""
        assert BBox(1, 1, 1, 5).area() == 0

    def test_inverted_corners_rejected(self):
        """Min corner beyond max corner is invalid."""
        with pytest.raises(InvalidInputError):
            BBox(2, 0, 1, 1)

    def test_translated_and_scaled(self):
        """Translation and scaling move both corners."""
        box = BBox(0, 0, 2, 2)
        assert box.translated(1, 2).as_tuple() == (1, 2, 3, 4)
        assert box.scaled(3).as_tuple() == (0, 0, 6, 6)


# =============================================================================
# Tests for iou()
# =============================================================================


class TestIou:
    """Test cases for iou() and its helpers."""

    def test_identical_boxes(self):
        """A box overlaps itself completely."""
        box = BBox(0, 0, 2, 2)
        assert iou(box, box) == 1.0

    def test_disjoint_boxes(self):
        """Boxes that do not touch have IoU 0."""
        assert iou(BBox(0, 0, 1, 1), BBox(2, 2, 3, 3)) == 0.0

    def test_touching_boxes(self):
        """Boxes sharing only an edge have IoU 0."""
        assert iou(BBox(0, 0, 1, 1), BBox(1, 0, 2, 1)) == 0.0

    def test_partial_overlap(self):
        """Two 2x2 boxes offset by (1, 1) share a unit square: 1 / 7."""
        assert iou(BBox(0, 0, 2, 2), BBox(1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)

    def test_two_degenerate_boxes(self):
        """Empty union defines IoU as 0."""
        assert iou(BBox(1, 1, 1, 1), BBox(1, 1, 1, 1)) == 0.0

    def test_contained_box(self):
        """A box inside another: intersection is the small box."""
        assert iou(BBox(0, 0, 4, 4), BBox(1, 1, 3, 3)) == pytest.approx(4 / 16)

    def test_intersection_and_union(self):
        """Union is the sum of areas minus the intersection."""
        a, b = BBox(0, 0, 2, 2), BBox(1, 1, 3, 3)
        assert intersection_area(a, b) == 1.0
        assert union_area(a, b) == 7.0

    def test_symmetric(self, rng):
        """IoU(a, b) == IoU(b, a) for random boxes."""
        for _ in range(200):
            a, b = random_integer_box(rng), random_integer_box(rng)
            assert iou(a, b) == iou(b, a)

    def test_within_unit_interval(self, rng):
        """IoU always lies in [0, 1]."""
        for _ in range(200):
            value = iou(random_integer_box(rng), random_integer_box(rng))
            assert 0.0 <= value <= 1.0

    def test_translation_invariant(self, rng):
        """Shifting both boxes by the same offset keeps the IoU."""
        for _ in range(200):
            a, b = random_integer_box(rng), random_integer_box(rng)
            dx, dy = rng.uniform(-50, 50, size=2)
            assert iou(a.translated(dx, dy), b.translated(dx, dy)) == pytest.approx(iou(a, b), abs=1e-12)

    def test_scale_invariant(self, rng):
        """Scaling both boxes about the origin keeps the IoU."""
        for _ in range(200):
            a, b = random_integer_box(rng), random_integer_box(rng)
            s = float(rng.uniform(0.1, 10.0))
            assert iou(a.scaled(s), b.scaled(s)) == pytest.approx(iou(a, b), abs=1e-12)

    def test_matches_rasterization(self, rng):
        """Integer boxes: IoU equals the ratio of counted grid cells."""
        for _ in range(1000):
            a, b = random_integer_box(rng), random_integer_box(rng)
            assert iou(a, b) == pytest.approx(raster_iou(a, b), abs=1e-12)


# =============================================================================
# Tests for center_distance()
# =============================================================================


class TestCenterDistance:
    """Test cases for center_distance()."""

    def test_same_center(self):
        """Concentric boxes are at distance 0."""
        assert center_distance(BBox(0, 0, 4, 4), BBox(1, 1, 3, 3)) == 0.0

    def test_pythagorean(self):
        """Centers (1, 1) and (4, 5) are 5 apart."""
        assert center_distance(BBox(0, 0, 2, 2), BBox(3, 4, 5, 6)) == pytest.approx(5.0)


# =============================================================================
# Tests for the pairwise functions
# =============================================================================


class TestPairwise:
    """Test cases for the vectorized box functions."""

    def test_pairwise_iou_matches_scalar(self, rng):
        """Every entry equals the scalar IoU of the pair."""
        boxes = [random_integer_box(rng) for _ in range(12)]
        array = np.array([b.as_tuple() for b in boxes], dtype=np.float64)
        matrix = pairwise_iou(array)
        for i, a in enumerate(boxes):
            for j, b in enumerate(boxes):
                assert matrix[i, j] == pytest.approx(iou(a, b), abs=1e-15)

    def test_pairwise_iou_rectangular(self):
        """Two different box sets give an (N, M) matrix."""
        a = np.array([[0, 0, 2, 2], [5, 5, 6, 6]], dtype=np.float64)
        b = np.array([[1, 1, 3, 3], [0, 0, 2, 2], [10, 10, 11, 11]], dtype=np.float64)
        matrix = pairwise_iou(a, b)
        assert matrix.shape == (2, 3)
        assert matrix[0, 1] == 1.0
        assert matrix[1, 2] == 0.0

    def test_areas_and_centers(self):
        """Vectorized areas and centers."""
        boxes = np.array([[0, 0, 4, 2], [1, 1, 3, 5]], dtype=np.float64)
        np.testing.assert_array_equal(box_areas(boxes), [8.0, 8.0])
        np.testing.assert_array_equal(box_centers(boxes), [[2.0, 1.0], [2.0, 3.0]])

    def test_squared_center_distance(self):
        """Squared distances agree with center_distance()."""
        boxes = np.array([[0, 0, 2, 2], [3, 4, 5, 6]], dtype=np.float64)
        distances = pairwise_squared_center_distance(boxes)
        assert distances[0, 1] == pytest.approx(25.0)
        assert distances[0, 0] == 0.0
        assert math.sqrt(distances[1, 0]) == pytest.approx(center_distance(BBox(0, 0, 2, 2), BBox(3, 4, 5, 6)))

    def test_bad_shape_rejected(self):
        """Arrays must have four columns."""
        with pytest.raises(InvalidInputError):
            pairwise_iou(np.zeros((3, 3)))

    def test_inverted_rows_rejected(self):
        """Rows with x_min > x_max are invalid."""
        with pytest.raises(InvalidInputError):
            box_areas(np.array([[2.0, 0.0, 1.0, 1.0]]))

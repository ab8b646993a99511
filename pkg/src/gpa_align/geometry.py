"""Axis-aligned bounding-box arithmetic.

Boxes use continuous corner coordinates: area = (x_max - x_min) * (y_max - y_min).
The scalar functions take BBox values; the pairwise functions take (N, 4) arrays and
evaluate the same expressions, so both agree bit-for-bit.
"""

import math

import numpy as np

from .models import BBox, boxes_to_array


def intersection_area(a: BBox, b: BBox) -> float:
    """Area of the overlap of two boxes; 0 when disjoint."""
    width = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    height = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    return width * height


def union_area(a: BBox, b: BBox) -> float:
    """Area covered by either box."""
    return a.area() + b.area() - intersection_area(a, b)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 when the union is empty (two degenerate boxes)."""
    intersection = intersection_area(a, b)
    union = a.area() + b.area() - intersection
    if union <= 0:
        return 0.0
    return intersection / union


def center_distance(a: BBox, b: BBox) -> float:
    """Euclidean distance between box centers."""
    (ax, ay), (bx, by) = a.center(), b.center()
    return math.hypot(ax - bx, ay - by)


def box_areas(boxes: np.ndarray) -> np.ndarray:
    """Area of each (x_min, y_min, x_max, y_max) row."""
    boxes = boxes_to_array(boxes)
    return np.asarray((boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1]))


def box_centers(boxes: np.ndarray) -> np.ndarray:
    """Center (x, y) of each box row."""
    boxes = boxes_to_array(boxes)
    return np.stack([(boxes[:, 0] + boxes[:, 2]) / 2, (boxes[:, 1] + boxes[:, 3]) / 2], axis=1)


def pairwise_iou(boxes_a: np.ndarray, boxes_b: np.ndarray | None = None) -> np.ndarray:
    """IoU matrix between two sets of boxes, shape (N, M)."""
    boxes_a = boxes_to_array(boxes_a)
    boxes_b = boxes_a if boxes_b is None else boxes_to_array(boxes_b)
    area_a = box_areas(boxes_a)
    area_b = box_areas(boxes_b)

    left_top = np.maximum(boxes_a[:, None, :2], boxes_b[None, :, :2])  # (N, M, 2)
    right_bottom = np.minimum(boxes_a[:, None, 2:], boxes_b[None, :, 2:])
    wh = np.clip(right_bottom - left_top, 0.0, None)
    intersection = wh[:, :, 0] * wh[:, :, 1]

    union = area_a[:, None] + area_b[None, :] - intersection
    out = np.zeros_like(intersection)
    np.divide(intersection, union, out=out, where=union > 0)
    return out


def pairwise_squared_center_distance(boxes: np.ndarray) -> np.ndarray:
    """Squared center distances between all pairs of boxes, shape (N, N)."""
    centers = box_centers(boxes)
    diff = centers[:, None, :] - centers[None, :, :]
    return np.asarray((diff**2).sum(axis=2))

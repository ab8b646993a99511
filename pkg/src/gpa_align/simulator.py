"""Synthetic two-domain detection data.

Each foreground class owns several appearance modes in a raw feature space. A scene
places instances on a canvas and surrounds each with jittered proposals; a proposal's
raw feature blends the appearances of the instances it covers with a background draw
in proportion to the uncovered area. The target domain maps every appearance through
an orthogonal matrix plus an offset.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .config import SimulationConfig
from .errors import InvalidSpecError
from .geometry import pairwise_iou
from .models import BBox, Domain, DomainSpec, Instance, Scene
from .utils import stream_seed

# Attempts at drawing a jittered proposal that still overlaps its instance.
MAX_JITTER_ATTEMPTS = 100

SPLITS = ("source_train", "source_test", "target_train", "target_test")


def random_rotation(dim: int, angle: float, rng: np.random.Generator) -> np.ndarray:
    """expm(angle * S) for a random skew-symmetric S with unit Frobenius norm."""
    raw = rng.normal(size=(dim, dim))
    skew = raw - raw.T
    norm = np.linalg.norm(skew)
    if dim < 2 or norm == 0:
        return np.eye(dim)
    rotation = np.asarray(expm(angle * skew / norm))
    # expm output is orthogonal up to rounding; one polar step tightens it
    u, _, vt = np.linalg.svd(rotation)
    return np.asarray(u @ vt)


def make_domain_pair(sim: SimulationConfig, rng: np.random.Generator) -> tuple[DomainSpec, DomainSpec]:
    """Sample class structure once and return (source, target) specs sharing it."""
    k, m, r = sim.num_classes, sim.modes_per_class, sim.raw_dim
    centers = rng.normal(0.0, sim.class_separation, size=(k, r))
    directions = rng.normal(size=(k, m, r))
    directions /= np.maximum(np.linalg.norm(directions, axis=2, keepdims=True), 1e-12)
    modes = centers[:, None, :] + sim.mode_spread * directions

    foreground_mean = modes.reshape(-1, r).mean(axis=0)
    away = rng.normal(size=r)
    away /= max(float(np.linalg.norm(away)), 1e-12)
    far = foreground_mean + 2.0 * (sim.class_separation + sim.mode_spread) * away
    background_mean = sim.background_overlap * foreground_mean + (1.0 - sim.background_overlap) * far

    rotation = random_rotation(r, sim.shift_angle, rng)
    offset = rng.normal(0.0, sim.shift_offset, size=r)

    common = dict(
        class_modes=modes,
        class_frequencies=np.asarray(sim.class_frequencies, dtype=np.float64),
        background_mean=background_mean,
        mode_scale=sim.mode_scale,
        background_scale=sim.background_scale,
        scene_extent=sim.scene_extent,
        instances_per_scene=sim.instances_per_scene,
        proposals_per_instance=sim.proposals_per_instance,
        background_proposals=sim.background_proposals,
        instance_size=sim.instance_size,
        jitter=sim.jitter,
        feature_noise=sim.feature_noise,
    )
    source = DomainSpec(name=Domain.SOURCE, **common)  # type: ignore[arg-type]
    target = DomainSpec(name=Domain.TARGET, shift_rotation=rotation, shift_offset=offset, **common)  # type: ignore[arg-type]
    return source, target


def _apply_shift(spec: DomainSpec, appearance: np.ndarray) -> np.ndarray:
    """Map a raw appearance into the domain: R a + b."""
    return np.asarray(spec.rotation() @ appearance + spec.offset())


def _sample_instance_box(spec: DomainSpec, rng: np.random.Generator) -> BBox:
    """Uniform box of the configured size range inside the canvas."""
    lo, hi = spec.instance_size
    width, height = rng.uniform(lo, hi, size=2)
    extent_w, extent_h = spec.scene_extent
    x = rng.uniform(0.0, extent_w - width)
    y = rng.uniform(0.0, extent_h - height)
    return BBox(float(x), float(y), float(x + width), float(y + height))


def _jitter_box(box: BBox, jitter: float, rng: np.random.Generator) -> BBox:
    """Perturb center by N(0, jitter * size) and size by a log-normal factor."""
    if jitter == 0:
        return box
    cx, cy = box.center()
    for _ in range(MAX_JITTER_ATTEMPTS):
        dx, dy = rng.normal(0.0, jitter, size=2) * (box.width, box.height)
        sw, sh = np.exp(rng.normal(0.0, jitter, size=2))
        half_w, half_h = box.width * sw / 2, box.height * sh / 2
        candidate = BBox(
            float(cx + dx - half_w), float(cy + dy - half_h), float(cx + dx + half_w), float(cy + dy + half_h)
        )
        if pairwise_iou(np.array([candidate.as_tuple()]), np.array([box.as_tuple()]))[0, 0] > 0:
            return candidate
    return box


def _coverage(proposal: np.ndarray, instance_boxes: np.ndarray) -> np.ndarray:
    """Fraction of the proposal's area covered by each instance, rescaled to sum to at most 1."""
    if instance_boxes.shape[0] == 0:
        return np.zeros(0)
    iw = np.clip(np.minimum(proposal[2], instance_boxes[:, 2]) - np.maximum(proposal[0], instance_boxes[:, 0]), 0, None)
    ih = np.clip(np.minimum(proposal[3], instance_boxes[:, 3]) - np.maximum(proposal[1], instance_boxes[:, 1]), 0, None)
    area = (proposal[2] - proposal[0]) * (proposal[3] - proposal[1])
    fractions = iw * ih / area
    total = fractions.sum()
    if total > 1.0:
        fractions = fractions / total
    return np.asarray(fractions)


def _proposal_feature(
    spec: DomainSpec,
    proposal: np.ndarray,
    instance_boxes: np.ndarray,
    appearances: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Raw feature of one proposal: covered appearances plus uncovered background, plus noise."""
    weights = _coverage(proposal, instance_boxes)
    uncovered = 1.0 - float(weights.sum())
    background = _apply_shift(spec, spec.background_mean + rng.normal(0.0, spec.background_scale, size=spec.raw_dim))
    feature = background * uncovered
    if weights.size:
        feature = feature + weights @ appearances
    return np.asarray(feature + rng.normal(0.0, spec.feature_noise, size=spec.raw_dim))


def generate_scene(spec: DomainSpec, rng: np.random.Generator) -> Scene:
    """Draw one scene: instances, their jittered proposals, and background proposals."""
    spec.validate()
    lo, hi = spec.instances_per_scene
    num_instances = int(rng.integers(lo, hi + 1))
    instances = []
    for _ in range(num_instances):
        box = _sample_instance_box(spec, rng)
        label = int(rng.choice(spec.num_foreground, p=spec.class_frequencies)) + 1
        mode = int(rng.integers(spec.class_modes.shape[1]))
        raw = spec.class_modes[label - 1, mode] + rng.normal(0.0, spec.mode_scale, size=spec.raw_dim)
        instances.append(Instance(box=box, label=label, mode=mode, appearance=_apply_shift(spec, raw)))

    instance_boxes = np.array([inst.box.as_tuple() for inst in instances]).reshape(-1, 4)
    appearances = np.array([inst.appearance for inst in instances]).reshape(-1, spec.raw_dim)

    boxes: list[tuple[float, float, float, float]] = []
    labels: list[int] = []
    sources: list[int] = []
    p_lo, p_hi = spec.proposals_per_instance
    for index, inst in enumerate(instances):
        for _ in range(int(rng.integers(p_lo, p_hi + 1))):
            boxes.append(_jitter_box(inst.box, spec.jitter, rng).as_tuple())
            labels.append(inst.label)
            sources.append(index)

    b_lo, b_hi = spec.background_proposals
    for _ in range(int(rng.integers(b_lo, b_hi + 1))):
        box = _sample_instance_box(spec, rng)
        overlaps = pairwise_iou(np.array([box.as_tuple()]), instance_boxes)[0]
        best = int(np.argmax(overlaps))
        # standard detector assignment: a well-overlapping "background" proposal is a positive
        labels.append(instances[best].label if overlaps[best] >= 0.5 else 0)
        boxes.append(box.as_tuple())
        sources.append(-1)

    proposal_boxes = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    features = np.array(
        [_proposal_feature(spec, row, instance_boxes, appearances, rng) for row in proposal_boxes]
    ).reshape(-1, spec.raw_dim)
    return Scene(
        instances=tuple(instances),
        proposal_boxes=proposal_boxes,
        proposal_features=features,
        proposal_labels=np.array(labels, dtype=np.int64),
        proposal_sources=np.array(sources, dtype=np.int64),
    )


def generate_split(spec: DomainSpec, n_scenes: int, seed: int) -> list[Scene]:
    """Reproducible list of scenes; scene i draws from its own child stream of `seed`."""
    if n_scenes < 0:
        raise InvalidSpecError(f"n_scenes must be >= 0, got {n_scenes}", key="n_scenes")
    spec.validate()
    children = np.random.SeedSequence(seed).spawn(n_scenes)
    return [generate_scene(spec, np.random.default_rng(child)) for child in children]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Source and target domains with their train/test splits."""

    source: DomainSpec
    target: DomainSpec
    splits: dict[str, list[Scene]]
    seed: int

    @property
    def num_classes(self) -> int:
        return self.source.num_classes


def generate_dataset(
    sim: SimulationConfig,
    seed: int,
    train_scenes: int | None = None,
    test_scenes: int | None = None,
) -> Dataset:
    """Domain pair plus all four splits, each on its own stream derived from `seed`."""
    source, target = make_domain_pair(sim, np.random.default_rng(stream_seed(seed, 0)))
    sizes = {
        "source_train": sim.train_scenes if train_scenes is None else train_scenes,
        "source_test": sim.test_scenes if test_scenes is None else test_scenes,
        "target_train": sim.train_scenes if train_scenes is None else train_scenes,
        "target_test": sim.test_scenes if test_scenes is None else test_scenes,
    }
    splits = {}
    for index, name in enumerate(SPLITS, start=1):
        spec = source if name.startswith("source") else target
        splits[name] = generate_split(spec, sizes[name], stream_seed(seed, index))
    return Dataset(source=source, target=target, splits=splits, seed=seed)


def instance_frequencies(scenes: list[Scene], num_foreground: int) -> np.ndarray:
    """Empirical class frequencies of the ground-truth instances."""
    counts = np.zeros(num_foreground)
    for scene in scenes:
        for inst in scene.instances:
            counts[inst.label - 1] += 1
    total = counts.sum()
    return counts / total if total > 0 else counts

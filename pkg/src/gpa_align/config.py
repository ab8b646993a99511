"""Configuration loading for gpa-align experiments."""

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, cast

import yaml

from .errors import ConfigError
from .models import GraphKind

DEFAULT_CONFIG_PATH = Path(__file__).parent / "config.yaml"

VARIANTS = ("source-only", "rpn-align", "rcnn-align", "two-stage")
SWEEP_PARAMS = {"lambda1": "lambda1", "lambda2": "lambda2", "gamma": "gamma"}


def _as_float(value: Any, key: str) -> float:
    """Reject non-numbers (and bools) for a float setting."""
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"expected a number, got {value!r}", key=key, value=value)
    return float(value)


def _as_int(value: Any, key: str) -> int:
    """Reject non-integers (and bools) for an integer setting."""
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"expected an integer, got {value!r}", key=key, value=value)
    return value


def _as_bool(value: Any, key: str) -> bool:
    """Reject anything but true or false."""
    if not isinstance(value, bool):
        raise ConfigError(f"expected true or false, got {value!r}", key=key, value=value)
    return value


def _as_pair(value: Any, key: str, convert: Any) -> tuple[Any, Any]:
    """Two-element list converted element-wise."""
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigError(f"expected a two-element list, got {value!r}", key=key, value=value)
    return (convert(value[0], key), convert(value[1], key))


def _require(condition: bool, key: str, message: str) -> None:
    """Raise ConfigError(message, key) unless `condition` holds."""
    if not condition:
        raise ConfigError(message, key=key)


@dataclass(frozen=True)
class SimulationConfig:
    """Synthetic two-domain data generator settings."""

    raw_dim: int = 8
    num_classes: int = 4
    modes_per_class: int = 2
    class_separation: float = 2.0
    mode_spread: float = 1.0
    mode_scale: float = 0.3
    background_scale: float = 0.5
    background_overlap: float = 0.3
    class_frequencies: tuple[float, ...] = (0.4, 0.3, 0.2, 0.1)
    shift_angle: float = 0.4
    shift_offset: float = 1.2
    scene_extent: tuple[float, float] = (100.0, 100.0)
    instances_per_scene: tuple[int, int] = (2, 4)
    proposals_per_instance: tuple[int, int] = (3, 5)
    background_proposals: tuple[int, int] = (6, 12)
    instance_size: tuple[float, float] = (12.0, 30.0)
    jitter: float = 0.15
    feature_noise: float = 0.1
    train_scenes: int = 60
    test_scenes: int = 30

    def __post_init__(self) -> None:
        s = "simulation"
        for name in ("raw_dim", "num_classes", "modes_per_class", "train_scenes", "test_scenes"):
            _require(_as_int(getattr(self, name), f"{s}.{name}") >= 1, f"{s}.{name}", "must be >= 1")
        for name in (
            "class_separation",
            "mode_spread",
            "mode_scale",
            "background_scale",
            "shift_angle",
            "shift_offset",
            "jitter",
            "feature_noise",
        ):
            value = _as_float(getattr(self, name), f"{s}.{name}")
            _require(value >= 0, f"{s}.{name}", "must be >= 0")
            object.__setattr__(self, name, value)
        overlap = _as_float(self.background_overlap, f"{s}.background_overlap")
        _require(0.0 <= overlap <= 1.0, f"{s}.background_overlap", "must lie in [0, 1]")
        object.__setattr__(self, "background_overlap", overlap)

        key = f"{s}.class_frequencies"
        if not isinstance(self.class_frequencies, (list, tuple)):
            raise ConfigError("expected a list of numbers", key=key)
        frequencies = tuple(_as_float(v, key) for v in self.class_frequencies)
        _require(len(frequencies) == self.num_classes, key, f"expected {self.num_classes} entries")
        _require(all(v >= 0 for v in frequencies), key, "entries must be >= 0")
        _require(abs(sum(frequencies) - 1.0) <= 1e-9, key, "entries must sum to 1")
        object.__setattr__(self, "class_frequencies", frequencies)

        for name, convert, lower in (
            ("scene_extent", _as_float, 0.0),
            ("instance_size", _as_float, 0.0),
            ("instances_per_scene", _as_int, 1),
            ("proposals_per_instance", _as_int, 1),
            ("background_proposals", _as_int, 0),
        ):
            key = f"{s}.{name}"
            pair = _as_pair(getattr(self, name), key, convert)
            object.__setattr__(self, name, pair)
            if name == "scene_extent":
                _require(pair[0] > lower and pair[1] > lower, key, "must be positive")
            else:
                _require(lower <= pair[0] <= pair[1], key, f"must satisfy {lower} <= lo <= hi")
        _require(self.instance_size[0] > 0, f"{s}.instance_size", "must be positive")
        _require(
            min(self.scene_extent) >= self.instance_size[1],
            f"{s}.scene_extent",
            "must fit the largest instance",
        )


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 32
    embedding_dim: int = 16

    def __post_init__(self) -> None:
        for name in ("hidden_dim", "embedding_dim"):
            _require(_as_int(getattr(self, name), f"model.{name}") >= 1, f"model.{name}", "must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    """Hyper-parameters of two-stage alignment training."""

    gamma: float = 2.0
    margin_rpn: float = 1.0
    margin_rcnn: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    learning_rate: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 20
    pretrain_epochs: int = 5
    batch_scenes: int = 3
    seed: int = 0
    graph_kind: GraphKind = GraphKind.IOU
    sigma: float | None = None
    confidence_grad: bool = False
    learnable_transform: bool = False
    normalize_embeddings: bool = False
    threshold_classes: int | None = None

    def __post_init__(self) -> None:
        t = "train"
        for name in ("gamma", "lambda1", "lambda2", "weight_decay"):
            value = _as_float(getattr(self, name), f"{t}.{name}")
            _require(value >= 0, f"{t}.{name}", "must be >= 0")
            object.__setattr__(self, name, value)
        for name in ("margin_rpn", "margin_rcnn", "learning_rate"):
            value = _as_float(getattr(self, name), f"{t}.{name}")
            _require(value > 0, f"{t}.{name}", "must be > 0")
            object.__setattr__(self, name, value)
        momentum = _as_float(self.momentum, f"{t}.momentum")
        _require(0.0 <= momentum < 1.0, f"{t}.momentum", "must lie in [0, 1)")
        object.__setattr__(self, "momentum", momentum)
        for name in ("epochs", "batch_scenes"):
            _require(_as_int(getattr(self, name), f"{t}.{name}") >= 1, f"{t}.{name}", "must be >= 1")
        _require(_as_int(self.pretrain_epochs, f"{t}.pretrain_epochs") >= 0, f"{t}.pretrain_epochs", "must be >= 0")
        _as_int(self.seed, f"{t}.seed")
        try:
            object.__setattr__(self, "graph_kind", GraphKind(self.graph_kind))
        except ValueError:
            raise ConfigError(
                f"expected one of {[k.value for k in GraphKind]}, got {self.graph_kind!r}", key=f"{t}.graph_kind"
            ) from None
        if self.sigma is not None:
            sigma = _as_float(self.sigma, f"{t}.sigma")
            _require(sigma > 0, f"{t}.sigma", "must be > 0")
            object.__setattr__(self, "sigma", sigma)
        if self.threshold_classes is not None:
            _require(
                _as_int(self.threshold_classes, f"{t}.threshold_classes") >= 1,
                f"{t}.threshold_classes",
                "must be >= 1",
            )
        for name in ("confidence_grad", "learnable_transform", "normalize_embeddings"):
            _as_bool(getattr(self, name), f"{t}.{name}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs: both domains, the model, training and the seed list."""

    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    variant: str = "two-stage"
    output_dir: str = "runs/gpa"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self) -> None:
        _require(self.variant in VARIANTS, "experiment.variant", f"expected one of {list(VARIANTS)}")
        _require(isinstance(self.output_dir, str) and bool(self.output_dir), "experiment.output_dir", "must be a path")
        if not isinstance(self.seeds, (list, tuple)):
            raise ConfigError("expected a list of integers", key="experiment.seeds")
        seeds = tuple(_as_int(s, "experiment.seeds") for s in self.seeds)
        _require(len(seeds) > 0, "experiment.seeds", "must not be empty")
        _require(len(set(seeds)) == len(seeds), "experiment.seeds", "must not contain duplicates")
        object.__setattr__(self, "seeds", seeds)

    @property
    def graph_kind(self) -> GraphKind:
        return self.train.graph_kind

    @property
    def learnable_transform(self) -> bool:
        return self.train.learnable_transform

    def effective_train(self) -> TrainConfig:
        """Training settings with the variant's trade-off weights applied."""
        if self.variant == "source-only":
            return replace(self.train, lambda1=0.0, lambda2=0.0)
        if self.variant == "rpn-align":
            return replace(self.train, lambda2=0.0)
        if self.variant == "rcnn-align":
            return replace(self.train, lambda1=0.0)
        return self.train

    def with_train(self, **changes: Any) -> "ExperimentConfig":
        """Copy with some training settings replaced."""
        return replace(self, train=replace(self.train, **changes))


def load_yaml(path: Path) -> dict[str, Any]:
    """Load a YAML mapping; an empty file is an empty mapping."""
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config file: {e}", key=str(path)) from e
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML: {e}", key=str(path)) from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", key=str(path))
    return cast(dict[str, Any], data)


def merge_mappings(base: dict[str, Any], override: dict[str, Any], prefix: str = "") -> dict[str, Any]:
    """Deep-merge `override` into a copy of `base`; keys unknown to `base` are rejected."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ConfigError("unknown key", key=dotted)
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError("expected a section mapping", key=dotted)
            merged[key] = merge_mappings(base[key], value, prefix=f"{dotted}.")
        else:
            merged[key] = value
    return merged


def config_from_mapping(mapping: dict[str, Any]) -> ExperimentConfig:
    """Build validated dataclasses from a fully merged mapping."""
    try:
        experiment = mapping["experiment"]
        return ExperimentConfig(
            simulation=SimulationConfig(**mapping["simulation"]),
            model=ModelConfig(**mapping["model"]),
            train=TrainConfig(**mapping["train"]),
            variant=experiment["variant"],
            output_dir=experiment["output_dir"],
            seeds=experiment["seeds"],
        )
    except KeyError as e:
        raise ConfigError("missing section", key=str(e.args[0])) from e


def load_config(config_path: Path | None = None) -> ExperimentConfig:
    """Load the packaged defaults and merge an optional user config file over them."""
    mapping = load_yaml(DEFAULT_CONFIG_PATH)
    if config_path is not None:
        mapping = merge_mappings(mapping, load_yaml(config_path))
    return config_from_mapping(mapping)


def config_to_mapping(config: ExperimentConfig) -> dict[str, Any]:
    """Plain mapping with the same layout as the YAML file."""
    train = asdict(config.train)
    train["graph_kind"] = config.train.graph_kind.value

    def plain(section: dict[str, Any]) -> dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}

    return {
        "simulation": plain(asdict(config.simulation)),
        "model": asdict(config.model),
        "train": plain(train),
        "experiment": {
            "variant": config.variant,
            "output_dir": config.output_dir,
            "seeds": list(config.seeds),
        },
    }


def config_hash(config: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON form of the configuration."""
    mapping = config_to_mapping(config)
    mapping["experiment"].pop("output_dir")
    canonical = json.dumps(mapping, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

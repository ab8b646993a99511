"""Reading and writing boxes, batches, losses, scenes and result tables."""

import csv
import json
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import Any, cast

import numpy as np
import yaml

from .errors import InvalidInputError
from .models import AlignmentLoss, BBox, Instance, ProposalBatch, PrototypeSet, Scene, Stage
from .utils import FLOAT_FORMAT, format_float

MANIFEST_FILE = "manifest.yaml"


# =============================================================================
# Matrices
# =============================================================================


def read_boxes_csv(path: Path) -> np.ndarray:
    """Boxes as `x_min,y_min,x_max,y_max` rows; lines starting with '#' are ignored."""
    try:
        boxes = np.loadtxt(path, delimiter=",", ndmin=2, comments="#", dtype=np.float64)
    except ValueError as e:
        raise InvalidInputError(f"Malformed box CSV: {e}", key=str(path)) from e
    if boxes.shape[1] != 4:
        raise InvalidInputError(f"Box CSV rows need 4 columns, got {boxes.shape[1]}", key=str(path))
    return np.asarray(boxes)


def write_matrix_csv(path: Path, matrix: np.ndarray) -> None:
    """Row-major CSV with 17 significant digits."""
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.atleast_2d(matrix), fmt=FLOAT_FORMAT, delimiter=",", encoding="utf-8")


# =============================================================================
# JSON records
# =============================================================================


def _matrix(value: Any, name: str, columns: int | None = None) -> np.ndarray:
    """2-D float array, optionally with a fixed number of columns."""
    array = np.asarray(value, dtype=np.float64)
    if array.ndim != 2 or (columns is not None and array.shape[1] != columns):
        raise InvalidInputError(f"'{name}' must be a list of rows" + (f" of length {columns}" if columns else ""))
    return array


def batch_to_dict(batch: ProposalBatch) -> dict[str, Any]:
    """JSON-ready mapping of a proposal batch."""
    data: dict[str, Any] = {
        "stage": batch.stage.value,
        "boxes": batch.boxes.tolist(),
        "features": batch.features.tolist(),
        "confidences": batch.confidences.tolist(),
    }
    if batch.scene_ids is not None:
        data["scene_ids"] = batch.scene_ids.tolist()
    if batch.labels is not None:
        data["labels"] = batch.labels.tolist()
    return data


def batch_from_dict(data: dict[str, Any]) -> ProposalBatch:
    """Proposal batch from a mapping; stage defaults to stage 2."""
    missing = [key for key in ("boxes", "features", "confidences") if key not in data]
    if missing:
        raise InvalidInputError(f"Proposal batch is missing fields: {missing}")
    try:
        stage = Stage(data.get("stage", Stage.RCNN.value))
    except ValueError:
        raise InvalidInputError(f"Unknown stage {data.get('stage')!r}", key="stage") from None
    return ProposalBatch(
        boxes=_matrix(data["boxes"], "boxes", 4),
        features=_matrix(data["features"], "features"),
        confidences=_matrix(data["confidences"], "confidences"),
        stage=stage,
        labels=data.get("labels"),
        scene_ids=data.get("scene_ids"),
    )


def prototypes_to_dict(prototypes: PrototypeSet) -> dict[str, Any]:
    """JSON-ready mapping of a prototype set, one entry per class."""
    weights = prototypes.weights if prototypes.weights is not None else np.zeros(prototypes.num_classes)
    return {
        "domain": prototypes.domain.value,
        "classes": [
            {
                "class_id": k,
                "present": bool(prototypes.present[k]),
                "weight": float(weights[k]),
                "vector": prototypes.vectors[k].tolist(),
            }
            for k in range(prototypes.num_classes)
        ],
    }


def loss_to_dict(loss: AlignmentLoss) -> dict[str, Any]:
    """JSON-ready alignment loss terms, gradients and prototypes."""
    data: dict[str, Any] = {
        "intra": loss.intra,
        "inter_ss": loss.inter_ss,
        "inter_st": loss.inter_st,
        "inter_tt": loss.inter_tt,
        "total": loss.total,
    }
    for name in ("grad_f_source", "grad_f_target", "grad_p_source", "grad_p_target", "grad_transform"):
        value = getattr(loss, name)
        if value is not None:
            data[name] = value.tolist()
    for name in ("source_prototypes", "target_prototypes"):
        value = getattr(loss, name)
        if value is not None:
            data[name] = prototypes_to_dict(value)
    return data


def read_json(path: Path) -> dict[str, Any]:
    """Read a JSON object; malformed files raise InvalidInputError."""
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise InvalidInputError(f"Invalid JSON: {e}", key=str(path)) from e
    if not isinstance(data, dict):
        raise InvalidInputError("Expected a JSON object", key=str(path))
    return cast(dict[str, Any], data)


def json_safe(value: Any) -> Any:
    """Plain JSON types; NaN and infinities become null."""
    if isinstance(value, dict):
        return {str(k): json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(v) for v in value]
    if isinstance(value, np.ndarray):
        return json_safe(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value) if np.isfinite(value) else None
    return value


def write_json(path: Path, data: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(json_safe(data), f, indent=2, allow_nan=False)
        f.write("\n")


def load_batch(path: Path) -> ProposalBatch:
    """Read a proposal batch from a JSON file."""
    return batch_from_dict(read_json(path))


# =============================================================================
# Scenes
# =============================================================================


def scene_to_dict(scene: Scene) -> dict[str, Any]:
    """JSON-ready mapping of a scene, instances and proposals."""
    return {
        "instances": [
            {
                "box": list(inst.box.as_tuple()),
                "label": inst.label,
                "mode": inst.mode,
                "appearance": inst.appearance.tolist(),
            }
            for inst in scene.instances
        ],
        "proposals": {
            "boxes": scene.proposal_boxes.tolist(),
            "features": scene.proposal_features.tolist(),
            "labels": scene.proposal_labels.tolist(),
            "sources": scene.proposal_sources.tolist(),
        },
    }


def scene_from_dict(data: dict[str, Any]) -> Scene:
    """Scene from a mapping written by scene_to_dict()."""
    proposals = data["proposals"]
    return Scene(
        instances=tuple(
            Instance(
                box=BBox(*inst["box"]),
                label=int(inst["label"]),
                mode=int(inst["mode"]),
                appearance=np.asarray(inst["appearance"], dtype=np.float64),
            )
            for inst in data["instances"]
        ),
        proposal_boxes=np.asarray(proposals["boxes"], dtype=np.float64).reshape(-1, 4),
        proposal_features=np.asarray(proposals["features"], dtype=np.float64),
        proposal_labels=np.asarray(proposals["labels"], dtype=np.int64),
        proposal_sources=np.asarray(proposals["sources"], dtype=np.int64),
    )


def write_split(directory: Path, scenes: Sequence[Scene]) -> list[Path]:
    """One JSON file per scene: scene_00000.json, scene_00001.json, ..."""
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for index, scene in enumerate(scenes):
        path = directory / f"scene_{index:05d}.json"
        write_json(path, scene_to_dict(scene))
        paths.append(path)
    return paths


def read_split(directory: Path) -> list[Scene]:
    """Scenes of a split directory in file order."""
    return [scene_from_dict(read_json(path)) for path in sorted(directory.glob("scene_*.json"))]


def write_manifest(directory: Path, manifest: dict[str, Any]) -> Path:
    """Write manifest.yaml into `directory`."""
    path = directory / MANIFEST_FILE
    directory.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write("# Auto-generated - regenerate with `gpa simulate`\n")
        yaml.safe_dump(manifest, f, default_flow_style=False, sort_keys=False)
    return path


def read_manifest(directory: Path) -> dict[str, Any]:
    """Load manifest.yaml from `directory`."""
    with open(directory / MANIFEST_FILE, encoding="utf-8") as f:
        return cast(dict[str, Any], yaml.safe_load(f))


# =============================================================================
# Result tables
# =============================================================================


def manifest_line(config_sha256: str, seeds: Iterable[int]) -> str:
    """First line of every result table."""
    return f"# manifest config_sha256={config_sha256} seeds=[{','.join(str(s) for s in seeds)}]"


def _cell(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return format_float(float(value))
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    return str(value)


class CsvTable:
    """CSV file with a manifest comment line and a header; rows may be appended as they arrive."""

    def __init__(self, path: Path, header: Sequence[str], manifest: str) -> None:
        self.path = path
        self.header = list(header)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(manifest + "\n")
            csv.writer(f).writerow(self.header)

    def append(self, row: Sequence[Any]) -> None:
        if len(row) != len(self.header):
            raise InvalidInputError(f"Row has {len(row)} cells but the header has {len(self.header)}")
        with open(self.path, "a", encoding="utf-8", newline="") as f:
            csv.writer(f).writerow([_cell(v) for v in row])


def write_table(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]], manifest: str) -> Path:
    """Write a complete table in one go."""
    table = CsvTable(path, header, manifest)
    for row in rows:
        table.append(row)
    return path


def read_table(path: Path) -> tuple[str, list[dict[str, str]]]:
    """Manifest line and rows keyed by header."""
    with open(path, encoding="utf-8", newline="") as f:
        manifest = f.readline().rstrip("\n")
        rows = list(csv.DictReader(f))
    return manifest, rows

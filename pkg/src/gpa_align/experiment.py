"""Experiment orchestration: reference runs, sensitivity sweeps and the graph ablation."""

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

import numpy as np

from .config import SWEEP_PARAMS, ExperimentConfig, config_hash, config_to_mapping
from .errors import ConfigError
from .models import GraphKind, MetricsReport
from .projection import pca_project
from .rendering import render_lines, render_scatter, write_svg
from .serialization import CsvTable, manifest_line, write_json, write_table
from .simulator import generate_dataset
from .training import EpochRecord, TrainResult, train
from .utils import mean_std


class Reporter:
    """Progress lines on stdout, silenced by --quiet."""

    def __init__(self, quiet: bool = False) -> None:
        self.quiet = quiet

    def info(self, message: str) -> None:
        if not self.quiet:
            print(message)

    def wrote(self, path: Path) -> None:
        self.info(f"  -> Wrote {path}")

    def warning(self, message: str) -> None:
        if not self.quiet:
            print(f"Warning: {message}")


def metrics_header(num_classes: int) -> list[str]:
    """Column names of metrics.csv for `num_classes` classes including background."""
    return (
        ["epoch", "L_det", "L_da_rpn", "L_da_rcnn", "total", "src_acc", "tgt_acc"]
        + [f"tgt_acc_class_{k}" for k in range(num_classes)]
        + [f"proto_dist_class_{k}" for k in range(num_classes)]
    )


def metrics_row(record: EpochRecord) -> list[Any]:
    """One metrics.csv row for an epoch record."""
    return (
        [
            record.epoch,
            record.l_det,
            record.l_da_rpn,
            record.l_da_rcnn,
            record.total,
            record.source.accuracy,
            record.target.accuracy,
        ]
        + [float(v) for v in record.target.per_class_accuracy]
        + [float(v) for v in record.target.prototype_distances]
    )


def _metrics_dict(metrics: MetricsReport) -> dict[str, Any]:
    """JSON-ready view of one domain's metrics."""
    return {
        "accuracy": metrics.accuracy,
        "per_class_accuracy": metrics.per_class_accuracy,
        "prototype_distances": metrics.prototype_distances,
        "fg_bg_margin": metrics.fg_bg_margin,
        "num_proposals": metrics.num_proposals,
    }


@dataclass(frozen=True, eq=False)
class SeedResult:
    seed: int
    result: TrainResult
    report: dict[str, Any]


def run_seed(config: ExperimentConfig, seed: int, out_dir: Path, reporter: Reporter) -> SeedResult:
    """Generate data, train and write metrics.csv, report.json and the embedding projection for one seed."""
    reporter.info(f"Running seed {seed}...")
    digest = config_hash(config)
    train_cfg = replace(config.effective_train(), seed=seed)
    dataset = generate_dataset(config.simulation, seed)
    seed_dir = out_dir / f"seed_{seed}"

    table = CsvTable(seed_dir / "metrics.csv", metrics_header(dataset.num_classes), manifest_line(digest, [seed]))
    result = train(
        dataset,
        config.model,
        train_cfg,
        source_only=config.variant == "source-only",
        on_epoch=lambda record: table.append(metrics_row(record)),
    )
    reporter.wrote(table.path)
    if result.sigma_gap is not None and result.sigma_gap > 0.01:
        reporter.warning(f"calibrated sigma {result.sigma:.4g} leaves a sparsity gap of {result.sigma_gap:.2%}")

    final = result.final
    report = {
        "config_sha256": digest,
        "seed": seed,
        "variant": config.variant,
        "graph_kind": train_cfg.graph_kind.value,
        "learnable_transform": train_cfg.learnable_transform,
        "sigma": result.sigma,
        "lambda1": train_cfg.lambda1,
        "lambda2": train_cfg.lambda2,
        "gamma": train_cfg.gamma,
        "pretrain_epochs": train_cfg.pretrain_epochs,
        "epochs": len(result.history),
        "losses": {
            "l_det": final.l_det,
            "l_da_rpn": final.l_da_rpn,
            "l_da_rcnn": final.l_da_rcnn,
            "total": final.total,
        },
        "source": _metrics_dict(final.source),
        "target": _metrics_dict(final.target),
    }
    write_json(seed_dir / "report.json", report)
    reporter.wrote(seed_dir / "report.json")
    _write_projection(result, seed_dir, digest, seed, reporter)
    return SeedResult(seed=seed, result=result, report=report)


def _write_projection(result: TrainResult, seed_dir: Path, digest: str, seed: int, reporter: Reporter) -> None:
    """Write projection.csv and projection.svg for the test embeddings of both domains."""
    assert result.source_test is not None and result.target_test is not None
    parts = [
        ("source", result.source_test, result.model.forward(result.source_test.inputs).features),
        ("target", result.target_test, result.model.forward(result.target_test.inputs).features),
    ]
    embeddings = np.concatenate([features for _, _, features in parts])
    classes = np.concatenate([batch.labels for _, batch, _ in parts])
    domains = [name for name, batch, _ in parts for _ in range(batch.num_proposals)]
    projected = pca_project(embeddings)

    path = write_table(
        seed_dir / "projection.csv",
        ["domain", "class", "pc1", "pc2"],
        ([d, int(k), float(x), float(y)] for d, k, (x, y) in zip(domains, classes, projected)),
        manifest_line(digest, [seed]),
    )
    reporter.wrote(path)
    svg = render_scatter(projected, classes.tolist(), domains, f"Test embeddings, seed {seed}")
    reporter.wrote(write_svg(seed_dir / "projection.svg", svg))


def summarize(results: list[SeedResult], config: ExperimentConfig) -> dict[str, Any]:
    """Mean and sample standard deviation across seeds of the final metrics."""

    def stat(values: list[float]) -> dict[str, float]:
        mean, std = mean_std(values)
        return {"mean": mean, "std": std}

    def per_class(key: str, field: str) -> list[dict[str, float]]:
        rows = np.array([r.report[key][field] for r in results], dtype=np.float64)
        return [stat(rows[:, k].tolist()) for k in range(rows.shape[1])]

    return {
        "config_sha256": config_hash(config),
        "variant": config.variant,
        "seeds": list(config.seeds),
        "config": config_to_mapping(config),
        "source_accuracy": stat([r.report["source"]["accuracy"] for r in results]),
        "target_accuracy": stat([r.report["target"]["accuracy"] for r in results]),
        "target_per_class_accuracy": per_class("target", "per_class_accuracy"),
        "prototype_distances": per_class("target", "prototype_distances"),
        "fg_bg_margin": stat([r.report["target"]["fg_bg_margin"] for r in results]),
        "losses": {
            name: stat([r.report["losses"][name] for r in results])
            for name in ("l_det", "l_da_rpn", "l_da_rcnn", "total")
        },
    }


def run(config: ExperimentConfig, out_dir: Path | None = None, reporter: Reporter | None = None) -> dict[str, Any]:
    """Train every seed, then write the aggregate report last."""
    reporter = reporter or Reporter()
    out_dir = Path(config.output_dir) if out_dir is None else out_dir
    results = [run_seed(config, seed, out_dir, reporter) for seed in config.seeds]
    summary = summarize(results, config)
    write_json(out_dir / "report.json", summary)
    reporter.wrote(out_dir / "report.json")
    return summary


# Sweepable parameters that a variant overrides or never reads.
VARIANT_IGNORES: dict[str, tuple[str, ...]] = {
    "source-only": ("lambda1", "lambda2", "gamma"),
    "rpn-align": ("lambda2",),
    "rcnn-align": ("lambda1",),
}


def sweep(
    config: ExperimentConfig,
    param: str,
    values: list[float],
    out_dir: Path | None = None,
    reporter: Reporter | None = None,
) -> Path:
    """One run per value per seed; writes sweep.csv and the sweep.svg line chart."""
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"expected one of {sorted(SWEEP_PARAMS)}", key="param", value=param)
    if not values:
        raise ConfigError("at least one value is required", key="values")
    if any(not math.isfinite(v) or v < 0 for v in values):
        raise ConfigError("values must be finite and >= 0", key="values", value=values)
    if param in VARIANT_IGNORES.get(config.variant, ()):
        raise ConfigError(
            f"variant '{config.variant}' does not use {param}; every cell would be identical",
            key="experiment.variant",
            value=config.variant,
        )
    reporter = reporter or Reporter()
    out_dir = Path(config.output_dir) if out_dir is None else out_dir
    digest = config_hash(config)

    rows = []
    means = []
    for value in values:
        cell = config.with_train(**{SWEEP_PARAMS[param]: value})
        reporter.info(f"Sweeping {param} = {value:g}...")
        cell_dir = out_dir / f"{param}={value:g}"
        accuracies = []
        for seed in config.seeds:
            seed_result = run_seed(cell, seed, cell_dir, reporter)
            final = seed_result.result.final
            accuracies.append(final.target.accuracy)
            rows.append(
                [param, value, seed, final.target.accuracy, final.source.accuracy]
                + [final.l_det, final.l_da_rpn, final.l_da_rcnn, final.total]
            )
        means.append(mean_std(accuracies)[0])

    header = ["param", "value", "seed", "tgt_acc", "src_acc", "L_det", "L_da_rpn", "L_da_rcnn", "total"]
    path = write_table(out_dir / "sweep.csv", header, rows, manifest_line(digest, config.seeds))
    reporter.wrote(path)
    order = np.argsort(values, kind="stable")
    svg = render_lines(
        [values[i] for i in order],
        {"target accuracy": [means[i] for i in order]},
        f"Sensitivity to {param}",
        param,
        "mean target accuracy",
    )
    reporter.wrote(write_svg(out_dir / "sweep.svg", svg))
    return path


ABLATION_ROWS: tuple[tuple[GraphKind, bool], ...] = (
    (GraphKind.NONE, False),
    (GraphKind.GAUSSIAN, False),
    (GraphKind.GAUSSIAN, True),
    (GraphKind.IOU, False),
    (GraphKind.IOU, True),
)


def ablate_graph(config: ExperimentConfig, out_dir: Path | None = None, reporter: Reporter | None = None) -> Path:
    """Graph construction ablation: no graph, Gaussian (sparsity-matched sigma) and IoU graphs,
    the latter two with and without the learnable transform. All rows share the seeds."""
    reporter = reporter or Reporter()
    out_dir = Path(config.output_dir) if out_dir is None else out_dir
    digest = config_hash(config)

    rows = []
    for kind, transform in ABLATION_ROWS:
        name = kind.value + ("+transform" if transform else "")
        reporter.info(f"Ablation row {name}...")
        # Gaussian rows always use the sparsity-matched sigma
        cell = config.with_train(graph_kind=kind, learnable_transform=transform, sigma=None)
        results = [run_seed(cell, seed, out_dir / name, reporter) for seed in config.seeds]
        target_mean, target_std = mean_std([r.result.final.target.accuracy for r in results])
        source_mean, source_std = mean_std([r.result.final.source.accuracy for r in results])
        sigmas = [r.result.sigma for r in results if r.result.sigma is not None]
        rows.append(
            [
                kind.value,
                transform,
                float(np.median(sigmas)) if sigmas else math.nan,
                target_mean,
                target_std,
                source_mean,
                source_std,
            ]
        )

    header = ["graph", "learnable_transform", "sigma", "tgt_acc_mean", "tgt_acc_std", "src_acc_mean", "src_acc_std"]
    path = write_table(out_dir / "ablation.csv", header, rows, manifest_line(digest, config.seeds))
    reporter.wrote(path)
    return path

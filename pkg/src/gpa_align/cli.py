#!/usr/bin/env python3
"""CLI entry point for gpa-align."""

import argparse
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any

from . import __version__
from .alignment import DEFAULT_MARGIN, da_loss_backward
from .config import (
    SWEEP_PARAMS,
    ExperimentConfig,
    SimulationConfig,
    config_hash,
    config_to_mapping,
    load_config,
    merge_mappings,
)
from .errors import ConfigError, GpaError
from .experiment import Reporter, ablate_graph, run, sweep
from .gradcheck import DEFAULT_TOLERANCE, run_gradcheck
from .graph import batch_graph, build_graph, calibrate_sigma
from .models import GraphKind, ProposalBatch, RelationGraph
from .serialization import (
    MANIFEST_FILE,
    load_batch,
    loss_to_dict,
    read_boxes_csv,
    read_manifest,
    write_json,
    write_manifest,
    write_matrix_csv,
    write_split,
)
from .simulator import SPLITS, generate_dataset
from .utils import parse_float_list


def _add_global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    """Register --config, --out, --seed and --quiet on `parser`."""
    # Subparsers repeat the flags with SUPPRESS defaults so they may come after the subcommand.
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", type=Path, default=default, help="YAML config merged over the defaults")
    parser.add_argument("--out", type=Path, default=default, help="Output file or directory")
    parser.add_argument("--seed", type=int, default=default, help="Random seed (replaces the configured seeds)")
    parser.add_argument(
        "--quiet",
        action="store_true",
        default=argparse.SUPPRESS if suppress else False,
        help="Suppress progress output",
    )


def build_parser() -> argparse.ArgumentParser:
    """Build the argument parser."""
    parser = argparse.ArgumentParser(prog="gpa", description="Graph-induced prototype alignment for domain adaptation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _add_global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        subparser = sub.add_parser(name, help=help_text)
        _add_global_flags(subparser, suppress=True)
        return subparser

    graph = add("graph", "Build a relation graph over boxes and write its adjacency matrix")
    graph.add_argument("--boxes", type=Path, required=True, help="CSV of x_min,y_min,x_max,y_max rows")
    graph.add_argument("--kind", choices=["iou", "gaussian"], default="iou")
    graph.add_argument("--sigma", type=float, help="Gaussian kernel width (default: sparsity-matched)")

    align = add("align", "Compute the alignment loss and its gradients for two proposal batches")
    align.add_argument("--source", type=Path, required=True)
    align.add_argument("--target", type=Path, required=True)
    align.add_argument("--gamma", type=float, default=2.0)
    align.add_argument("--margin", type=float, default=DEFAULT_MARGIN)
    align.add_argument("--kind", choices=[k.value for k in GraphKind], default="iou")
    align.add_argument("--sigma", type=float)
    align.add_argument("--confidence-grad", action="store_true", help="Let gradients flow through the merge weights")

    gradcheck = add("gradcheck", "Compare analytic gradients with central finite differences")
    gradcheck.add_argument("--trials", type=int, default=100)
    gradcheck.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)

    simulate = add("simulate", "Generate the synthetic source and target splits")
    simulate.add_argument("--scenes", type=int, help="Scenes per split (default: from the config)")
    simulate.add_argument(
        "--manifest", type=Path, help="Directory of an earlier simulate run; regenerate its splits into --out"
    )

    add("run", "Train and evaluate every configured seed")

    sweep_parser = add("sweep", "Sensitivity sweep over one hyper-parameter")
    sweep_parser.add_argument("--param", choices=sorted(SWEEP_PARAMS), required=True)
    sweep_parser.add_argument("--values", required=True, help="Comma-separated values, e.g. 0.25,0.5,1,2")

    add("ablate-graph", "Compare graph construction variants")
    return parser


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    """Parse command line arguments."""
    return build_parser().parse_args(argv)


def _require_out(args: argparse.Namespace) -> Path:
    """The --out path, or a ConfigError when it is missing."""
    if args.out is None:
        raise ConfigError("this command needs --out", key="--out")
    return Path(args.out)


def _experiment_config(args: argparse.Namespace) -> ExperimentConfig:
    """Packaged defaults, the --config file, and the --seed/--out overrides."""
    config = load_config(args.config)
    if args.seed is not None:
        config = replace(config, seeds=(args.seed,))
    if args.out is not None:
        config = replace(config, output_dir=str(args.out))
    return config


def _graph(args: argparse.Namespace, reporter: Reporter) -> int:
    """Write the adjacency of a box CSV."""
    boxes = read_boxes_csv(args.boxes)
    sigma = args.sigma
    if args.kind == "gaussian" and sigma is None:
        sigma = calibrate_sigma(boxes)
        reporter.info(f"Calibrated sigma = {sigma:.6g}")
    graph = build_graph(boxes, args.kind, sigma)
    out = _require_out(args)
    write_matrix_csv(out, graph.adjacency)
    reporter.wrote(out)
    return 0


def _align_graph(batch: ProposalBatch, kind: str, sigma: float | None) -> RelationGraph:
    """Relation graph for a loaded batch, calibrating sigma when needed."""
    if kind == GraphKind.GAUSSIAN.value and sigma is None:
        sigma = calibrate_sigma(batch.boxes)
    return batch_graph(batch, kind, sigma)


def _align(args: argparse.Namespace, reporter: Reporter) -> int:
    """Write the alignment loss record of a source and a target batch."""
    source = load_batch(args.source)
    target = load_batch(args.target)
    loss = da_loss_backward(
        source,
        target,
        _align_graph(source, args.kind, args.sigma),
        _align_graph(target, args.kind, args.sigma),
        gamma=args.gamma,
        margin=args.margin,
        confidence_grad=args.confidence_grad,
    )
    out = _require_out(args)
    write_json(out, loss_to_dict(loss))
    reporter.info(f"L_da = {loss.total:.6g} (intra {loss.intra:.6g})")
    reporter.wrote(out)
    return 0


def _gradcheck(args: argparse.Namespace, reporter: Reporter) -> int:
    """Run the finite-difference gradient check."""
    seed = 0 if args.seed is None else args.seed
    reporter.info(f"Running {args.trials} finite-difference trials (seed {seed})...")
    report = run_gradcheck(trials=args.trials, seed=seed, tolerance=args.tolerance)
    for trial in report.failures:
        print(
            f"  -> FAILED {trial.kind} {trial.graph} {trial.convention} shape={trial.shape}: "
            f"relative error {trial.relative_error:.3e}",
            file=sys.stderr,
        )
    status = "PASSED" if report.passed else "FAILED"
    reporter.info(
        f"Gradient check {status}: {len(report.trials)} trials, "
        f"max relative error {report.max_relative_error:.3e} (tolerance {report.tolerance:.0e})"
    )
    return 0 if report.passed else 1


def _manifest_settings(directory: Path) -> tuple[dict[str, Any], SimulationConfig, int, int, int]:
    """Simulation settings, seed and split sizes recorded by an earlier `gpa simulate`."""
    manifest = read_manifest(directory)
    if not isinstance(manifest, dict):
        raise ConfigError("manifest must be a mapping", key=str(directory / MANIFEST_FILE))
    for key in ("seed", "splits", "simulation"):
        if key not in manifest:
            raise ConfigError("missing from manifest", key=key)
    if not isinstance(manifest["simulation"], dict):
        raise ConfigError("expected a section mapping", key="simulation")
    defaults = config_to_mapping(ExperimentConfig())["simulation"]
    simulation = SimulationConfig(**merge_mappings(defaults, manifest["simulation"], prefix="simulation."))
    splits = manifest["splits"]
    try:
        train_scenes, test_scenes = int(splits["source_train"]), int(splits["source_test"])
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError("expected scene counts per split", key="splits") from e
    return manifest, simulation, int(manifest["seed"]), train_scenes, test_scenes


def _simulate(args: argparse.Namespace, reporter: Reporter) -> int:
    """Write the four synthetic splits and their manifest."""
    out = _require_out(args)
    if args.scenes is not None and args.scenes < 0:
        raise ConfigError("must be >= 0", key="--scenes", value=args.scenes)
    if args.manifest is not None:
        if args.config is not None or args.seed is not None or args.scenes is not None:
            raise ConfigError("cannot be combined with --config, --seed or --scenes", key="--manifest")
        manifest, simulation, seed, train_scenes, test_scenes = _manifest_settings(args.manifest)
        reporter.info(f"Regenerating splits from {args.manifest / MANIFEST_FILE} (seed {seed})...")
    else:
        config = load_config(args.config)
        simulation = config.simulation
        seed = config.seeds[0] if args.seed is None else args.seed
        train_scenes = simulation.train_scenes if args.scenes is None else args.scenes
        test_scenes = simulation.test_scenes if args.scenes is None else args.scenes
        manifest = {
            "seed": seed,
            "config_sha256": config_hash(config),
            "splits": {name: train_scenes if name.endswith("train") else test_scenes for name in SPLITS},
            "simulation": config_to_mapping(config)["simulation"],
        }
        reporter.info(f"Generating splits (seed {seed})...")
    dataset = generate_dataset(simulation, seed, train_scenes, test_scenes)
    for name, scenes in dataset.splits.items():
        write_split(out / name, scenes)
        reporter.info(f"  -> Wrote {len(scenes)} scenes to {out / name}")
    reporter.wrote(write_manifest(out, manifest))
    return 0


def _run(args: argparse.Namespace, reporter: Reporter) -> int:
    """Run every configured seed and print the mean target accuracy."""
    config = _experiment_config(args)
    summary = run(config, reporter=reporter)
    accuracy = summary["target_accuracy"]
    reporter.info(f"\nTarget accuracy {accuracy['mean']:.4f} +/- {accuracy['std']:.4f} over {len(config.seeds)} seeds")
    return 0


def _sweep(args: argparse.Namespace, reporter: Reporter) -> int:
    """Run a sensitivity sweep."""
    try:
        values = parse_float_list(args.values)
    except ValueError as e:
        raise ConfigError(f"cannot parse values: {e}", key="--values") from e
    sweep(_experiment_config(args), args.param, values, reporter=reporter)
    return 0


def _ablate(args: argparse.Namespace, reporter: Reporter) -> int:
    """Run the graph ablation."""
    ablate_graph(_experiment_config(args), reporter=reporter)
    return 0


COMMANDS = {
    "graph": _graph,
    "align": _align,
    "gradcheck": _gradcheck,
    "simulate": _simulate,
    "run": _run,
    "sweep": _sweep,
    "ablate-graph": _ablate,
}


def main(argv: list[str] | None = None) -> int:
    """Main entry point."""
    args = parse_args(argv)
    reporter = Reporter(quiet=args.quiet)
    try:
        return COMMANDS[args.command](args, reporter)
    except GpaError as e:
        print(f"Error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"Error: {e.filename or ''}: {e.strerror or e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

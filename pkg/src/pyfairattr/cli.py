"""Command line entry point: train, evaluate, metrics and visualize."""
import argparse
import logging
import sys
from dataclasses import fields
from logging import Logger
from pathlib import Path
from typing import Any, NoReturn, Optional, Sequence

import pandas as pd
import torch
from dotenv import load_dotenv
from torch.utils.data import DataLoader

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .exceptions import ConfigurationError, FairAttrError, UsageError
from .experts import MultiExpertModel, predicted_class
from .fairness import build_report, load_predictions, write_report
from .fileio import atomic_path
from .heatmap import denormalize, export_heatmaps
from .inference import predict_fused, predict_loader, source_names
from .manifest import ImageDataset, ManifestSchema, TrainingSample, load_image, load_manifest
from .training import fit

logger: Logger = logging.getLogger(__package__)

RESOLVED_CONFIG = "resolved_config.cfg"


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        raise UsageError(message)


def _protected(values: Optional[Sequence[str]]) -> tuple[str, ...]:
    return tuple(v for value in values or () for v in value.split(",") if v)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="flat key = value config file")
    group = parser.add_argument_group("config overrides")
    for f in fields(RunConfig):
        group.add_argument(f"--{f.name}", dest=f"cfg_{f.name}", default=None, metavar="VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pyfairattr", description=__doc__)
    parser.add_argument("--log-level", default="INFO")
    commands = parser.add_subparsers(dest="command", parser_class=_Parser)

    train = commands.add_parser("train", help="fit a model on a manifest's train split")
    _add_config_flags(train)
    train.add_argument("--manifest", type=Path, required=True)
    train.add_argument("--protected", nargs="*", help="protected columns, validated only")

    evaluate = commands.add_parser("evaluate", help="fused predictions for one split")
    _add_config_flags(evaluate)
    evaluate.add_argument("--checkpoint", type=Path, required=True)
    evaluate.add_argument("--manifest", type=Path, required=True)
    evaluate.add_argument("--split", default="test")
    evaluate.add_argument("--protected", nargs="*")
    evaluate.add_argument("--output", type=Path, required=True)
    evaluate.add_argument("--per-source", action="store_true", help="also write every constituent score")

    metrics = commands.add_parser("metrics", help="fairness report from a predictions CSV")
    _add_config_flags(metrics)
    metrics.add_argument("--predictions", type=Path, required=True)
    metrics.add_argument("--protected", nargs="+", required=True)
    metrics.add_argument("--output", type=Path, default=Path("report.json"))
    metrics.add_argument("--csv", type=Path, help="per-subgroup table")

    visualize = commands.add_parser("visualize", help="attention overlays for images")
    _add_config_flags(visualize)
    visualize.add_argument("--checkpoint", type=Path, required=True)
    visualize.add_argument("--image", type=Path, nargs="+", required=True)
    visualize.add_argument("--output", type=Path, required=True)
    return parser


def resolve_config(args: argparse.Namespace, base: Optional[RunConfig] = None) -> RunConfig:
    config = base or RunConfig()
    if args.config is not None:
        config = RunConfig.from_file(args.config)
    overrides = {
        f.name: getattr(args, f"cfg_{f.name}")
        for f in fields(RunConfig)
        if getattr(args, f"cfg_{f.name}") is not None
    }
    return config.with_overrides(overrides)


def _train(args: argparse.Namespace) -> None:
    config = resolve_config(args)
    output = config.resolved_output_dir()
    config.write(output / RESOLVED_CONFIG)
    manifest = load_manifest(args.manifest, ManifestSchema(protected_columns=_protected(args.protected)))
    if len(manifest.classes) != config.num_classes:
        raise ConfigurationError(
            f"Manifest has {len(manifest.classes)} classes, config expects {config.num_classes}"
        )

    def dataset(split: str) -> ImageDataset:
        return ImageDataset(manifest.training_view(split), config.input_size, config.mean, config.std)

    torch.manual_seed(config.seed)
    model = config.build_model()
    val = dataset("val")
    checkpoint = output / "checkpoint.pt"

    def on_improvement(improved: MultiExpertModel, epoch: int) -> None:
        save_checkpoint(improved, config, checkpoint)

    model, log = fit(
        model,
        dataset("train"),
        config.train_config(),
        val_data=val if len(val) else None,
        log_path=output / "training_log.jsonl",
        on_improvement=on_improvement,
    )
    save_checkpoint(model, config, checkpoint)
    logger.info("Training finished after %d epochs, best epoch %d", len(log.epochs), log.best_epoch)


def _evaluate(args: argparse.Namespace) -> None:
    model, stored = load_checkpoint(args.checkpoint)
    config = resolve_config(args, stored)
    protected = _protected(args.protected)
    manifest = load_manifest(args.manifest, ManifestSchema(protected_columns=protected))
    samples = manifest.evaluation_view(args.split)
    if not samples:
        raise UsageError(f"Split {args.split!r} has no rows")
    dataset = ImageDataset(
        [TrainingSample(s.path, s.target) for s in samples],
        config.input_size,
        config.mean,
        config.std,
    )
    loader = DataLoader(dataset, batch_size=config.batch_size)
    fused, targets, constituents = predict_loader(model, loader, config.mask_config(), config.fusion)

    frame = pd.DataFrame(
        {
            "id": [s.sample_id for s in samples],
            "true_label": targets.tolist(),
            "predicted_label": predicted_class(fused).tolist(),
        }
    )
    for i, column in enumerate(protected):
        frame[column] = [s.protected[i] for s in samples]
    for k in range(fused.shape[1]):
        frame[f"score_{k}"] = fused[:, k].tolist()
    if args.per_source:
        for name, scores in zip(source_names(model.expert_count), constituents):
            for k in range(scores.shape[1]):
                frame[f"{name}_score_{k}"] = scores[:, k].tolist()

    with atomic_path(args.output) as tmp:
        frame.to_csv(tmp, index=False)
    config.write(args.output.parent / RESOLVED_CONFIG)
    logger.info("Wrote %d predictions to %s", len(frame), args.output)


def _metrics(args: argparse.Namespace) -> None:
    config = resolve_config(args)
    records = load_predictions(args.predictions, _protected(args.protected))
    report = build_report(records, config.positive_class, config.dob_ddof)
    write_report(report, args.output, args.csv)
    config.write(args.output.parent / RESOLVED_CONFIG)
    logger.info(
        "Overall accuracy %.2f, DoB %s, DEO %s",
        report.overall_accuracy,
        "n/a" if report.degree_of_bias is None else f"{report.degree_of_bias:.2f}",
        "n/a" if report.deo is None else f"{report.deo:.2f}",
    )


def _visualize(args: argparse.Namespace) -> None:
    model, stored = load_checkpoint(args.checkpoint)
    config = resolve_config(args, stored)
    images = torch.stack(
        [load_image(p, config.input_size, config.mean, config.std) for p in args.image]
    )
    bundle = predict_fused(images, model, config.mask_config(), config.fusion)
    overall = bundle.regions.overall_map
    assert overall is not None
    for i, source in enumerate(args.image):
        export_heatmaps(
            denormalize(images[i], config.mean, config.std),
            [maps[i] for maps in bundle.regions.expert_maps],
            overall[i],
            args.output,
            stem=source.stem,
            alpha=config.heatmap_alpha,
        )
    config.write(args.output / RESOLVED_CONFIG)


COMMANDS: dict[str, Any] = {
    "train": _train,
    "evaluate": _evaluate,
    "metrics": _metrics,
    "visualize": _visualize,
}


def run_cli(argv: Sequence[str]) -> int:
    """Runs one subcommand and returns the process exit status."""
    try:
        args = build_parser().parse_args(list(argv))
        if args.command is None:
            raise UsageError(f"Expected a subcommand: {', '.join(COMMANDS)}")
    except UsageError as err:
        logger.error("Usage error: %s", err)
        return 2

    logging.getLogger(__package__).setLevel(args.log_level.upper())
    try:
        COMMANDS[args.command](args)
    except UsageError as err:
        logger.error("Usage error: %s", err)
        return 2
    except FairAttrError as err:
        logger.error("%s failed: %s", args.command, err)
        return 1
    return 0


def main() -> None:
    load_dotenv()
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        stream=sys.stderr,
    )
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()

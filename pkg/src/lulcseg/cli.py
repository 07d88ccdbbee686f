"""Command-line entry point: ``lulcseg <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .checkpoint import CheckpointError
from .config import ConfigError, PipelineConfig, read_keyvalue
from .model import TrainConfig
from .nn import NumericalError
from .raster import RasterError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# desk-scale defaults for synthetic data; full-scale defaults live in PipelineConfig
SYNTHETIC_PROFILE = dict(
    tile_size=64,
    augment_set="standard",
    train=TrainConfig(batch_size=8, epochs=6, learning_rate=0.01, aux_weight=0.2, weight_decay=1e-4, seed=0),
    synth_scenes=40,
    synth_size=256,
    synth_region_scale=96,
)

log = logging.getLogger("lulcseg")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--profile", choices=("full", "synthetic"), default="full",
                        help="base defaults before --config and flags are applied")
    common.add_argument("--data", type=Path, help="dataset root (images/ and gt/)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--tile-size", type=int)
    common.add_argument("--augment-set", help="standard, d4, identity, or a comma list of ops")
    common.add_argument("--epochs", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--batch", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="lulcseg", description="Land-cover segmentation pipeline (tile, train, predict, evaluate).")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p = sub.add_parser("ingest", parents=[common], help="import a GID-style folder into the dataset layout")
    p.add_argument("src", type=Path)
    sub.add_parser("tile", parents=[common], help="split scenes into tiles and write the split")
    sub.add_parser("augment", parents=[common], help="materialise augmented training tiles")
    p = sub.add_parser("train", parents=[common], help="train the model")
    p.add_argument("--resume", type=Path, help="continue from a checkpoint")
    p = sub.add_parser("predict", parents=[common], help="predict and stitch test scenes")
    p.add_argument("--checkpoint", type=Path, help="defaults to <out>/train/checkpoint.npz")
    sub.add_parser("evaluate", parents=[common], help="score predictions against ground truth")
    p = sub.add_parser("bench", parents=[common], help="time JPU vs dilated forward paths")
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--repeats", type=int, default=3)
    return parser


def resolve_config(args) -> PipelineConfig:
    cfg = PipelineConfig()
    if args.profile == "synthetic":
        cfg = PipelineConfig(**SYNTHETIC_PROFILE)
    if args.config:
        base = cfg.to_mapping()
        base.update(read_keyvalue(args.config))
        cfg = PipelineConfig.from_mapping(base, source=str(args.config))
    return cfg.with_overrides(
        dataset_root=args.data, out=args.out, seed=args.seed, tile_size=args.tile_size,
        augment_set=args.augment_set, workers=args.workers,
        **{"train.epochs": args.epochs, "train.learning_rate": args.lr, "train.batch_size": args.batch,
           "train.seed": args.seed},
    )


def run(args, cfg: PipelineConfig):
    cmd = args.command
    if cmd == "synth":
        return {"scenes": pipeline.synth_dataset(cfg)}
    if cmd == "ingest":
        return {"scenes": pipeline.ingest(cfg, args.src)}
    if cmd == "tile":
        return pipeline.tile_dataset(cfg)
    if cmd == "augment":
        return {"written": pipeline.augment_tiles(cfg)}
    if cmd == "train":
        return pipeline.train_model(cfg, resume=args.resume)
    if cmd == "predict":
        return pipeline.predict_scenes(cfg, args.checkpoint or cfg.out / "train" / "checkpoint.npz")
    if cmd == "evaluate":
        return pipeline.evaluate_scenes(cfg)
    if cmd == "bench":
        return pipeline.bench(cfg, size=args.size, repeats=args.repeats)
    raise AssertionError(cmd)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"lulcseg: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        result = run(args, cfg)
    except NumericalError as exc:
        print(f"lulcseg: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (pipeline.DataError, RasterError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"lulcseg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""``pixelforge`` command line.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .align import TrainConfig
from .blob import BlobFormatError
from .raster import GridFormatError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("pixelforge")


def _load_config(args) -> TrainConfig:
    cfg = TrainConfig.parse(Path(args.config).read_text()) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "max_steps", None) is not None:
        cfg.max_steps = args.max_steps
    return cfg.validate()


def _print(obj):
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def run_ingest(args):
    rep = pipeline.cmd_ingest(args.geojson_dir, args.out, zoom=args.zoom, tile_px=args.tile_px,
                              rare_threshold=args.rare_threshold)
    _print({"manifest": str(rep.manifest_path), "tiles": rep.n_tiles, "polygons": rep.n_polygons,
            "skipped": rep.skipped, "errors": len(rep.errors)})


def run_rasterize(args):
    path = pipeline.cmd_rasterize(args.manifest, args.out, min_coverage=args.min_coverage, threads=args.threads)
    print(path)


def run_train(args):
    cfg = _load_config(args)
    _, losses = pipeline.cmd_train_align(args.manifest, args.out, cfg)
    _print({"steps": len(losses), "final_loss": losses[-1] if losses else None,
            "checkpoint": str(Path(args.out) / "checkpoint.pxfb")})


def run_control(args):
    step = pipeline.parse_schedule_step(args.schedule_step) if args.schedule_step else None
    paths = pipeline.cmd_control(args.manifest, args.checkpoint, args.out, mask_retained=args.mask_retained,
                                 schedule_step=step, adapter_path=args.adapter, seed=args.seed or 42,
                                 preview=args.preview)
    print(f"wrote {len(paths)} control raster(s) to {args.out}")


def run_eval(args):
    suites = [s for chunk in (args.suite or []) for s in chunk.split(",") if s]
    report = pipeline.cmd_eval(args.manifest, args.checkpoint, suites, seed=args.seed or 42,
                               generated_dir=args.generated, real_features=args.real_features,
                               generated_features=args.generated_features, out_json=args.out)
    _print(report)


def run_plan_batch(args):
    _print(pipeline.cmd_plan_batch(args.manifest, args.k, args.confidence, seed=args.seed or 42))


def run_grid_info(args):
    _print(pipeline.cmd_grid_info(args.path))


def _global_options(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global options; their copies must not default, or a
    # value given before the subcommand would be reset by the subparser
    def default(value):
        return argparse.SUPPRESS if suppress else value

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=default(None), help="random seed (default 42)")
    common.add_argument("--config", default=default(None), help="key = value training config file")
    common.add_argument("--threads", type=int, default=default(1))
    common.add_argument("--log-level", default=default("WARNING"))
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _global_options(suppress=True)
    p = argparse.ArgumentParser(prog="pixelforge", parents=[_global_options(suppress=False)],
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", parents=[common], help="GeoJSON polygons -> per-tile features + vocabulary")
    s.add_argument("geojson_dir")
    s.add_argument("--out", required=True)
    s.add_argument("--zoom", type=int, default=16)
    s.add_argument("--tile-px", type=int, default=512)
    s.add_argument("--rare-threshold", type=float, default=0.002)
    s.set_defaults(func=run_ingest)

    s = sub.add_parser("rasterize", parents=[common], help="ingested tiles -> .pxfg grids + split manifest")
    s.add_argument("manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--min-coverage", type=float, default=0.70)
    s.set_defaults(func=run_rasterize)

    s = sub.add_parser("train-align", parents=[common], help="contrastive training of the toy encoders")
    s.add_argument("manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--max-steps", type=int)
    s.set_defaults(func=run_train)

    s = sub.add_parser("control", parents=[common], help="control rasters for every tile")
    s.add_argument("manifest")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--adapter")
    s.add_argument("--preview", action="store_true", help="also write 8-bit PNG previews")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--mask-retained", type=float)
    g.add_argument("--schedule-step", help="t/T position in the progressive masking schedule")
    s.set_defaults(func=run_control)

    s = sub.add_parser("eval", parents=[common], help="metrics on the test split")
    s.add_argument("manifest")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--suite", action="append", help="retrieval, tags, image (repeat or comma-separate)")
    s.add_argument("--generated", help="directory of generated images named z_x_y.png|.npy")
    s.add_argument("--real-features")
    s.add_argument("--generated-features")
    s.add_argument("--out", help="write the metrics JSON here")
    s.set_defaults(func=run_eval)

    s = sub.add_parser("plan-batch", parents=[common], help="minibatch size reaching K pairs at a confidence")
    s.add_argument("manifest")
    s.add_argument("--k", type=int, default=128)
    s.add_argument("--confidence", type=float, default=0.95)
    s.set_defaults(func=run_plan_batch)

    s = sub.add_parser("grid-info", parents=[common], help="dump a .pxfg header and intern stats")
    s.add_argument("path")
    s.set_defaults(func=run_grid_info)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except pipeline.UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (pipeline.DataError, GridFormatError, BlobFormatError, OSError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end: one subcommand per pipeline stage plus dataset tooling.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from threadpoolctl import threadpool_limits

from . import __version__
from .config import PipelineConfig, desk_config, load_config_file, to_dict, update_config
from .data import (
    DatasetSchema,
    ISPRS_CLASSES,
    ISPRS_PALETTE,
    class_distribution,
    format_distribution,
    ingest,
    load_dataset,
    save_dataset,
    synth_generate,
)
from .errors import DataError, NumericalError, ParameterError, SegAdaptError, ShapeError
from .metrics import MetricsReport, compare_reports, render_comparison
from .pipeline import (
    evaluate,
    load_checkpoint,
    run_pipeline,
    step1_train_segmenter,
    step2_train_gan,
    step3_translate,
    step4_finetune,
)

log = logging.getLogger("segadapt")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse reports usage problems with exit code 1 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# --- argument definitions ------------------------------------------------------

def _global_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=None, help="random seed for data generation and initialization (default: from config, 0)")
    g.add_argument("--threads", type=int, default=1, help="BLAS threads; 1 is the bit-reproducible reference mode (default: 1)")
    g.add_argument("--out-dir", type=Path, default=None, help="directory that receives all outputs of the command")
    g.add_argument("--config", type=Path, default=None, help="JSON run configuration; command-line flags override its values")
    g.add_argument("--preset", choices=("desk", "full"), default="desk",
                   help="base configuration: 'desk' (reduced widths for CPU runs) or 'full' (full widths and schedules) (default: desk)")
    g.add_argument("--error-json", action="store_true", help="on failure, also print a JSON error object to standard error")
    g.add_argument("--quiet", action="store_true", help="suppress per-epoch progress lines on standard error")


def _train_flags(p: argparse.ArgumentParser, gan: bool = False) -> None:
    p.add_argument("--epochs", type=int, default=None, help="number of epochs (maximum epochs for GAN training)")
    p.add_argument("--lr", type=float, default=None, help="Adam learning rate")
    p.add_argument("--batch-size", type=int, default=None, help="mini-batch size")
    p.add_argument("--beta1", type=float, default=None, help="Adam first-moment decay")
    if gan:
        p.add_argument("--lambda-cycle", type=float, default=None, help="weight of the cycle-consistency loss")
        p.add_argument("--d-accuracy-min", type=float, default=None, help="stop once discriminator accuracy exceeds this")
        p.add_argument("--g-loss-max", type=float, default=None, help="... and the rolling generator objective is below this")
        p.add_argument("--rolling-window", type=int, default=None, help="number of batches in the rolling generator objective")
        p.add_argument("--d-accuracy-on", choices=("heldout", "train"), default=None,
                       help="measure discriminator accuracy on held-out test splits or on recent training batches")
        p.add_argument("--sample-every", type=int, default=None, help="write a translated-sample grid every K epochs (0 = never)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="segadapt", description="GAN-based domain adaptation for aerial image segmentation.")
    parser.add_argument("--version", action="version", version=f"segadapt {__version__}", help="print the version and exit")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate the synthetic two-domain benchmark")
    _global_flags(p)
    p.add_argument("--tile-size", type=int, default=None, help="tile side in pixels (multiple of 16)")
    p.add_argument("--sensor-shift", action=argparse.BooleanOptionalAction, default=None, help="apply the sensor (band/tone) shift to the target")
    p.add_argument("--resolution-shift", action=argparse.BooleanOptionalAction, default=None, help="apply the ground-resolution shift to the target")
    p.add_argument("--class-shift", action=argparse.BooleanOptionalAction, default=None, help="apply the class-representation shift to the target")
    p.add_argument("--n-source", type=int, nargs=2, metavar=("TRAIN", "TEST"), default=None, help="source patch counts")
    p.add_argument("--n-target", type=int, nargs=2, metavar=("TRAIN", "TEST"), default=None, help="target patch counts")

    p = sub.add_parser("tile", help="cut full rasters (and colour-coded label rasters) into a tiled dataset")
    _global_flags(p)
    p.add_argument("--images", type=Path, nargs="+", required=True, help="input raster image files")
    p.add_argument("--masks", type=Path, nargs="+", default=None, help="colour-coded label rasters, same order as --images")
    p.add_argument("--size", type=int, default=512, help="tile size in pixels (default: 512)")
    p.add_argument("--policy", choices=("drop", "reflect_pad"), default="drop", help="edge handling (default: drop)")
    p.add_argument("--channel-map", type=int, nargs="+", default=None, help="raster bands to keep, in order (default: first three)")
    p.add_argument("--channels", nargs="+", default=["R", "G", "B"], help="band names recorded in the schema (default: R G B)")
    p.add_argument("--resolution-cm", type=float, default=5.0, help="ground sampling distance recorded in the schema")
    p.add_argument("--split", default="train", help="split label assigned to every tile (default: train)")

    p = sub.add_parser("stats", help="print the class distribution of a labelled dataset")
    _global_flags(p)
    p.add_argument("dataset", type=Path, help="dataset directory")
    p.add_argument("--json", action="store_true", help="print JSON instead of a table")

    p = sub.add_parser("train-seg", help="step 1: train the source segmenter")
    _global_flags(p)
    p.add_argument("--source", type=Path, required=True, help="labelled source dataset directory")
    _train_flags(p)

    p = sub.add_parser("train-gan", help="step 2: train the translation generators and discriminators")
    _global_flags(p)
    p.add_argument("--source", type=Path, required=True, help="source dataset directory")
    p.add_argument("--target", type=Path, required=True, help="target dataset directory (labels not needed)")
    _train_flags(p, gan=True)

    p = sub.add_parser("translate", help="step 3: translate source patches into the target domain")
    _global_flags(p)
    p.add_argument("--generator", type=Path, required=True, help="source-to-target generator checkpoint")
    p.add_argument("--source", type=Path, required=True, help="labelled source dataset directory")
    p.add_argument("--split", default="train", help="source split to translate; 'all' for every patch (default: train)")
    p.add_argument("--target-schema", type=Path, default=None, help="dataset directory whose schema the output adopts")

    p = sub.add_parser("finetune", help="step 4: fine-tune the source segmenter on translated patches")
    _global_flags(p)
    p.add_argument("--model", type=Path, required=True, help="step-1 segmenter checkpoint")
    p.add_argument("--translated", type=Path, required=True, help="translated dataset directory")
    p.add_argument("--target-eval", type=Path, required=True, help="labelled target dataset used for per-epoch evaluation")
    _train_flags(p)

    p = sub.add_parser("eval", help="score a segmenter checkpoint on a labelled dataset")
    _global_flags(p)
    p.add_argument("--model", type=Path, required=True, help="segmenter checkpoint")
    p.add_argument("--dataset", type=Path, required=True, help="labelled dataset directory")
    p.add_argument("--split", default=None, help="evaluate only this split")

    p = sub.add_parser("report", help="render a before/after comparison of two metric reports")
    _global_flags(p)
    p.add_argument("--before", type=Path, required=True, help="report JSON written by 'eval'")
    p.add_argument("--after", type=Path, required=True, help="report JSON written by 'eval'")

    p = sub.add_parser("pipeline", help="run all four steps on a freshly generated synthetic benchmark")
    _global_flags(p)
    return parser


# --- helpers ----------------------------------------------------------------------

def _resolve_config(args) -> PipelineConfig:
    cfg = desk_config() if args.preset == "desk" else PipelineConfig()
    if args.config is not None:
        cfg = update_config(cfg, load_config_file(args.config))
    if args.seed is not None:
        cfg = update_config(cfg, {"seed": args.seed, "seg_train": {"seed": args.seed},
                                  "gan_train": {"seed": args.seed}, "finetune": {"seed": args.seed}})
    section = {"train-seg": "seg_train", "train-gan": "gan_train", "finetune": "finetune"}.get(args.command)
    if section:
        names = ("epochs", "lr", "batch_size", "beta1", "lambda_cycle", "d_accuracy_min",
                 "g_loss_max", "rolling_window", "d_accuracy_on", "sample_every")
        upd = {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}
        if upd:
            cfg = update_config(cfg, {section: upd})
    if args.command == "synth":
        upd = {}
        for flag, key in (("tile_size", "tile_size"), ("sensor_shift", "sensor_shift"),
                          ("resolution_shift", "resolution_shift"), ("class_shift", "class_representation_shift")):
            if getattr(args, flag) is not None:
                upd[key] = getattr(args, flag)
        if args.n_source:
            upd.update(n_source_train=args.n_source[0], n_source_test=args.n_source[1])
        if args.n_target:
            upd.update(n_target_train=args.n_target[0], n_target_test=args.n_target[1])
        if upd:
            cfg = update_config(cfg, {"synth": upd})
    cfg.validate()
    return cfg


def _out_dir(args) -> Path:
    if args.out_dir is None:
        raise UsageError(f"{args.command}: --out-dir is required")
    args.out_dir.mkdir(parents=True, exist_ok=True)
    return args.out_dir


def _freeze(out: Path, args, cfg: PipelineConfig) -> None:
    """Write the resolved configuration and invocation before any work starts."""
    inv = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    inv = {k: ([str(x) for x in v] if isinstance(v, list) else v) for k, v in inv.items()}
    blob = {"command": args.command, "arguments": inv, "config": to_dict(cfg)}
    (out / "resolved_config.json").write_text(json.dumps(blob, indent=2, sort_keys=True))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2))


# --- commands ------------------------------------------------------------------------

def cmd_synth(args, cfg):
    out = _out_dir(args)
    _freeze(out, args, cfg)
    bench = synth_generate(cfg.synth, cfg.seed)
    save_dataset(bench.source, out / "source")
    save_dataset(bench.target, out / "target")
    save_dataset(bench.target_eval(split=""), out / "target_eval")
    print(format_distribution(class_distribution(bench.source)))
    return EXIT_OK


def cmd_tile(args, cfg):
    out = _out_dir(args)
    _freeze(out, args, cfg)
    if len(args.channels) != len(args.channel_map or args.channels):
        raise UsageError("--channels and --channel-map must have the same length")
    schema = DatasetSchema(ISPRS_CLASSES, dict(ISPRS_PALETTE), tuple(args.channels), args.resolution_cm)
    ds = ingest(args.images, args.masks, schema, args.size, args.policy, args.channel_map, args.split)
    if not len(ds):
        raise DataError("no tiles produced; every input is smaller than one tile")
    save_dataset(ds, out)
    print(f"{len(ds)} tiles of {args.size}x{args.size} written to {out}")
    return EXIT_OK


def cmd_stats(args, cfg):
    dist = class_distribution(load_dataset(args.dataset))
    print(json.dumps(dist, indent=2) if args.json else format_distribution(dist))
    return EXIT_OK


def cmd_train_seg(args, cfg):
    out = _out_dir(args)
    _freeze(out, args, cfg)
    source = load_dataset(args.source)
    seg_cfg = dataclasses.replace(cfg.segmenter, in_channels=source.tile_shape[0], num_classes=source.schema.num_classes)
    res = step1_train_segmenter(source, cfg.seg_train, seg_cfg, out)
    print(f"best validation accuracy {max(r.report.pixel_accuracy for r in res.history):.4f} -> {out / 'm_s.ckpt'}")
    return EXIT_OK


def cmd_train_gan(args, cfg):
    out = _out_dir(args)
    _freeze(out, args, cfg)
    res = step2_train_gan(load_dataset(args.source), load_dataset(args.target), cfg.gan_train,
                          cfg.generator, cfg.discriminator, out)
    last = res.history[-1]
    print(f"{len(res.history)} epochs, discriminator accuracy {last['d_accuracy']:.3f}, "
          f"rolling generator objective {last['g_loss_rolling']:.3f}, stop rule met: {res.stopped_early}")
    return EXIT_OK


def cmd_translate(args, cfg):
    out = _out_dir(args)
    _freeze(out, args, cfg)
    src = load_dataset(args.source)
    if args.split != "all":
        src = src.split(args.split)
    schema = load_dataset(args.target_schema).schema if args.target_schema else None
    translated = step3_translate(load_checkpoint(args.generator), src, schema)
    save_dataset(translated, out)
    _write_json(out / "checksums.json", {"source": src.mask_checksum(), "translated": translated.mask_checksum()})
    print(f"{len(translated)} patches translated -> {out}")
    return EXIT_OK


def cmd_finetune(args, cfg):
    out = _out_dir(args)
    _freeze(out, args, cfg)
    tev = load_dataset(args.target_eval)
    if "test" in tev.splits():
        tev = tev.split("test")
    res = step4_finetune(load_checkpoint(args.model), load_dataset(args.translated), tev, cfg.finetune, out)
    _write_json(out / "report_before.json", res.baseline.to_dict())
    _write_json(out / "report_after.json", res.best.report.to_dict())
    print(f"target accuracy {res.baseline.pixel_accuracy:.4f} -> {res.best.report.pixel_accuracy:.4f} "
          f"(best epoch {res.best.epoch})")
    return EXIT_OK


def cmd_eval(args, cfg):
    ds = load_dataset(args.dataset)
    if args.split:
        ds = ds.split(args.split)
    report = evaluate(load_checkpoint(args.model), ds)
    if args.out_dir is not None:
        out = _out_dir(args)
        _freeze(out, args, cfg)
        _write_json(out / "report.json", report.to_dict())
    print(report.to_text())
    return EXIT_OK


def _read_report(path: Path) -> MetricsReport:
    if not path.exists():
        raise DataError(f"report not found: {path}")
    try:
        return MetricsReport.from_dict(json.loads(path.read_text()))
    except (json.JSONDecodeError, KeyError) as e:
        raise DataError(f"{path}: not a metrics report ({e})") from e


def cmd_report(args, cfg):
    before, after = _read_report(args.before), _read_report(args.after)
    text = render_comparison(before, after)
    if args.out_dir is not None:
        out = _out_dir(args)
        _freeze(out, args, cfg)
        (out / "comparison.txt").write_text(text + "\n")
        _write_json(out / "comparison.json", compare_reports(before, after))
    print(text)
    return EXIT_OK


def cmd_pipeline(args, cfg):
    out = _out_dir(args)
    _freeze(out, args, cfg)
    res = run_pipeline(cfg, out)
    print(render_comparison(res.finetune.baseline, res.finetune.best.report))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "tile": cmd_tile,
    "stats": cmd_stats,
    "train-seg": cmd_train_seg,
    "train-gan": cmd_train_gan,
    "translate": cmd_translate,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "report": cmd_report,
    "pipeline": cmd_pipeline,
}


def _fail(args, argv, code: int, err: BaseException) -> int:
    kind = {EXIT_USAGE: "usage", EXIT_DATA: "data", EXIT_NUMERICAL: "numerical"}[code]
    print(f"segadapt: error: {err}", file=sys.stderr)
    # parse failures leave no namespace, so fall back to scanning the raw arguments
    wants_json = getattr(args, "error_json", False) if args is not None else "--error-json" in argv
    if wants_json:
        print(json.dumps({"error": kind, "type": type(err).__name__, "message": str(err), "exit_code": code}),
              file=sys.stderr)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    args = None
    argv = sys.argv[1:] if argv is None else list(argv)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    try:
        args = build_parser().parse_args(argv)
        log.setLevel(logging.WARNING if args.quiet else logging.INFO)
        log.addHandler(handler)
        log.propagate = False
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        cfg = _resolve_config(args)
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args, cfg)
    except UsageError as e:
        return _fail(args, argv, EXIT_USAGE, e)
    except ParameterError as e:
        return _fail(args, argv, EXIT_USAGE, e)
    except NumericalError as e:
        return _fail(args, argv, EXIT_NUMERICAL, e)
    except (DataError, ShapeError, SegAdaptError, FileNotFoundError) as e:
        return _fail(args, argv, EXIT_DATA, e)
    finally:
        log.removeHandler(handler)
        log.propagate = True


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

"""Command-line entry point: gen-data / train / eval / ablate / misalign.

Every command is a pure function of (config file, flags, input files);
reruns produce byte-identical outputs except for the log file, which is the
only place timestamps go. Exit codes: 0 success, 2 config error, 3 data
error, 4 numeric failure.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .config import apply_overrides, echo_config, load_run_config
from .errors import ConfigError, DataError, LslpError, NumericError
from .metrics import evaluate, load_report_csv, misalignment_scatter, sweep_alpha
from .synthgen import generate_dataset, layout_report
from .trainer import train

log = logging.getLogger("lslp")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _setup_logging(out_dir=None):
    level_name = os.environ.get("LSLP_LOG", "INFO").upper()
    level = getattr(logging, level_name, logging.INFO)
    root = logging.getLogger("lslp")
    root.setLevel(level)
    root.handlers.clear()
    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(console)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        fileh = logging.FileHandler(out_dir / "run.log")
        fileh.setFormatter(logging.Formatter(
            "%(asctime)s %(levelname)s %(name)s: %(message)s"))
        root.addHandler(fileh)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lslp",
        description="Few-shot segmentation with local grid prototypes: "
                    "synthetic data generation, episodic training, Dice "
                    "evaluation, and grid-scale ablations.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic phantom dataset")
    p.add_argument("--config", help="JSON run config (phantom section)")
    p.add_argument("--out", help="dataset directory (default: <output_dir>/dataset)")
    p.add_argument("--seed", type=int, help="override phantom seed")
    p.add_argument("--images", type=int, help="override number of images")

    p = sub.add_parser("train", help="train the encoder episodically")
    p.add_argument("--config", help="JSON run config (train section)")
    p.add_argument("--out", help="run directory (default: <output_dir>/train)")
    p.add_argument("--dataset", help="override dataset directory")
    p.add_argument("--iterations", type=int, help="override total iterations")
    p.add_argument("--seed", type=int, help="override training seed")
    p.add_argument("--resume", help="checkpoint directory to resume from")

    p = sub.add_parser("eval", help="evaluate a checkpoint on test episodes")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--config", help="JSON run config (eval section)")
    p.add_argument("--out", help="report directory (default: <output_dir>/eval)")
    p.add_argument("--episodes", type=int, help="number of test episodes")
    p.add_argument("--seed", type=int, help="evaluation seed")
    p.add_argument("--classes", type=int, nargs="+", help="episode class pool")
    p.add_argument("--threads", type=int, help="worker threads (default 1)")
    p.add_argument("--overlays", type=int, help="how many query overlays to render")
    p.add_argument("--allow-mismatch", action="store_true",
                   help="evaluate despite a config fingerprint mismatch")

    p = sub.add_parser("ablate", help="sweep grid scale and overlap settings")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--out", help="sweep directory (default: <output_dir>/ablate)")
    p.add_argument("--alphas", type=float, nargs="+", default=[0.125, 0.25, 1.0],
                   help="grid scales to sweep")
    p.add_argument("--overlap", nargs="+", choices=["on", "off"], default=["on"],
                   help="overlap arms to sweep")
    p.add_argument("--mode", choices=["train", "eval"], default="train",
                   help="retrain per setting, or re-evaluate one checkpoint")
    p.add_argument("--checkpoint", help="checkpoint for --mode eval")

    p = sub.add_parser("misalign", help="alignment-vs-segmentation scatter from a report")
    p.add_argument("--report", required=True, help="report.csv from eval")
    p.add_argument("--out", help="output directory (default: alongside report)")

    return parser


def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.images is not None:
        overrides["n_images"] = args.images
    cfg = apply_overrides(cfg, phantom=overrides)
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "dataset"
    _setup_logging(out.parent if args.out else Path(cfg.output_dir))
    spec = cfg.phantom.resolved()
    generate_dataset(spec, out)
    report = layout_report(out)
    (out / "layout_report.json").write_text(
        json.dumps({str(k): v for k, v in report.items()}, indent=2, sort_keys=True))
    echo_config(cfg, out)
    log.info("wrote %d images to %s", spec.n_images, out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    overrides = {}
    if args.dataset is not None:
        overrides["dataset"] = args.dataset
    if args.iterations is not None:
        overrides["total_iterations"] = args.iterations
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = apply_overrides(cfg, train=overrides)
    if not cfg.train.dataset:
        raise ConfigError("no dataset configured; set train.dataset or --dataset")
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "train"
    _setup_logging(out)
    echo_config(cfg, out)
    result = train(cfg.train, out, resume_from=args.resume)
    log.info("final checkpoint at %s", result.checkpoint_dir)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    overrides = {}
    if args.episodes is not None:
        overrides["n_episodes"] = args.episodes
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.classes is not None:
        overrides["classes"] = tuple(args.classes)
    if args.threads is not None:
        overrides["threads"] = args.threads
    if args.overlays is not None:
        overrides["overlays"] = args.overlays
    if args.allow_mismatch:
        overrides["allow_mismatch"] = True
    cfg = apply_overrides(cfg, eval=overrides)
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "eval"
    _setup_logging(out)
    echo_config(cfg, out)
    report = evaluate(args.checkpoint, args.dataset, cfg.eval, out_dir=out)
    log.info("mean dice %.4f over %d rows", report.mean_dice, len(report.rows))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config)
    if not cfg.train.dataset:
        raise ConfigError("no dataset configured; set train.dataset in the config")
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "ablate"
    _setup_logging(out)
    echo_config(cfg, out)
    overlap_flags = [flag == "on" for flag in args.overlap]
    rows = sweep_alpha(cfg.train, args.alphas, overlap_flags, out, cfg.eval,
                       mode=args.mode, checkpoint=args.checkpoint)
    for row in rows:
        log.info("alpha=%g overlap=%s mean dice %.4f",
                 row["alpha"], row["overlap"], row["mean_dice"])
    return EXIT_OK


def cmd_misalign(args) -> int:
    report_path = Path(args.report)
    out = Path(args.out) if args.out else report_path.parent / "misalign"
    _setup_logging(out)
    report = load_report_csv(report_path)
    misalignment_scatter(report, out)
    log.info("scatter written to %s", out)
    return EXIT_OK


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "misalign": cmd_misalign,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except LslpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

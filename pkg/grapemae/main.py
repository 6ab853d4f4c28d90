import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import logzero
from logzero import logger

from .config import build_config
from .controller import ExperimentController
from .errors import GrapeMaeError

DEFAULT_CONFIG_PATH = Path(__file__).resolve().parent.parent / "config" / "config.json"


def _values(text: str) -> List:
    """Comma-separated sweep values, each read as JSON when possible."""
    out = []
    for item in text.split(","):
        item = item.strip()
        try:
            out.append(json.loads(item))
        except ValueError:
            out.append(item)
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grapemae", description="MAE pre-training and ViT fine-tuning experiments")
    parser.add_argument("--config", type=str, default=str(DEFAULT_CONFIG_PATH))
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", type=str, default=None, help="output directory (overrides out_dir)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--verbose", action="store_true")
    parser.add_argument("--no-progress", action="store_true", help="hide progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="MAE pre-text training on unlabeled images")
    p.add_argument("--resume", dest="resume_checkpoint", default=None, help="continue from a pre-text checkpoint")

    p = sub.add_parser("finetune", help="fine-tune a classifier on a labeled split")
    p.add_argument("--init", dest="init_checkpoint", default=None, help="pre-text checkpoint for the encoder")
    p.add_argument("--resume", dest="resume_checkpoint", default=None, help="continue from a fine-tune checkpoint")
    p.add_argument("--manifest", default=None)
    p.add_argument("--label-fraction", dest="label_fraction", type=float, default=None)
    p.add_argument("--freeze-epochs", dest="freeze_epochs", type=int, default=None)

    p = sub.add_parser("eval", help="evaluate a fine-tuned checkpoint")
    p.add_argument("--checkpoint", dest="eval_checkpoint", default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--split", dest="eval_split", choices=["train", "val", "test"], default=None)

    p = sub.add_parser("sweep", help="pre-text → downstream → eval chain over one axis")
    p.add_argument("--axis", dest="sweep_axis", default=None)
    p.add_argument("--values", dest="sweep_values", type=_values, default=None)

    p = sub.add_parser("cka", help="linear CKA between encoder blocks")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--manifest", default=None)

    p = sub.add_parser("attn", help="last-block attention maps per head")
    p.add_argument("checkpoint")
    p.add_argument("images", nargs="+")

    p = sub.add_parser("split", help="class-capped train/val/test manifest")
    p.add_argument("--data-dir", dest="data_dir", default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--cap-factor", type=float, default=4.0)
    p.add_argument("--group-by-prefix", action="store_true", help="keep files sharing a name prefix together")

    p = sub.add_parser("slice", help="cut images into square slices")
    p.add_argument("src")
    p.add_argument("dst")
    p.add_argument("--side", type=int, required=True)
    p.add_argument("--max-overlap", type=float, default=0.10)

    p = sub.add_parser("synth", help="write a synthetic grating dataset")
    p.add_argument("root")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--per-class", type=int, default=64)
    p.add_argument("--size", type=int, default=32)

    p = sub.add_parser("reconstruct", help="original / masked / reconstruction panels")
    p.add_argument("checkpoint")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--manifest", default=None)
    return parser


# command-specific flags that map onto config keys
CONFIG_FLAGS = (
    "resume_checkpoint",
    "eval_checkpoint",
    "init_checkpoint",
    "manifest",
    "label_fraction",
    "freeze_epochs",
    "eval_split",
    "sweep_axis",
    "sweep_values",
    "data_dir",
)


def command_args(args: argparse.Namespace) -> tuple[list, dict]:
    if args.command == "sweep":
        return [], {}
    if args.command == "cka":
        return list(args.checkpoints[:2]), {}
    if args.command == "attn":
        return [args.checkpoint, args.images], {}
    if args.command == "split":
        return [], {"cap_factor": args.cap_factor, "group_by_prefix": args.group_by_prefix}
    if args.command == "slice":
        return [args.src, args.dst, args.side, args.max_overlap], {}
    if args.command == "synth":
        return [args.root, args.classes, args.per_class, args.size], {}
    if args.command == "reconstruct":
        return [args.checkpoint, args.count], {}
    return [], {}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits with 2 on usage errors and 0 after --help
        return int(e.code or 0)
    if args.command == "cka" and len(args.checkpoints) > 2:
        logger.error("[cka] compare one checkpoint with itself or two checkpoints with each other")
        return 2
    logzero.loglevel(logging.DEBUG if args.verbose else logging.INFO)

    flags = {key: getattr(args, key, None) for key in CONFIG_FLAGS}
    try:
        cfg = build_config(args.config, args.overrides, seed=args.seed, out_dir=args.out, **flags)
        cfg.out_path.mkdir(parents=True, exist_ok=True)
        logzero.logfile(str(cfg.out_path / "run.log"))
        controller = ExperimentController(cfg, progress=not args.no_progress)
    except GrapeMaeError as e:
        logger.error(f"[config] {e}")
        return e.exit_code

    cmd_args, cmd_kwargs = command_args(args)
    return controller.call_command(args.command, *cmd_args, **cmd_kwargs)


if __name__ == "__main__":
    sys.exit(main())

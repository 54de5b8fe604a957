"""``demark`` command line: generate, train, infer, eval.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
Errors go to stderr as one JSON line.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .config import load_config
from .errors import DemarkError
from .metrics import evaluate
from .reconstruct import infer_paths
from .synthgen import generate_dataset
from .trainer import fit, load_model, set_deterministic

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class _UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int, help="replaces train.seed")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = _Parser(prog="demark", description="Synthesize, train and run a visible-watermark remover.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic watermark dataset")
    g.add_argument("--backgrounds", required=True, help="directory of clean background images")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--workers", type=int, default=1)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--resume", help="checkpoint to continue from")

    i = sub.add_parser("infer", parents=[common], help="remove watermarks from images")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--input", required=True, help="image file or directory")
    i.add_argument("--out", required=True, help="output directory")
    i.add_argument("--mask-threshold", type=float, help="binarize the predicted mask (default: soft mask)")
    i.add_argument("--save-mask", action="store_true")

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint on a generated dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", required=True, help="report JSON; per_sample.csv is written beside it")
    return p


def resolve_config(args):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    return load_config(args.config, overrides)


def _generate(args, cfg):
    generate_dataset(args.backgrounds, args.out, args.count, cfg.train.seed, cfg.generator, args.workers)
    return {"dataset": args.out, "count": args.count}


def _train(args, cfg):
    path = fit(cfg, resume=args.resume)
    return {"checkpoint": str(path)}


def _infer(args, cfg):
    model = load_model(args.checkpoint, cfg.train.device)
    mode = args.mask_threshold if args.mask_threshold is not None else cfg.eval.mask_mode
    written = infer_paths(model, args.input, args.out, mode, args.save_mask)
    return {"written": len(written), "out": args.out}


def _eval(args, cfg):
    model = load_model(args.checkpoint, cfg.train.device)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report = evaluate(model, args.dataset, cfg.eval, csv_path=out.parent / "per_sample.csv")
    out.write_text(report.to_json() + "\n")
    return report.to_dict()


COMMANDS = {"generate": _generate, "train": _train, "infer": _infer, "eval": _eval}


def _fail(exc, code):
    msg = " ".join(str(exc).split())
    print(json.dumps({"error": type(exc).__name__, "message": msg, "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        return _fail(exc, EXIT_INVALID)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        print(f"# effective config ({args.command})")
        print(cfg.to_yaml(), end="", flush=True)
        torch.manual_seed(cfg.train.seed)
        set_deterministic(cfg.train.deterministic)
        result = COMMANDS[args.command](args, cfg)
    except ValueError as exc:
        return _fail(exc, EXIT_INVALID)
    except (DemarkError, OSError, RuntimeError) as exc:
        return _fail(exc, EXIT_RUNTIME)
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

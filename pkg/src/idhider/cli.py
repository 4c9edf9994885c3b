"""Command-line entry point: idhider synth|train|protect|evaluate.

Configuration precedence: built-in defaults < --profile < --config file < --set
flags. Exit codes: 0 success, 2 config/validation error, 3 missing prerequisite
stage, 4 runtime numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import pipeline
from .corpus import CorpusError
from .pipeline import ConfigError, MissingStageError
from .vfgm import NumericError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING_STAGE = 3
EXIT_NUMERIC = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="idhider",
        description="Identity hider: virtual faces, appearance transfer, evaluation.")
    parser.add_argument("--config", help="JSON config file merged over defaults")
    parser.add_argument("--profile", choices=["reference", "toy"], default="reference",
                        help="base defaults: reference recipe or desk-scale profile")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="dotted config override (JSON value)")
    parser.add_argument("--seed", type=int, default=None,
                        help="seed (default: IDHIDER_SEED env or config seed)")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="render the synthetic corpus to disk")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--n", type=int, default=None,
                         help="cap the number of rendered records")

    p_train = sub.add_parser("train", help="train one pipeline stage")
    p_train.add_argument("stage", choices=list(pipeline.STAGES) + ["all"])
    p_train.add_argument("--work", required=True, help="artifact working directory")
    p_train.add_argument("--force", action="store_true", help="retrain even if cached")

    p_prot = sub.add_parser("protect", help="protect input faces")
    p_prot.add_argument("--work", required=True)
    p_prot.add_argument("--input", required=True, help="image file or corpus directory")
    p_prot.add_argument("--out", required=True)
    p_prot.add_argument("--alpha", type=float, default=None)
    p_prot.add_argument("--diverse", type=int, default=0, metavar="N",
                        help="emit N style-mixed variants per input")
    p_prot.add_argument("--keep-background", action="store_true")
    p_prot.add_argument("--seed", type=int, dest="run_seed", default=None,
                        help="sampling seed for this run (checkpoints keep the "
                             "config seed)")

    p_eval = sub.add_parser("evaluate", help="similarity/parsing/ROC reports")
    p_eval.add_argument("--work", required=True)
    p_eval.add_argument("--protected", required=True)
    p_eval.add_argument("--original", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--domains", default="orig,adr,xdr",
                        help="comma-separated subset of orig,adr,xdr")
    return parser


def resolve_config(args) -> dict:
    cfg = pipeline.toy_config() if args.profile == "toy" else \
        json.loads(json.dumps(pipeline.DEFAULT_CONFIG))
    if args.config:
        with open(args.config) as fh:
            file_cfg = json.load(fh)
        pipeline.validate_config(file_cfg)
        cfg = pipeline.merge_config(cfg, file_cfg)
    if args.overrides:
        cfg = pipeline.apply_overrides(cfg, args.overrides)
    seed = args.seed
    if seed is None and "IDHIDER_SEED" in os.environ:
        seed = int(os.environ["IDHIDER_SEED"])
    if seed is not None:
        cfg["seed"] = int(seed)
        cfg["corpus"]["seed"] = int(seed)
    pipeline.validate_config(cfg)
    return cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "synth":
            manifest = pipeline.run_synth(cfg, args.out, n=args.n)
        elif args.command == "train":
            if args.stage == "all":
                manifests = pipeline.run_all_stages(cfg, args.work, force=args.force)
                manifest = manifests[-1]
            else:
                manifest = pipeline.run_train(args.stage, cfg, args.work,
                                              force=args.force)
        elif args.command == "protect":
            manifest = pipeline.run_protect(
                cfg, args.work, args.input, args.out, alpha=args.alpha,
                diverse=args.diverse, keep_background=args.keep_background,
                seed=args.run_seed)
        else:
            domains = [d for d in args.domains.split(",") if d]
            manifest = pipeline.run_evaluate(cfg, args.work, args.protected,
                                             args.original, args.out, domains=domains)
    except (ConfigError, CorpusError, json.JSONDecodeError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingStageError as err:
        print(f"missing prerequisite: {err}", file=sys.stderr)
        return EXIT_MISSING_STAGE
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps({"run_id": manifest.run_id, "metrics": manifest.metrics},
                     sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Trainer command line: one thin subcommand per stage plus a validator.

    indistill-trainer validate --corpus <file>
    indistill-trainer sft  --sft-corpus <file> --pref-corpus <file> --out <dir> [options]
    indistill-trainer orpo --sft-corpus <file> --pref-corpus <file> --out <dir> \
                           --checkpoint <sft adapter> [options]
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .models import TINY_MODEL_ID
from .schema import SchemaError, load_corpus
from .train import TrainJobSpec, run_orpo, run_sft


def _add_spec_args(parser):
    parser.add_argument("--sft-corpus", required=True, type=Path)
    parser.add_argument("--pref-corpus", required=True, type=Path)
    parser.add_argument("--out", required=True, type=Path)
    parser.add_argument("--base-model", default=TINY_MODEL_ID)
    parser.add_argument("--max-steps", type=int, default=None,
                        help="run exactly this many optimizer steps (smoke runs); epochs otherwise")
    parser.add_argument("--seed", type=int, default=0)


def _spec(args) -> TrainJobSpec:
    return TrainJobSpec(
        sft_corpus=args.sft_corpus,
        pref_corpus=args.pref_corpus,
        output_dir=args.out,
        base_model=args.base_model,
        max_steps=args.max_steps,
        seed=args.seed,
    )


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="indistill-trainer")
    sub = parser.add_subparsers(dest="command", required=True)

    validate = sub.add_parser("validate", help="check a corpus file against the schema")
    validate.add_argument("--corpus", required=True, type=Path)

    for name in ("sft", "orpo"):
        stage = sub.add_parser(name)
        _add_spec_args(stage)
        if name == "orpo":
            stage.add_argument("--checkpoint", required=True, type=Path,
                               help="adapter checkpoint from the sft stage")

    args = parser.parse_args(argv)
    try:
        if args.command == "validate":
            records = load_corpus(args.corpus)
            print(f"{args.corpus}: {len(records)} records OK")
        elif args.command == "sft":
            checkpoint, log = run_sft(_spec(args))
            print(f"sft done: {len(log)} steps, adapter at {checkpoint}")
        else:
            checkpoint, log = run_orpo(_spec(args), args.checkpoint)
            print(f"orpo done: {len(log)} steps, adapter at {checkpoint}")
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``spy-watermark <verb> [--config FILE] [--profile P] [--seed N] [--force]``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import PROFILES, validate_config
from .errors import SpyWatermarkError
from .pipeline import STAGES, Pipeline, order_stages

VERBS = STAGES + ("run", "validate")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spy-watermark", description=__doc__)
    parser.add_argument("verb", choices=VERBS, help="pipeline stage to run, 'run' for several, 'validate' to check")
    parser.add_argument("--config", help="YAML experiment config (empty or missing keys take profile defaults)")
    parser.add_argument("--profile", choices=PROFILES, help="default profile (desk unless set in the config)")
    parser.add_argument("--seed", type=int, help="global seed, overrides the config")
    parser.add_argument("--out", help="artifact directory, overrides output_dir")
    parser.add_argument("--force", action="store_true", help="re-run stages even when cached")
    parser.add_argument("--stages", nargs="+", choices=STAGES, default=list(STAGES),
                        help="stages for the 'run' verb")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    stage = args.verb
    try:
        cfg = validate_config(args.config, profile=args.profile, seed=args.seed)
        if stage == "validate":
            print(f"config ok (hash {cfg.config_hash()[:12]})")
            return 0
        stages = args.stages if stage == "run" else [stage]
        pipe = Pipeline(cfg, args.out, force=args.force)
        for s in order_stages(stages):
            stage = s
            status = pipe.run([s])
            print(f"{s}: {status.get(s, 'skipped')}")
        print(f"artifacts in {pipe.root}")
        return 0
    except SpyWatermarkError as exc:
        print(f"error [{stage}]: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

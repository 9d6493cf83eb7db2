"""``ctxlm`` command-line entry point.

Exit codes: 0 success, 1 invalid configuration or missing input artifact,
2 runtime failure.
"""

import argparse
import json
import logging
import sys

from .pipeline import (SUBCOMMANDS, STAGES, Context, MissingArtifact, ValidationError, load_config)

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
GRADCHECK_TOL = 1e-4


def build_parser():
    ap = argparse.ArgumentParser(prog="ctxlm", description="Contextual LM adaptation experiments.")
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", "-c", help="JSON run config (defaults are used when omitted)")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                    help="dotted-path override, e.g. --set noise.p_sub=0.2 (repeatable)")
    ap.add_argument("--output-dir", "-o", help="shorthand for --set output_dir=DIR")
    ap.add_argument("--only", action="append", help="train-adapter/train-nlm: restrict to these variants")
    ap.add_argument("--verbose", "-v", action="store_true")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides)
    if args.output_dir:
        overrides.append(f"output_dir={json.dumps(args.output_dir)}")
    try:
        cfg = load_config(args.config, overrides)
    except ValidationError as e:
        print("invalid configuration:", file=sys.stderr)
        for err in e.errors:
            print(f"  - {err}", file=sys.stderr)
        return EXIT_INVALID

    ctx = Context(cfg)
    try:
        if args.subcommand in ("train-adapter", "train-nlm"):
            result = STAGES[args.subcommand](ctx, only=args.only)
        else:
            result = STAGES[args.subcommand](ctx)
    except MissingArtifact as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001 - surfaced as a runtime failure
        logging.getLogger("ctxlm").debug("stage failed", exc_info=True)
        print(f"error: {args.subcommand} failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME

    if args.subcommand == "gradcheck":
        width = max(len(k) for k in result)
        for name, err in result.items():
            print(f"{name.ljust(width)}  {err:.3e}  {'ok' if err < GRADCHECK_TOL else 'FAIL'}")
        return EXIT_OK if max(result.values()) < GRADCHECK_TOL else EXIT_RUNTIME
    if isinstance(result, str):
        sys.stdout.write(result)
    else:
        print(json.dumps(result, indent=2, sort_keys=True, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

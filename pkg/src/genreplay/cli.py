"""``genreplay`` command line: run, report, validate, inspect-checkpoint.

Every config key is also a ``--dotted.key VALUE`` flag; flags override the
config file, which overrides the built-in defaults. Errors exit nonzero with a
JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .errors import BalanceError, ConfigValidationError, NonFiniteLossError
from .harness import SCHEMA, emit_report, preset_path, run, validate_config
from .models import describe_checkpoint

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _add_config_args(p: argparse.ArgumentParser):
    p.add_argument("config", nargs="?", help="config file (dotted key = value lines)")
    p.add_argument("--preset", help="start from a bundled preset, e.g. desk-2task")
    g = p.add_argument_group("config overrides")
    for key in SCHEMA:
        g.add_argument(f"--{key}", dest=f"override:{key}", metavar="VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="genreplay", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"genreplay {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="train and evaluate every seed of a config")
    _add_config_args(p)
    p.add_argument("--run-dir", help="write here instead of <output_dir>/<run.name>")

    p = sub.add_parser("validate", help="check a config and print its resolved form")
    _add_config_args(p)

    p = sub.add_parser("report", help="cross-method table and plot from completed runs")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--reference", default="ours", help="method the improvement column is measured for")

    p = sub.add_parser("inspect-checkpoint", help="print checkpoint metadata")
    p.add_argument("path")
    return parser


def _resolve_config(args):
    overrides = {k.split(":", 1)[1]: v for k, v in vars(args).items() if k.startswith("override:") and v is not None}
    text = ""
    if args.preset:
        text += preset_path(args.preset).read_text()
    if args.config:
        text += "\n" + Path(args.config).read_text()
    return validate_config(text, overrides)


def _fail(kind: str, message: str, code: int, **extra) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.verb == "validate":
            cfg = _resolve_config(args)
            print(json.dumps({"valid": True, "config_hash": cfg.config_hash(), "method": cfg.method.name,
                              "config": cfg.to_dict()}, indent=2))
        elif args.verb == "run":
            cfg = _resolve_config(args)
            manifest = run(cfg, run_dir=args.run_dir)
            print(json.dumps({"status": manifest["status"], "run_dir": manifest["run_dir"],
                              "metrics_digest": manifest["metrics_digest"], "cache": manifest["cache"]}))
        elif args.verb == "report":
            rep = emit_report(args.runs, args.out, reference=args.reference)
            print(Path(rep["markdown"]).read_text(), end="")
        elif args.verb == "inspect-checkpoint":
            print(json.dumps(describe_checkpoint(args.path), indent=2, sort_keys=True, default=str))
    except ConfigValidationError as e:
        return _fail("config", str(e), EXIT_CONFIG, errors=e.errors)
    except BalanceError as e:
        return _fail("balance", str(e), EXIT_RUNTIME, starving={str(k): v for k, v in e.starving.items()})
    except NonFiniteLossError as e:
        return _fail("non-finite-loss", str(e), EXIT_RUNTIME, stage=e.stage, step=e.step)
    except (ValueError, OSError, KeyError, TypeError) as e:
        return _fail(type(e).__name__, str(e), EXIT_CONFIG)
    return 0


if __name__ == "__main__":
    sys.exit(main())

from __future__ import annotations

import argparse
import asyncio
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from dissipator import __version__
from dissipator.config import LOG_LEVEL, OUT_DIR, resolve_workers
from dissipator.runner import run_experiment_async
from dissipator.schema import KINDS, load_spec
from services import texts as txt
from services.errors import DissipatorError, SchemaError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_SCHEMA = 2
EXIT_FAILURE = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dissipator",
        description="Numerical lab for relaxation-enhancing flows.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind, help=f"run a {kind} experiment")
        p.add_argument("--config", required=True, type=Path, help="experiment JSON file")
        p.add_argument("--out", type=Path, default=None, help=f"output directory (default {OUT_DIR})")
        p.add_argument("--workers", type=int, default=None, help="process pool size for sweeps")
        p.add_argument("--log-level", default=None, help="logging level (default from env)")
    return parser


def _setup_logging(level: Optional[str]) -> None:
    logging.basicConfig(
        level=getattr(logging, (level or LOG_LEVEL).upper(), logging.INFO),
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    )


async def _run(args: argparse.Namespace) -> int:
    try:
        workers = resolve_workers(args.workers)
    except RuntimeError as e:
        print(txt.render_error("--workers", str(e)), file=sys.stderr)
        return EXIT_SCHEMA

    try:
        spec = load_spec(args.config, kind_override=args.command)
        record = await run_experiment_async(spec, args.out or OUT_DIR, workers)
    except SchemaError as e:
        logger.error("Invalid experiment config %s: %s", args.config, e)
        print(txt.render_error(e.field_path, str(e)), file=sys.stderr)
        return e.exit_code
    except DissipatorError as e:
        logger.error("Run failed: %s", e)
        print(txt.render_error(None, str(e)), file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception("Unexpected error while running %s", args.config)
        print(txt.render_error(None, f"{type(e).__name__}: {e}"), file=sys.stderr)
        return EXIT_FAILURE

    print(txt.render_run_summary(record))
    return EXIT_OK if record.passed else EXIT_FAILURE


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.log_level)
    return asyncio.run(_run(args))


if __name__ == "__main__":
    raise SystemExit(main())

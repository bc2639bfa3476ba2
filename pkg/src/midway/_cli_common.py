"""Shared CLI helpers for the midway subcommands."""

from __future__ import annotations

import argparse
import json
import logging
import math
import resource
import sys
from dataclasses import replace
from typing import Any

from .config import (
    RunConfig,
    apply_overrides,
    get_preset,
    load_config,
    parse_pairs,
    validate_config,
)

PREFIX = "[midway]"


def command_prefix(command: str | None) -> str:
    return f"[midway:{command}]" if command else PREFIX


def add_usage_argument(parser: argparse.ArgumentParser) -> None:
    """Register ``--usage`` on *parser*."""
    parser.add_argument(
        "--usage",
        action="store_true",
        help="Print user/system time and peak RAM to stderr when the run finishes",
    )


def print_resource_usage(prefix: str, *, stream: object = None) -> None:
    """Print process CPU time and peak RSS for *prefix*."""
    if stream is None:
        stream = sys.stderr
    usage = resource.getrusage(resource.RUSAGE_SELF)
    print(
        f"{prefix} User time: {usage.ru_utime:.2f}s, "
        f"System time: {usage.ru_stime:.2f}s, "
        f"Max RAM: {usage.ru_maxrss / 1024:.1f} MB",
        file=stream,  # type: ignore[arg-type]
    )


def add_config_source_arguments(parser: argparse.ArgumentParser) -> None:
    """``--config`` and ``--preset``."""
    parser.add_argument("--config", metavar="PATH", help="key=value config file")
    parser.add_argument(
        "--preset",
        choices=("toy", "paper"),
        help="Base preset (default: the config file's preset= line, else toy)",
    )


def add_common_arguments(parser: argparse.ArgumentParser) -> None:
    """``--set``, ``--seed``, ``--out``, ``--verbose`` and ``--usage``."""
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        dest="overrides",
        help="Override one config key (repeatable), e.g. dynamics.num_motion_tokens=10",
    )
    parser.add_argument("--seed", type=int, help="Run seed (overrides config)")
    parser.add_argument("--out", metavar="DIR", help="Output directory (overrides config)")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    add_usage_argument(parser)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Preset, then config file, then ``--set`` pairs, then ``--seed`` / ``--out``."""
    base = get_preset(args.preset) if getattr(args, "preset", None) else None
    if getattr(args, "config", None):
        cfg = load_config(args.config, base=base)
    else:
        cfg = base if base is not None else get_preset("toy")
    return apply_arguments(cfg, args)


def apply_arguments(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    """Apply ``--set``, ``--seed`` and ``--out`` to *cfg* and validate."""
    if args.overrides:
        cfg = apply_overrides(cfg, parse_pairs(args.overrides))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    return validate_config(cfg)


def setup_logging(command: str, verbose: bool) -> None:
    """One stderr handler for the package logger, prefixed per subcommand."""
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(f"{command_prefix(command)} %(message)s"))
    root = logging.getLogger("midway")
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False


def _json_safe(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {str(k): _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def emit_result(command: str, status: str, **fields: Any) -> dict:
    """Final machine-readable stdout line."""
    record = {"command": command, "status": status, **fields}
    print(json.dumps(_json_safe(record), sort_keys=True), flush=True)
    return record


def item_progress(command: str):
    """Progress callback printing one ``ok`` / ``err`` line per item."""
    prefix = command_prefix(command)

    def report(source: str, record: dict) -> None:
        elapsed = record.get("elapsed_ms", 0)
        if "error" in record:
            category = record.get("error_category", "unknown")
            detail = record.get("error", "")
            print(f"{prefix} err {category} {source} ({elapsed} ms): {detail}", file=sys.stderr)
        else:
            print(f"{prefix} ok {source} ({elapsed} ms)", file=sys.stderr)

    return report

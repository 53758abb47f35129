"""Command-line front end: ``neurosens <pipeline> --config spec.yaml``.

Exit codes: 0 success, 2 config error, 3 runtime failure. Failures print a
one-line JSON diagnostic on stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from .pipeline import PIPELINES, ConfigError, load_spec, run_pipeline

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _diagnose("config", "UsageError", message)
        sys.exit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="neurosens", description="Neuron-sensitivity experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in PIPELINES:
        p = sub.add_parser(name, help=f"run the {name} pipeline")
        p.add_argument("--config", required=True, help="YAML experiment spec")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="root seed (overrides seed)")
        p.add_argument("--workers", type=int, default=1, help="worker threads; never changes outputs")
        if name in ("figure", "table"):
            p.add_argument("name", nargs="?", help=f"which {name} (overrides {name}.name)")
    return parser


def _diagnose(kind: str, error: str, message: str) -> None:
    print(json.dumps({"status": "error", "kind": kind, "error": error, "message": message}), file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        spec = load_spec(args.config, seed=args.seed, output_dir=args.out)
        if spec.pipeline != args.command:
            raise ConfigError(f"config describes pipeline {spec.pipeline!r}, not {args.command!r}")
        name = getattr(args, "name", None)
        if name is not None:
            try:
                section = replace(getattr(spec, args.command), name=name)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
            spec = replace(spec, **{args.command: section})
    except ConfigError as exc:
        _diagnose("config", type(exc).__name__, str(exc))
        return EXIT_CONFIG
    try:
        manifest = run_pipeline(spec, workers=args.workers)
    except ConfigError as exc:
        _diagnose("config", type(exc).__name__, str(exc))
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 3
        _diagnose("runtime", type(exc).__name__, str(exc))
        return EXIT_RUNTIME
    print(json.dumps({"status": "ok", "output_dir": spec.output_dir, "outputs": sorted(manifest["outputs"])}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

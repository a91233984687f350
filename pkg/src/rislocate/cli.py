"""Command line interface.

Every subcommand loads the JSON config (or the built-in defaults mirroring the
reference simulation table), runs one harness entry point and writes the
result to stdout or ``--out``. Exit codes: 0 success, 1 configuration error
(including unknown flags and a missing config file), 2 runtime failure.
Progress goes to stderr; stdout carries only the result payload.
"""

from __future__ import annotations

import argparse
import io
import json
import os
import sys
import tempfile
from pathlib import Path

from . import __version__
from .config import ConfigDocument, LoadedConfig, load_config, parse_config
from .exceptions import ConfigError, RisLocateError
from . import harness

_TABLE1_NOTE = """\
Defaults mirror the reference simulation table: wavelength 1 cm, element
spacing 0.25 cm, 17x17 elements, 128 subcarriers at 120 kHz, 100 symbols,
noise PSD -174 dBm/Hz, noise figure 5 dB, IFFT size 4096, TX at the origin,
receivers at [-3, 5, -1] and [3, -3, 0] m, surface at [4, 1, -4] m with a 30
degree orientation, transmit power 20 dBm."""


class _Parser(argparse.ArgumentParser):
    """argparse variant whose usage errors exit with code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(1)


def build_parser() -> _Parser:
    parser = _Parser(prog="rislocate", description=__doc__, epilog=_TABLE1_NOTE,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"rislocate {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config path (defaults to the built-in reference values)")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--trials", type=int, help="override the Monte Carlo trial count")
        p.add_argument("--threads", type=int, help="worker threads for Monte Carlo trials")
        p.add_argument("--out", help="output file path (stdout when omitted)")
        p.add_argument("--format", choices=("csv", "json"), default=None,
                       help="output format (default json for simulate/crb, csv for sweeps)")

    for name, desc in (
        ("simulate", "draw one set of noisy observations"),
        ("crb", "bounds at the configured scenario and state"),
        ("sweep-power", "Monte Carlo RMSE versus bounds over transmit power"),
        ("sweep-bandwidth", "Monte Carlo RMSE versus bounds over subcarrier count"),
        ("compare-toa", "full-model versus delay-only accuracy over receiver count"),
        ("contour", "position/orientation bound map over an xy grid"),
    ):
        common(sub.add_parser(name, help=desc, description=desc))

    serve = sub.add_parser("serve", help="run the HTTP service", description="run the HTTP service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    return parser


def _apply_overrides(loaded: LoadedConfig, args) -> LoadedConfig:
    doc: ConfigDocument = loaded.document.model_copy(deep=True)
    if args.seed is not None:
        doc.experiment.master_seed = args.seed
    if args.trials is not None:
        doc.experiment.trials = args.trials
    if args.threads is not None:
        doc.experiment.threads = args.threads
    return parse_config(doc.model_dump())


def _simulate_csv(payload: dict) -> str:
    buf = io.StringIO()
    buf.write("rx,subcarrier,symbol,re,im\n")
    for m, matrix in enumerate(payload["observations"]):
        for n, row in enumerate(matrix):
            for t, (re, im) in enumerate(row):
                buf.write(f"{m},{n},{t},{re!r},{im!r}\n")
    return buf.getvalue()


def _dict_csv(data: dict) -> str:
    flat = {}
    for key, val in data.items():
        if isinstance(val, list):
            for i, item in enumerate(val):
                flat[f"{key}_rx{i}"] = item
        else:
            flat[key] = val
    head = ",".join(flat)
    body = ",".join(repr(v) if isinstance(v, float) else str(v) for v in flat.values())
    return f"{head}\n{body}\n"


def _run_command(args, loaded: LoadedConfig) -> str:
    fmt = args.format or ("csv" if args.command in ("sweep-power", "sweep-bandwidth", "compare-toa", "contour") else "json")
    if args.command == "simulate":
        payload = harness.simulate_payload(loaded)  # --seed already folded into the config
        return _simulate_csv(payload) if fmt == "csv" else json.dumps(payload) + "\n"
    if args.command == "crb":
        report = harness.crb_report(loaded)
        return _dict_csv(report) if fmt == "csv" else json.dumps(report, indent=2) + "\n"

    exp = loaded.experiment
    print(
        f"rislocate {args.command}: {exp.trials} trials/point, seed {exp.master_seed}, "
        f"{exp.threads} thread(s)",
        file=sys.stderr,
    )
    if args.command == "sweep-power":
        table = harness.run_monte_carlo(loaded)
    elif args.command == "sweep-bandwidth":
        table = harness.sweep_bandwidth(loaded)
    elif args.command == "compare-toa":
        table = harness.compare_toa_only(loaded)
    elif args.command == "contour":
        table = harness.crb_contour(loaded)
    else:  # pragma: no cover - argparse restricts the choices
        raise ConfigError(f"unknown command {args.command}")
    return table.to_csv() if fmt == "csv" else table.to_json()


def _write_output(text: str, out_path: str | None) -> None:
    if out_path is None:
        sys.stdout.write(text)
        return
    # write-then-rename so a failed run never leaves a partial file
    target = Path(out_path)
    fd, tmp = tempfile.mkstemp(dir=target.parent or Path("."), prefix=target.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "serve":
        import uvicorn

        from .service import create_app

        uvicorn.run(create_app(), host=args.host, port=args.port)
        return 0

    try:
        loaded = _apply_overrides(load_config(args.config), args)
    except ConfigError as exc:
        print(f"rislocate: config error: {exc}", file=sys.stderr)
        return 1

    try:
        text = _run_command(args, loaded)
    except ConfigError as exc:
        print(f"rislocate: config error: {exc}", file=sys.stderr)
        return 1
    except (RisLocateError, OSError) as exc:
        print(f"rislocate: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2

    try:
        _write_output(text, args.out)
    except OSError as exc:
        print(f"rislocate: cannot write output: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

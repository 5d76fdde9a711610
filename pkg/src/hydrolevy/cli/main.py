"""``hydrolevy`` command line entry point.

    hydrolevy SUBCOMMAND --config PATH [--seed N] [--workers N] [--out DIR]
    hydrolevy plotdata REPORT.json ... [--out DIR]

Exit codes: 0 success, 2 configuration error (nothing written), 3 blow-up,
4 an estimate check failed.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from importlib import resources
from pathlib import Path

from .. import solver
from . import commands, io, plotdata
from .config import Built, ConfigError, load_config

log = logging.getLogger("hydrolevy")

WORKERS_ENV = "HYDROLEVY_WORKERS"


def bundled_config(name: str = "sabra16.cfg") -> Path:
    """Path of a configuration shipped with the package."""
    return Path(str(resources.files("hydrolevy") / "configs" / name))


def resolve_workers(flag) -> int:
    """``--workers`` wins over ``HYDROLEVY_WORKERS``; the default is the logical core count."""
    if flag is not None:
        n = flag
    elif os.environ.get(WORKERS_ENV, "").strip():
        try:
            n = int(os.environ[WORKERS_ENV])
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer") from None
    else:
        n = os.cpu_count() or 1
    if n < 1:
        raise ConfigError("worker count must be at least 1")
    return n


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hydrolevy", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in commands.COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, type=Path)
        s.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        s.add_argument("--workers", type=int, default=None)
        s.add_argument("--out", type=Path, default=None, help="overrides output_dir")
    s = sub.add_parser("plotdata", help="long-format plot CSVs from report.json files")
    s.add_argument("reports", nargs="*", type=Path)
    s.add_argument("--out", type=Path, default=Path("plotdata"))
    return p


def run(command: str, config_path, seed=None, workers=None, out=None) -> tuple[int, Path | None]:
    """Run one subcommand; returns ``(exit_code, run_directory)``."""
    start = time.perf_counter()
    try:
        cfg = load_config(config_path)
        if seed is not None:
            if not 0 <= seed < 2**64:
                raise ConfigError("seed must be a 64-bit unsigned integer")
            cfg = cfg.model_copy(update=dict(seed=seed))
        n_workers = resolve_workers(workers)
        built = Built(cfg)
        prepare, body = commands.COMMANDS[command]
        prepare(built)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return commands.CONFIG_ERROR, None

    run_dir = io.new_run_dir(out if out is not None else cfg.output_dir, command)
    error = None
    try:
        outcome = body(built, cfg.seed, n_workers)
    except solver.BlowUpError as exc:
        outcome = commands.Outcome(blowups=1, report=dict(error=str(exc)))
        error = str(exc)
    files = {}
    for name, (header, rows) in outcome.tables.items():
        files[f"{name}.csv"] = io.write_csv(run_dir / f"{name}.csv", header, rows)
    report = dict(command=command, seed=cfg.seed, config_hash=cfg.digest(), checks=outcome.checks,
                  passed=outcome.passed, exit_code=outcome.exit_code, results=outcome.report,
                  plots={k: [list(r) for r in v] for k, v in outcome.plots.items()})
    files["report.json"] = io.write_json(run_dir / "report.json", report)
    io.write_json(run_dir / "config.json", cfg.model_dump(mode="json"))
    manifest = dict(command=command, config_path=str(config_path), config_hash=cfg.digest(), seed=cfg.seed,
                    workers=n_workers, versions=io.versions(), wall_time_s=time.perf_counter() - start,
                    exit_code=outcome.exit_code, error=error,
                    files={k: io.file_sha256(v) for k, v in sorted(files.items())})
    io.write_json(run_dir / "manifest.json", manifest)
    for name, ok in outcome.checks.items():
        status = "skipped" if ok is None else ("pass" if ok else "FAIL")
        print(f"{command}: {name}: {status}")
    print(f"{command}: output in {run_dir}")
    return outcome.exit_code, run_dir


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = _parser().parse_args(argv)
    if args.command == "plotdata":
        try:
            written = plotdata.emit_plotdata(args.reports, args.out)
        except (OSError, ValueError) as exc:
            log.error("plotdata: %s", exc)
            return commands.CONFIG_ERROR
        for p in written:
            print(p)
        return 0
    code, _ = run(args.command, args.config, args.seed, args.workers, args.out)
    return code


if __name__ == "__main__":
    sys.exit(main())

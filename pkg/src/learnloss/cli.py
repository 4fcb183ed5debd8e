"""Command-line entry point: ``learnloss run | report | validate``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from learnloss import __version__
from learnloss.alsim import run_experiment, write_result
from learnloss.config import ConfigError, ExperimentConfig, parse
from learnloss.report import ReportError, cmd_report

log = logging.getLogger("learnloss")

EXIT_OK, EXIT_FAILURE, EXIT_INVALID = 0, 1, 2


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def read_config(path: str | Path) -> tuple[ExperimentConfig, list[str]]:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        return ExperimentConfig(), [f"cannot read {path}: {exc.strerror}"]
    except json.JSONDecodeError as exc:
        return ExperimentConfig(), [f"{path} is not valid JSON: {exc}"]
    return parse(raw)


def default_run_id(cfg: ExperimentConfig) -> str:
    digest = hashlib.sha256(cfg.to_json().encode()).hexdigest()[:10]
    return f"run-{digest}"


def _write_manifest(run_dir: Path, manifest: dict) -> None:
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def cmd_run(config_path: str | Path, jobs: int = 1, out: str | Path | None = None) -> Path:
    cfg, errors = read_config(config_path)
    if errors:
        raise ConfigError(errors)
    run_dir = Path(out) if out else Path(cfg.output_dir) / (cfg.run_id or default_run_id(cfg))
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(cfg.to_json() + "\n")
    manifest = {
        "config": cfg.to_dict(),
        "task": cfg.dataset.task,
        "version": __version__,
        "started": _now(),
        "ended": None,
        "status": "running",
        "files": {},
    }
    _write_manifest(run_dir, manifest)
    t0 = time.perf_counter()
    result = run_experiment(cfg, jobs=jobs)
    manifest["files"] = write_result(run_dir, result)
    manifest["files"]["summary"] = ["summary.csv"]
    manifest["timings"] = {
        s: [[rec.seconds for rec in tr.records] for tr in result.trials[s]]
        for s in result.strategies
    }
    manifest["wall_seconds"] = time.perf_counter() - t0
    manifest["ended"] = _now()
    manifest["status"] = "complete"
    _write_manifest(run_dir, manifest)
    return run_dir


def cmd_validate(config_path: str | Path) -> list[str]:
    return read_config(config_path)[1]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="learnloss", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an active-learning experiment")
    run.add_argument("--config", required=True)
    run.add_argument("--jobs", type=int, default=1, help="trials to run in parallel")
    run.add_argument("--out", help="run directory (default: <output_dir>/<run_id>)")

    rep = sub.add_parser("report", help="write summary CSV and SVG plots for a run")
    rep.add_argument("run_dir")

    val = sub.add_parser("validate", help="list every violated config constraint")
    val.add_argument("--config", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.command == "validate":
        problems = cmd_validate(args.config)
        for p in problems:
            print(p)
        return EXIT_INVALID if problems else EXIT_OK

    if args.command == "run":
        if args.jobs < 1:
            print("--jobs must be at least 1", file=sys.stderr)
            return EXIT_INVALID
        try:
            run_dir = cmd_run(args.config, jobs=args.jobs, out=args.out)
        except ConfigError as exc:
            for v in exc.violations:
                print(f"invalid config: {v}", file=sys.stderr)
            return EXIT_INVALID
        except Exception as exc:  # noqa: BLE001 - any failure maps to exit 1
            log.exception("run failed")
            print(f"run failed: {exc}", file=sys.stderr)
            return EXIT_FAILURE
        print(run_dir)
        return EXIT_OK

    try:
        for p in cmd_report(args.run_dir):
            print(p)
    except (ReportError, OSError, KeyError, ValueError) as exc:
        print(f"report failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

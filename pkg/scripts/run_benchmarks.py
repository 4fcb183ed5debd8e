"""Run config presets end to end and print the final-stage numbers.

    python3 scripts/run_benchmarks.py configs/gmm_benchmark.json configs/sine_hetero.json
"""

import argparse
import json
from pathlib import Path

from learnloss.alsim import read_summary_csv
from learnloss.cli import cmd_run
from learnloss.report import cmd_report


def final_rows(run_dir: Path) -> list[dict]:
    rows = read_summary_csv(run_dir / "summary.csv")
    last = max(r["stage"] for r in rows)
    return [r for r in rows if r["stage"] == last]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("configs", nargs="+")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="runs")
    args = ap.parse_args()
    for cfg in args.configs:
        run_dir = cmd_run(cfg, jobs=args.jobs, out=Path(args.out) / Path(cfg).stem)
        cmd_report(run_dir)
        manifest = json.loads((run_dir / "manifest.json").read_text())
        print(f"{cfg}: {run_dir} ({manifest['wall_seconds']:.0f}s)")
        for r in final_rows(run_dir):
            print(f"  {r['strategy']:<18} {r['metric']:<17} {r['mean']:.4f} +- {r['std']:.4f}")


if __name__ == "__main__":
    main()

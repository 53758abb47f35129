"""Run every experiment config through the CLI, one output directory per config.

    python3 scripts/run_all.py --out runs --seeds 0 1 2 --workers 2
"""
import argparse
import subprocess
import sys
from pathlib import Path

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--only", nargs="*", help="config stems to run (default: all)")
    args = ap.parse_args()

    failed = []
    for cfg in sorted(CONFIGS.glob("*.yaml")):
        if args.only and cfg.stem not in args.only:
            continue
        pipeline = cfg.stem.split("_")[0]
        pipeline = {"fig1": "figure", "fig2": "figure", "fig3": "figure", "table1": "table"}.get(pipeline, pipeline)
        for seed in args.seeds:
            out = Path(args.out) / cfg.stem / f"seed{seed}"
            cmd = [sys.executable, "-m", "neurosens.cli", pipeline, "--config", str(cfg),
                   "--out", str(out), "--seed", str(seed), "--workers", str(args.workers)]
            code = subprocess.run(cmd).returncode
            print(f"{cfg.stem} seed {seed}: exit {code}", flush=True)
            if code:
                failed.append(f"{cfg.stem}:{seed}")
    if failed:
        print("failed:", ", ".join(failed))
    return 3 if failed else 0


if __name__ == "__main__":
    raise SystemExit(main())

"""Planted implicit feedback with 40% positive noise: Normal vs DeCA vs DeCA(p) on MF."""
import argparse
import sys
from pathlib import Path

from deca.experiment import compare_runs, comparison_csv, load_config, run_experiment

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/desk_ranking")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args(argv)
    paths = run_experiment(load_config(ROOT / "configs" / "planted_ranking.json"), args.out,
                           workers=args.workers)
    for challenger in ("deca", "deca_p"):
        print(f"# normal vs {challenger}")
        sys.stdout.write(comparison_csv(compare_runs(paths, "normal", challenger), "normal", challenger))


if __name__ == "__main__":
    main()

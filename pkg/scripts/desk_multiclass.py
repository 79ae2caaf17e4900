"""Blobs denoising at rho = 0.4 and rho = 0: Normal vs DeCA(p), median clean-test accuracy."""
import argparse
import sys
from pathlib import Path

from deca.experiment import ExperimentConfig, compare_runs, comparison_csv, load_config, run_experiment

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/desk_multiclass")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args(argv)
    base = load_config(ROOT / "configs" / "blobs_denoise.json").to_dict()
    for rho in (0.4, 0.0):
        cfg = ExperimentConfig.from_dict({**base, "dataset": {**base["dataset"], "noise_ratio": rho}})
        paths = run_experiment(cfg, Path(args.out) / f"rho_{rho}", workers=args.workers)
        print(f"# noise ratio {rho}")
        sys.stdout.write(comparison_csv(compare_runs(paths, "normal", "deca_p"), "normal", "deca_p"))


if __name__ == "__main__":
    main()

"""Noise-ratio sweep on blobs; prints the DeCA(p) - Normal accuracy gap per ratio."""
import argparse
import csv
from pathlib import Path

from deca.experiment import load_config, run_experiment

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/noise_sweep")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args(argv)
    run_experiment(load_config(ROOT / "configs" / "blobs_noise_sweep.json"), args.out,
                   workers=args.workers)
    with (Path(args.out) / "plot_accuracy.csv").open() as fh:
        acc = {(r["x"], r["series"]): float(r["y"]) for r in csv.DictReader(fh)}
    print("noise_ratio,normal,deca_p,gap")
    for rho in sorted({k[0] for k in acc}, key=float):
        n, d = acc[(rho, "normal")], acc[(rho, "deca_p")]
        print(f"{rho},{n:.4f},{d:.4f},{d - n:+.4f}")


if __name__ == "__main__":
    main()

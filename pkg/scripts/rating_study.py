"""Mean real-positive probability per rating bucket for DeCA(p) on planted rated data."""
import argparse
from pathlib import Path

from deca.experiment import load_config, rating_study

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/rating_study")
    args = ap.parse_args(argv)
    for r in rating_study(load_config(ROOT / "configs" / "planted_deca_p.json"), args.out):
        means = " ".join(f"{k}:{v:.3f}" for k, v in sorted(r["means"].items()))
        print(f"seed {r['seed']}: {means} spearman {r['spearman']:.3f}")


if __name__ == "__main__":
    main()

"""Two normally trained MF models per seed: prediction disagreement on clean vs noisy positives."""
import argparse
from pathlib import Path

from deca.experiment import diagnose_disagreement, load_config

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/motivation")
    args = ap.parse_args(argv)
    rows = diagnose_disagreement(load_config(ROOT / "configs" / "planted_motivation.json"), args.out)
    hits = 0
    for r in rows:
        hits += r["mean_diff_noisy"] > r["mean_diff_clean"]
        print(f"seed {r['seed']}: clean {r['mean_diff_clean']:.4f} noisy {r['mean_diff_noisy']:.4f}")
    print(f"noisy > clean in {hits}/{len(rows)} seeds")


if __name__ == "__main__":
    main()

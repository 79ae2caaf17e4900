"""Command-line entry point: ``deca <verb> --config cfg.json --out dir``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import DecaError
from .experiment import (comparison_csv, compare_runs, diagnose_disagreement, expand_grid,
                         generate_data, load_config, rating_study, run_experiment)

EXIT_USAGE = 2
EXIT_FAILURE = 1


def _common(p: argparse.ArgumentParser, config_required: bool = True):
    p.add_argument("--config", required=config_required, help="experiment config JSON")
    p.add_argument("--out", default=None, help="output directory (default: config 'out')")
    p.add_argument("--seed-override", type=int, default=None,
                   help="run this single seed instead of the config's seed list")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deca", description="Denoising experiments on noisy labels.")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-data", help="write the configured dataset(s) as JSON")
    _common(p)

    p = sub.add_parser("train", help="run one trainer over the seed list (no grid axes)")
    _common(p)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("sweep", help="expand grid axes and run every cell for every seed")
    _common(p)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("compare", help="median-over-seeds comparison of two methods")
    p.add_argument("reports", nargs="+", help="report JSON files or directories")
    p.add_argument("--baseline", required=True)
    p.add_argument("--challenger", required=True)
    p.add_argument("--out", default=None, help="write comparison.csv/json here")

    p = sub.add_parser("diagnose-disagreement",
                       help="prediction differences of two seeds on clean vs noisy examples")
    _common(p)

    p = sub.add_parser("rating-study", help="real-positive probability per rating bucket")
    _common(p)
    return parser


def _report_paths(items) -> list[Path]:
    paths = []
    for it in map(Path, items):
        if it.is_dir():
            paths.extend(sorted(q for q in it.rglob("*.json")
                                if q.name != "manifest.json" and not q.name.endswith("_f.json")
                                and q.name not in ("disagreement.json", "rating_study.json",
                                                   "comparison.json")))
        else:
            paths.append(it)
    return paths


def _out(args, config) -> Path:
    return Path(args.out if args.out is not None else config.out)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "workers", 1) < 1:
        parser.error("--workers must be at least 1")
    try:
        if args.verb == "compare":
            rows = compare_runs(_report_paths(args.reports), args.baseline, args.challenger)
            text = comparison_csv(rows, args.baseline, args.challenger)
            sys.stdout.write(text)
            if args.out:
                out = Path(args.out)
                out.mkdir(parents=True, exist_ok=True)
                (out / "comparison.csv").write_text(text)
                (out / "comparison.json").write_text(json.dumps(
                    [r.__dict__ for r in rows], indent=1))
            return 0

        try:
            config = load_config(args.config)
            cells = expand_grid(config)
        except DecaError as e:
            print(f"deca: invalid config: {e}", file=sys.stderr)
            return EXIT_USAGE
        out = _out(args, config)

        if args.verb == "gen-data":
            for p in generate_data(config, out, args.seed_override):
                print(p)
        elif args.verb in ("train", "sweep"):
            if args.verb == "train" and len(cells) > 1:
                print("deca: config has grid axes; use 'sweep'", file=sys.stderr)
                return EXIT_USAGE
            for p in run_experiment(config, out, args.workers, args.seed_override):
                print(p)
        elif args.verb == "diagnose-disagreement":
            for r in diagnose_disagreement(config, out, args.seed_override):
                print(f"seed {r['seed']}: diff clean {r['mean_diff_clean']:.4f} "
                      f"noisy {r['mean_diff_noisy']:.4f}")
        elif args.verb == "rating-study":
            for r in rating_study(config, out, args.seed_override):
                means = " ".join(f"{k}:{v:.4f}" for k, v in sorted(r["means"].items()))
                print(f"seed {r['seed']}: {means} spearman {r['spearman']:.3f}")
    except DecaError as e:
        print(f"deca: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILURE
    return 0


if __name__ == "__main__":
    sys.exit(main())

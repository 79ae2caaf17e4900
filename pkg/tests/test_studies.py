"""End-to-end study shapes that are asserted by direction only."""
import csv
from pathlib import Path

from scipy.stats import spearmanr

from deca.experiment import load_config, run_experiment

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_noise_sweep_gap_grows_with_noise(tmp_path):
    run_experiment(load_config(CONFIGS / "blobs_noise_sweep.json"), tmp_path)
    with (tmp_path / "plot_accuracy.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    acc = {(float(r["x"]), r["series"]): float(r["y"]) for r in rows}
    rhos = sorted({k[0] for k in acc})
    gap = [acc[(r, "deca_p")] - acc[(r, "normal")] for r in rhos]
    assert all(g > 0 for g in gap)
    assert gap[-1] > gap[0]
    assert spearmanr(rhos, gap).statistic > 0

import pytest

from drive_cbm import experiment
from drive_cbm.config import ExperimentConfig
from drive_cbm.evaluation import Cell, ResultTable

CFG = {
    "data": {"n_samples": 40, "d": 6, "l": 3, "m": 5, "T": 2, "t": 2, "seed": 9},
    "model": {"hidden": 4},
    "train": {"base_epochs": 1, "drive_epochs": 1, "learning_rate": 0.01, "batch_size": 8,
              "pgd": {"kind": "PGD", "rho": 0.08, "alpha": 0.02, "steps": 1}, "seed": 9},
    "sweep": [{"kind": "P1", "sigma": 0.05}],
}


def table(base_top, drive_top, base_mae, drive_mae):
    t = ResultTable(2)
    t.add("DCG", "No", Cell(1.0, 1.0, None))
    t.add("DRIVE", "No", Cell(1.0, 1.0, None))
    t.add("DCG", "P1(0.05)", Cell(base_mae, base_mae, base_top))
    t.add("DRIVE", "P1(0.05)", Cell(drive_mae, drive_mae, drive_top))
    return t


def test_with_seed_sets_both_seeds():
    cfg = experiment.with_seed(ExperimentConfig.from_dict(CFG), 3)
    assert cfg.data.seed == 3 and cfg.train.seed == 3
    assert cfg.data.n_samples == 40


def test_paired_gains_are_medians_of_differences():
    tables = [table(0.5, 0.9, 2.0, 1.0), table(0.8, 0.7, 1.0, 3.0), table(0.6, 0.7, 1.0, 0.5)]
    g = experiment.paired_gains(tables, "P1(0.05)")
    # per-seed top-k deltas 0.4, -0.1, 0.1 and MAE deltas 1.0, -2.0, 0.5
    assert g["top_k_gain"] == pytest.approx(0.1)
    assert g["ad_mae_gain"] == pytest.approx(0.5)
    med = experiment.median_table(tables)
    assert med[("DRIVE", "P1(0.05)")]["top_k"] == pytest.approx(0.7)
    assert "top_k" not in med[("DCG", "No")]
    assert experiment.perturbed_labels(tables[0]) == ["P1(0.05)"]


def test_run_seed_is_reproducible():
    cfg = ExperimentConfig.from_dict(CFG)
    a, b = experiment.run_seed(cfg, 1), experiment.run_seed(cfg, 1)
    assert a.table.rows == b.table.rows
    assert a.drive.digest() == b.drive.digest() != a.base.digest()
    rows = experiment.ablation_for(cfg, 1, a.dataset, a.base)
    assert len(rows) == 4 and rows[0].label == "A"

"""Multi-seed runs of the whole pipeline, in memory (used by scripts/ and the acceptance suite)."""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import model as cbm
from . import synthdata
from .config import ExperimentConfig
from .evaluation import ResultTable, run_sweep
from .training import AblationRow, run_ablation, train_base, train_drive

log = logging.getLogger(__name__)


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Same experiment, with the data and training seeds both set to ``seed``."""
    return dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, seed=seed),
                               train=dataclasses.replace(cfg.train, seed=seed))


@dataclass
class SeedRun:
    seed: int
    dataset: synthdata.SynthDataset
    base: cbm.CbmParams
    drive: cbm.CbmParams
    table: ResultTable
    seconds: float


def run_seed(cfg: ExperimentConfig, seed: int) -> SeedRun:
    cfg = with_seed(cfg, seed)
    t0 = time.perf_counter()
    ds = synthdata.generate(cfg.data)
    base, _ = train_base(ds.train, ds.val, ds.concept_space, cfg.train, cfg.dims)
    drive, _ = train_drive(base, ds.train, ds.val, ds.concept_space, cfg.train)
    table = run_sweep({"DCG": base, "DRIVE": drive}, ds.concept_space, ds.test, cfg.sweep, cfg.topk)
    run = SeedRun(seed, ds, base, drive, table, time.perf_counter() - t0)
    log.info("seed %d done in %.1fs", seed, run.seconds)
    return run


def ablation_for(cfg: ExperimentConfig, seed: int, ds: synthdata.SynthDataset,
                 base: cbm.CbmParams) -> list[AblationRow]:
    cfg = with_seed(cfg, seed)
    return run_ablation(base, ds.train, ds.val, ds.test, ds.concept_space, cfg.train, k=cfg.topk)


def median_table(tables: Sequence[ResultTable]) -> dict[tuple[str, str], dict[str, float]]:
    """Per (model, perturbation) cell, the median over seeds of each numeric column."""
    out: dict[tuple[str, str], dict[str, float]] = {}
    for row in tables[0].rows:
        key = (row["model"], row["perturbation"])
        cells = [t.get(*key) for t in tables]
        out[key] = {
            col: float(np.median([c[col] for c in cells]))
            for col in ("a_mae", "d_mae", "ad_mae", "top_k")
            if all(c[col] is not None for c in cells)
        }
    return out


def paired_gains(tables: Sequence[ResultTable], label: str) -> dict[str, float]:
    """Median over seeds of the per-seed DRIVE-minus-DCG top-k change and DCG-minus-DRIVE MAE change.

    Both are oriented so that positive favours the fine-tuned model.
    """
    top = [t.get("DRIVE", label)["top_k"] - t.get("DCG", label)["top_k"] for t in tables]
    err = [t.get("DCG", label)["ad_mae"] - t.get("DRIVE", label)["ad_mae"] for t in tables]
    return {"top_k_gain": float(np.median(top)), "ad_mae_gain": float(np.median(err))}


def perturbed_labels(table: ResultTable) -> list[str]:
    return [lab for lab in table.labels if lab != "No"]

"""Perturbation sweeps over a pair of models, laid out like the comparison tables."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import model as cbm
from .metrics import mae, top_k_overlap_rows
from .perturbations import PerturbationSpec, perturbed_view

TABLE_COLUMNS = ("model", "perturbation", "a_mae", "d_mae", "ad_mae", "top_k", "status")
MODELS = ("DCG", "DRIVE")


@dataclass
class Cell:
    a_mae: float
    d_mae: float
    top_k: float | None

    @property
    def ad_mae(self) -> float:
        """Mean of the per-target errors (equals ``a_mae`` for single-target models)."""
        return self.a_mae if math.isnan(self.d_mae) else 0.5 * (self.a_mae + self.d_mae)


def evaluate_model(params: cbm.CbmParams, space: cbm.ConceptSpace, samples: Sequence[cbm.Sample],
                   spec: PerturbationSpec | None, k: int) -> Cell:
    """MAE under ``spec`` and the top-k overlap between clean and perturbed concept scores."""
    samples = list(samples)
    targets = cbm.stack_targets(samples)
    if spec is None:
        err = mae(cbm.batch_predict(params, space, samples), targets)
        return Cell(float(err[0]), float(err[1]) if err.size > 1 else math.nan, None)
    clean = cbm.batch_scores(params, space, samples)
    view = perturbed_view(params, space, samples, spec, k=k)
    err = mae(view.preds, targets)
    overlap = float(top_k_overlap_rows(clean, view.scores, k).mean())
    return Cell(float(err[0]), float(err[1]) if err.size > 1 else math.nan, overlap)


@dataclass
class ResultTable:
    k: int
    rows: list[dict] = field(default_factory=list)

    def add(self, model: str, label: str, cell: Cell | None, error: str | None = None) -> None:
        if cell is None:
            self.rows.append({"model": model, "perturbation": label, "a_mae": None, "d_mae": None,
                              "ad_mae": None, "top_k": None, "status": f"failed: {error}"})
            return
        self.rows.append({
            "model": model,
            "perturbation": label,
            "a_mae": cell.a_mae,
            "d_mae": None if math.isnan(cell.d_mae) else cell.d_mae,
            "ad_mae": cell.ad_mae,
            "top_k": cell.top_k,
            "status": "ok",
        })

    def get(self, model: str, label: str) -> dict:
        for r in self.rows:
            if r["model"] == model and r["perturbation"] == label:
                return r
        raise KeyError((model, label))

    @property
    def labels(self) -> list[str]:
        seen: list[str] = []
        for r in self.rows:
            if r["perturbation"] not in seen:
                seen.append(r["perturbation"])
        return seen

    def to_dict(self) -> dict:
        return {"columns": list(TABLE_COLUMNS), "k": self.k, "rows": self.rows}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for r in self.rows:
            w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                        for c in TABLE_COLUMNS])
        return buf.getvalue()


def run_sweep(models: dict[str, cbm.CbmParams], space: cbm.ConceptSpace, samples: Sequence[cbm.Sample],
              sweep: Sequence[PerturbationSpec], k: int) -> ResultTable:
    """Unperturbed row first, then one row per model for each sweep entry, in order.

    Both models see the same noise draws in each cell. A failing cell is
    recorded as failed rather than aborting the sweep.
    """
    table = ResultTable(k)
    for name, params in models.items():
        table.add(name, "No", evaluate_model(params, space, samples, None, k))
    for spec in sweep:
        for name, params in models.items():
            try:
                cell = evaluate_model(params, space, samples, spec, k)
            except (ValueError, ArithmeticError, RuntimeError) as exc:
                table.add(name, spec.label, None, str(exc))
                continue
            table.add(name, spec.label, cell)
    return table


def direction_summary(table: ResultTable) -> dict[str, dict[str, float]]:
    """Per perturbed label: DRIVE minus DCG differences in top-k and mean MAE."""
    out = {}
    for label in table.labels:
        if label == "No":
            continue
        a, b = table.get("DCG", label), table.get("DRIVE", label)
        if a["status"] != "ok" or b["status"] != "ok":
            continue
        out[label] = {
            "top_k_gain": float(np.subtract(b["top_k"], a["top_k"])),
            "ad_mae_gain": float(a["ad_mae"] - b["ad_mae"]),
        }
    return out

"""Top-k sets and overlaps, MAE, and the four-way dependability audit."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import ContractError


@dataclass(frozen=True)
class TopKSet:
    k: int
    indices: tuple[int, ...]  # ascending

    def __len__(self) -> int:
        return len(self.indices)

    def __contains__(self, i) -> bool:
        return i in self.indices

    def as_set(self) -> frozenset[int]:
        return frozenset(self.indices)


def default_k(m: int) -> int:
    return max(1, math.ceil(m / 5))


def _check_k(k: int, m: int) -> None:
    if not 1 <= k <= m:
        raise ContractError(f"k must lie in [1, {m}], got {k}")


def top_k_indices(x: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries along the last axis.

    Ties go to the lower index. Works row-wise on matrices; the column order of
    the result is by decreasing value.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_k(k, x.shape[-1])
    return np.argsort(-x, axis=-1, kind="stable")[..., :k]


def top_k_set(x, k: int) -> TopKSet:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    return TopKSet(k, tuple(sorted(int(i) for i in top_k_indices(x, k))))


def top_k_overlap(x, x2, k: int) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    x2 = np.asarray(x2, dtype=np.float64).reshape(-1)
    if x.shape != x2.shape:
        raise ContractError(f"length mismatch: {x.size} vs {x2.size}")
    a = top_k_set(x, k).as_set()
    b = top_k_set(x2, k).as_set()
    return len(a & b) / k


def top_k_overlap_rows(X: np.ndarray, X2: np.ndarray, k: int) -> np.ndarray:
    """Per-row top-k overlap of two equally shaped score matrices."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    X2 = np.atleast_2d(np.asarray(X2, dtype=np.float64))
    if X.shape != X2.shape:
        raise ContractError(f"shape mismatch: {X.shape} vs {X2.shape}")
    ia = top_k_indices(X, k)
    ib = top_k_indices(X2, k)
    rows = np.arange(X.shape[0])[:, None]
    ma = np.zeros(X.shape, dtype=bool)
    mb = np.zeros(X.shape, dtype=bool)
    ma[rows, ia] = True
    mb[rows, ib] = True
    return (ma & mb).sum(axis=1) / k


def mae(preds: Sequence, targets: Sequence) -> np.ndarray:
    """Per-target mean absolute error."""
    P = np.asarray(preds, dtype=np.float64)
    Y = np.asarray(targets, dtype=np.float64)
    if P.shape[0] == 0:
        raise ContractError("mae of an empty batch")
    if P.shape != Y.shape:
        raise ContractError(f"mae: shapes {P.shape} and {Y.shape} differ")
    if P.ndim == 1:
        P, Y = P[:, None], Y[:, None]
    return np.abs(P - Y).mean(axis=0)


def topk_l1_divergence(a: np.ndarray, b: np.ndarray, k: int) -> np.ndarray:
    """Two-sided top-k restricted L1 gap, ``(|a-b| on T_k(b) + |a-b| on T_k(a)) / 2k``, row-wise."""
    A = np.atleast_2d(np.asarray(a, dtype=np.float64))
    B = np.atleast_2d(np.asarray(b, dtype=np.float64))
    rows = np.arange(A.shape[0])[:, None]
    counts = np.zeros(A.shape)
    np.add.at(counts, (rows, top_k_indices(A, k)), 1.0)
    np.add.at(counts, (rows, top_k_indices(B, k)), 1.0)
    return (np.abs(A - B) * counts).sum(axis=1) / (2 * k)


# -- dependability audit --------------------------------------------------------

GAMMA_KEYS = ("gamma1", "gamma2", "gamma3", "gamma4")
VERDICT_KEYS = ("Ci", "Si", "Co", "So")


@dataclass
class Thresholds:
    gamma1: float = math.inf
    gamma2: float = math.inf
    gamma3: float = math.inf
    gamma4: float = math.inf

    def __post_init__(self):
        for key in GAMMA_KEYS:
            v = float(getattr(self, key))
            if math.isnan(v) or v < 0:
                raise ValueError(f"{key} threshold must be a non-negative number, got {v}")
            setattr(self, key, v)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return tuple(getattr(self, key) for key in GAMMA_KEYS)

    @classmethod
    def from_dict(cls, d: dict) -> "Thresholds":
        unknown = set(d) - set(GAMMA_KEYS)
        if unknown:
            raise ValueError(f"unknown threshold keys: {sorted(unknown)}")
        return cls(**{k: _parse_float(v) for k, v in d.items()})

    def to_dict(self) -> dict:
        return {k: _dump_float(getattr(self, k)) for k in GAMMA_KEYS}


def _parse_float(v) -> float:
    if isinstance(v, str):
        if v.strip().lower() in ("inf", "+inf", "infinity"):
            return math.inf
        raise ValueError(f"cannot parse threshold {v!r}")
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError(f"cannot parse threshold {v!r}")
    return float(v)


def _dump_float(v: float):
    return "inf" if math.isinf(v) else float(v)


@dataclass
class DependabilityReport:
    gamma: tuple[float, float, float, float]
    thresholds: Thresholds
    rho: tuple[float | None, float | None]
    overlap_ci: float
    overlap_si: float
    k: int
    perturbation: dict = field(default_factory=dict)
    n_samples: int = 0

    @property
    def verdicts(self) -> dict[str, bool]:
        return {name: bool(g <= t) for name, g, t in zip(VERDICT_KEYS, self.gamma, self.thresholds.as_tuple())}

    @property
    def dependable(self) -> bool:
        return all(self.verdicts.values())

    def to_dict(self) -> dict:
        return {
            "gamma": dict(zip(GAMMA_KEYS, map(float, self.gamma))),
            "thresholds": self.thresholds.to_dict(),
            "rho": {"rho1": self.rho[0], "rho2": self.rho[1]},
            "verdicts": self.verdicts,
            "dependable": self.dependable,
            "overlap_ci": float(self.overlap_ci),
            "overlap_si": float(self.overlap_si),
            "k": int(self.k),
            "perturbation": self.perturbation,
            "n_samples": int(self.n_samples),
        }


def dependability_report(base, drive, space, data, spec, thresholds: Thresholds, k: int) -> DependabilityReport:
    """Estimate the four divergences of a fine-tuned model against its base.

    ``gamma1``/``gamma2`` use the two-sided top-k L1 gap on concept scores
    (clean-vs-base and clean-vs-perturbed); ``gamma3``/``gamma4`` the mean
    absolute output difference. All are plain averages over ``data``.
    """
    from . import model as cbm
    from .perturbations import perturbed_view

    if base.concept_space_ref != drive.concept_space_ref:
        raise cbm.BindingError("base and drive models are bound to different concept spaces")
    samples = list(data)
    if not samples:
        raise ContractError("dependability_report needs at least one sample")
    g_base = cbm.batch_scores(base, space, samples)
    f_base = cbm.batch_predict(base, space, samples)
    g_drv = cbm.batch_scores(drive, space, samples)
    f_drv = cbm.batch_predict(drive, space, samples)
    view = perturbed_view(drive, space, samples, spec, k=k, reference=base)
    g_pert, f_pert = view.scores, view.preds

    gamma = (
        float(topk_l1_divergence(g_drv, g_base, k).mean()),
        float(topk_l1_divergence(g_drv, g_pert, k).mean()),
        float(np.abs(f_drv - f_base).mean(axis=1).mean()),
        float(np.abs(f_drv - f_pert).mean(axis=1).mean()),
    )
    return DependabilityReport(
        gamma=gamma,
        thresholds=thresholds,
        rho=(view.rho, view.rho),
        overlap_ci=float(top_k_overlap_rows(g_drv, g_base, k).mean()),
        overlap_si=float(top_k_overlap_rows(g_drv, g_pert, k).mean()),
        k=k,
        perturbation=spec.to_dict(),
        n_samples=len(samples),
    )

"""Training objectives: task RMSE plus the four dependability regularizers."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import model as cbm
from . import tensor as tc
from .metrics import top_k_indices
from .tensor import ContractError, Tensor

TERMS = ("ci", "si", "co", "so")
# ablation groups: A = task loss (always on), BC = interpretability pair, DE = output pair
GROUPS = {"A": (), "BC": ("ci", "si"), "DE": ("co", "so")}


@dataclass(frozen=True)
class LossWeights:
    lambdas: tuple[float, float, float, float] = (1e2, 1e2, 1e-2, 1e-2)
    mask: tuple[bool, bool, bool, bool] = (True, True, True, True)

    def __post_init__(self):
        lam = tuple(float(x) for x in self.lambdas)
        mask = tuple(bool(x) for x in self.mask)
        if len(lam) != 4 or len(mask) != 4:
            raise ValueError("need exactly four lambdas and four mask flags")
        if any(x < 0 for x in lam):
            raise ValueError(f"lambdas must be non-negative, got {lam}")
        object.__setattr__(self, "lambdas", lam)
        object.__setattr__(self, "mask", mask)

    def enabled(self) -> tuple[str, ...]:
        return tuple(name for name, on in zip(TERMS, self.mask) if on)

    def with_mask(self, mask) -> "LossWeights":
        return LossWeights(self.lambdas, tuple(mask))

    def to_dict(self) -> dict:
        return {"lambdas": list(self.lambdas), "mask": list(self.mask)}

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(tuple(d.get("lambdas", cls.lambdas)), tuple(d.get("mask", cls.mask)))


def parse_mask(text: str) -> tuple[bool, bool, bool, bool]:
    """``"A,BC"`` -> ``(True, True, False, False)``. ``A`` is implied."""
    groups = {g.strip().upper() for g in text.split(",") if g.strip()}
    unknown = groups - set(GROUPS)
    if unknown:
        raise ValueError(f"unknown mask groups {sorted(unknown)}; use A, BC, DE")
    on = {t for g in groups for t in GROUPS[g]}
    return tuple(t in on for t in TERMS)


def mask_label(mask) -> str:
    on = {t for t, flag in zip(TERMS, mask) if flag}
    parts = ["A"] + [g for g in ("BC", "DE") if set(GROUPS[g]) <= on]
    return ",".join(parts)


class FrozenReference:
    """Immutable snapshot of the base model used as the comparison target."""

    def __init__(self, params: cbm.CbmParams):
        self._flat = params.flatten().copy()
        self._flat.setflags(write=False)
        self.params = params.unflatten(self._flat, requires_grad=False)
        for t in self.params.parameters():
            t.data.setflags(write=False)
        self.digest = params.digest()

    @property
    def concept_space_ref(self) -> str:
        return self.params.concept_space_ref

    def outputs(self, space, x: np.ndarray, n_frames: int) -> tuple[np.ndarray, np.ndarray]:
        """Concept scores and predictions of the base model on a stacked batch."""
        g = cbm.concept_scores_batch(self.params, space, tc.constant(x), n_frames)
        return g.data, cbm.head(self.params, g).data

    def verify(self) -> None:
        if self.params.digest() != self.digest:
            raise RuntimeError("frozen reference was modified")


# -- individual terms ---------------------------------------------------------

def _as_matrix(rows) -> Tensor:
    if isinstance(rows, Tensor):
        return rows if rows.data.ndim == 2 else tc.reshape(rows, (1, rows.size))
    rows = list(rows)
    if not rows:
        raise ContractError("empty batch")
    if all(isinstance(r, Tensor) for r in rows):
        return tc.concat([tc.reshape(r, (1, r.size)) for r in rows], axis=0)
    return tc.constant(np.atleast_2d(np.asarray(rows, dtype=np.float64)))


def rmse_loss(preds, targets) -> Tensor:
    """``sqrt(sum_i ||pred_i - target_i||^2 / N)`` over a batch of N rows."""
    P = _as_matrix(preds)
    Y = _as_matrix(targets)
    if P.shape[0] == 0:
        raise ContractError("rmse_loss of an empty batch")
    if P.shape != Y.shape:
        raise ContractError(f"rmse_loss: shapes {P.shape} and {Y.shape} differ")
    r = tc.sub(P, Y)
    return tc.sqrt(tc.scalar_mul(tc.sum(tc.elementwise_mul(r, r)), 1.0 / P.shape[0]))


def topk_l1_rows(a: Tensor, b: Tensor, k: int) -> Tensor:
    """Row-wise two-sided top-k restricted L1 gap between score matrices.

    Both index sets are computed from the current values and held fixed, so the
    gradient flows through the selected entries only.
    """
    if a.shape != b.shape:
        raise ContractError(f"shapes {a.shape} and {b.shape} differ")
    m = a.shape[-1]
    if not 1 <= k <= m:
        raise ContractError(f"k must lie in [1, {m}], got {k}")
    gap = tc.abs(tc.sub(a, b))
    # membership counts (0, 1 or 2) summed in coordinate order keep the value exactly symmetric
    counts = topk_counts(a.data, b.data, k)
    return tc.scalar_mul(tc.sum(tc.elementwise_mul(gap, tc.constant(counts)), axis=1), 1.0 / (2 * k))


def topk_counts(a: np.ndarray, b: np.ndarray, k: int) -> np.ndarray:
    """Per entry: how many of the two top-k sets (of ``a`` and of ``b``) contain it."""
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    rows = np.arange(a.shape[0])[:, None]
    counts = np.zeros(a.shape)
    np.add.at(counts, (rows, top_k_indices(a, k)), 1.0)
    np.add.at(counts, (rows, top_k_indices(b, k)), 1.0)
    return counts


def _pair_topk(x: Tensor, y: Tensor, k: int) -> Tensor:
    vec = x.data.ndim == 1
    if vec:
        x, y = tc.reshape(x, (1, x.size)), tc.reshape(y, (1, y.size))
    out = topk_l1_rows(x, y, k)
    return tc.reshape(out, ()) if vec else out


def surrogate_ci(g_tilde: Tensor, g_base: Tensor, k1: int) -> Tensor:
    """Consistency gap between fine-tuned and base concept scores (per row for matrices)."""
    return _pair_topk(_lift(g_tilde), _lift(g_base), k1)


def surrogate_si(g_clean: Tensor, g_pert: Tensor, k2: int) -> Tensor:
    """Stability gap between concept scores on clean and perturbed input."""
    return _pair_topk(_lift(g_clean), _lift(g_pert), k2)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else tc.constant(x)


def loss_co(pred_tilde, pred_base) -> Tensor:
    """Mean absolute output difference (scalar for vectors, per row for matrices)."""
    a, b = _lift(pred_tilde), _lift(pred_base)
    if a.shape != b.shape:
        raise ContractError(f"shapes {a.shape} and {b.shape} differ")
    gap = tc.abs(tc.sub(a, b))
    return tc.mean(gap) if gap.data.ndim == 1 else tc.mean(gap, axis=1)


def loss_so(pred_clean, pred_pert) -> Tensor:
    return loss_co(pred_clean, pred_pert)


# -- combined objective ---------------------------------------------------------

@dataclass
class LossBreakdown:
    total: Tensor
    init: float
    terms: dict[str, float] = field(default_factory=dict)


def expand_eps(eps: Tensor, batch: int, n_frames: int) -> Tensor:
    """Repeat one perturbation per sample (``B x d``) across its frames -> ``(B*T) x d``.

    A ``(B*T) x d`` perturbation is passed through unchanged (per-frame mode).
    """
    if eps.shape[0] == batch * n_frames:
        return eps
    if eps.shape[0] != batch:
        raise ContractError(f"perturbation has {eps.shape[0]} rows for a batch of {batch}")
    return tc.slice_by_indices(eps, np.repeat(np.arange(batch), n_frames))


def drive_terms(params: cbm.CbmParams, frozen: FrozenReference, space, x: np.ndarray, n_frames: int,
                eps: Tensor | None, terms: Sequence[str], k1: int, k2: int) -> tuple[dict[str, Tensor], Tensor]:
    """Batch-mean regularizer terms named in ``terms``, plus the clean predictions.

    Only the requested terms are built.
    """
    batch = x.shape[0] // n_frames
    xc = tc.constant(x)
    g = cbm.concept_scores_batch(params, space, xc, n_frames)
    pred = cbm.head(params, g)
    out: dict[str, Tensor] = {}
    if "ci" in terms or "co" in terms:
        g_ref, f_ref = frozen.outputs(space, x, n_frames)
        if "ci" in terms:
            out["ci"] = tc.mean(topk_l1_rows(g, tc.constant(g_ref), k1))
        if "co" in terms:
            out["co"] = tc.mean(loss_co(pred, tc.constant(f_ref)))
    if "si" in terms or "so" in terms:
        xp = xc if eps is None else tc.add(xc, expand_eps(eps, batch, n_frames))
        g_p = cbm.concept_scores_batch(params, space, xp, n_frames)
        if "si" in terms:
            out["si"] = tc.mean(topk_l1_rows(g, g_p, k2))
        if "so" in terms:
            out["so"] = tc.mean(loss_so(pred, cbm.head(params, g_p)))
    return out, pred


def combined_loss(batch: Sequence[cbm.Sample], params: cbm.CbmParams, frozen: FrozenReference, space,
                  eps: Tensor | None, weights: LossWeights, k1: int, k2: int) -> LossBreakdown:
    """Task RMSE on clean inputs plus the masked, weighted regularizers.

    ``eps`` is one perturbation per sample (``B x d``), or ``None`` for zero.
    Masked terms are never constructed.
    """
    if frozen.concept_space_ref != params.concept_space_ref:
        raise cbm.BindingError("frozen reference and params are bound to different concept spaces")
    x, n_frames = cbm.stack_frames(batch)
    y = cbm.stack_targets(batch)
    terms, pred = drive_terms(params, frozen, space, x, n_frames, eps, weights.enabled(), k1, k2)
    init = rmse_loss(pred, tc.constant(y))
    total = init
    for name, lam in zip(TERMS, weights.lambdas):
        if name in terms:
            total = tc.add(total, tc.scalar_mul(terms[name], lam))
    return LossBreakdown(total, init.item(), {k: v.item() for k, v in terms.items()})

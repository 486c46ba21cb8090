"""Base training, robust fine-tuning with inner PGD, and the ablation harness."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import model as cbm
from . import tensor as tc
from .losses import TERMS, FrozenReference, LossWeights, combined_loss, mask_label, rmse_loss
from .metrics import default_k, mae
from .perturbations import PerturbationError, PerturbationSpec, pgd_perturbation

log = logging.getLogger(__name__)

ABLATION_MASKS = (
    (False, False, False, False),
    (True, True, False, False),
    (False, False, True, True),
    (True, True, True, True),
)
LOG_COLUMNS = ("epoch", "l_init", "l_ci", "l_si", "l_co", "l_so", "val_a_mae", "val_d_mae", "ms")


class TrainingError(RuntimeError):
    def __init__(self, message: str, last_good_epoch: int):
        super().__init__(f"{message} (last good epoch: {last_good_epoch})")
        self.last_good_epoch = last_good_epoch


@dataclass(frozen=True)
class TrainConfig:
    base_epochs: int = 200
    drive_epochs: int = 40
    learning_rate: float = 1e-5
    drive_learning_rate: float | None = None  # None -> learning_rate
    weight_decay: float = 1e-5
    batch_size: int = 4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    lambdas: tuple[float, float, float, float] = (1e2, 1e2, 1e-2, 1e-2)
    pgd: PerturbationSpec = field(default_factory=lambda: PerturbationSpec("PGD", rho=0.08, alpha=0.001, steps=5))
    k1: int | None = None  # None -> ceil(m / 5)
    k2: int | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        object.__setattr__(self, "lambdas", tuple(float(x) for x in self.lambdas))
        if isinstance(self.pgd, dict):
            object.__setattr__(self, "pgd", PerturbationSpec.from_dict(self.pgd))
        if self.pgd.kind != "PGD":
            raise ValueError("the training perturbation must be of kind PGD")
        if self.base_epochs < 0 or self.drive_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.weight_decay < 0:
            raise ValueError("learning_rate and batch_size must be positive, weight_decay >= 0")
        if self.drive_learning_rate is not None and self.drive_learning_rate <= 0:
            raise ValueError("drive_learning_rate must be positive")

    def weights(self, mask=(True, True, True, True)) -> LossWeights:
        return LossWeights(self.lambdas, tuple(mask))

    def topk(self, m: int) -> tuple[int, int]:
        k = default_k(m)
        return (self.k1 or k, self.k2 or k)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pgd"] = self.pgd.to_dict()
        d["betas"] = list(self.betas)
        d["lambdas"] = list(self.lambdas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "pgd" in d:
            d["pgd"] = PerturbationSpec.from_dict({"kind": "PGD", **d["pgd"]})
        return cls(**d)


class Adam:
    """Adam with decoupled weight decay (the decay is not fed through the moments)."""

    def __init__(self, params: Sequence[tc.Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.eps, self.weight_decay = float(lr), float(eps), float(weight_decay)
        self.b1, self.b2 = (float(b) for b in betas)
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            g = np.zeros(p.shape) if p.grad is None else p.grad
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = p.data - self.lr * self.weight_decay * p.data - self.lr * update

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class EpochRecord:
    epoch: int
    l_init: float
    l_ci: float = 0.0
    l_si: float = 0.0
    l_co: float = 0.0
    l_so: float = 0.0
    val_a_mae: float = math.nan
    val_d_mae: float = math.nan
    ms: float = 0.0
    skipped_batches: int = 0


@dataclass
class TrainLog:
    stage: str
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epoch indices must increase")
        self.records.append(rec)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.records:
            row = []
            for col in LOG_COLUMNS:
                v = getattr(r, col)
                if isinstance(v, float):
                    row.append("" if math.isnan(v) else repr(v) if col != "ms" else f"{v:.1f}")
                else:
                    row.append(v)
            w.writerow(row)
        return buf.getvalue()


def _validation(params, space, val: Sequence[cbm.Sample]) -> tuple[float, float]:
    if not val:
        return math.nan, math.nan
    err = mae(cbm.batch_predict(params, space, val), cbm.stack_targets(val))
    return float(err[0]), float(err[1]) if err.size > 1 else math.nan


def train_base(train: Sequence[cbm.Sample], val: Sequence[cbm.Sample], space: cbm.ConceptSpace,
               config: TrainConfig, dims: cbm.ModelDims) -> tuple[cbm.CbmParams, TrainLog]:
    """Fit the concept-bottleneck model on the task RMSE alone."""
    if not train:
        raise ValueError("empty training split")
    params = cbm.init_params(config.seed, dims, space.id)
    opt = Adam(params.parameters(), config.learning_rate, config.betas, config.adam_eps, config.weight_decay)
    rng = np.random.default_rng(config.seed + 1)
    tlog = TrainLog("base")
    for epoch in range(1, config.base_epochs + 1):
        start = time.perf_counter()
        losses = []
        try:
            for idx in cbm.iter_batches(len(train), config.batch_size, rng.permutation(len(train))):
                batch = [train[i] for i in idx]
                x, n_frames = cbm.stack_frames(batch)
                pred = cbm.predict_batch(params, space, tc.constant(x), n_frames)
                loss = rmse_loss(pred, tc.constant(cbm.stack_targets(batch)))
                opt.zero_grad()
                tc.backward(loss)
                opt.step()
                losses.append(loss.item())
            if not all(np.isfinite(p.data).all() for p in params.parameters()):
                raise tc.NonFiniteError("parameters became non-finite")
        except (tc.NonFiniteError, FloatingPointError) as exc:
            raise TrainingError(f"base training diverged in epoch {epoch}: {exc}", epoch - 1) from exc
        a, d = _validation(params, space, val)
        tlog.append(EpochRecord(epoch, float(np.mean(losses)), val_a_mae=a, val_d_mae=d,
                                ms=1000 * (time.perf_counter() - start)))
    return params, tlog


def train_drive(base: cbm.CbmParams, train: Sequence[cbm.Sample], val: Sequence[cbm.Sample],
                space: cbm.ConceptSpace, config: TrainConfig,
                mask=(True, True, True, True)) -> tuple[cbm.CbmParams, TrainLog]:
    """Fine-tune a copy of ``base`` on the combined objective with PGD perturbations.

    Per batch: PGD against the current parameters, then one optimizer step.
    """
    if not train:
        raise ValueError("empty training split")
    frozen = FrozenReference(base)
    params = base.copy()
    weights = config.weights(mask)
    k1, k2 = config.topk(space.m)
    lr = config.drive_learning_rate or config.learning_rate
    opt = Adam(params.parameters(), lr, config.betas, config.adam_eps, config.weight_decay)
    rng = np.random.default_rng(config.seed + 2)
    needs_eps = any(n in weights.enabled() for n in ("si", "so"))
    pgd = config.pgd
    tlog = TrainLog("drive")
    for epoch in range(1, config.drive_epochs + 1):
        start = time.perf_counter()
        sums = dict.fromkeys(("init",) + TERMS, 0.0)
        count = skipped = 0
        try:
            for idx in cbm.iter_batches(len(train), config.batch_size, rng.permutation(len(train))):
                batch = [train[i] for i in idx]
                pgd_seed = int(rng.integers(2**31))
                eps = None
                if needs_eps:
                    try:
                        e = pgd_perturbation(batch, params, frozen, space, weights, pgd.rho, pgd.alpha,
                                             pgd.steps, k1, k2, seed=pgd_seed)
                    except PerturbationError as exc:
                        log.warning("epoch %d: skipping batch, %s", epoch, exc)
                        skipped += 1
                        continue
                    eps = tc.constant(e)
                out = combined_loss(batch, params, frozen, space, eps, weights, k1, k2)
                opt.zero_grad()
                tc.backward(out.total)
                opt.step()
                sums["init"] += out.init
                for k, v in out.terms.items():
                    sums[k] += v
                count += 1
            if not all(np.isfinite(p.data).all() for p in params.parameters()):
                raise tc.NonFiniteError("parameters became non-finite")
        except (tc.NonFiniteError, FloatingPointError) as exc:
            raise TrainingError(f"robust fine-tuning diverged in epoch {epoch}: {exc}", epoch - 1) from exc
        n = max(count, 1)
        a, d = _validation(params, space, val)
        tlog.append(EpochRecord(epoch, sums["init"] / n, sums["ci"] / n, sums["si"] / n, sums["co"] / n,
                                sums["so"] / n, a, d, 1000 * (time.perf_counter() - start), skipped))
    frozen.verify()
    return params, tlog


@dataclass
class AblationRow:
    mask: tuple[bool, bool, bool, bool]
    a_mae: float
    d_mae: float
    top_k: float

    @property
    def label(self) -> str:
        return mask_label(self.mask)

    @property
    def ad_mae(self) -> float:
        return self.a_mae if math.isnan(self.d_mae) else 0.5 * (self.a_mae + self.d_mae)

    def to_dict(self) -> dict:
        return {"A": True, "BC": self.mask[0], "DE": self.mask[2], "a_mae": self.a_mae,
                "d_mae": None if math.isnan(self.d_mae) else self.d_mae, "ad_mae": self.ad_mae, "top_k": self.top_k}


def run_ablation(base: cbm.CbmParams, train: Sequence[cbm.Sample], val: Sequence[cbm.Sample],
                 test: Sequence[cbm.Sample], space: cbm.ConceptSpace, config: TrainConfig,
                 perturbation: PerturbationSpec | None = None, k: int | None = None) -> list[AblationRow]:
    """One fine-tuned model per regularizer group mask, each scored under P1(0.08).

    The ``{A}`` row is the base model itself: with both groups disabled the
    fine-tuning has no regularizer to act on.
    """
    from .evaluation import evaluate_model

    spec = perturbation or PerturbationSpec("P1", sigma=0.08, seed=config.seed)
    k = k or default_k(space.m)
    rows = []
    for mask in ABLATION_MASKS:
        if any(mask):
            params, _ = train_drive(base, train, val, space, config, mask)
        else:
            params = base
        cell = evaluate_model(params, space, test, spec, k)
        rows.append(AblationRow(mask, cell.a_mae, cell.d_mae, cell.top_k))
    return rows

"""Evaluation-time perturbations and the PGD worst-case input perturbation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import model as cbm
from . import tensor as tc
from .losses import FrozenReference, LossWeights, TERMS, drive_terms
from .metrics import default_k
from .tensor import ContractError, Tensor

KINDS = ("P1", "P2", "P3", "PGD")
_FIELDS = {
    "P1": ("sigma",),
    "P2": ("fraction", "jitter_sigma"),
    "P3": ("sigma",),
    "PGD": ("rho", "alpha", "steps"),
}


class PerturbationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    sigma: float = 0.0
    fraction: float = 0.0
    jitter_sigma: float = 0.1
    rho: float = 0.08
    alpha: float = 0.001
    steps: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}; expected one of {KINDS}")
        for name in ("sigma", "jitter_sigma", "rho", "alpha"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("fraction must lie in [0, 1]")
        if int(self.steps) < 1:
            raise ValueError("steps must be >= 1")

    @property
    def label(self) -> str:
        if self.kind == "P1":
            return f"P1({self.sigma:.2f})"
        if self.kind == "P2":
            return f"P2({self.fraction * 100:g}%)"
        if self.kind == "P3":
            return f"P3({self.sigma:.2f})"
        return f"PGD({self.rho:g})"

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "seed": int(self.seed)}
        for name in _FIELDS[self.kind]:
            d[name] = getattr(self, name)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PerturbationSpec":
        kind = d.get("kind")
        if kind not in KINDS:
            raise ValueError(f"unknown perturbation kind {kind!r}; expected one of {KINDS}")
        allowed = set(_FIELDS[kind]) | {"kind", "seed"}
        extra = set(d) - allowed
        if extra:
            raise ValueError(f"fields {sorted(extra)} do not apply to kind {kind}")
        return cls(**d)


DEFAULT_SWEEP = (
    PerturbationSpec("P1", sigma=0.08),
    PerturbationSpec("P3", sigma=0.01),
    PerturbationSpec("P2", fraction=0.10),
    PerturbationSpec("P1", sigma=0.10),
    PerturbationSpec("P3", sigma=0.02),
)


# -- P1 / P2 / P3 ---------------------------------------------------------------

def perturb_input(frames: np.ndarray, sigma: float, seed) -> np.ndarray:
    """Add i.i.d. N(0, sigma^2) noise to every entry."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    frames = np.asarray(frames, dtype=np.float64)
    if sigma == 0:
        return frames.copy()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return frames + rng.normal(0.0, sigma, size=frames.shape)


def n_replaced(fraction: float, m: int) -> int:
    # guard against 0.1 * 20 = 2.0000000000000004 rounding up
    return min(m, math.ceil(round(fraction * m, 9)))


def perturb_concept_space(space: cbm.ConceptSpace, fraction: float, jitter_sigma: float = 0.1,
                          seed=0) -> cbm.ConceptSpace:
    """Swap a fraction of concept rows for renormalized jittered copies."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    n = n_replaced(fraction, space.m)
    if n == 0:
        return space
    rows = np.sort(rng.choice(space.m, size=n, replace=False))
    emb = space.embeddings.copy()
    jittered = emb[rows] + rng.normal(0.0, jitter_sigma, size=(n, space.dim))
    emb[rows] = jittered / np.linalg.norm(jittered, axis=1, keepdims=True)
    return cbm.ConceptSpace(emb, space.labels)


def perturb_params(params: cbm.CbmParams, sigma: float, seed) -> cbm.CbmParams:
    """Add i.i.d. N(0, sigma^2) noise to every parameter."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    flat = params.flatten()
    if sigma == 0:
        return params.unflatten(flat)
    rng = np.random.default_rng(seed)
    return params.unflatten(flat + rng.normal(0.0, sigma, size=flat.shape))


# -- PGD ----------------------------------------------------------------------------

def project_l2(v: np.ndarray, radius: float) -> np.ndarray:
    """Project onto the L2 ball of ``radius``; row-wise for matrices."""
    v = np.asarray(v, dtype=np.float64)
    if radius <= 0:
        return np.zeros_like(v)
    if v.ndim < 2:
        n = np.linalg.norm(v)
        return v * (radius / n) if n > radius else v.copy()
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    scale = np.where(norms > radius, radius / np.where(norms > 0, norms, 1.0), 1.0)
    return v * scale


def random_start(shape, radius: float, rng: np.random.Generator) -> np.ndarray:
    """Points of norm ``radius`` in uniformly random directions (one per row for matrices)."""
    u = rng.normal(size=shape)
    if len(shape) < 2:
        n = np.linalg.norm(u)
        return u * (radius / n) if n > 0 else np.zeros(shape)
    n = np.linalg.norm(u, axis=1, keepdims=True)
    return u * (radius / np.where(n > 0, n, 1.0))


def pgd_ascent(objective: Callable[[Tensor], Tensor], shape, rho: float, alpha: float, steps: int,
               seed=0) -> np.ndarray:
    """Projected gradient ascent on ``objective(eps)`` inside the L2 ball of radius ``rho``.

    Starts at a random point of norm ``min(alpha, rho)``: the L1-type objectives
    here have a zero subgradient at exactly ``eps = 0``. Each step adds
    ``alpha * grad`` to the projected iterate; the projected final iterate is
    returned.
    """
    if rho < 0 or alpha < 0:
        raise ValueError("rho and alpha must be >= 0")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = np.random.default_rng(seed)
    eps = random_start(tuple(shape), min(alpha, rho), rng)
    for _ in range(int(steps)):
        cur = Tensor(project_l2(eps, rho), requires_grad=True)
        tc.backward(objective(cur))
        grad = np.zeros(cur.shape) if cur.grad is None else cur.grad
        if not np.isfinite(grad).all():
            raise PerturbationError("non-finite gradient in PGD objective")
        eps = cur.data + alpha * grad
    return project_l2(eps, rho)


def pgd_perturbation(batch: Sequence[cbm.Sample], params: cbm.CbmParams, frozen: FrozenReference, space,
                     weights: LossWeights, rho: float, alpha: float, steps: int, k1: int, k2: int,
                     seed=0, per_frame: bool = False) -> np.ndarray:
    """Worst-case input perturbation for the enabled regularizers, one per sample.

    The objective is the unweighted sum of the enabled terms (batch means), so
    the gradient for each sample's perturbation is the batch-averaged gradient.
    Returns a ``B x d`` array whose rows have L2 norm at most ``rho``. With
    ``per_frame`` every frame gets its own perturbation: the result is
    ``(B*T) x d`` and the ball applies to each sample's ``T x d`` block.
    """
    x, n_frames = cbm.stack_frames(batch)
    consts = params.detached()
    enabled = weights.enabled()
    B, d = len(batch), x.shape[1]
    shape = (B, n_frames * d) if per_frame else (B, d)
    if not enabled:
        return np.zeros((B * n_frames, d) if per_frame else (B, d))

    def objective(eps: Tensor) -> Tensor:
        if per_frame:
            eps = tc.reshape(eps, (B * n_frames, d))
        terms, _ = drive_terms(consts, frozen, space, x, n_frames, eps, enabled, k1, k2)
        total = None
        for name in TERMS:
            if name in terms:
                total = terms[name] if total is None else tc.add(total, terms[name])
        return total

    try:
        eps = pgd_ascent(objective, shape, rho, alpha, steps, seed=seed)
    except (PerturbationError, tc.NonFiniteError) as exc:
        culprit = _find_bad_term(consts, frozen, space, x, n_frames, shape, enabled, k1, k2,
                                 rho, alpha, seed, per_frame)
        raise PerturbationError(f"PGD failed in term {culprit!r}: {exc}") from exc
    return eps.reshape(B * n_frames, d) if per_frame else eps


def _find_bad_term(params, frozen, space, x, n_frames, shape, enabled, k1, k2,
                   rho, alpha, seed, per_frame) -> str:
    eps0 = random_start(shape, min(alpha, rho), np.random.default_rng(seed))
    for name in enabled:
        try:
            e = Tensor(eps0, requires_grad=True)
            ee = tc.reshape(e, (x.shape[0], x.shape[1])) if per_frame else e
            terms, _ = drive_terms(params, frozen, space, x, n_frames, ee, (name,), k1, k2)
            tc.backward(terms[name])
            if e.grad is not None and not np.isfinite(e.grad).all():
                return name
        except (tc.NonFiniteError, FloatingPointError):
            return name
    return "unknown"


# -- applying a spec to a model -------------------------------------------------------

@dataclass
class PerturbedView:
    scores: np.ndarray
    preds: np.ndarray
    rho: float | None


def perturbed_view(params: cbm.CbmParams, space: cbm.ConceptSpace, samples: Sequence[cbm.Sample],
                   spec: PerturbationSpec, *, k: int | None = None,
                   reference: cbm.CbmParams | None = None) -> PerturbedView:
    """Concept scores and predictions of ``params`` under the perturbation ``spec``.

    P1 perturbs inputs, P2 swaps the concept space, P3 perturbs parameters and
    PGD searches the worst-case input perturbation against ``reference`` as the
    frozen base. ``rho`` is the largest per-sample input perturbation norm, or
    ``None`` when inputs are untouched.
    """
    samples = list(samples)
    if spec.kind == "P1":
        rng = np.random.default_rng(spec.seed)
        noisy = [cbm.Sample(perturb_input(s.frames, spec.sigma, rng), s.target) for s in samples]
        x0, _ = cbm.stack_frames(samples)
        x1, _ = cbm.stack_frames(noisy)
        per_sample = np.linalg.norm((x1 - x0).reshape(len(samples), -1), axis=1)
        return PerturbedView(cbm.batch_scores(params, space, noisy), cbm.batch_predict(params, space, noisy),
                             float(per_sample.max()))
    if spec.kind == "P2":
        new_space = perturb_concept_space(space, spec.fraction, spec.jitter_sigma, spec.seed)
        bound = cbm.rebind(params, new_space)
        return PerturbedView(cbm.batch_scores(bound, new_space, samples),
                             cbm.batch_predict(bound, new_space, samples), None)
    if spec.kind == "P3":
        noisy = perturb_params(params, spec.sigma, spec.seed)
        return PerturbedView(cbm.batch_scores(noisy, space, samples), cbm.batch_predict(noisy, space, samples), None)

    if reference is None:
        raise ContractError("PGD perturbation needs the frozen base model as reference")
    kk = k if k is not None else default_k(space.m)
    frozen = FrozenReference(reference)
    rng = np.random.default_rng(spec.seed)
    x, n_frames = cbm.stack_frames(samples)
    eps = np.concatenate([
        pgd_perturbation(samples[i:i + 32], params, frozen, space, LossWeights(), spec.rho, spec.alpha,
                         spec.steps, kk, kk, seed=int(rng.integers(2**31)))
        for i in range(0, len(samples), 32)
    ])
    xp = x + np.repeat(eps, n_frames, axis=0)
    consts = params.detached()
    g = cbm.concept_scores_batch(consts, space, tc.constant(xp), n_frames)
    return PerturbedView(g.data, cbm.head(consts, g).data, float(spec.rho))

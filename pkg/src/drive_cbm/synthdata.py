"""Seeded synthetic sequence-regression data with known concept ground truth.

Each sample activates ``k_true`` concepts with positive weights. Every frame is
the weighted concept mix lifted into input space by a fixed orthonormal map,
plus Gaussian observation noise. Targets are a fixed linear map of the weight
vector, so a concept bottleneck is sufficient to predict them.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import serialize
from .metrics import top_k_indices
from .model import ConceptSpace, Sample

VERSION = "drive-synth-v1"


class IncompatibleVersionError(serialize.FormatError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    n_samples: int = 2000
    d: int = 32
    l: int = 16  # noqa: E741
    m: int = 24
    T: int = 8
    t: int = 2
    k_true: int = 3
    noise_sigma: float = 0.02
    target_noise: float = 0.01
    weight_low: float = 0.5
    weight_high: float = 1.5
    frame_scale: float = 1.0
    target_scale: float = 1.0
    split: tuple[float, float, float] = (0.85, 0.05, 0.10)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "split", tuple(float(f) for f in self.split))
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ValueError(f"split fractions must be three non-negatives summing to 1, got {self.split}")
        if not 1 <= self.k_true <= self.m:
            raise ValueError("need 1 <= k_true <= m")
        if self.d < self.l:
            raise ValueError("the input dimension d must be at least the embedding dimension l")
        if min(self.n_samples, self.T, self.t, self.m) < 1 or self.m < 2:
            raise ValueError("n_samples, T, t must be >= 1 and m >= 2")
        if self.noise_sigma < 0 or self.target_noise < 0 or not 0 < self.weight_low <= self.weight_high:
            raise ValueError("invalid noise or weight range")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(**d)


@dataclass
class SynthDataset:
    samples: list[Sample]
    true_active_concepts: list[tuple[int, ...]]
    concept_weights: np.ndarray  # n x m, zero outside the active set
    concept_space: ConceptSpace
    lift: np.ndarray  # d x l, orthonormal columns
    target_map: np.ndarray  # t x m
    provenance: SynthSpec
    splits: dict[str, list[int]] = field(default_factory=dict)

    def split(self, name: str) -> list[Sample]:
        return [self.samples[i] for i in self.splits[name]]

    @property
    def train(self) -> list[Sample]:
        return self.split("train")

    @property
    def val(self) -> list[Sample]:
        return self.split("val")

    @property
    def test(self) -> list[Sample]:
        return self.split("test")

    def oracle_encoder(self) -> np.ndarray:
        """Linear map ``l x d`` undoing the lift (the pseudo-inverse)."""
        return np.linalg.pinv(self.lift)

    def digest(self) -> str:
        return hashlib.sha256(serialize.encode(*_payload(self))).hexdigest()


def split_sizes(n: int, fractions) -> tuple[int, int, int]:
    val = int(np.floor(fractions[1] * n + 1e-9))
    test = int(np.floor(fractions[2] * n + 1e-9))
    return n - val - test, val, test


def _draw_mix(rng, spec: SynthSpec, concepts: np.ndarray, max_tries: int = 1000):
    """Active set and weights whose noiseless cosine ranking recovers the active set."""
    for _ in range(max_tries):
        active = np.sort(rng.choice(spec.m, size=spec.k_true, replace=False))
        w = np.zeros(spec.m)
        w[active] = rng.uniform(spec.weight_low, spec.weight_high, size=spec.k_true)
        z = w @ concepts
        cos = concepts @ z / np.linalg.norm(z)
        if set(top_k_indices(cos, spec.k_true).tolist()) == set(active.tolist()):
            return active, w, z
    raise RuntimeError("could not draw a recoverable concept mix; concepts are too coherent")


def generate(spec: SynthSpec) -> SynthDataset:
    rng = np.random.default_rng(spec.seed)
    raw = rng.normal(size=(spec.m, spec.l))
    space = ConceptSpace.from_vectors(raw, [f"concept_{j:02d}" for j in range(spec.m)])
    lift, _ = np.linalg.qr(rng.normal(size=(spec.d, spec.l)))
    target_map = rng.normal(size=(spec.t, spec.m))

    samples, active_sets, weights = [], [], np.zeros((spec.n_samples, spec.m))
    for i in range(spec.n_samples):
        active, w, z = _draw_mix(rng, spec, space.embeddings)
        clean = spec.frame_scale * (lift @ z)
        frames = np.tile(clean, (spec.T, 1)) + rng.normal(0.0, spec.noise_sigma, size=(spec.T, spec.d))
        target = spec.target_scale * (target_map @ w) + rng.normal(0.0, spec.target_noise, size=spec.t)
        samples.append(Sample(frames, target))
        active_sets.append(tuple(int(a) for a in active))
        weights[i] = w

    n_train, n_val, _ = split_sizes(spec.n_samples, spec.split)
    idx = list(range(spec.n_samples))
    splits = {"train": idx[:n_train], "val": idx[n_train:n_train + n_val], "test": idx[n_train + n_val:]}
    return SynthDataset(samples, active_sets, weights, space, lift, target_map, spec, splits)


# -- persistence ------------------------------------------------------------------

def _payload(ds: SynthDataset) -> tuple[dict, dict]:
    manifest = {
        "version": VERSION,
        "spec": ds.provenance.to_dict(),
        "labels": list(ds.concept_space.labels),
        "concept_space_id": ds.concept_space.id,
        "true_active_concepts": [list(a) for a in ds.true_active_concepts],
        "splits": ds.splits,
    }
    tensors = {
        "concepts": ds.concept_space.embeddings,
        "frames": np.stack([s.frames for s in ds.samples]),
        "targets": np.stack([s.target for s in ds.samples]),
        "weights": ds.concept_weights,
        "lift": ds.lift,
        "target_map": ds.target_map,
    }
    return manifest, tensors


def save(ds: SynthDataset, path) -> None:
    serialize.write(path, *_payload(ds))


def load(path) -> SynthDataset:
    manifest, t = serialize.read(path)
    version = manifest.get("version")
    if version != VERSION:
        raise IncompatibleVersionError(f"dataset version {version!r} is not {VERSION!r}", 12)
    try:
        space = ConceptSpace(t["concepts"], tuple(manifest["labels"]))
        samples = [Sample(f, y) for f, y in zip(t["frames"], t["targets"])]
        ds = SynthDataset(
            samples=samples,
            true_active_concepts=[tuple(a) for a in manifest["true_active_concepts"]],
            concept_weights=t["weights"],
            concept_space=space,
            lift=t["lift"],
            target_map=t["target_map"],
            provenance=SynthSpec.from_dict(manifest["spec"]),
            splits={k: list(v) for k, v in manifest["splits"].items()},
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise serialize.FormatError(f"inconsistent dataset contents: {exc}", 12) from None
    if space.id != manifest.get("concept_space_id"):
        raise serialize.FormatError("concept space id does not match its embeddings", 12)
    return ds

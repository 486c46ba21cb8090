"""Concept-bottleneck regressor ``f(g(x))``.

``g`` embeds every frame with a small MLP encoder, scores the embedding against a
fixed dictionary of unit-norm concept vectors by cosine similarity and averages
the scores over the frames of a sequence. ``f`` is a two-layer GELU MLP from the
concept scores to the targets.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import serialize
from . import tensor as tc
from .tensor import Tensor

CHECKPOINT_FORMAT = "drive-checkpoint-v1"


class BindingError(ValueError):
    """Parameters evaluated against a concept space they were not built for."""


@dataclass(frozen=True)
class ModelDims:
    d: int = 32
    l: int = 16  # noqa: E741
    m: int = 24
    hidden: int = 32
    t: int = 2
    encoder_layers: int = 2

    def __post_init__(self):
        for k, v in asdict(self).items():
            if int(v) < 1:
                raise ValueError(f"dimension {k} must be >= 1, got {v}")
        if self.encoder_layers not in (1, 2):
            raise ValueError("encoder_layers must be 1 (linear) or 2 (GELU MLP)")


@dataclass(frozen=True, eq=False)
class ConceptSpace:
    embeddings: np.ndarray
    labels: tuple[str, ...]
    id: str = field(init=False)

    def __post_init__(self):
        emb = np.array(self.embeddings, dtype=np.float64)
        emb.setflags(write=False)
        labels = tuple(str(s) for s in self.labels)
        if emb.ndim != 2 or emb.shape[0] < 2:
            raise ValueError(f"need at least 2 concept rows, got shape {emb.shape}")
        if len(labels) != emb.shape[0] or len(set(labels)) != len(labels):
            raise ValueError("labels must be distinct, one per concept row")
        norms = np.linalg.norm(emb, axis=1)
        if np.abs(norms - 1.0).max() > 1e-9:
            raise ValueError("concept embeddings must be unit norm")
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "labels", labels)
        digest = hashlib.sha256(emb.astype("<f8").tobytes())
        digest.update(str(emb.shape).encode())
        digest.update("\x00".join(labels).encode("utf-8"))
        object.__setattr__(self, "id", digest.hexdigest()[:16])

    @property
    def m(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @classmethod
    def from_vectors(cls, vectors, labels: Sequence[str] | None = None) -> "ConceptSpace":
        v = np.asarray(vectors, dtype=np.float64)
        v = v / np.linalg.norm(v, axis=1, keepdims=True)
        if labels is None:
            labels = [f"concept_{i:03d}" for i in range(v.shape[0])]
        return cls(v, tuple(labels))


@dataclass
class Sample:
    frames: np.ndarray  # T x d
    target: np.ndarray  # t

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64).reshape(-1)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError("frames must be a non-empty T x d array")
        if not (np.isfinite(self.frames).all() and np.isfinite(self.target).all()):
            raise ValueError("sample contains non-finite values")


@dataclass
class CbmParams:
    """Trainable encoder and head tensors, bound to one concept space."""

    dims: ModelDims
    tensors: dict[str, Tensor]
    concept_space_ref: str

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.data.reshape(-1) for t in self.tensors.values()])

    def unflatten(self, vec: np.ndarray, requires_grad: bool = True) -> "CbmParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.num_params():
            raise ValueError(f"expected {self.num_params()} values, got {vec.size}")
        out, pos = {}, 0
        for name, t in self.tensors.items():
            n = t.size
            out[name] = Tensor(vec[pos:pos + n].reshape(t.shape), requires_grad=requires_grad, name=name)
            pos += n
        return CbmParams(self.dims, out, self.concept_space_ref)

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self, requires_grad: bool = True) -> "CbmParams":
        return self.unflatten(self.flatten(), requires_grad=requires_grad)

    def detached(self) -> "CbmParams":
        """Constant view of the same data; nothing built from it receives gradients."""
        return CbmParams(self.dims, {k: Tensor._result(v.data, (), "leaf") for k, v in self.tensors.items()},
                         self.concept_space_ref)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def digest(self) -> str:
        return serialize.content_hash(self.flatten())


def init_params(seed: int, dims: ModelDims, concept_space_ref: str) -> CbmParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    layers: list[tuple[str, int, int]] = []
    if dims.encoder_layers == 1:
        layers.append(("enc", dims.d, dims.l))
    else:
        layers += [("enc", dims.d, dims.hidden), ("enc", dims.hidden, dims.l)]
    layers += [("head", dims.m, dims.hidden), ("head", dims.hidden, dims.t)]
    tensors: dict[str, Tensor] = {}
    counters = {"enc": 0, "head": 0}
    for prefix, fan_in, fan_out in layers:
        i = counters[prefix]
        counters[prefix] += 1
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        tensors[f"{prefix}.w{i}"] = Tensor(w, requires_grad=True, name=f"{prefix}.w{i}")
        tensors[f"{prefix}.b{i}"] = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{prefix}.b{i}")
    return CbmParams(dims, tensors, concept_space_ref)


def rebind(params: CbmParams, space: ConceptSpace) -> CbmParams:
    """Same weights, explicitly bound to another concept space (used for concept-set swaps)."""
    if params.dims.m != space.m or params.dims.l != space.dim:
        raise BindingError(f"concept space of shape {space.embeddings.shape} does not fit {params.dims}")
    return CbmParams(params.dims, params.tensors, space.id)


def _check_binding(params: CbmParams, space: ConceptSpace) -> None:
    if params.concept_space_ref != space.id:
        raise BindingError(f"params bound to concept space {params.concept_space_ref}, got {space.id}")


def encode(params: CbmParams, x: Tensor) -> Tensor:
    p = params.tensors
    h = tc.add(tc.matmul(x, p["enc.w0"]), p["enc.b0"])
    if "enc.w1" in p:
        h = tc.add(tc.matmul(tc.gelu(h), p["enc.w1"]), p["enc.b1"])
    return h


def head(params: CbmParams, scores: Tensor) -> Tensor:
    p = params.tensors
    h = tc.gelu(tc.add(tc.matmul(scores, p["head.w0"]), p["head.b0"]))
    return tc.add(tc.matmul(h, p["head.w1"]), p["head.b1"])


def concept_scores_batch(params: CbmParams, space: ConceptSpace, x: Tensor, n_frames: int) -> Tensor:
    """Pooled concept scores for a stacked batch ``x`` of shape ``(B*T) x d`` -> ``B x m``."""
    _check_binding(params, space)
    sims = tc.cosine_rows(encode(params, x), tc.constant(space.embeddings))
    return tc.window_mean_pool(sims, n_frames)


def predict_batch(params: CbmParams, space: ConceptSpace, x: Tensor, n_frames: int) -> Tensor:
    return head(params, concept_scores_batch(params, space, x, n_frames))


def concept_scores(params: CbmParams, space: ConceptSpace, frames) -> Tensor:
    """Concept-score vector ``g(x)`` of one ``T x d`` sequence."""
    x = frames if isinstance(frames, Tensor) else tc.constant(frames)
    return tc.reshape(concept_scores_batch(params, space, x, x.shape[0]), (space.m,))


def predict(params: CbmParams, space: ConceptSpace, frames) -> Tensor:
    x = frames if isinstance(frames, Tensor) else tc.constant(frames)
    return tc.reshape(predict_batch(params, space, x, x.shape[0]), (params.dims.t,))


def stack_frames(samples: Sequence[Sample]) -> tuple[np.ndarray, int]:
    """Stack the frames of equal-length samples into one ``(B*T) x d`` array."""
    lengths = {s.frames.shape[0] for s in samples}
    if len(lengths) != 1:
        raise ValueError(f"samples in a batch must share a sequence length, got {sorted(lengths)}")
    return np.concatenate([s.frames for s in samples], axis=0), lengths.pop()


def stack_targets(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([s.target for s in samples])


def batch_scores(params: CbmParams, space: ConceptSpace, samples: Sequence[Sample]) -> np.ndarray:
    """Numpy convenience: concept scores for many samples, no gradient tracking."""
    x, T = stack_frames(samples)
    return concept_scores_batch(params.detached(), space, tc.constant(x), T).data


def batch_predict(params: CbmParams, space: ConceptSpace, samples: Sequence[Sample]) -> np.ndarray:
    x, T = stack_frames(samples)
    return predict_batch(params.detached(), space, tc.constant(x), T).data


def iter_batches(n: int, size: int, order: Iterable[int] | None = None):
    idx = list(range(n)) if order is None else list(order)
    for i in range(0, len(idx), size):
        yield idx[i:i + size]


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path, params: CbmParams, *, seed: int, stage: str, extra: dict | None = None) -> None:
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "dims": asdict(params.dims),
        "concept_space_id": params.concept_space_ref,
        "seed": int(seed),
        "stage": stage,
    }
    if extra:
        manifest["extra"] = extra
    serialize.write(path, manifest, {k: v.data for k, v in params.tensors.items()})


def load_checkpoint(path) -> tuple[CbmParams, dict]:
    manifest, arrays = serialize.read(path)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise serialize.FormatError(f"not a checkpoint (format={manifest.get('format')!r})", 12)
    dims = ModelDims(**manifest["dims"])
    tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
    return CbmParams(dims, tensors, manifest["concept_space_id"]), manifest

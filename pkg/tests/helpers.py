"""Shared builders for the test modules."""
import numpy as np

from drive_cbm import model as cbm
from drive_cbm import tensor as tc


def params_from_vector(template: cbm.CbmParams, vec: tc.Tensor) -> cbm.CbmParams:
    """Params whose tensors are graph slices of ``vec``, so gradients reach it."""
    pos, tensors = 0, {}
    for name, t in template.tensors.items():
        tensors[name] = tc.reshape(tc.slice_by_indices(vec, np.arange(pos, pos + t.size)), t.shape)
        pos += t.size
    return cbm.CbmParams(template.dims, tensors, template.concept_space_ref)


def tiny_problem(seed=0, n=6, d=5, l=3, m=6, T=2, t=2, hidden=4):
    rng = np.random.default_rng(seed)
    space = cbm.ConceptSpace.from_vectors(rng.normal(size=(m, l)))
    dims = cbm.ModelDims(d=d, l=l, m=m, hidden=hidden, t=t)
    samples = [cbm.Sample(rng.normal(size=(T, d)), rng.normal(size=t)) for _ in range(n)]
    return space, dims, samples

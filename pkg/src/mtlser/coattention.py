"""Co-attention fusion of the emotion feature with auxiliary-branch features.

The emotion feature is the query. The ASR branch contributes a frame sequence,
summarized by dot-product attention against the query; gender and speaker
contribute single vectors. One scaled score per auxiliary is softmax-normalized
across auxiliaries, the weighted context is summed and added back to the query.
"""
from __future__ import annotations

import math

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Tensor

AUX_ORDER = ("gender", "speaker", "asr")


def init_coattention(in_dims: dict[str, int], d_c: int, rng: np.random.Generator) -> dict[str, Tensor]:
    """One projection per branch; ``in_dims`` maps branch name to its feature width."""
    params = {}
    for branch, d in in_dims.items():
        bound = 1.0 / math.sqrt(d)
        params[f"{branch}.W"] = Tensor(rng.uniform(-bound, bound, (d, d_c)), requires_grad=True)
        params[f"{branch}.b"] = Tensor(rng.uniform(-bound, bound, d_c), requires_grad=True)
    return params


def project(x, params: dict, branch: str) -> Tensor:
    return nx.affine(x, params[f"{branch}.W"], params[f"{branch}.b"])


def attend_frames(query, keys, scale: float) -> Tensor:
    """Softmax(q . k_t * scale) weighted sum of ``keys`` over the frame axis.

    ``query`` is ``(..., d)`` and ``keys`` is ``(..., T, d)``.
    """
    keys = nx.as_tensor(keys)
    if keys.shape[-2] == 0:
        raise DimensionError("coattend", "empty ASR frame sequence")
    q = nx.reshape(query, query.shape[:-1] + (1, query.shape[-1]))
    beta = nx.softmax(nx.mul(nx.sum(nx.mul(keys, q), axis=-1), scale), axis=-1)
    return nx.sum(nx.mul(nx.reshape(beta, beta.shape + (1,)), keys), axis=-2)


def coattend(emo, gen=None, spk=None, asr_seq=None, params: dict | None = None,
             return_weights: bool = False):
    """Fused emotion representation ``q + sum_a beta_a v_a``.

    Any auxiliary passed as ``None`` is left out of the softmax. Inputs may carry a
    leading batch axis. With ``return_weights`` the cross-task weights are returned too.
    """
    if params is None:
        raise ValueError("coattend requires projection params")
    q = project(emo, params, "emotion")
    d_c = q.shape[-1]
    scale = 1.0 / math.sqrt(d_c)
    values = []
    if gen is not None:
        values.append(project(gen, params, "gender"))
    if spk is not None:
        values.append(project(spk, params, "speaker"))
    if asr_seq is not None:
        values.append(attend_frames(q, project(asr_seq, params, "asr"), scale))
    if not values:
        raise ValueError("coattend needs at least one auxiliary feature")
    for v in values:
        if v.shape != q.shape:
            raise DimensionError("coattend", f"auxiliary value {v.shape} vs query {q.shape}")
    V = nx.stack(values, axis=-2)
    scores = nx.mul(nx.sum(nx.mul(V, nx.reshape(q, q.shape[:-1] + (1, d_c))), axis=-1), scale)
    beta = nx.softmax(scores, axis=-1)
    ctx = nx.sum(nx.mul(nx.reshape(beta, beta.shape + (1,)), V), axis=-2)
    out = nx.add(q, ctx)
    return (out, beta) if return_weights else out

"""Attentive statistics pooling: attention-weighted mean and std over frames."""
from __future__ import annotations

import math

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Tensor

DEFAULT_POOL_EPS = 1e-6


def default_attention_dim(dim: int) -> int:
    return max(1, math.ceil(dim / 2))


def init_pooling(dim: int, rng: np.random.Generator, att_dim: int | None = None) -> dict[str, Tensor]:
    att_dim = att_dim or default_attention_dim(dim)
    bound = 1.0 / math.sqrt(dim)
    return {
        "W_att": Tensor(rng.uniform(-bound, bound, (dim, att_dim)), requires_grad=True),
        "b_att": Tensor(np.zeros(att_dim), requires_grad=True),
        "v_att": Tensor(rng.uniform(-1.0 / math.sqrt(att_dim), 1.0 / math.sqrt(att_dim), att_dim),
                        requires_grad=True),
    }


def attention_scores(seq, W_att, b_att, v_att) -> Tensor:
    """Scalar score per frame, ``v . tanh(W^T h_t + b)``; shape ``seq.shape[:-1]``."""
    hidden = nx.tanh(nx.affine(seq, W_att, b_att))
    return nx.dot(hidden, nx.as_tensor(v_att))


def weighted_stats(seq, alpha, eps: float = DEFAULT_POOL_EPS) -> Tensor:
    """Concatenate the alpha-weighted mean and std of ``seq`` over the frame axis.

    ``seq`` is ``(..., T, D)`` and ``alpha`` is ``(..., T)``. The variance is clamped at
    zero before ``eps`` is added.
    """
    seq = nx.as_tensor(seq)
    a = nx.reshape(nx.as_tensor(alpha), alpha.shape + (1,))
    mu = nx.sum(nx.mul(a, seq), axis=-2)
    second = nx.sum(nx.mul(a, nx.mul(seq, seq)), axis=-2)
    var = nx.clamp_min0(nx.sub(second, nx.mul(mu, mu)))
    sigma = nx.sqrt(nx.add(var, eps))
    return nx.concat([mu, sigma], axis=-1)


def attentive_stats_pool(seq, params: dict, eps: float = DEFAULT_POOL_EPS) -> Tensor:
    """Pool ``(T, D)`` (or batched ``(B, T, D)``) frames to ``2D`` statistics."""
    seq = nx.as_tensor(seq)
    if seq.ndim < 2 or seq.shape[-2] == 0:
        raise DimensionError("attentive_stats_pool", f"empty frame sequence, shape {seq.shape}")
    e = attention_scores(seq, params["W_att"], params["b_att"], params["v_att"])
    alpha = nx.softmax(e, axis=-1)
    return weighted_stats(seq, alpha, eps)

"""Parameter layout and the forward pass of the multi-task network."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .coattention import coattend, init_coattention
from .fusion import fuse_layers, init_fusion, select_last
from .heads import (DEFAULT_DROPOUT, HeadActivations, asr_forward, classifier_forward, first_block,
                    init_asr_head, init_classifier, second_block)
from .numerics import Tensor
from .pooling import DEFAULT_POOL_EPS, attentive_stats_pool, default_attention_dim, init_pooling

PARAM_GROUPS = ("fusion", "pool", "emotion", "gender", "speaker", "asr", "coatt")
_DROPOUT_STREAM = {"emotion": 0, "gender": 1, "speaker": 2, "asr": 3}


@dataclass(frozen=True)
class ModelDims:
    n_layers: int
    dim: int
    n_speakers: int
    vocab_size: int
    n_emotions: int = 8
    n_genders: int = 2
    hidden: int = 32
    rnn_hidden: int = 16
    att_dim: int | None = None
    dropout: float = DEFAULT_DROPOUT

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.n_speakers < 2:
            raise ValueError("speaker head needs at least 2 training speakers")

    def to_dict(self) -> dict:
        return asdict(self)


def init_params(dims: ModelDims, seed: int) -> dict[str, Tensor]:
    """All trainable tensors, keyed ``group.name``; every group is built whatever the toggles."""
    rng = np.random.default_rng([seed, 10])
    two_d = 2 * dims.dim
    groups = {
        "fusion": init_fusion(dims.n_layers),
        "pool": init_pooling(dims.dim, rng, dims.att_dim or default_attention_dim(dims.dim)),
        "emotion": init_classifier(two_d, dims.hidden, dims.n_emotions, rng),
        "gender": init_classifier(two_d, dims.hidden, dims.n_genders, rng),
        "speaker": init_classifier(two_d, dims.hidden, dims.n_speakers, rng),
        "asr": init_asr_head(dims.dim, dims.rnn_hidden, dims.hidden, dims.vocab_size, rng),
        "coatt": init_coattention({"emotion": dims.hidden, "gender": dims.hidden, "speaker": dims.hidden,
                                   "asr": dims.hidden}, dims.hidden, rng),
    }
    params = {}
    for g, sub in groups.items():
        for k, v in sub.items():
            v.name = f"{g}.{k}"
            params[v.name] = v
    return params


def group(params: dict, prefix: str) -> dict:
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def frozen(params: dict) -> dict:
    """Copies that record no gradient tape, for evaluation."""
    return {k: Tensor(v.data) for k, v in params.items()}


@dataclass
class ForwardOutputs:
    pooled: Tensor
    emotion: HeadActivations
    gender: HeadActivations | None = None
    speaker: HeadActivations | None = None
    asr: HeadActivations | None = None


def forward(params: dict, stacks: np.ndarray, dims: ModelDims, *, tasks=(), use_coattention: bool = False,
            fusion_mode: str = "learnable", training: bool = False, rng_key=None) -> ForwardOutputs:
    """Run the network on ``stacks`` of shape ``(B, L, T, D)`` (one frame count per call).

    ``tasks`` lists the active auxiliary branches. ``rng_key`` seeds per-branch dropout
    streams so that toggling a branch never shifts another branch's masks.
    """
    def rng(branch):
        if not training or dims.dropout == 0.0:
            return None
        return np.random.default_rng(list(rng_key) + [_DROPOUT_STREAM[branch]])

    if fusion_mode == "learnable":
        seq = fuse_layers(stacks, params["fusion.layer_logits"])
    elif fusion_mode == "last":
        seq = select_last(stacks)
    else:
        raise ValueError(f"unknown fusion_mode {fusion_mode!r}")
    pooled = attentive_stats_pool(seq, group(params, "pool"), DEFAULT_POOL_EPS)
    emo_p = group(params, "emotion")
    emo_h1 = first_block(pooled, emo_p, training, dims.dropout, rng("emotion"))
    out = ForwardOutputs(pooled, HeadActivations(emo_h1, None))
    if "gender" in tasks:
        out.gender = classifier_forward(pooled, group(params, "gender"), training, dims.dropout, rng("gender"))
    if "speaker" in tasks:
        out.speaker = classifier_forward(pooled, group(params, "speaker"), training, dims.dropout, rng("speaker"))
    if "asr" in tasks:
        out.asr = asr_forward(seq, group(params, "asr"), training, dims.dropout, rng("asr"))
    if use_coattention and tasks:
        fused = coattend(emo_h1,
                         out.gender.hidden1 if out.gender else None,
                         out.speaker.hidden1 if out.speaker else None,
                         out.asr.hidden1 if out.asr else None,
                         group(params, "coatt"))
        out.emotion.logits = second_block(fused, emo_p)
    else:
        out.emotion.logits = second_block(emo_h1, emo_p)
    return out


def group_by_frames(stacks: list[np.ndarray]) -> list[np.ndarray]:
    """Indices of equal-length utterances, in first-appearance order of each length."""
    buckets: dict[int, list[int]] = {}
    for i, s in enumerate(stacks):
        buckets.setdefault(s.shape[1], []).append(i)
    return [np.asarray(v) for v in buckets.values()]

"""Learnable softmax-weighted fusion of per-layer hidden states."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Tensor


@dataclass
class LayerStack:
    """Hidden states of every backbone layer for one utterance, shape ``(L, T, D)``."""

    layers: np.ndarray

    def __post_init__(self):
        self.layers = np.asarray(self.layers, dtype=np.float64)
        if self.layers.ndim != 3 or min(self.layers.shape[:2]) < 1:
            raise DimensionError("LayerStack", f"expected (L>=1, T>=1, D), got {self.layers.shape}")
        if not np.all(np.isfinite(self.layers)):
            raise ValueError("LayerStack contains non-finite values")

    @property
    def n_layers(self) -> int:
        return self.layers.shape[0]

    @property
    def n_frames(self) -> int:
        return self.layers.shape[1]

    @property
    def dim(self) -> int:
        return self.layers.shape[2]


def init_fusion(n_layers: int) -> dict[str, Tensor]:
    return {"layer_logits": Tensor(np.zeros(n_layers), requires_grad=True)}


def fusion_weights(layer_logits) -> Tensor:
    return nx.softmax(layer_logits, axis=-1)


def fuse_layers(stack, layer_logits) -> Tensor:
    """Convex combination of layers with weights ``softmax(layer_logits)``.

    ``stack`` is ``(L, T, D)`` or batched ``(B, L, T, D)``; the layer axis is removed.
    """
    s = stack.layers if isinstance(stack, LayerStack) else stack
    s = nx.as_tensor(s)
    layer_logits = nx.as_tensor(layer_logits)
    batched = s.ndim == 4
    L = s.shape[1] if batched else s.shape[0]
    if layer_logits.shape != (L,):
        raise DimensionError("fuse_layers", f"{layer_logits.shape[0] if layer_logits.ndim else 0} logits for {L} layers")
    w = nx.reshape(fusion_weights(layer_logits), (1, L))
    if batched:
        B, _, T, D = s.shape
        out = nx.matmul(w, nx.reshape(s, (B, L, T * D)))
        return nx.reshape(out, (B, T, D))
    _, T, D = s.shape
    return nx.reshape(nx.matmul(w, nx.reshape(s, (L, T * D))), (T, D))


def select_last(stack) -> Tensor:
    """Last-layer hidden state only (the static single-layer strategy)."""
    s = stack.layers if isinstance(stack, LayerStack) else stack
    s = nx.as_tensor(s)
    if s.ndim == 4:
        return nx.getitem(s, (slice(None), -1))
    return nx.getitem(s, -1)

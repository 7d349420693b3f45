"""Task branches: two-block classifiers and the recurrent ASR head."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Tensor

DEFAULT_DROPOUT = 0.1


@dataclass
class HeadActivations:
    hidden1: Tensor
    logits: Tensor


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def init_classifier(in_dim: int, hidden: int, n_classes: int, rng: np.random.Generator) -> dict[str, Tensor]:
    if n_classes < 2:
        raise ValueError(f"classifier needs at least 2 classes, got {n_classes}")
    return {
        "l1.W": _uniform(rng, in_dim, (in_dim, hidden)),
        "l1.b": _uniform(rng, in_dim, (hidden,)),
        "ln.g": Tensor(np.ones(hidden), requires_grad=True),
        "ln.b": Tensor(np.zeros(hidden), requires_grad=True),
        "l2.W": _uniform(rng, hidden, (hidden, n_classes)),
        "l2.b": _uniform(rng, hidden, (n_classes,)),
    }


def init_lstm(in_dim: int, hidden: int, rng: np.random.Generator) -> dict[str, Tensor]:
    """Gate order along the 4*hidden axis: input, forget, cell, output."""
    b = rng.uniform(-1.0 / math.sqrt(hidden), 1.0 / math.sqrt(hidden), 4 * hidden)
    b[hidden:2 * hidden] += 1.0
    return {
        "lstm.Wx": _uniform(rng, hidden, (in_dim, 4 * hidden)),
        "lstm.Wh": _uniform(rng, hidden, (hidden, 4 * hidden)),
        "lstm.b": Tensor(b, requires_grad=True),
    }


def init_asr_head(in_dim: int, rnn_dim: int, hidden: int, vocab_size: int,
                  rng: np.random.Generator) -> dict[str, Tensor]:
    """Output width is ``vocab_size + 1``; index 0 is the CTC blank."""
    params = init_lstm(in_dim, rnn_dim, rng)
    params.update(init_classifier(rnn_dim, hidden, vocab_size + 1, rng))
    return params


def first_block(x, params: dict, training: bool = False, dropout_rate: float = DEFAULT_DROPOUT,
                rng: np.random.Generator | None = None) -> Tensor:
    """dropout(relu(layer_norm(affine(x))))."""
    z = nx.affine(x, params["l1.W"], params["l1.b"])
    z = nx.relu(nx.layer_norm(z, params["ln.g"], params["ln.b"]))
    return nx.dropout(z, dropout_rate, rng, training)


def second_block(hidden, params: dict) -> Tensor:
    return nx.affine(hidden, params["l2.W"], params["l2.b"])


def classifier_forward(x, params: dict, training: bool = False, dropout_rate: float = DEFAULT_DROPOUT,
                       rng: np.random.Generator | None = None) -> HeadActivations:
    x = nx.as_tensor(x)
    if x.shape[-1] != params["l1.W"].shape[0]:
        raise DimensionError("classifier_forward", f"input width {x.shape[-1]}, head expects {params['l1.W'].shape[0]}")
    h1 = first_block(x, params, training, dropout_rate, rng)
    return HeadActivations(h1, second_block(h1, params))


def lstm_cell(x_proj, h, c, Wh):
    """One recurrence step given the precomputed input projection ``x W_x + b``."""
    n = Wh.shape[0]
    z = nx.add(x_proj, nx.matmul(h, Wh))
    i = nx.sigmoid(nx.getitem(z, (Ellipsis, slice(0, n))))
    f = nx.sigmoid(nx.getitem(z, (Ellipsis, slice(n, 2 * n))))
    g = nx.tanh(nx.getitem(z, (Ellipsis, slice(2 * n, 3 * n))))
    o = nx.sigmoid(nx.getitem(z, (Ellipsis, slice(3 * n, 4 * n))))
    c = nx.add(nx.mul(f, c), nx.mul(i, g))
    h = nx.mul(o, nx.tanh(c))
    return h, c


def _sig(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lstm_forward(seq, params: dict) -> Tensor:
    """Run the recurrence over ``(T, D)`` or ``(B, T, D)`` frames from a zero state.

    The whole unrolled recurrence is a single tape node; its backward pass is
    backpropagation through time over the cached gate activations.
    """
    seq = nx.as_tensor(seq)
    batched = seq.ndim == 3
    x = seq.data if batched else seq.data[None]
    B, T, D = x.shape
    if T == 0:
        raise DimensionError("lstm_forward", "empty frame sequence")
    Wx, Wh, b = (nx.as_tensor(params[k]) for k in ("lstm.Wx", "lstm.Wh", "lstm.b"))
    n = Wh.shape[0]
    if Wx.shape != (D, 4 * n) or Wh.shape != (n, 4 * n) or b.shape != (4 * n,):
        raise DimensionError("lstm_forward", f"input width {D} vs Wx {Wx.shape}, Wh {Wh.shape}, b {b.shape}")
    xp = (x.reshape(-1, D) @ Wx.data + b.data).reshape(B, T, 4 * n)
    H = np.zeros((B, T + 1, n))
    C = np.zeros((B, T + 1, n))
    gates = np.empty((B, T, 4 * n))
    tc = np.empty((B, T, n))
    for t in range(T):
        z = xp[:, t] + H[:, t] @ Wh.data
        i, f = _sig(z[:, :n]), _sig(z[:, n:2 * n])
        g, o = np.tanh(z[:, 2 * n:3 * n]), _sig(z[:, 3 * n:])
        C[:, t + 1] = f * C[:, t] + i * g
        tc[:, t] = np.tanh(C[:, t + 1])
        H[:, t + 1] = o * tc[:, t]
        gates[:, t] = np.concatenate([i, f, g, o], axis=1)

    def bw(gH):
        gH = gH if batched else gH[None]
        dxp = np.empty((B, T, 4 * n))
        dWh = np.zeros((n, 4 * n))
        dh_next = np.zeros((B, n))
        dc_next = np.zeros((B, n))
        for t in range(T - 1, -1, -1):
            i, f, g, o = (gates[:, t, k * n:(k + 1) * n] for k in range(4))
            dh = gH[:, t] + dh_next
            dc = dh * o * (1.0 - tc[:, t] ** 2) + dc_next
            dz = np.concatenate([dc * g * i * (1.0 - i), dc * C[:, t] * f * (1.0 - f),
                                 dc * i * (1.0 - g * g), dh * tc[:, t] * o * (1.0 - o)], axis=1)
            dWh += H[:, t].T @ dz
            dh_next = dz @ Wh.data.T
            dc_next = dc * f
            dxp[:, t] = dz
        d2 = dxp.reshape(-1, 4 * n)
        nx._accum(Wh, dWh)
        nx._accum(Wx, x.reshape(-1, D).T @ d2)
        nx._accum(b, d2.sum(axis=0))
        if seq.requires_grad:
            dx = (d2 @ Wx.data.T).reshape(B, T, D)
            nx._accum(seq, dx if batched else dx[0])

    out = H[:, 1:] if batched else H[0, 1:]
    return nx._result(out, (seq, Wx, Wh, b), bw)


def asr_forward(seq, params: dict, training: bool = False, dropout_rate: float = DEFAULT_DROPOUT,
                rng: np.random.Generator | None = None) -> HeadActivations:
    """Per-frame logits over the vocabulary plus blank."""
    seq = nx.as_tensor(seq)
    if seq.ndim < 2 or seq.shape[-2] == 0:
        raise DimensionError("asr_forward", f"empty frame sequence, shape {seq.shape}")
    rec = lstm_forward(seq, params)
    h1 = first_block(rec, params, training, dropout_rate, rng)
    return HeadActivations(h1, second_block(h1, params))


def greedy_decode(logits: np.ndarray) -> list[int]:
    """Per-frame argmax, collapse repeats, drop blanks."""
    best = np.asarray(logits).argmax(axis=-1)
    out, prev = [], -1
    for k in best:
        if k != prev and k != 0:
            out.append(int(k))
        prev = k
    return out

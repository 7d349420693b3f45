"""Finite-difference checks for every differentiable op in the package."""
from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import numerics as nx
from .coattention import coattend
from .fusion import fuse_layers
from .heads import asr_forward, classifier_forward, lstm_forward
from .losses import SwfcConfig, cross_entropy, ctc_loss, swfc_loss
from .numerics import GradCheckReport, finite_diff_check
from .pooling import attentive_stats_pool

PointFn = Callable[[np.random.Generator], list]


def _init_scale(rng, shape, fan_in=None):
    """Weights as the initializers draw them; N(0, 1) weights saturate the softmaxes."""
    fan_in = fan_in or shape[0]
    return rng.uniform(-1.0, 1.0, shape) / np.sqrt(fan_in)


def _clustered(rng, n, dim, spread=0.3):
    """Embeddings around one shared direction, like pooled features of one corpus."""
    return rng.normal(size=dim) + spread * rng.normal(size=(n, dim))


def _off_kink(rng, shape, margin=0.05):
    u = rng.uniform(-1.0, 1.0, shape)
    return np.sign(u) * (margin + np.abs(u))


def _away_from_kink(draw, pre_relu, margin=1e-3):
    """Redraw until every pre-relu activation clears the kink; FD across it is meaningless."""
    def point(rng):
        while True:
            args = draw(rng)
            if np.abs(pre_relu(args)).min() > margin:
                return args
    return point


def _ln_input(x, W, b, g, beta):
    return nx.layer_norm(nx.affine(x, W, b), g, beta).data


def _pool_op(seq, W, b, v):
    return attentive_stats_pool(seq, {"W_att": W, "b_att": b, "v_att": v})


def _classifier_op(x, *flat):
    keys = ("l1.W", "l1.b", "ln.g", "ln.b", "l2.W", "l2.b")
    return classifier_forward(x, dict(zip(keys, flat)), training=False).logits


def _lstm_op(seq, Wx, Wh, b):
    return lstm_forward(seq, {"lstm.Wx": Wx, "lstm.Wh": Wh, "lstm.b": b})


_ASR_KEYS = ("lstm.Wx", "lstm.Wh", "lstm.b", "l1.W", "l1.b", "ln.g", "ln.b", "l2.W", "l2.b")


def _asr_op(seq, *flat):
    return asr_forward(seq, dict(zip(_ASR_KEYS, flat)), training=False).logits


_COATT_KEYS = tuple(f"{b}.{w}" for b in ("emotion", "gender", "speaker", "asr") for w in ("W", "b"))


def _coatt_op(emo, gen, spk, asr, *flat):
    return coattend(emo, gen, spk, asr, dict(zip(_COATT_KEYS, flat)))


_SWFC_COUNTS = np.array([10, 4, 2])
_SWFC_LABELS = np.array([0, 0, 1, 1, 2, 0])


def _swfc_op(variant):
    cfg = SwfcConfig(variant=variant)
    return lambda e: swfc_loss(e, _SWFC_LABELS, cfg, _SWFC_COUNTS)


def cases() -> Iterator[tuple[str, Callable, PointFn]]:
    """``(name, op, point generator)`` for every differentiable primitive and module."""
    yield "affine", nx.affine, lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2)), r.normal(size=2)]
    yield "softmax", nx.softmax, lambda r: [r.uniform(-1, 1, size=(2, 5))]
    yield "log_softmax", nx.log_softmax, lambda r: [r.uniform(-1, 1, size=(2, 5))]
    yield "layer_norm", nx.layer_norm, lambda r: [r.normal(size=(3, 4)), r.normal(size=4), r.normal(size=4)]
    yield "relu", nx.relu, lambda r: [_off_kink(r, (3, 4))]
    yield "exp", nx.exp, lambda r: [r.uniform(-2, 2, size=(3, 3))]
    yield "log", nx.log, lambda r: [r.uniform(0.2, 3, size=(3, 3))]
    yield "sqrt", nx.sqrt, lambda r: [r.uniform(0.2, 3, size=(3, 3))]
    yield "tanh", nx.tanh, lambda r: [r.normal(size=(3, 3))]
    yield "sigmoid", nx.sigmoid, lambda r: [r.normal(size=(3, 3))]
    yield "concat", lambda a, b: nx.concat([a, b], axis=-1), lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 2))]
    yield "dot", nx.dot, lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))]
    yield "l2_normalize", nx.l2_normalize, lambda r: [r.normal(size=(3, 4))]
    yield "recurrent_cell", _lstm_op, lambda r: [r.normal(size=(4, 3)), 0.5 * r.normal(size=(3, 8)),
                                                 0.5 * r.normal(size=(2, 8)), 0.5 * r.normal(size=8)]
    yield "fusion", fuse_layers, lambda r: [r.normal(size=(3, 4, 2)), r.normal(size=3)]
    yield "pooling", _pool_op, lambda r: [r.normal(size=(4, 3)), r.normal(size=(3, 2)), r.normal(size=2),
                                          r.normal(size=2)]
    yield "classifier_head", _classifier_op, _away_from_kink(
        lambda r: [r.normal(size=(2, 4)), _init_scale(r, (4, 8)), _init_scale(r, 8, 4), 1 + 0.1 * r.normal(size=8),
                   0.1 * r.normal(size=8), _init_scale(r, (8, 3)), _init_scale(r, 3, 8)],
        lambda a: _ln_input(*a[:5]))
    yield "asr_head", _asr_op, _away_from_kink(
        lambda r: [r.normal(size=(4, 2)), _init_scale(r, (2, 12), 2), _init_scale(r, (3, 12), 3), _init_scale(r, 12, 3),
                   _init_scale(r, (3, 8)), _init_scale(r, 8, 3), 1 + 0.1 * r.normal(size=8),
                   0.1 * r.normal(size=8), _init_scale(r, (8, 3)), _init_scale(r, 3, 8)],
        lambda a: _ln_input(_lstm_op(*a[:4]), *a[4:8]))
    yield "coattention", _coatt_op, lambda r: [r.normal(size=3), r.normal(size=3), r.normal(size=3),
                                               r.normal(size=(3, 2))] + [
        _init_scale(r, ((2 if k.startswith("asr") else 3), 3) if k.endswith("W") else 3,
                    2 if k.startswith("asr") else 3) for k in _COATT_KEYS]
    yield "cross_entropy", lambda z: cross_entropy(z, [0, 2, 1]), lambda r: [r.normal(size=(3, 4))]
    yield "ctc", lambda z: ctc_loss(z, [1, 2, 2]), lambda r: [r.normal(size=(6, 3))]
    yield "swfc_eq2_literal", _swfc_op("eq2_literal"), lambda r: [_clustered(r, 6, 4)]
    yield "swfc_focal_supcon", _swfc_op("focal_supcon"), lambda r: [_clustered(r, 6, 4)]


def run_suite(n_points: int = 100, tolerance: float = 1e-4, seed: int = 0, names=None) -> list[GradCheckReport]:
    """Check each case at ``n_points`` random points; one report per case with the worst error."""
    reports = []
    for name, op, point_fn in cases():
        if names is not None and name not in names:
            continue
        rng = np.random.default_rng([seed, sum(name.encode())])
        worst = 0.0
        for k in range(n_points):
            rep = finite_diff_check(op, point_fn(rng), tolerance=tolerance, seed=k, name=name)
            worst = max(worst, rep.max_rel_error)
        reports.append(GradCheckReport(name, worst, tolerance, worst <= tolerance))
    return reports


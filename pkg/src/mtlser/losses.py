"""Training objectives: cross-entropy, CTC, the sample-weighted focal contrastive
loss and the weighted multi-task combination."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Tensor

BLANK = 0
SWFC_VARIANTS = ("eq2_literal", "focal_supcon")
WEIGHT_MODES = ("uniform", "inverse_frequency")
AUX_TASKS = ("gender", "speaker", "asr")


class ConfigError(ValueError):
    pass


class InfeasibleTargetError(ValueError):
    pass


class BatchTooSmallError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configs and breakdown
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ObjectiveConfig:
    alpha: float = 0.1
    beta: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0 / 3.0:
            raise ConfigError(f"alpha must satisfy 0 <= alpha < 1/3 (got {self.alpha}); "
                              "the emotion coefficient 1 - 3*alpha must stay positive")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0 (got {self.beta})")


@dataclass(frozen=True)
class SwfcConfig:
    tau: float = 0.07
    gamma: float = 2.0
    variant: str = "eq2_literal"
    weight_mode: str = "inverse_frequency"

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"swfc tau must be > 0 (got {self.tau})")
        if not self.gamma >= 0:
            raise ConfigError(f"swfc gamma must be >= 0 (got {self.gamma})")
        if self.variant not in SWFC_VARIANTS:
            raise ConfigError(f"swfc variant must be one of {SWFC_VARIANTS} (got {self.variant!r})")
        if self.weight_mode not in WEIGHT_MODES:
            raise ConfigError(f"swfc weight_mode must be one of {WEIGHT_MODES} (got {self.weight_mode!r})")


@dataclass
class LossBreakdown:
    l_emotion: float = 0.0
    l_gender: float = 0.0
    l_speaker: float = 0.0
    l_asr: float = 0.0
    l_swfc: float = 0.0
    total: float = 0.0
    coefficients: dict[str, float] = field(default_factory=dict)

    def recombine(self) -> float:
        return _weighted_sum(self.as_parts(), self.coefficients)

    def as_parts(self) -> dict[str, float]:
        return {"emotion": self.l_emotion, "gender": self.l_gender, "speaker": self.l_speaker,
                "asr": self.l_asr, "swfc": self.l_swfc}

    def to_dict(self) -> dict:
        d = {f"l_{k}": v for k, v in self.as_parts().items()}
        d["total"] = self.total
        d["coefficients"] = dict(self.coefficients)
        return d


def objective_coefficients(alpha: float, beta: float, tasks=AUX_TASKS) -> dict[str, float]:
    """Per-term weights; each enabled auxiliary takes ``alpha`` from the emotion term."""
    tasks = tuple(t for t in AUX_TASKS if t in tasks)
    coef = {"emotion": 1.0 - len(tasks) * alpha}
    for t in AUX_TASKS:
        coef[t] = alpha if t in tasks else 0.0
    coef["swfc"] = beta
    return coef


_ORDER = ("emotion", "gender", "speaker", "asr", "swfc")


def _weighted_sum(parts: dict, coef: dict):
    total = 0.0
    for k in _ORDER:
        c = coef.get(k, 0.0)
        if c != 0.0 and k in parts:
            total = total + parts[k] * c
    return total


def combined_total(parts: dict, coefficients: dict):
    """Weighted sum of loss tensors; zero-weight terms stay out of the graph."""
    total = None
    for k in _ORDER:
        c = coefficients.get(k, 0.0)
        if c == 0.0 or k not in parts:
            continue
        term = nx.mul(parts[k], c)
        total = term if total is None else nx.add(total, term)
    return total if total is not None else Tensor(0.0)


def combined_objective(parts: dict, cfg: ObjectiveConfig, tasks=AUX_TASKS) -> LossBreakdown:
    """Combine scalar task losses into a :class:`LossBreakdown`.

    ``parts`` maps ``emotion/gender/speaker/asr/swfc`` to floats; missing terms count as 0.
    """
    coef = objective_coefficients(cfg.alpha, cfg.beta, tasks)
    vals = {k: float(parts.get(k, 0.0)) for k in _ORDER}
    return LossBreakdown(vals["emotion"], vals["gender"], vals["speaker"], vals["asr"], vals["swfc"],
                         float(_weighted_sum(vals, coef)), coef)


# ---------------------------------------------------------------------------
# cross-entropy
# ---------------------------------------------------------------------------

def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    logits = nx.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError("cross_entropy", f"logits {logits.shape} vs labels {labels.shape}")
    C = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"cross_entropy: label out of range [0, {C})")
    lp = nx.log_softmax(logits, axis=-1)
    picked = nx.getitem(lp, (np.arange(labels.size), labels))
    return nx.mul(nx.mean(picked), -1.0)


# ---------------------------------------------------------------------------
# CTC
# ---------------------------------------------------------------------------

def min_frames(target) -> int:
    """Frames needed to emit ``target``: one per symbol plus a blank between repeats."""
    target = list(target)
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def _extend(targets, S_max):
    B = len(targets)
    ext = np.zeros((B, S_max), dtype=np.int64)
    skip = np.zeros((B, S_max), dtype=bool)
    S = np.empty(B, dtype=np.int64)
    for b, tgt in enumerate(targets):
        S[b] = 2 * len(tgt) + 1
        ext[b, 1:S[b]:2] = tgt
        for s in range(3, S[b], 2):
            skip[b, s] = ext[b, s] != ext[b, s - 2]
    return ext, skip, S


def _shift(a, k):
    out = np.full_like(a, -np.inf)
    out[..., k:] = a[..., :-k]
    return out


def _ctc_lattice(logp: np.ndarray, targets):
    """Forward/backward log-lattices and log-likelihood, batched over utterances."""
    B, T, K = logp.shape
    S_max = 2 * max((len(t) for t in targets), default=0) + 1
    ext, skip, S = _extend(targets, S_max)
    valid = np.arange(S_max)[None, :] < S[:, None]
    lp_ext = np.take_along_axis(logp, np.broadcast_to(ext[:, None, :], (B, T, S_max)), axis=2)
    lp_ext = np.where(valid[:, None, :], lp_ext, -np.inf)
    rows = np.arange(B)
    with np.errstate(invalid="ignore"):
        alpha = np.full((B, T, S_max), -np.inf)
        alpha[:, 0, 0] = lp_ext[:, 0, 0]
        if S_max > 1:
            alpha[:, 0, 1] = lp_ext[:, 0, 1]
        for t in range(1, T):
            a = alpha[:, t - 1]
            a2 = np.where(skip, _shift(a, 2), -np.inf) if S_max > 2 else np.full_like(a, -np.inf)
            alpha[:, t] = np.logaddexp(np.logaddexp(a, _shift(a, 1)), a2) + lp_ext[:, t]
        beta = np.full((B, T, S_max), -np.inf)
        beta[rows, T - 1, S - 1] = 0.0
        has2 = S > 1
        beta[rows[has2], T - 1, S[has2] - 2] = 0.0
        for t in range(T - 2, -1, -1):
            nb = beta[:, t + 1] + lp_ext[:, t + 1]
            n1 = np.full_like(nb, -np.inf)
            n1[:, :-1] = nb[:, 1:]
            n2 = np.full_like(nb, -np.inf)
            if S_max > 2:
                n2[:, :-2] = np.where(skip[:, 2:], nb[:, 2:], -np.inf)
            beta[:, t] = np.logaddexp(np.logaddexp(nb, n1), n2)
        last = alpha[rows, T - 1, S - 1]
        prev = np.where(has2, alpha[rows, T - 1, np.maximum(S - 2, 0)], -np.inf)
        loglik = np.logaddexp(last, prev)
    return alpha, beta, loglik, ext


def ctc_nll(log_probs, targets) -> Tensor:
    """Per-utterance CTC negative log-likelihood from ``(B, T, V+1)`` log-probabilities.

    The gradient w.r.t. the log-probabilities is minus the state occupancy per symbol.
    """
    log_probs = nx.as_tensor(log_probs)
    if log_probs.ndim != 3:
        raise DimensionError("ctc_nll", f"expected (B, T, V+1) log-probs, got {log_probs.shape}")
    B, T, K = log_probs.shape
    targets = [np.asarray(t, dtype=np.int64) for t in targets]
    if len(targets) != B:
        raise DimensionError("ctc_nll", f"{len(targets)} targets for batch of {B}")
    for tgt in targets:
        if tgt.size and (tgt.min() < 1 or tgt.max() >= K):
            raise ValueError(f"ctc target ids must be in [1, {K}); 0 is the blank")
        if min_frames(tgt) > T:
            raise InfeasibleTargetError(
                f"target of length {tgt.size} needs {min_frames(tgt)} frames, only {T} available")
    alpha, beta, loglik, ext = _ctc_lattice(log_probs.data, targets)

    def bw(g):
        occ = np.exp(alpha + beta - loglik[:, None, None])
        onehot = np.zeros((B, ext.shape[1], K))
        np.put_along_axis(onehot, ext[:, :, None], 1.0, axis=2)
        nx._accum(log_probs, -g[:, None, None] * (occ @ onehot))

    return nx._result(-loglik, (log_probs,), bw)


def ctc_loss(logits, target) -> Tensor:
    """CTC loss of one utterance from ``(T, V+1)`` logits; blank is index 0."""
    logits = nx.as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError("ctc_loss", f"expected (T, V+1) logits, got {logits.shape}")
    lp = nx.log_softmax(nx.reshape(logits, (1,) + logits.shape), axis=-1)
    return nx.reshape(ctc_nll(lp, [target]), ())


# ---------------------------------------------------------------------------
# sample-weighted focal contrastive loss
# ---------------------------------------------------------------------------

def sample_weights(labels, class_counts, mode: str) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if mode == "uniform":
        return np.ones(labels.size)
    counts = np.asarray(class_counts, dtype=np.float64)
    if labels.size and (labels.min() < 0 or labels.max() >= counts.size):
        raise ValueError("swfc label outside class_counts range")
    if np.any(counts[labels] <= 0):
        raise ValueError("swfc: batch contains a class with zero training count")
    raw = counts.sum() / (counts.size * counts[labels])
    return raw / raw.mean()


def _off_diagonal_index(n: int) -> np.ndarray:
    return np.array([[j for j in range(n) if j != i] for i in range(n)], dtype=np.int64)


def swfc_loss(embeddings, labels, cfg: SwfcConfig, class_counts=None) -> Tensor:
    """Sample-weighted focal contrastive loss over a batch of global embeddings.

    Similarities are dot products of L2-normalized embeddings. ``eq2_literal`` sums
    ``p_ij (1 - p_ij)^gamma`` over all other samples; ``focal_supcon`` averages
    ``(1 - p_ij)^gamma log p_ij`` over same-label partners, skipping anchors without one.
    """
    if not isinstance(cfg, SwfcConfig):
        raise ConfigError("swfc_loss needs a SwfcConfig")
    emb = nx.as_tensor(embeddings)
    labels = np.asarray(labels, dtype=np.int64)
    N = emb.shape[0]
    if N < 2:
        raise BatchTooSmallError(f"swfc needs at least 2 samples, got {N}")
    if labels.shape != (N,):
        raise DimensionError("swfc_loss", f"{labels.shape} labels for {N} embeddings")
    if cfg.weight_mode == "inverse_frequency" and class_counts is None:
        raise ConfigError("inverse_frequency weights need class_counts")
    w = sample_weights(labels, class_counts, cfg.weight_mode)

    e = nx.l2_normalize(emb, axis=-1)
    sim = nx.matmul(e, nx.swapaxes(e, 0, 1))
    idx = _off_diagonal_index(N)
    logits = nx.mul(nx.getitem(sim, (np.arange(N)[:, None], idx)), 1.0 / cfg.tau)

    if cfg.variant == "eq2_literal":
        if cfg.gamma == 0:
            # each row of p sums to one, so the loss is -mean(w) with zero gradient
            return Tensor(-float(np.mean(w)))
        p = nx.softmax(logits, axis=-1)
        term = nx.mul(p, nx.power(nx.sub(1.0, p), cfg.gamma))
        per_anchor = nx.sum(term, axis=-1)
        return nx.mul(nx.mean(nx.mul(per_anchor, w)), -1.0)

    logp = nx.log_softmax(logits, axis=-1)
    pos = labels[idx] == labels[:, None]
    n_pos = pos.sum(axis=1)
    keep = n_pos > 0
    if not keep.any():
        return Tensor(0.0)
    pair_w = np.where(keep[:, None], pos / np.maximum(n_pos, 1)[:, None], 0.0)
    term = logp if cfg.gamma == 0 else nx.mul(nx.power(nx.sub(1.0, nx.exp(logp)), cfg.gamma), logp)
    per_anchor = nx.sum(nx.mul(term, pair_w), axis=-1)
    return nx.mul(nx.sum(nx.mul(per_anchor, w * keep)), -1.0 / keep.sum())

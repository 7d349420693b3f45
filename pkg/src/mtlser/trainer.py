"""Adam, the end-to-end training loop with ablation toggles, and checkpoints."""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .data import Utterance, class_counts
from .losses import (AUX_TASKS, ConfigError, LossBreakdown, ObjectiveConfig, SwfcConfig, combined_total,
                     cross_entropy, ctc_nll, objective_coefficients, swfc_loss)
from .model import ModelDims, forward, group_by_frames, init_params
from .numerics import Tensor

log = logging.getLogger(__name__)

PAPER_LR = 1e-5
DESK_LR = 1e-3
FUSION_MODES = ("learnable", "last")


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointMismatchError(CheckpointError):
    pass


class ConfigHashMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    swfc: SwfcConfig = field(default_factory=SwfcConfig)
    lr: float = DESK_LR
    batch_size: int = 16
    epochs: int = 60
    seed: int = 0
    use_mtl: bool = True
    use_coattention: bool = True
    use_swfc: bool = True
    fusion_mode: str = "learnable"
    tasks: tuple[str, ...] = AUX_TASKS
    hidden: int = 32
    rnn_hidden: int = 16
    dropout: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(t for t in AUX_TASKS if t in self.tasks))
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.use_swfc and self.batch_size < 2:
            raise ConfigError("use_swfc needs batch_size >= 2 (the contrastive loss needs pairs)")
        if self.use_coattention and not self.use_mtl:
            raise ConfigError("use_coattention requires use_mtl")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def active_tasks(self) -> tuple[str, ...]:
        """Auxiliary branches in the graph; alpha = 0 leaves them untrained, so they are dropped."""
        if not self.use_mtl or self.objective.alpha == 0.0:
            return ()
        return self.tasks

    @property
    def coattention_active(self) -> bool:
        return self.use_coattention and bool(self.active_tasks)

    @property
    def effective_beta(self) -> float:
        return self.objective.beta if self.use_swfc else 0.0

    def coefficients(self) -> dict[str, float]:
        tasks = self.active_tasks
        return objective_coefficients(self.objective.alpha if tasks else 0.0, self.effective_beta, tasks)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["objective"] = ObjectiveConfig(**d.get("objective", {}))
        d["swfc"] = SwfcConfig(**d.get("swfc", {}))
        if "tasks" in d:
            d["tasks"] = tuple(d["tasks"])
        return cls(**d)


def paper_preset(**overrides) -> TrainConfig:
    """The reported optimization settings: batch 16, 60 epochs, Adam at 1e-5."""
    return TrainConfig(lr=PAPER_LR, batch_size=16, epochs=60, **overrides)


def infer_dims(corpus: list[Utterance], cfg: TrainConfig) -> ModelDims:
    if not corpus:
        raise TrainingError("empty corpus")
    s = corpus[0].stack
    return ModelDims(n_layers=s.n_layers, dim=s.dim,
                     n_speakers=max(2, max(u.speaker for u in corpus) + 1),
                     vocab_size=max(1, max((max(u.tokens) for u in corpus if u.tokens), default=1)),
                     hidden=cfg.hidden, rnn_hidden=cfg.rnn_hidden, dropout=cfg.dropout)


def config_hash(cfg: TrainConfig, dims: ModelDims) -> bytes:
    """SHA-256 over everything that shapes the trajectory except the epoch budget."""
    d = cfg.to_dict()
    d.pop("epochs")
    blob = json.dumps({"train": d, "dims": dims.to_dict()}, sort_keys=True).encode()
    return hashlib.sha256(blob).digest()


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update in place; parameters without a gradient are skipped."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        state.m[name] = m
        state.v[name] = v
    return state


# ---------------------------------------------------------------------------
# batch loss
# ---------------------------------------------------------------------------

def batch_losses(params, batch: list[Utterance], dims: ModelDims, cfg: TrainConfig, counts,
                 training: bool, rng_key=()) -> tuple[dict[str, Tensor], Tensor]:
    """Per-task losses on one mini-batch and their weighted total."""
    tasks = cfg.active_tasks
    stacks = [u.stack.layers for u in batch]
    pooled, emo, gen, spk, ctc = [], [], [], [], []
    order = []
    for gi, idx in enumerate(group_by_frames(stacks)):
        out = forward(params, np.stack([stacks[i] for i in idx]), dims, tasks=tasks,
                      use_coattention=cfg.coattention_active, fusion_mode=cfg.fusion_mode,
                      training=training, rng_key=tuple(rng_key) + (gi,))
        order.extend(idx.tolist())
        pooled.append(out.pooled)
        emo.append(out.emotion.logits)
        if out.gender is not None:
            gen.append(out.gender.logits)
        if out.speaker is not None:
            spk.append(out.speaker.logits)
        if out.asr is not None:
            ctc.append(ctc_nll(nx.log_softmax(out.asr.logits, axis=-1), [batch[i].tokens for i in idx]))
    ordered = [batch[i] for i in order]
    parts = {"emotion": cross_entropy(nx.concat(emo, axis=0), [u.emotion for u in ordered])}
    if gen:
        parts["gender"] = cross_entropy(nx.concat(gen, axis=0), [u.gender for u in ordered])
    if spk:
        parts["speaker"] = cross_entropy(nx.concat(spk, axis=0), [u.speaker for u in ordered])
    if ctc:
        parts["asr"] = nx.mean(nx.concat(ctc, axis=0))
    if cfg.effective_beta > 0:
        parts["swfc"] = swfc_loss(nx.concat(pooled, axis=0), [u.emotion for u in ordered], cfg.swfc, counts)
    return parts, combined_total(parts, cfg.coefficients())


def _breakdown(parts: dict, total: float, coef: dict) -> LossBreakdown:
    v = {k: float(t.data) for k, t in parts.items()}
    return LossBreakdown(v.get("emotion", 0.0), v.get("gender", 0.0), v.get("speaker", 0.0),
                         v.get("asr", 0.0), v.get("swfc", 0.0), total, dict(coef))


def _epoch_mean(items: list[LossBreakdown], coef: dict) -> LossBreakdown:
    n = len(items)
    fields_ = ("l_emotion", "l_gender", "l_speaker", "l_asr", "l_swfc", "total")
    means = [float(np.sum([getattr(b, f) for b in items])) / n for f in fields_]
    return LossBreakdown(*means, coefficients=dict(coef))


def batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Seeded shuffle per epoch; a trailing batch of one sample is dropped."""
    order = np.random.default_rng([seed, epoch, 7]).permutation(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) < 2:
        out.pop()
    return out


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict[str, Tensor]
    log: list[LossBreakdown]
    state: AdamState
    dims: ModelDims
    config: TrainConfig


def train(corpus: list[Utterance], cfg: TrainConfig, dims: ModelDims | None = None,
          resume_from=None, checkpoint_path=None, counts=None) -> TrainResult:
    """Train on ``corpus``; deterministic given ``cfg.seed``.

    ``resume_from`` is a checkpoint path; its config hash must match ``cfg``/``dims``.
    ``checkpoint_path``, when given, is rewritten after every epoch.
    """
    if not corpus:
        raise TrainingError("empty corpus")
    dims = dims or infer_dims(corpus, cfg)
    for u in corpus:
        if u.speaker >= dims.n_speakers or any(t > dims.vocab_size for t in u.tokens):
            raise TrainingError(f"{u.id}: labels exceed head dimensions {dims}")
    counts = class_counts(corpus, dims.n_emotions) if counts is None else np.asarray(counts)
    params = init_params(dims, cfg.seed)
    state = AdamState()
    history: list[LossBreakdown] = []
    start = 0
    chash = config_hash(cfg, dims)
    if resume_from is not None:
        ck = load_checkpoint(resume_from, expected=params)
        if ck.config_hash != chash:
            raise ConfigHashMismatchError("checkpoint was written under a different configuration; refusing to resume")
        for k, arr in ck.params.items():
            params[k].data = arr
        state = ck.state
        history = ck.log
        start = ck.epoch
    coef = cfg.coefficients()
    for epoch in range(start, cfg.epochs):
        items = []
        for bi, idx in enumerate(batches(len(corpus), cfg.batch_size, cfg.seed, epoch)):
            for p in params.values():
                p.grad = None
            parts, total = batch_losses(params, [corpus[i] for i in idx], dims, cfg, counts,
                                        training=True, rng_key=(cfg.seed, epoch, bi))
            tv = float(total.data)
            if not np.isfinite(tv):
                raise TrainingError(f"non-finite loss at epoch {epoch} batch {bi}")
            if total.requires_grad:
                total.backward()
                adam_step(params, {k: p.grad for k, p in params.items()}, state, cfg.lr)
            items.append(_breakdown(parts, tv, coef))
        history.append(_epoch_mean(items, coef))
        log.info("epoch %d total %.6f emotion %.6f", epoch + 1, history[-1].total, history[-1].l_emotion)
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, params, state, epoch + 1, chash, history)
    return TrainResult(params, history, state, dims, cfg)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"MTCK"
CKPT_VERSION = 1
_KINDS = {0: "param", 1: "m", 2: "v"}


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    state: AdamState
    epoch: int
    config_hash: bytes
    log: list[LossBreakdown]


def _pack_array(kind: int, name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    head = struct.pack("<BH", kind, len(nb)) + nb + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def encode_checkpoint(params, state: AdamState, epoch: int, chash: bytes, history) -> bytes:
    entries = [(0, k, p.data if isinstance(p, Tensor) else p) for k, p in params.items()]
    entries += [(1, k, a) for k, a in state.m.items()] + [(2, k, a) for k, a in state.v.items()]
    out = [CKPT_MAGIC, struct.pack("<B", CKPT_VERSION), chash, struct.pack("<IQI", epoch, state.step, len(entries))]
    out += [_pack_array(kind, k, np.asarray(a)) for kind, k, a in entries]
    blob = json.dumps([b.to_dict() for b in history]).encode("utf-8")
    out.append(struct.pack("<I", len(blob)) + blob)
    return b"".join(out)


def save_checkpoint(path, params, state: AdamState, epoch: int, chash: bytes, history=()):
    Path(path).write_bytes(encode_checkpoint(params, state, epoch, chash, list(history)))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {bytes(buf[:4])!r}")
    try:
        (version,) = struct.unpack_from("<B", buf, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"checkpoint version {version}, reader supports {CKPT_VERSION}")
        chash = bytes(buf[5:37])
        epoch, step, n = struct.unpack_from("<IQI", buf, 37)
        off = 37 + struct.calcsize("<IQI")
        params, state = {}, AdamState(step=step)
        for _ in range(n):
            kind, ln = struct.unpack_from("<BH", buf, off)
            off += 3
            name = buf[off:off + ln].decode("utf-8")
            off += ln
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            size = int(np.prod(shape)) * 8
            if off + size > len(buf):
                raise CheckpointError(f"truncated checkpoint while reading {name!r}")
            arr = np.frombuffer(buf, dtype="<f8", count=size // 8, offset=off).reshape(shape).astype(np.float64)
            off += size
            {0: params, 1: state.m, 2: state.v}[kind][name] = arr
        (ln,) = struct.unpack_from("<I", buf, off)
        raw = json.loads(buf[off + 4:off + 4 + ln].decode("utf-8"))
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    history = [LossBreakdown(**{k: v for k, v in r.items()}) for r in raw]
    return Checkpoint(params, state, epoch, chash, history)


def load_checkpoint(path, expected: dict | None = None) -> Checkpoint:
    """Read a checkpoint; with ``expected`` params, names and shapes must match exactly."""
    ck = decode_checkpoint(Path(path).read_bytes())
    if expected is not None:
        want = {k: tuple(v.shape) for k, v in expected.items()}
        got = {k: tuple(v.shape) for k, v in ck.params.items()}
        if want != got:
            diff = sorted(k for k in set(want) | set(got) if want.get(k) != got.get(k))
            detail = ", ".join(f"{k}: expected {want.get(k)}, found {got.get(k)}" for k in diff[:5])
            raise CheckpointMismatchError(f"checkpoint parameters do not match the model ({detail})")
    return ck


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)

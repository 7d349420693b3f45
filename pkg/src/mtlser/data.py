"""Synthetic long-tailed utterance corpus, the binary feature format and manifests.

Each utterance is a stack of per-layer frame features built from an emotion
prototype, a gender offset, a speaker offset, a per-frame token embedding and
Gaussian noise. Layers mix these sources with different strengths so that no
single layer is best for every task.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fusion import LayerStack
from .losses import ConfigError

EMOTIONS = ("A", "H", "S", "F", "U", "C", "D", "N")
EMOTION_NAMES = ("anger", "happiness", "sadness", "fear", "surprise", "contempt", "disgust", "neutral")
N_EMOTIONS = len(EMOTIONS)

# one dominant class (neutral), two mid classes, five tail classes down to 1%
DEFAULT_CLASS_PROBS = (0.13, 0.21, 0.07, 0.02, 0.06, 0.05, 0.01, 0.45)

FEATURE_MAGIC = b"LSF1"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sB3I")


class FeatureFormatError(ValueError):
    pass


class MagicMismatchError(FeatureFormatError):
    pass


class VersionMismatchError(FeatureFormatError):
    pass


class TruncatedPayloadError(FeatureFormatError):
    pass


class ManifestError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"manifest line {line}: {message}")
        self.line = line


@dataclass
class Utterance:
    id: str
    stack: LayerStack
    emotion: int
    gender: int
    speaker: int
    tokens: tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= self.emotion < N_EMOTIONS:
            raise ValueError(f"{self.id}: emotion {self.emotion} outside [0, {N_EMOTIONS})")
        if self.gender not in (0, 1):
            raise ValueError(f"{self.id}: gender {self.gender} not in {{0, 1}}")
        if self.speaker < 0:
            raise ValueError(f"{self.id}: negative speaker id {self.speaker}")
        self.tokens = tuple(int(t) for t in self.tokens)
        if any(t < 1 for t in self.tokens):
            raise ValueError(f"{self.id}: token ids must be >= 1 (0 is the CTC blank)")


@dataclass(frozen=True)
class GeneratorConfig:
    n_utterances: int = 3000
    class_probs: tuple[float, ...] = DEFAULT_CLASS_PROBS
    n_speakers: int = 50
    n_layers: int = 4
    frames: tuple[int, int] = (8, 10)
    dim: int = 16
    vocab_size: int = 6
    tokens_per_utt: tuple[int, int] = (1, 3)
    noise_scale: float = 1.0
    emotion_scale: float = 0.6
    gender_scale: float = 1.0
    speaker_scale: float = 1.0
    token_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "class_probs", tuple(float(p) for p in self.class_probs))
        object.__setattr__(self, "frames", tuple(int(t) for t in self.frames))
        object.__setattr__(self, "tokens_per_utt", tuple(int(t) for t in self.tokens_per_utt))
        probs = np.asarray(self.class_probs)
        if probs.size != N_EMOTIONS:
            raise ConfigError(f"class_probs needs {N_EMOTIONS} entries, got {probs.size}")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise ConfigError(f"class_probs must be non-negative and sum to 1, got sum {probs.sum()}")
        for name in ("n_utterances", "n_speakers", "n_layers", "dim", "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        lo, hi = self.frames
        if not 1 <= lo <= hi:
            raise ConfigError(f"frames range must satisfy 1 <= min <= max, got {self.frames}")
        tlo, thi = self.tokens_per_utt
        if not 0 <= tlo <= thi:
            raise ConfigError(f"tokens_per_utt range invalid: {self.tokens_per_utt}")
        if 2 * thi > lo:
            raise ConfigError(f"{thi} tokens may not fit in {lo} frames (need 2 frames per token)")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be >= 0")


@dataclass
class CorpusStructure:
    """Latent sources shared by every utterance of a generated corpus."""

    emotion_means: np.ndarray  # (8, D)
    gender_offsets: np.ndarray  # (2, D)
    speaker_offsets: np.ndarray  # (S, D)
    token_embeddings: np.ndarray  # (V+1, D), row 0 = silence
    layer_mix: np.ndarray  # (L, 4): emotion, gender, speaker, token strength per layer
    token_bias: np.ndarray  # (8, V) emotion-dependent token preferences


def _layer_mix(L: int) -> np.ndarray:
    """Emotion peaks in the middle layers, speaker/gender early, token content late."""
    depth = np.linspace(0.0, 1.0, L) if L > 1 else np.array([0.5])
    emo = np.exp(-((depth - 0.5) ** 2) / 0.08)
    spk = 1.0 - 0.7 * depth
    gen = 1.0 - 0.5 * depth
    tok = 0.3 + 0.7 * depth
    return np.stack([emo, gen, spk, tok], axis=1)


def corpus_structure(cfg: GeneratorConfig) -> CorpusStructure:
    rng = np.random.default_rng([cfg.seed, 1])
    D = cfg.dim
    means = rng.standard_normal((N_EMOTIONS, D))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    g = rng.standard_normal(D)
    g /= np.linalg.norm(g)
    spk = rng.standard_normal((cfg.n_speakers, D)) / np.sqrt(D)
    tok = rng.standard_normal((cfg.vocab_size + 1, D)) / np.sqrt(D) * 2.0
    tok[0] = 0.0
    bias = rng.standard_normal((N_EMOTIONS, cfg.vocab_size))
    return CorpusStructure(means * cfg.emotion_scale * np.sqrt(D) / 2.0,
                           np.stack([g, -g]) * cfg.gender_scale,
                           spk * cfg.speaker_scale * np.sqrt(D) / 2.0,
                           tok * cfg.token_scale,
                           _layer_mix(cfg.n_layers), bias)


def _frame_tokens(tokens, T, rng) -> np.ndarray:
    """Assign each token a contiguous run of frames, separated by silence frames."""
    frame_tok = np.zeros(T, dtype=np.int64)
    n = len(tokens)
    if n == 0:
        return frame_tok
    cuts = np.sort(rng.choice(np.arange(1, T), size=n - 1, replace=False)) if n > 1 else np.array([], int)
    edges = np.concatenate([[0], cuts, [T]])
    for k, tk in enumerate(tokens):
        a, b = edges[k], edges[k + 1]
        frame_tok[a:max(a + 1, b - 1)] = tk
    return frame_tok


def _stack_for(struct_: CorpusStructure, cfg, emotion, gender, speaker, tokens, T, rng):
    frame_tok = _frame_tokens(tokens, T, rng)
    # emotional cues are uneven over time
    envelope = 0.5 + rng.random(T)
    mix = struct_.layer_mix
    comp_emo = envelope[:, None] * struct_.emotion_means[emotion][None, :]
    comp_gen = np.broadcast_to(struct_.gender_offsets[gender], (T, cfg.dim))
    comp_spk = np.broadcast_to(struct_.speaker_offsets[speaker], (T, cfg.dim))
    comp_tok = struct_.token_embeddings[frame_tok]
    layers = (mix[:, 0, None, None] * comp_emo + mix[:, 1, None, None] * comp_gen
              + mix[:, 2, None, None] * comp_spk + mix[:, 3, None, None] * comp_tok)
    layers = layers + cfg.noise_scale * rng.standard_normal(layers.shape)
    # stored features are float32, keep the in-memory stack identical to a file round trip
    return LayerStack(layers.astype(np.float32).astype(np.float64))


def generate_corpus(cfg: GeneratorConfig) -> list[Utterance]:
    """Deterministic synthetic corpus for ``cfg.seed``."""
    st = corpus_structure(cfg)
    rng = np.random.default_rng([cfg.seed, 2])
    probs = np.asarray(cfg.class_probs)
    speaker_gender = rng.integers(0, 2, cfg.n_speakers)
    out = []
    for k in range(cfg.n_utterances):
        emotion = int(rng.choice(N_EMOTIONS, p=probs))
        speaker = int(rng.integers(cfg.n_speakers))
        n_tok = int(rng.integers(cfg.tokens_per_utt[0], cfg.tokens_per_utt[1] + 1))
        tok_p = np.exp(st.token_bias[emotion])
        tok_p /= tok_p.sum()
        tokens = tuple(int(t) + 1 for t in rng.choice(cfg.vocab_size, size=n_tok, p=tok_p))
        T = int(rng.integers(cfg.frames[0], cfg.frames[1] + 1))
        gender = int(speaker_gender[speaker])
        stack = _stack_for(st, cfg, emotion, gender, speaker, tokens, T, rng)
        out.append(Utterance(f"utt{k:06d}", stack, emotion, gender, speaker, tokens))
    return out


@dataclass
class CorpusSplits:
    train: list[Utterance]
    dev: list[Utterance]
    test: list[Utterance]
    heldout_speakers: tuple[int, ...] = field(default_factory=tuple)


def split_corpus(corpus: list[Utterance], n_heldout_speakers: int = 10, dev_fraction: float = 0.1,
                 seed: int = 0) -> CorpusSplits:
    """Disjoint train/dev/test; every utterance of a held-out speaker goes to test."""
    speakers = sorted({u.speaker for u in corpus})
    if n_heldout_speakers >= len(speakers):
        raise ConfigError("need at least one training speaker")
    rng = np.random.default_rng([seed, 3])
    held = set(int(s) for s in rng.choice(speakers, size=n_heldout_speakers, replace=False))
    test = [u for u in corpus if u.speaker in held]
    rest = [u for u in corpus if u.speaker not in held]
    order = rng.permutation(len(rest))
    n_dev = int(round(dev_fraction * len(rest)))
    dev_idx = set(order[:n_dev].tolist())
    dev = [u for i, u in enumerate(rest) if i in dev_idx]
    train = [u for i, u in enumerate(rest) if i not in dev_idx]
    return CorpusSplits(train, dev, test, tuple(sorted(held)))


def relabel_speakers(splits: CorpusSplits) -> CorpusSplits:
    """Map training speakers to ``0..S-1`` and held-out speakers past them."""
    train_ids = sorted({u.speaker for u in splits.train})
    other = sorted({u.speaker for u in splits.dev + splits.test} - set(train_ids))
    mapping = {s: i for i, s in enumerate(train_ids + other)}

    def remap(us):
        return [Utterance(u.id, u.stack, u.emotion, u.gender, mapping[u.speaker], u.tokens) for u in us]

    return CorpusSplits(remap(splits.train), remap(splits.dev), remap(splits.test),
                        tuple(mapping[s] for s in splits.heldout_speakers))


def class_counts(corpus: list[Utterance], n_classes: int = N_EMOTIONS) -> np.ndarray:
    return np.bincount([u.emotion for u in corpus], minlength=n_classes)


# ---------------------------------------------------------------------------
# binary feature files
# ---------------------------------------------------------------------------

def encode_features(stack: LayerStack) -> bytes:
    layers = stack.layers if isinstance(stack, LayerStack) else np.asarray(stack)
    L, T, D = layers.shape
    return _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, L, T, D) + layers.astype("<f4").tobytes(order="C")


def decode_features(buf: bytes) -> LayerStack:
    if len(buf) < 4 or buf[:4] != FEATURE_MAGIC:
        raise MagicMismatchError(f"bad magic {bytes(buf[:4])!r}, expected {FEATURE_MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedPayloadError(f"header needs {_HEADER.size} bytes, file has {len(buf)}")
    _, version, L, T, D = _HEADER.unpack_from(buf)
    if version != FEATURE_VERSION:
        raise VersionMismatchError(f"feature file version {version}, reader supports {FEATURE_VERSION}")
    need = 4 * L * T * D
    got = len(buf) - _HEADER.size
    if got != need:
        raise TruncatedPayloadError(f"header declares {L}x{T}x{D} floats ({need} bytes), payload has {got}")
    data = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(L, T, D)
    return LayerStack(data.astype(np.float64))


def write_features(path, stack: LayerStack, overwrite: bool = True):
    with open(path, "wb" if overwrite else "xb") as fh:
        fh.write(encode_features(stack))


def read_features(path) -> LayerStack:
    with open(path, "rb") as fh:
        return decode_features(fh.read())


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

_MANIFEST_FIELDS = ("id", "features", "emotion", "gender", "speaker", "tokens")


def manifest_record(u: Utterance, feature_path: str) -> str:
    return json.dumps({"id": u.id, "features": feature_path, "emotion": u.emotion, "gender": u.gender,
                       "speaker": u.speaker, "tokens": " ".join(str(t) for t in u.tokens)})


def write_corpus(corpus: list[Utterance], out_dir, manifest_name: str = "manifest.jsonl",
                 overwrite: bool = False) -> Path:
    """Write one feature file per utterance under ``out_dir/features`` and a manifest."""
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / manifest_name
    if manifest.exists() and not overwrite:
        raise FileExistsError(f"{manifest} exists")
    lines = []
    for u in corpus:
        rel = f"features/{u.id}.lsf"
        write_features(out_dir / rel, u.stack, overwrite=overwrite)
        lines.append(manifest_record(u, rel))
    manifest.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return manifest


def _parse_int(rec, key, lineno):
    v = rec[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise ManifestError(lineno, f"field {key!r} must be an integer, got {v!r}")
    return v


def load_manifest(path) -> list[Utterance]:
    """Read a JSON-lines manifest; feature paths resolve relative to the manifest."""
    path = Path(path)
    base = path.parent
    corpus = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(lineno, f"malformed record ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise ManifestError(lineno, "record must be an object")
            missing = [k for k in _MANIFEST_FIELDS if k not in rec]
            if missing:
                raise ManifestError(lineno, f"missing fields {missing}")
            emotion = _parse_int(rec, "emotion", lineno)
            gender = _parse_int(rec, "gender", lineno)
            speaker = _parse_int(rec, "speaker", lineno)
            if not 0 <= emotion < N_EMOTIONS:
                raise ManifestError(lineno, f"emotion {emotion} outside [0, {N_EMOTIONS})")
            if gender not in (0, 1):
                raise ManifestError(lineno, f"gender {gender} not in {{0, 1}}")
            if speaker < 0:
                raise ManifestError(lineno, f"speaker {speaker} is negative")
            try:
                tokens = tuple(int(t) for t in str(rec["tokens"]).split())
            except ValueError:
                raise ManifestError(lineno, f"tokens must be space-separated integers, got {rec['tokens']!r}") from None
            if any(t < 1 for t in tokens):
                raise ManifestError(lineno, "token ids must be >= 1 (0 is the CTC blank)")
            fpath = base / rec["features"]
            if not os.path.isfile(fpath):
                raise ManifestError(lineno, f"feature file not found: {fpath}")
            try:
                stack = read_features(fpath)
            except FeatureFormatError as exc:
                raise ManifestError(lineno, f"{fpath}: {exc}") from exc
            corpus.append(Utterance(str(rec["id"]), stack, emotion, gender, speaker, tokens))
    return corpus

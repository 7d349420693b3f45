import json
import math

import numpy as np
import pytest

from mtlser import data
from mtlser.data import (ConfigError, GeneratorConfig, MagicMismatchError, ManifestError, TruncatedPayloadError,
                         Utterance, VersionMismatchError, class_counts, decode_features, encode_features,
                         generate_corpus, load_manifest, read_features, relabel_speakers, split_corpus,
                         write_corpus, write_features)
from mtlser.fusion import LayerStack

SMALL = dict(n_utterances=60, n_speakers=6)


def test_one_hot_class_probs():
    probs = [0.0] * 8
    probs[5] = 1.0
    corpus = generate_corpus(GeneratorConfig(class_probs=probs, **SMALL))
    assert {u.emotion for u in corpus} == {5}


def test_same_seed_bitwise_identical():
    a = generate_corpus(GeneratorConfig(seed=3, **SMALL))
    b = generate_corpus(GeneratorConfig(seed=3, **SMALL))
    assert all(encode_features(x.stack) == encode_features(y.stack) for x, y in zip(a, b))
    assert [(u.emotion, u.gender, u.speaker, u.tokens) for u in a] == [(u.emotion, u.gender, u.speaker, u.tokens)
                                                                      for u in b]
    c = generate_corpus(GeneratorConfig(seed=4, **SMALL))
    assert any(encode_features(x.stack) != encode_features(y.stack) for x, y in zip(a, c))


def test_class_counts_within_binomial_bounds():
    probs = np.array([0.5, 0.3, 0.2, 0, 0, 0, 0, 0])
    n = 2000
    corpus = generate_corpus(GeneratorConfig(n_utterances=n, class_probs=tuple(probs), frames=(6, 6), dim=4))
    counts = class_counts(corpus)
    sigma = np.sqrt(n * probs * (1 - probs))
    assert np.all(np.abs(counts - n * probs) <= 3 * sigma)


def test_default_distribution_is_long_tailed():
    probs = np.array(GeneratorConfig().class_probs)
    assert probs.max() == pytest.approx(0.45) and probs.min() == pytest.approx(0.01)
    assert abs(probs.sum() - 1.0) <= 1e-9


def test_bayes_probe_separates_noiseless_classes():
    cfg = GeneratorConfig(n_utterances=400, noise_scale=0.0, gender_scale=0.0, speaker_scale=0.0,
                          token_scale=0.0, seed=2)
    st = data.corpus_structure(cfg)
    corpus = generate_corpus(cfg)
    # frame- and layer-averaged features are a positive multiple of the class mean
    feats = np.stack([u.stack.layers.mean(axis=(0, 1)) for u in corpus])
    means = st.emotion_means
    unit = means / np.linalg.norm(means, axis=1, keepdims=True)
    pred = (feats / np.linalg.norm(feats, axis=1, keepdims=True) @ unit.T).argmax(axis=1)
    assert np.array_equal(pred, [u.emotion for u in corpus])


def test_generator_validation():
    with pytest.raises(ConfigError):
        GeneratorConfig(class_probs=(0.5, 0.5))
    with pytest.raises(ConfigError):
        GeneratorConfig(class_probs=(0.2,) * 8)
    with pytest.raises(ConfigError):
        GeneratorConfig(n_speakers=0)
    with pytest.raises(ConfigError):
        GeneratorConfig(frames=(4, 2))


def test_splits_disjoint_and_heldout_speakers_in_test():
    corpus = generate_corpus(GeneratorConfig(n_utterances=300, n_speakers=12))
    sp = split_corpus(corpus, n_heldout_speakers=3, dev_fraction=0.2, seed=1)
    ids = [{u.id for u in part} for part in (sp.train, sp.dev, sp.test)]
    assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
    assert sum(map(len, ids)) == len(corpus)
    assert {u.speaker for u in sp.test} == set(sp.heldout_speakers)
    assert not {u.speaker for u in sp.train + sp.dev} & set(sp.heldout_speakers)
    rel = relabel_speakers(sp)
    n_train = len({u.speaker for u in rel.train})
    assert {u.speaker for u in rel.train} == set(range(n_train))
    assert min(u.speaker for u in rel.test) >= n_train


def test_utterance_validation():
    s = LayerStack(np.zeros((1, 2, 2)))
    with pytest.raises(ValueError):
        Utterance("x", s, 8, 0, 0)
    with pytest.raises(ValueError):
        Utterance("x", s, 0, 2, 0)
    with pytest.raises(ValueError):
        Utterance("x", s, 0, 0, 0, (0,))

# ---------------------------------------------------------------- feature files


def random_stack(seed=0, shape=(3, 4, 5)):
    return LayerStack(np.random.default_rng(seed).normal(size=shape).astype(np.float32))


def test_feature_round_trip_bit_exact(tmp_path):
    s = random_stack()
    path = tmp_path / "a.lsf"
    write_features(path, s)
    back = read_features(path)
    assert back.layers.tobytes() == s.layers.tobytes()
    assert encode_features(back) == path.read_bytes()


def test_feature_header_layout():
    buf = encode_features(random_stack(shape=(2, 3, 4)))
    assert buf[:4] == b"LSF1" and buf[4] == 1
    assert np.frombuffer(buf[5:17], dtype="<u4").tolist() == [2, 3, 4]
    assert len(buf) == 17 + 4 * 24


def test_feature_errors():
    buf = bytearray(encode_features(random_stack()))
    bad = bytearray(buf)
    bad[0:4] = b"XXXX"
    with pytest.raises(MagicMismatchError):
        decode_features(bytes(bad))
    bad = bytearray(buf)
    bad[4] = 9
    with pytest.raises(VersionMismatchError):
        decode_features(bytes(bad))
    with pytest.raises(TruncatedPayloadError):
        decode_features(bytes(buf[:-4]))
    bad = bytearray(buf)
    bad[5] += 1  # L no longer matches the payload
    with pytest.raises(TruncatedPayloadError):
        decode_features(bytes(bad))
    with pytest.raises(TruncatedPayloadError):
        decode_features(bytes(buf[:10]))


def test_no_overwrite_when_disabled(tmp_path):
    path = tmp_path / "a.lsf"
    write_features(path, random_stack())
    with pytest.raises(FileExistsError):
        write_features(path, random_stack(1), overwrite=False)

# ---------------------------------------------------------------- manifests


def small_corpus(n=3):
    return generate_corpus(GeneratorConfig(n_utterances=n, n_speakers=2, seed=5))


def test_manifest_round_trip(tmp_path):
    corpus = small_corpus()
    path = write_corpus(corpus, tmp_path)
    back = load_manifest(path)
    assert [u.id for u in back] == [u.id for u in corpus]
    for a, b in zip(corpus, back):
        assert (a.emotion, a.gender, a.speaker, a.tokens) == (b.emotion, b.gender, b.speaker, b.tokens)
        assert a.stack.layers.tobytes() == b.stack.layers.tobytes()


def test_empty_manifest(tmp_path):
    (tmp_path / "m.jsonl").write_text("")
    assert load_manifest(tmp_path / "m.jsonl") == []


def test_manifest_bad_emotion_names_line(tmp_path):
    path = write_corpus(small_corpus(), tmp_path)
    lines = path.read_text().splitlines()
    rec = json.loads(lines[1])
    rec["emotion"] = 9
    lines[1] = json.dumps(rec)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ManifestError, match="line 2") as info:
        load_manifest(path)
    assert info.value.line == 2


@pytest.mark.parametrize("mutate, pattern", [
    (lambda r: "{not json", "malformed"),
    (lambda r: json.dumps({k: v for k, v in json.loads(r).items() if k != "speaker"}), "missing"),
    (lambda r: json.dumps({**json.loads(r), "features": "features/nope.lsf"}), "feature"),
    (lambda r: json.dumps({**json.loads(r), "tokens": "1 x"}), "tokens"),
    (lambda r: json.dumps({**json.loads(r), "gender": 3}), "gender"),
])
def test_manifest_malformed_lines(tmp_path, mutate, pattern):
    path = write_corpus(small_corpus(), tmp_path)
    lines = path.read_text().splitlines()
    lines[2] = mutate(lines[2])
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises((ManifestError, data.FeatureFormatError), match=pattern):
        load_manifest(path)


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "none.jsonl")

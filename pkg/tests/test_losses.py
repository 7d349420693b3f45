import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtlser import numerics as nx
from mtlser.losses import (BatchTooSmallError, ConfigError, InfeasibleTargetError, LossBreakdown,
                           ObjectiveConfig, SwfcConfig, combined_objective, combined_total, cross_entropy,
                           ctc_loss, ctc_nll, min_frames, objective_coefficients, sample_weights, swfc_loss)
from mtlser.numerics import Tensor, finite_diff_check
from oracles import ctc_by_enumeration, supcon, swfc_scalar

# ---------------------------------------------------------------- cross-entropy


def test_cross_entropy_examples():
    assert cross_entropy(np.zeros((1, 8)), [3]).item() == pytest.approx(math.log(8), abs=1e-15)
    confident = np.zeros((2, 4))
    confident[[0, 1], [1, 2]] = 40.0
    assert cross_entropy(confident, [1, 2]).item() < 1e-15
    x = np.array([0.3, -0.2, 0.9])
    oracle = -math.log(math.exp(0.9) / np.exp(x).sum())
    assert cross_entropy([x], [2]).item() == pytest.approx(oracle, abs=1e-15)
    # -ln 0.5314 rounds to 0.6322; the unrounded softmax gives 0.63217
    assert cross_entropy([x], [2]).item() == pytest.approx(0.6323, abs=2e-4)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_cross_entropy_nonnegative(seed):
    rng = np.random.default_rng(seed)
    n, c = rng.integers(1, 6), rng.integers(2, 6)
    assert cross_entropy(rng.normal(size=(n, c)) * 20, rng.integers(0, c, n)).item() >= 0.0

# ---------------------------------------------------------------- CTC


def uniform(T, K):
    return np.zeros((T, K))


def test_ctc_single_frame():
    assert ctc_loss(uniform(1, 3), [1]).item() == pytest.approx(math.log(3), abs=1e-15)


def test_ctc_two_frames():
    # paths (a,a), (a,-), (-,a): 3 of 9
    assert ctc_loss(uniform(2, 3), [1]).item() == pytest.approx(math.log(3), abs=1e-15)


def test_ctc_empty_target_certain_blank():
    logits = np.full((4, 3), -1e3)
    logits[:, 0] = 0.0
    assert ctc_loss(logits, []).item() == pytest.approx(0.0, abs=1e-12)


def test_ctc_infeasible_target():
    assert min_frames([1, 1]) == 3 and min_frames([1, 2]) == 2
    with pytest.raises(InfeasibleTargetError):
        ctc_loss(uniform(2, 3), [1, 1])


def test_ctc_matches_enumeration_small():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(4, 3))
    ref = ctc_by_enumeration(logits)
    for tgt in [(), (1,), (2, 1), (1, 1), (1, 2, 1)]:
        assert ctc_loss(logits, list(tgt)).item() == pytest.approx(ref[tgt], abs=1e-9)


def test_ctc_batched_matches_single():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(3, 5, 4))
    targets = [[1, 2], [3], [2, 2]]
    lp = nx.log_softmax(logits, axis=-1)
    batched = ctc_nll(lp, targets).data
    for b in range(3):
        assert batched[b] == pytest.approx(ctc_loss(logits[b], targets[b]).item(), abs=1e-12)


def test_ctc_gradient():
    rng = np.random.default_rng(2)
    for k in range(5):
        rep = finite_diff_check(lambda z: ctc_loss(z, [1, 2, 2]), [rng.normal(size=(6, 3))], seed=k)
        assert rep.max_rel_error < 1e-4

# ---------------------------------------------------------------- SWFC

UNIT = SwfcConfig(weight_mode="uniform")


def test_swfc_two_samples_is_zero():
    rng = np.random.default_rng(0)
    for _ in range(5):
        assert swfc_loss(rng.normal(size=(2, 3)), [0, 1], UNIT).item() == 0.0


def test_swfc_gamma_zero_is_minus_one():
    cfg = SwfcConfig(gamma=0.0, weight_mode="uniform")
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = rng.integers(2, 10)
        assert swfc_loss(rng.normal(size=(n, 4)), rng.integers(0, 3, n), cfg).item() == -1.0


def test_swfc_equal_similarities():
    # each row: 2 * (1/2) * (1/2)^2 = 1/4
    cfg = SwfcConfig(gamma=2.0, weight_mode="uniform")
    same = np.ones((3, 2))
    assert swfc_loss(same, [0, 0, 1], cfg).item() == pytest.approx(-0.25, abs=1e-12)
    tri = np.array([[1.0, 0.0], [-0.5, math.sqrt(3) / 2], [-0.5, -math.sqrt(3) / 2]])
    assert swfc_loss(tri, [0, 1, 2], cfg).item() == pytest.approx(-0.25, abs=1e-12)


@pytest.mark.parametrize("variant", ["eq2_literal", "focal_supcon"])
def test_swfc_matches_scalar_oracle(variant):
    rng = np.random.default_rng(3)
    counts = np.array([10, 3, 1])
    for k in range(20):
        n = 3 if k < 10 else rng.integers(3, 9)
        labels = np.array([0, 0, 1]) if k < 10 else rng.integers(0, 3, n)
        emb = rng.normal(size=(n, 4))
        tau = 1.0 if k < 10 else rng.uniform(0.05, 1.0)
        for mode in ("uniform", "inverse_frequency"):
            cfg = SwfcConfig(tau=tau, gamma=2.0, variant=variant, weight_mode=mode)
            w = sample_weights(labels, counts, mode)
            if variant == "focal_supcon" and len(set(labels)) == len(labels):
                continue
            got = swfc_loss(emb, labels, cfg, counts).item()
            assert got == pytest.approx(swfc_scalar(emb, labels, tau, 2.0, w, variant), rel=1e-11, abs=1e-12)


def test_focal_supcon_gamma_zero_is_supcon():
    rng = np.random.default_rng(4)
    for _ in range(20):
        labels = rng.integers(0, 3, 8)
        emb = rng.normal(size=(8, 5))
        cfg = SwfcConfig(tau=0.2, gamma=0.0, variant="focal_supcon", weight_mode="uniform")
        assert swfc_loss(emb, labels, cfg).item() == pytest.approx(supcon(emb, labels, 0.2), rel=1e-11)


def test_inverse_frequency_weights():
    w = sample_weights([0, 1, 1], [6, 2], "inverse_frequency")
    # raw 8/(2*6), 8/(2*2), 8/(2*2), renormalized to mean 1
    raw = np.array([2 / 3, 2.0, 2.0])
    assert np.allclose(w, raw / raw.mean(), atol=1e-15)
    assert w.mean() == pytest.approx(1.0, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_eq2_rotation_invariance(seed):
    rng = np.random.default_rng(seed)
    emb = rng.normal(size=(6, 4))
    Q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    cfg = SwfcConfig(tau=0.3, weight_mode="uniform")
    labels = rng.integers(0, 2, 6)
    assert swfc_loss(emb @ Q, labels, cfg).item() == pytest.approx(swfc_loss(emb, labels, cfg).item(), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_focal_supcon_nonnegative(seed):
    rng = np.random.default_rng(seed)
    n = rng.integers(2, 10)
    cfg = SwfcConfig(tau=rng.uniform(0.05, 1), variant="focal_supcon", weight_mode="uniform")
    assert swfc_loss(rng.normal(size=(n, 3)), rng.integers(0, 2, n), cfg).item() >= 0.0


def test_swfc_errors():
    with pytest.raises(BatchTooSmallError):
        swfc_loss(np.ones((1, 3)), [0], UNIT)
    with pytest.raises(ConfigError):
        SwfcConfig(tau=0.0)
    with pytest.raises(ConfigError):
        swfc_loss(np.ones((3, 2)), [0, 1, 1], SwfcConfig())


@pytest.mark.parametrize("variant", ["eq2_literal", "focal_supcon"])
def test_swfc_gradient(variant):
    rng = np.random.default_rng(5)
    cfg = SwfcConfig(variant=variant)
    for k in range(5):
        rep = finite_diff_check(lambda e: swfc_loss(e, [0, 0, 1, 1, 2, 0], cfg, [10, 4, 2]),
                                [rng.normal(size=(6, 4))], seed=k)
        assert rep.max_rel_error < 1e-4

# ---------------------------------------------------------------- combined objective


def test_objective_reduces_to_emotion():
    b = combined_objective({"emotion": 1.7, "gender": 2, "speaker": 3, "asr": 4, "swfc": 5},
                           ObjectiveConfig(alpha=0.0, beta=0.0))
    assert b.total == 1.7


def test_objective_hand_example():
    parts = dict(zip(("emotion", "gender", "speaker", "asr", "swfc"), (1.0, 2.0, 3.0, 4.0, 5.0)))
    b = combined_objective(parts, ObjectiveConfig(alpha=0.1, beta=0.5))
    assert b.total == pytest.approx(4.1, abs=1e-12)
    assert b.recombine() == b.total


def test_swfc_term_scales_linearly():
    parts = {"emotion": 1.3, "gender": 0.2, "speaker": 2.0, "asr": 4.0, "swfc": -0.7}
    base = combined_objective(parts, ObjectiveConfig(0.1, 0.0)).total
    one = combined_objective(parts, ObjectiveConfig(0.1, 0.3)).total
    two = combined_objective(parts, ObjectiveConfig(0.1, 0.6)).total
    assert two - base == pytest.approx(2 * (one - base), abs=1e-12)


def test_alpha_bound():
    with pytest.raises(ConfigError, match="1/3"):
        ObjectiveConfig(alpha=0.4)
    with pytest.raises(ConfigError):
        ObjectiveConfig(alpha=1 / 3)
    with pytest.raises(ConfigError):
        ObjectiveConfig(beta=-0.1)


def test_coefficients_for_task_subsets():
    coef = objective_coefficients(0.1, 0.2, ("asr",))
    assert coef == {"emotion": 0.9, "gender": 0.0, "speaker": 0.0, "asr": 0.1, "swfc": 0.2}


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=5, max_size=5), st.floats(0, 0.33), st.floats(0, 2),
       st.sets(st.sampled_from(["gender", "speaker", "asr"])))
def test_tensor_total_recombines_from_breakdown(vals, alpha, beta, tasks):
    parts = dict(zip(("emotion", "gender", "speaker", "asr", "swfc"), vals))
    coef = objective_coefficients(alpha, beta, tasks)
    total = combined_total({k: Tensor(v) for k, v in parts.items()}, coef).item()
    b = LossBreakdown(*vals, total=total, coefficients=coef)
    assert abs(b.recombine() - total) <= 1e-12

import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtlser.data import GeneratorConfig, generate_corpus, relabel_speakers, split_corpus
from mtlser.evalkit import (TABLE2, AblationGrid, MetricsReport, TaskMetrics, ablation_config, ablation_json,
                            classification_metrics, corpus_wer, edit_distance, format_row, render_ablation,
                            run_ablation, wer)
from mtlser.losses import ObjectiveConfig
from mtlser.trainer import TrainConfig


def test_perfect_predictions():
    assert classification_metrics([0, 1, 2, 2], [0, 1, 2, 2], 3) == (1.0, 1.0, 1.0)


def test_hand_confusion_matrix():
    macro, micro, acc = classification_metrics([0, 1, 1, 2], [0, 0, 1, 2], 3)
    # per-class F1: 2/3, 2/3, 1
    assert acc == 0.75 and micro == 0.75
    assert macro == pytest.approx((2 / 3 + 2 / 3 + 1) / 3, abs=1e-15)


def test_macro_averages_over_label_classes_only():
    # class 2 is predicted but never true; it does not enter the average
    macro, _, _ = classification_metrics([0, 2], [0, 1], 4)
    assert macro == pytest.approx((1.0 + 0.0) / 2, abs=1e-15)


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_micro_equals_accuracy(seed):
    rng = np.random.default_rng(seed)
    c, n = rng.integers(2, 9), rng.integers(1, 60)
    _, micro, acc = classification_metrics(rng.integers(0, c, n), rng.integers(0, c, n), c)
    assert micro == acc


def test_metric_input_validation():
    with pytest.raises(ValueError):
        classification_metrics([], [], 2)
    with pytest.raises(ValueError):
        classification_metrics([0, 3], [0, 1], 3)


def test_paper_baseline_row_renders():
    row = format_row("Baseline", TaskMetrics(0.2983, 0.3384, 0.3384))
    assert row.split() == ["Baseline", "29.83", "33.84", "33.84"]


def test_wer_examples():
    assert wer([1, 2, 3], [1, 2, 3]) == 0.0
    assert wer(["a", "b", "c"], ["a", "c"]) == pytest.approx(1 / 3, abs=1e-15)
    assert wer([1, 2, 3], []) == 1.0
    with pytest.raises(ValueError):
        wer([], [1])
    assert corpus_wer([[1, 2], [3, 4, 5, 6]], [[1], [3, 4, 5, 6]]) == pytest.approx(1 / 6)


seqs = st.lists(st.integers(0, 3), max_size=7)


@settings(max_examples=300, deadline=None)
@given(seqs, seqs, seqs)
def test_edit_distance_is_a_metric(a, b, c):
    assert edit_distance(a, b) == edit_distance(b, a)
    assert (edit_distance(a, b) == 0) == (a == b)
    assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)
    assert abs(len(a) - len(b)) <= edit_distance(a, b) <= max(len(a), len(b))


def test_report_flat_round_trip():
    rep = MetricsReport(TaskMetrics(0.1, 0.2, 0.2), None, TaskMetrics(0.0, 0.0, 0.0), 0.5)
    assert MetricsReport.from_flat(rep.flat()) == rep

# ---------------------------------------------------------------- ablation harness


@pytest.fixture(scope="module")
def splits():
    corpus = generate_corpus(GeneratorConfig(n_utterances=120, n_speakers=8, seed=3))
    return relabel_speakers(split_corpus(corpus, n_heldout_speakers=2))


FULL = TrainConfig(epochs=1)


def test_ablation_configs():
    assert ablation_config("baseline", FULL).active_tasks == ()
    assert not ablation_config("no_coattention", FULL).coattention_active
    assert ablation_config("no_swfc", FULL).effective_beta == 0.0
    assert ablation_config("ser+asr", FULL).active_tasks == ("asr",)
    assert ablation_config("ser", FULL).active_tasks == ()
    assert ablation_config("last", FULL).fusion_mode == "last"
    with pytest.raises(KeyError):
        ablation_config("everything", FULL)


def test_single_row_grid(splits):
    rows = run_ablation(AblationGrid.build(FULL, names=["baseline"]), splits, [0])
    assert len(rows) == 1 and rows[0].name == "baseline"


def test_alpha_zero_equals_baseline(splits):
    zero = replace(FULL, objective=ObjectiveConfig(alpha=0.0, beta=0.0))
    grid = AblationGrid({"zero": zero, "baseline": ablation_config("baseline", FULL)})
    a, b = run_ablation(grid, splits, [1])
    assert a.runs[0].flat() == b.runs[0].flat()


def test_ablation_reproducible_and_written(splits, tmp_path):
    grid = AblationGrid.build(FULL, "table2")
    rows = run_ablation(grid, splits, [0, 1], out_dir=tmp_path)
    again = run_ablation(grid, splits, [0, 1])
    assert ablation_json(rows) == ablation_json(again)
    assert [r.name for r in rows] == list(TABLE2)
    text = render_ablation(rows, "table2")
    assert len(text.splitlines()) == 2 + len(TABLE2)
    rec = json.loads((tmp_path / "full.seed1.json").read_text())
    assert rec["seed"] == 1 and "emotion.f1_macro" in rec["metrics"]
    spk = [r.median.speaker.accuracy for r in rows if r.median.speaker is not None]
    assert spk and all(a == 0.0 for a in spk)


def test_task_table_renders(splits):
    rows = run_ablation(AblationGrid.build(FULL, "table3"), splits, [0])
    lines = render_ablation(rows, "table3").splitlines()
    assert len(lines) == 7
    assert lines[2].split()[:4] == ["x", "-", "-", "-"] and lines[2].split()[5] == "--"


def test_training_errors_name_the_config(splits):
    grid = AblationGrid({"no_dev": FULL})
    with pytest.raises(RuntimeError, match="no_dev"):
        run_ablation(grid, replace(splits, dev=[]), [0], eval_split="dev")
    with pytest.raises(ValueError):
        run_ablation(grid, splits, [])

"""Metrics, evaluation and the ablation harness."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import CorpusSplits, Utterance, class_counts
from .heads import greedy_decode
from .model import forward, frozen, group_by_frames
from .trainer import TrainConfig, TrainResult, train

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def classification_metrics(preds, labels, n_classes: int) -> tuple[float, float, float]:
    """``(f1_macro, f1_micro, accuracy)`` for single-label predictions.

    Macro F1 averages over the classes that occur in ``labels``; a class that is
    predicted but never true still costs precision on the classes it was taken from.
    """
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.size == 0 or preds.shape != labels.shape:
        raise ValueError("classification_metrics needs equal-length, non-empty inputs")
    if min(preds.min(), labels.min()) < 0 or max(preds.max(), labels.max()) >= n_classes:
        raise ValueError(f"predictions and labels must lie in [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    f1 = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    present = cm.sum(axis=1) > 0
    macro = float(f1[present].mean())
    micro = float(2 * tp.sum() / (2 * tp.sum() + fp.sum() + fn.sum()))
    accuracy = float(tp.sum() / labels.size)
    return macro, micro, accuracy


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit substitution, insertion and deletion costs."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(ref_tokens: Sequence, hyp_tokens: Sequence) -> float:
    if len(ref_tokens) == 0:
        raise ValueError("wer: empty reference")
    return edit_distance(ref_tokens, hyp_tokens) / len(ref_tokens)


def corpus_wer(refs, hyps) -> float:
    """Total edits over total reference tokens; empty references are skipped."""
    pairs = [(r, h) for r, h in zip(refs, hyps) if len(r)]
    if not pairs:
        raise ValueError("corpus_wer: no non-empty references")
    return sum(edit_distance(r, h) for r, h in pairs) / sum(len(r) for r, _ in pairs)


@dataclass
class TaskMetrics:
    f1_macro: float
    f1_micro: float
    accuracy: float


@dataclass
class MetricsReport:
    emotion: TaskMetrics
    gender: TaskMetrics | None = None
    speaker: TaskMetrics | None = None
    wer: float | None = None

    def flat(self) -> dict[str, float]:
        out = {}
        for task in ("emotion", "gender", "speaker"):
            m = getattr(self, task)
            if m is not None:
                out.update({f"{task}.{k}": v for k, v in asdict(m).items()})
        if self.wer is not None:
            out["asr.wer"] = self.wer
        return out

    @classmethod
    def from_flat(cls, d: dict) -> "MetricsReport":
        def task(name):
            keys = [f"{name}.f1_macro", f"{name}.f1_micro", f"{name}.accuracy"]
            return TaskMetrics(*(d[k] for k in keys)) if keys[0] in d else None
        return cls(task("emotion"), task("gender"), task("speaker"), d.get("asr.wer"))


def _metrics(preds, labels, min_classes):
    n = max(min_classes, int(max(np.max(preds), np.max(labels))) + 1)
    return TaskMetrics(*classification_metrics(preds, labels, n))


def predict(result: TrainResult, corpus: list[Utterance]) -> dict[str, list]:
    """Eval-mode predictions for every active head, in corpus order."""
    cfg, dims = result.config, result.dims
    params = frozen(result.params)
    tasks = cfg.active_tasks
    out = {"emotion": [None] * len(corpus)}
    for t in tasks:
        out[t] = [None] * len(corpus)
    stacks = [u.stack.layers for u in corpus]
    for idx in group_by_frames(stacks):
        for lo in range(0, len(idx), 256):
            chunk = idx[lo:lo + 256]
            fw = forward(params, np.stack([stacks[i] for i in chunk]), dims, tasks=tasks,
                         use_coattention=cfg.coattention_active, fusion_mode=cfg.fusion_mode, training=False)
            emo = fw.emotion.logits.data.argmax(axis=-1)
            for k, i in enumerate(chunk):
                out["emotion"][i] = int(emo[k])
                if fw.gender is not None:
                    out["gender"][i] = int(fw.gender.logits.data[k].argmax())
                if fw.speaker is not None:
                    out["speaker"][i] = int(fw.speaker.logits.data[k].argmax())
                if fw.asr is not None:
                    out["asr"][i] = greedy_decode(fw.asr.logits.data[k])
    return out


def evaluate(result: TrainResult, corpus: list[Utterance]) -> MetricsReport:
    if not corpus:
        raise ValueError("evaluate: empty corpus")
    p = predict(result, corpus)
    dims = result.dims
    rep = MetricsReport(_metrics(p["emotion"], [u.emotion for u in corpus], dims.n_emotions))
    if "gender" in p:
        rep.gender = _metrics(p["gender"], [u.gender for u in corpus], dims.n_genders)
    if "speaker" in p:
        rep.speaker = _metrics(p["speaker"], [u.speaker for u in corpus], dims.n_speakers)
    if "asr" in p:
        rep.wer = corpus_wer([u.tokens for u in corpus], p["asr"])
    return rep


# ---------------------------------------------------------------------------
# ablation grids
# ---------------------------------------------------------------------------

TABLE2 = ("baseline", "no_mtl", "no_coattention", "no_swfc", "full")
TABLE3 = ("ser", "ser+asr", "ser+gender", "ser+speaker", "ser+asr+gender+speaker")
TABLE4 = ("last", "learnable")

_LABELS = {
    "baseline": "Baseline", "no_mtl": "Ours w/o MTL", "no_coattention": "Ours w/o Co-attention",
    "no_swfc": "Ours w/o SWFC Loss", "full": "Ours", "last": "Last", "learnable": "Learnable",
}


def ablation_config(name: str, full: TrainConfig) -> TrainConfig:
    """The configuration named ``name``, derived from the full model ``full``."""
    if name == "full":
        return full
    if name == "baseline":
        return replace(full, use_mtl=False, use_coattention=False, use_swfc=False)
    if name == "no_mtl":
        return replace(full, use_mtl=False, use_coattention=False)
    if name == "no_coattention":
        return replace(full, use_coattention=False)
    if name == "no_swfc":
        return replace(full, use_swfc=False)
    if name in TABLE4:
        return replace(full, fusion_mode=name)
    if name.startswith("ser"):
        tasks = tuple(t for t in name.split("+")[1:])
        if not tasks:
            return replace(full, use_mtl=False, use_coattention=False)
        return replace(full, tasks=tasks)
    raise KeyError(f"unknown ablation config {name!r}")


@dataclass
class AblationGrid:
    configs: dict[str, TrainConfig] = field(default_factory=dict)
    kind: str = "table2"

    @classmethod
    def build(cls, full: TrainConfig, kind: str = "table2", names: Sequence[str] | None = None) -> "AblationGrid":
        names = names or {"table2": TABLE2, "table3": TABLE3, "table4": TABLE4}[kind]
        return cls({n: ablation_config(n, full) for n in names}, kind)


@dataclass
class AblationRow:
    name: str
    median: MetricsReport
    runs: list[MetricsReport]
    seeds: list[int]


def _median_report(reports: list[MetricsReport]) -> MetricsReport:
    flat = [r.flat() for r in reports]
    return MetricsReport.from_flat({k: float(np.median([f[k] for f in flat])) for k in flat[0]})


def run_ablation(grid: AblationGrid, splits: CorpusSplits, seeds: Sequence[int], out_dir=None,
                 eval_split: str = "test") -> list[AblationRow]:
    """Train every config for every seed, evaluate on ``eval_split``, report medians."""
    if not seeds:
        raise ValueError("run_ablation needs at least one seed")
    counts = class_counts(splits.train)
    evalset = getattr(splits, eval_split)
    rows = []
    for name, cfg in grid.configs.items():
        reports = []
        for seed in seeds:
            try:
                res = train(splits.train, replace(cfg, seed=seed), counts=counts)
                rep = evaluate(res, evalset)
            except Exception as exc:
                raise RuntimeError(f"ablation config {name!r} seed {seed}: {exc}") from exc
            log.info("%s seed %d emotion f1_macro %.4f", name, seed, rep.emotion.f1_macro)
            reports.append(rep)
            if out_dir is not None:
                write_run(Path(out_dir) / f"{name}.seed{seed}.json", name, seed, rep)
        rows.append(AblationRow(name, _median_report(reports), reports, list(seeds)))
    return rows


def write_run(path, name: str, seed: int, report: MetricsReport):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"config": name, "seed": seed, "metrics": report.flat()}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _pct(x) -> str:
    return "--" if x is None else f"{100 * x:.2f}"


def format_row(label: str, m: TaskMetrics, width: int = 24) -> str:
    return f"{label:<{width}}{_pct(m.f1_macro):>10}{_pct(m.f1_micro):>10}{_pct(m.accuracy):>10}"


def render_metric_table(rows: list[AblationRow], title: str = "Approach") -> str:
    head = f"{title:<24}{'F1 Macro':>10}{'F1 Micro':>10}{'Accuracy':>10}"
    lines = [head, "-" * len(head)]
    lines += [format_row(_LABELS.get(r.name, r.name), r.median.emotion) for r in rows]
    return "\n".join(lines)


def render_task_table(rows: list[AblationRow]) -> str:
    head = f"{'SER':>5}{'ASR':>5}{'Gender':>8}{'Speaker':>9}{'SER Acc':>10}{'WER':>8}{'Gender Acc':>12}{'Spk Acc':>9}"
    lines = [head, "-" * len(head)]
    for r in rows:
        tasks = set(r.name.split("+"))
        mark = lambda t: "x" if t in tasks else "-"  # noqa: E731
        m = r.median
        lines.append(f"{'x':>5}{mark('asr'):>5}{mark('gender'):>8}{mark('speaker'):>9}"
                     f"{_pct(m.emotion.accuracy):>10}{_pct(m.wer):>8}"
                     f"{_pct(m.gender.accuracy if m.gender else None):>12}"
                     f"{_pct(m.speaker.accuracy if m.speaker else None):>9}")
    return "\n".join(lines)


def render_ablation(rows: list[AblationRow], kind: str = "table2") -> str:
    if kind == "table3":
        return render_task_table(rows)
    return render_metric_table(rows, "Features Type" if kind == "table4" else "Approach")


def ablation_json(rows: list[AblationRow]) -> dict:
    return {r.name: {"median": r.median.flat(), "seeds": r.seeds, "runs": [x.flat() for x in r.runs]}
            for r in rows}

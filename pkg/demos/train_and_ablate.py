# # Training on the synthetic corpus
#
# Generate a small corpus, train the full model and the single-task baseline,
# then compare them on speakers the models never saw. Takes a minute or two.

from dataclasses import replace

from mtlser.data import GeneratorConfig, class_counts, generate_corpus, relabel_speakers, split_corpus
from mtlser.evalkit import AblationGrid, evaluate, render_ablation, run_ablation
from mtlser.losses import SwfcConfig
from mtlser.trainer import TrainConfig, train

corpus = generate_corpus(GeneratorConfig(n_utterances=600, n_speakers=20, seed=0))
splits = relabel_speakers(split_corpus(corpus, n_heldout_speakers=4))
print(len(splits.train), "train /", len(splits.dev), "dev /", len(splits.test), "test utterances")
print("train emotion counts:", class_counts(splits.train))

# ## One run
#
# The log records every loss term per batch; the weighted terms add back up
# to the total.

cfg = TrainConfig(epochs=4, swfc=SwfcConfig(variant="focal_supcon"))
result = train(splits.train, cfg)
last = result.log[-1]
print("last batch:", f"total {last.total:.4f}", f"recombined {last.recombine():.4f}")

report = evaluate(result, splits.test)
print("held-out emotion:", report.emotion)
print("held-out WER:", round(report.wer, 4))

# ## A small ablation
#
# Medians over seeds. Three seeds and a few epochs keep this quick; the
# numbers are noisy at this size.

grid = AblationGrid.build(replace(cfg, epochs=4), names=["baseline", "no_coattention", "full"])
rows = run_ablation(grid, splits, seeds=[0, 1, 2])
print(render_ablation(rows, "table2"))

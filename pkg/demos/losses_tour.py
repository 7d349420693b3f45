# # The losses
#
# Cross-entropy for the classifiers, CTC for the transcript head, and the
# class-weighted contrastive loss on the emotion embeddings.

import itertools

import numpy as np

from mtlser.losses import (InfeasibleTargetError, ObjectiveConfig, SwfcConfig, combined_objective, cross_entropy,
                           ctc_loss, sample_weights, swfc_loss)

rng = np.random.default_rng(1)

# ## Cross-entropy

logits = np.array([[2.0, 1.0, 0.1]])
print("CE for the top class:", round(cross_entropy(logits, [0]).item(), 5))

# ## CTC
#
# With 3 frames and a vocabulary of one token plus blank (index 0), the paths
# that collapse to [1] can be listed by hand. Their total probability must
# match the dynamic program.

frames = rng.normal(size=(3, 2))
p = np.exp(frames) / np.exp(frames).sum(axis=1, keepdims=True)
brute = 0.0
for path in itertools.product(range(2), repeat=3):
    collapsed = [k for k, _ in itertools.groupby(path) if k != 0]
    if collapsed == [1]:
        brute += np.prod([p[t, k] for t, k in enumerate(path)])
print("enumerated -log P:", -np.log(brute))
print("forward-backward: ", ctc_loss(frames, [1]).item())

# A repeated token needs a blank between its copies, so [1, 1] needs 3 frames.
try:
    ctc_loss(frames[:2], [1, 1])
except InfeasibleTargetError as e:
    print("rejected:", e)

# ## Class-weighted contrastive loss
#
# Rare classes get larger weights; the weights are renormalized to mean one.

labels = np.array([0, 0, 0, 0, 1, 2])
counts = np.array([40, 10, 5])
print("per-sample weights:", sample_weights(labels, counts, "inverse_frequency").round(3))

emb = rng.normal(size=(6, 4))
for variant in ("eq2_literal", "focal_supcon"):
    loss = swfc_loss(emb, labels, SwfcConfig(variant=variant), counts)
    print(f"{variant}: {loss.item():.4f}")

# gamma = 0 switches the focal term off; the literal form then gives exactly -1.
print("gamma=0:", swfc_loss(emb, labels, SwfcConfig(gamma=0.0, weight_mode="uniform")).item())

# ## Putting it together
#
# The emotion term keeps whatever weight the auxiliary tasks leave over.

parts = {"emotion": 1.2, "gender": 0.5, "speaker": 2.0, "asr": 3.0, "swfc": -0.4}
print(combined_objective(parts, ObjectiveConfig(alpha=0.1, beta=0.1)))

# # Building blocks
#
# Each stage of the model in isolation, on tiny hand-sized inputs, so the
# numbers can be checked by eye.

import numpy as np

from mtlser import numerics as nx
from mtlser.coattention import coattend
from mtlser.fusion import LayerStack, fuse_layers, fusion_weights
from mtlser.pooling import attentive_stats_pool

rng = np.random.default_rng(0)

# ## Layer fusion
#
# A stack of encoder layers, shape (layers, frames, dim). The fusion logits go
# through a softmax, so equal logits give a plain average of the layers.

stack = LayerStack(rng.normal(size=(3, 5, 4)))
print("weights at init:", fusion_weights(np.zeros(3)).data)
avg = fuse_layers(stack, np.zeros(3)).data
print("equal logits == layer mean:", np.allclose(avg, stack.layers.mean(axis=0)))

# A large logit on one layer picks that layer out.
print("one-hot weights:", fusion_weights([0.0, 0.0, 60.0]).data.round(12))

# ## Attentive statistics pooling
#
# Frames collapse to one vector: attention-weighted mean, then weighted std.
# Zero attention weights make the scores uniform, giving the plain mean and std.

seq = rng.normal(size=(5, 4))
flat = {"W_att": np.zeros((4, 2)), "b_att": np.zeros(2), "v_att": rng.normal(size=2)}
pooled = attentive_stats_pool(seq, flat, eps=0.0).data
print("pooled width:", pooled.shape[0])
print("uniform attention == mean/std:",
      np.allclose(pooled, np.concatenate([seq.mean(axis=0), seq.std(axis=0)])))

# ## Co-attention
#
# The emotion vector queries the other branches and adds back what it found.
# With identity projections the arithmetic is easy to follow: the query (1, 0)
# matches the key (1, 0) most, so that value gets the largest weight.

eye = {f"{b}.W": np.eye(2) for b in ("emotion", "gender", "speaker", "asr")}
eye.update({f"{b}.b": np.zeros(2) for b in ("emotion", "gender", "speaker", "asr")})
out = coattend(np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([0.0, -1.0]),
               np.array([[1.0, 0.0]]), eye)
print("co-attended emotion vector:", out.data.round(4))

# ## Gradients
#
# Every op records itself on a tape. Finite differences agree with the tape.

rep = nx.finite_diff_check(nx.layer_norm, [rng.normal(size=(2, 4)), np.ones(4), np.zeros(4)])
print(f"layer_norm finite-difference check: max rel error {rep.max_rel_error:.1e}")

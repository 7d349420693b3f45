"""Independent reference implementations used only by the tests."""
import itertools
import math

import numpy as np


def collapse(path):
    out, prev = [], None
    for k in path:
        if k != prev and k != 0:
            out.append(k)
        prev = k
    return tuple(out)


def ctc_by_enumeration(logits):
    """``{target: -log P(target)}`` by summing every frame path; blank is 0."""
    logits = np.asarray(logits, dtype=np.float64)
    T, K = logits.shape
    logp = logits - np.log(np.exp(logits - logits.max(axis=1, keepdims=True)).sum(axis=1, keepdims=True)) \
        - logits.max(axis=1, keepdims=True)
    probs = {}
    for path in itertools.product(range(K), repeat=T):
        lp = sum(logp[t, k] for t, k in enumerate(path))
        probs.setdefault(collapse(path), []).append(math.exp(lp))
    return {tgt: -math.log(math.fsum(ps)) for tgt, ps in probs.items()}


def swfc_scalar(emb, labels, tau, gamma, weights, variant):
    """Term-by-term loop over anchors and partners."""
    emb = [np.asarray(e, dtype=np.float64) for e in emb]
    unit = [e / math.sqrt(sum(x * x for x in e)) for e in emb]
    N = len(unit)
    total = 0.0
    valid = 0
    for i in range(N):
        others = [j for j in range(N) if j != i]
        z = {j: math.exp(sum(a * b for a, b in zip(unit[i], unit[j])) / tau) for j in others}
        denom = sum(z.values())
        p = {j: z[j] / denom for j in others}
        if variant == "eq2_literal":
            total += weights[i] * sum(p[j] * (1 - p[j]) ** gamma for j in others)
            valid += 1
        else:
            pos = [j for j in others if labels[j] == labels[i]]
            if not pos:
                continue
            total += weights[i] * sum((1 - p[j]) ** gamma * math.log(p[j]) for j in pos) / len(pos)
            valid += 1
    return -total / valid


def supcon(emb, labels, tau):
    """Plain supervised contrastive loss, averaged over anchors that have a positive."""
    e = np.asarray(emb, dtype=np.float64)
    e = e / np.linalg.norm(e, axis=1, keepdims=True)
    s = e @ e.T / tau
    N = len(e)
    labels = np.asarray(labels)
    losses = []
    for i in range(N):
        mask = np.arange(N) != i
        lse = np.log(np.sum(np.exp(s[i, mask])))
        pos = np.where(mask & (labels == labels[i]))[0]
        if pos.size:
            losses.append(-np.mean(s[i, pos] - lse))
    return float(np.mean(losses))

"""Independent reference implementations used to check the library.

Everything here is deliberately naive: plain float64 enumeration, full
sorts, and central finite differences. None of it shares code with the
paths under test.
"""

from __future__ import annotations

import numpy as np


def softmax_enumeration(h, candidates):
    """Brute-force float64 softmax: returns (log_probs, log_partition)."""
    h = np.asarray(h, dtype=np.float64)
    candidates = np.asarray(candidates, dtype=np.float64)
    logits = np.array([float(np.dot(c, h)) for c in candidates])
    z = float(np.sum(np.exp(logits)))
    return logits - np.log(z), float(np.log(z))


def nll_enumeration(h, true_emb, distractor_embs) -> float:
    """NLL of the true candidate (index 0) by direct enumeration."""
    cands = [np.asarray(true_emb, dtype=np.float64)]
    cands += [np.asarray(d, dtype=np.float64) for d in distractor_embs]
    log_probs, _ = softmax_enumeration(h, np.stack(cands))
    return -float(log_probs[0])


def fd_gradients(loss_fn, tensors, step: float = 1e-4):
    """Central finite differences of loss_fn() w.r.t. each tensor entry.

    loss_fn takes no arguments and reads the (mutated in place) tensors.
    """
    grads = []
    for tensor in tensors:
        grad = np.zeros_like(tensor, dtype=np.float64)
        flat = tensor.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn()
            flat[i] = orig - step
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
        grads.append(grad)
    return grads


def max_relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = np.asarray(a, dtype=np.float64)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


def topk_by_sort(ids, logits, k):
    """Full sort: descending logit, ties toward the lower id."""
    ids = np.asarray(ids)
    logits = np.asarray(logits)
    order = sorted(range(ids.size), key=lambda i: (-logits[i], ids[i]))[:k]
    return ids[order], logits[order]


def rank_by_sort(ids, logits, true_id) -> int:
    ordered, _ = topk_by_sort(ids, logits, len(ids))
    return 1 + int(np.flatnonzero(ordered == true_id)[0])

"""Full-catalog ranking metrics with a deterministic tie rule."""

import numpy as np

KS = (5, 10, 20)


def rank_of_target(scores, target):
    """1-based rank of ``target`` (an item id) in a score vector over ids ``1..V``.

    Items with a strictly greater score rank ahead, and so do equal-score
    items with a smaller id.
    """
    scores = np.asarray(scores)
    t = scores[target - 1]
    return 1 + int(np.count_nonzero(scores > t)) + int(np.count_nonzero(scores[:target - 1] == t))


def ranks_of_targets(scores, targets):
    """Row-wise :func:`rank_of_target` for a ``(B, V)`` score matrix."""
    scores = np.asarray(scores)
    targets = np.asarray(targets)
    t = scores[np.arange(scores.shape[0]), targets - 1][:, None]
    greater = np.count_nonzero(scores > t, axis=1)
    before = np.arange(scores.shape[1])[None, :] < (targets - 1)[:, None]
    ties = np.count_nonzero((scores == t) & before, axis=1)
    return 1 + greater + ties


def hit_at_k(rank, k):
    return (np.asarray(rank) <= k).astype(np.float64) if np.ndim(rank) else float(rank <= k)


def ndcg_at_k(rank, k):
    rank = np.asarray(rank, dtype=np.float64)
    out = np.where(rank <= k, 1.0 / np.log2(rank + 1.0), 0.0)
    return out if out.ndim else float(out)


def top_k(scores, k):
    """Indices-as-item-ids of the ``k`` best scores; ties go to the smaller id."""
    scores = np.asarray(scores)
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :k] + 1

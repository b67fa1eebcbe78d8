"""Synthetic interaction logs for desk-scale experiments.

``make_desk_interactions`` simulates users walking through item clusters
with a latent state: each step moves the latent item forward along its
cluster, and the *observed* interaction is occasionally a random noise item
that does not move the latent state. The next item is therefore
predictable from the recent clean history, and individual observed items
may be misleading.

``make_key_dataset`` builds sequences whose target is fully determined by
the items at annotated key positions, for selection-policy experiments.
"""

import csv
from pathlib import Path

import numpy as np

from .augmentation import KeyAnnotation
from .datasets import DatasetSplit, Interaction


def make_desk_interactions(n_users=3000, n_items=600, n_clusters=30, min_len=6,
                           max_len=40, mean_len=14.0, noise=0.25, jump=0.15,
                           switch=0.05, seed=0):
    """Return a list of :class:`Interaction` with string keys ``u<i>``/``i<j>``."""
    rng = np.random.default_rng(seed)
    per = n_items // n_clusters
    n_items = per * n_clusters
    # popularity skew for noise items
    pop = 1.0 / np.arange(1, n_items + 1) ** 0.6
    pop = rng.permutation(pop / pop.sum())
    rows = []
    ts = 0
    for u in range(n_users):
        length = int(np.clip(min_len + rng.geometric(1.0 / max(mean_len - min_len, 1.0)),
                             min_len, max_len))
        prefs = rng.choice(n_clusters, size=2, replace=False)
        cluster = prefs[0]
        pos = int(rng.integers(per))
        for _ in range(length):
            if rng.random() < switch:
                cluster = prefs[1] if cluster == prefs[0] else prefs[0]
                pos = int(rng.integers(per))
            elif rng.random() < jump:
                pos = int(rng.integers(per))
            else:
                pos = (pos + (1 if rng.random() < 0.75 else 2)) % per
            latent = cluster * per + pos
            observed = latent if rng.random() >= noise else int(rng.choice(n_items, p=pop))
            ts += int(rng.integers(1, 100))
            rows.append(Interaction(f"u{u}", f"i{observed}", ts))
    return rows


def write_interactions(path, interactions):
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "item", "timestamp"])
        for r in interactions:
            w.writerow([r.user, r.item, r.timestamp])
    return path


def make_key_dataset(n_users=1000, n_train=6000, n_signal=20, n_filler=60, length=8,
                     n_keys=2, seed=0):
    """Sequences whose next item is determined by the items at key positions.

    Signal items ``1..n_signal`` only occur at key positions, and each maps
    to a fixed filler item; the next item after a sequence is the mapped
    item of its most recent key. ``n_train`` labelled episodes go into
    ``train_extra``; each of the ``n_users`` evaluation users gets a fresh
    body whose test target follows the rule. Validation targets carry no
    signal, so fit these models without early stopping.

    Returns
    -------
    split : DatasetSplit
    keys : KeyAnnotation
        Key positions relative to ``split.test_input``.
    """
    rng = np.random.default_rng(seed)
    num_items = n_signal + n_filler
    fillers = np.arange(n_signal + 1, num_items + 1)
    mapping = rng.choice(fillers, size=n_signal, replace=False)

    def body():
        items = [int(v) for v in rng.choice(fillers, size=length)]
        pos = sorted(rng.choice(length - 1, size=n_keys, replace=False).tolist())
        for p in pos:
            items[p] = int(rng.integers(1, n_signal + 1))
        return items, pos, int(mapping[items[pos[-1]] - 1])

    extra = []
    for _ in range(n_train):
        items, _, target = body()
        extra.append(items + [target])
    users, train, valid, test, keys = [], [], [], [], {}
    for u in range(n_users):
        items, pos, target = body()
        users.append(u)
        train.append(items[:-1])
        valid.append(items[-1])
        test.append(target)
        keys[u] = pos
    split = DatasetSplit(num_items, users, train, valid, test, train_extra=extra)
    return split, KeyAnnotation(keys)

"""Randomized invariant checks for every augmentation operator.

``run_cases(kind, n)`` draws ``n`` random sequences and parameters, applies
the operator twice with the same seed, and returns a list of failure
messages (empty means every invariant held).
"""

import math

import numpy as np

from seqtta.augmentation import (
    AugmentationSpec,
    ItemSimilarityIndex,
    SelectionPolicy,
    apply_id_operator,
    crop,
    mask,
    reorder,
    sliding_window_sample,
    tmask_b,
    tnoise,
)

OPERATORS = ("Crop", "Reorder", "SlidingWindow", "Mask", "Substitute", "Insert",
             "TNoise", "TMaskB", "TMaskR", "CMR", "CMRSI")

N_ITEMS = 40
MASK_ID = N_ITEMS + 1
MAX_LEN = 20


def _count(ratio, n):
    return max(1, math.floor(ratio * n + 1e-9))


def _brute_nearest(table, item):
    best, best_score = None, -np.inf
    for j in range(1, N_ITEMS + 1):
        if j == item:
            continue
        s = float(table[j] @ table[item])
        if s > best_score:
            best, best_score = j, s
    return best


def _is_infix(out, seq):
    k = len(out)
    return any(seq[i:i + k] == out for i in range(len(seq) - k + 1))


def _is_subsequence(out, seq):
    it = iter(seq)
    return all(any(v == w for w in it) for v in out)


def _parse_insert(out, seq, nearest):
    """Can ``out`` be a suffix of ``seq`` with nearest-neighbour insertions?"""
    n, m = len(seq), len(out)
    # state: (i = next original index, prev = index of last original consumed or -1)
    states = {(i, i - 1) for i in range(n + 1)}
    for j in range(m):
        nxt = set()
        for i, prev in states:
            if i < n and out[j] == seq[i]:
                nxt.add((i + 1, i))
            if prev >= 0 and prev == i - 1 and out[j] == nearest[seq[prev]]:
                nxt.add((i, -2))
        states = nxt
        if not states:
            return False
    return any(i == n for i, _ in states)


def check_crop(seq, out, ratio):
    errs = []
    if len(out) != min(len(seq), _count(ratio, len(seq))):
        errs.append(f"crop length {len(out)}")
    if not _is_infix(out, seq):
        errs.append("crop output is not a contiguous infix")
    return errs


def check_reorder(seq, out, ratio):
    errs = []
    if sorted(out) != sorted(seq) or len(out) != len(seq):
        errs.append("reorder changed the multiset")
    diff = [i for i, (a, b) in enumerate(zip(seq, out)) if a != b]
    if diff and diff[-1] - diff[0] + 1 > min(len(seq), _count(ratio, len(seq))):
        errs.append("reorder touched positions outside one window")
    return errs


def check_window(seq, out, window_len):
    if out not in sliding_window_sample(seq, min(window_len, len(seq)), mode="all"):
        return ["sampled window is not one of the windows"]
    return []


def _check_selection(positions, n, count, policy, keys):
    errs = []
    keys = set(keys or ())
    non = set(range(n)) - keys
    pos = set(positions)
    if policy.mode == "KeyFirst" and count <= len(keys) and not pos <= keys:
        errs.append("KeyFirst selected a non-key position")
    if policy.mode == "KeyFirst" and count > len(keys) and not keys <= pos:
        errs.append("KeyFirst did not exhaust keys")
    if policy.mode == "NonKeyFirst" and count <= len(non) and not pos <= non:
        errs.append("NonKeyFirst selected a key position")
    if policy.mode == "FixedProportion":
        want = min(math.floor(count * policy.key_fraction + 1e-9), len(keys))
        want = max(want, count - len(non))
        if len(pos & keys) != want:
            errs.append(f"FixedProportion took {len(pos & keys)} keys, wanted {want}")
    return errs


def check_mask(seq, out, ratio, policy, keys):
    errs = []
    if len(out) != len(seq):
        errs.append("mask changed length")
        return errs
    pos = [i for i, (a, b) in enumerate(zip(seq, out)) if a != b]
    if len(pos) != _count(ratio, len(seq)):
        errs.append(f"mask changed {len(pos)} positions")
    if any(out[i] != MASK_ID for i in pos):
        errs.append("changed position is not the mask id")
    return errs + _check_selection(pos, len(seq), len(pos), policy, keys)


def check_substitute(seq, out, ratio, policy, keys, nearest):
    errs = []
    if len(out) != len(seq):
        return ["substitute changed length"]
    pos = [i for i, (a, b) in enumerate(zip(seq, out)) if a != b]
    if len(pos) != _count(ratio, len(seq)):
        errs.append(f"substitute changed {len(pos)} positions")
    if any(out[i] != nearest[seq[i]] for i in pos):
        errs.append("replacement is not the nearest item")
    return errs + _check_selection(pos, len(seq), len(pos), policy, keys)


def check_insert(seq, out, ratio, nearest):
    errs = []
    want = min(len(seq) + _count(ratio, len(seq)), MAX_LEN)
    if len(out) != want:
        errs.append(f"insert length {len(out)}, expected {want}")
    if not _parse_insert(out, seq, nearest):
        errs.append("insert output does not parse as original plus neighbours")
    return errs


def check_tmask_r(seq, out, sigma):
    errs = []
    n = len(seq)
    if len(out) != n - min(math.floor(n * sigma + 1e-9), n - 1):
        errs.append(f"tmask_r length {len(out)}")
    if not _is_subsequence(out, seq):
        errs.append("tmask_r output is not a subsequence")
    return errs


def check_tnoise(rep, out, valid, lo, hi):
    errs = []
    d = out[valid] - rep[valid]
    if d.size and (d.min() < lo or d.max() > hi):
        errs.append(f"noise outside [{lo}, {hi}]")
    if not np.array_equal(out[~valid], rep[~valid]):
        errs.append("padding rows changed")
    return errs


def check_tmask_b(rep, out, valid, sigma):
    errs = []
    n = int(valid.sum())
    changed = np.flatnonzero(np.any(out != rep, axis=1))
    want = min(n, _count(sigma, n))
    if changed.size != want:
        errs.append(f"tmask_b changed {changed.size} rows, expected {want}")
    if not np.all(out[changed] == 0.0):
        errs.append("changed rows are not zero")
    if np.any(~valid[changed]):
        errs.append("tmask_b touched padding")
    expect = rep.sum(axis=0) - rep[changed].sum(axis=0)
    if not np.allclose(out.sum(axis=0), expect, atol=1e-12):
        errs.append("row-sum arithmetic does not hold")
    return errs


class CaseRunner:
    """Shared fixtures (embedding table, nearest table) for randomized cases."""

    def __init__(self, seed=0):
        rng = np.random.default_rng(seed)
        self.table = rng.normal(size=(N_ITEMS + 2, 6))
        self.table[0] = 0.0
        self.index = ItemSimilarityIndex(self.table, N_ITEMS)
        self.nearest = {i: _brute_nearest(self.table, i) for i in range(1, N_ITEMS + 1)}

    def _policy(self, rng):
        mode = ("Random", "KeyFirst", "NonKeyFirst", "FixedProportion")[rng.integers(4)]
        if mode == "FixedProportion":
            return SelectionPolicy(mode, round(float(rng.uniform(0.05, 0.95)), 2))
        return SelectionPolicy(mode)

    def case(self, kind, seed):
        rng = np.random.default_rng([7, OPERATORS.index(kind), seed])
        n = int(rng.integers(1, MAX_LEN + 1))
        seq = [int(v) for v in rng.integers(1, N_ITEMS + 1, size=n)]
        ratio = round(float(rng.uniform(0.01, 1.0)), 3)
        sigma = round(float(rng.uniform(0.01, 0.99)), 3)
        op_seed = int(rng.integers(2 ** 31))

        def twice(fn):
            a = fn(np.random.default_rng(op_seed))
            b = fn(np.random.default_rng(op_seed))
            same = np.array_equal(a, b) if isinstance(a, np.ndarray) else a == b
            return a, ([] if same else ["same seed gave different output"])

        if kind in ("TNoise", "TMaskB"):
            rep = rng.normal(size=(n + 3, 5))
            valid = np.arange(n + 3) >= 3
            rep[~valid] = 0.0
            if kind == "TNoise":
                a, b = rng.uniform(-2, 2, size=2)
                lo, hi = min(a, b), max(a, b)
                out, errs = twice(lambda g: _masked(tnoise, rep, valid, lo, hi, g))
                return errs + check_tnoise(rep, out, valid, lo, hi)
            out, errs = twice(lambda g: _masked(tmask_b, rep, valid, sigma, g))
            return errs + check_tmask_b(rep, out, valid, sigma)

        keys = None
        if kind in ("Mask", "Substitute", "Insert"):
            policy = self._policy(rng)
            n_keys = int(rng.integers(0, n // 2 + 1))
            keys = tuple(sorted(rng.choice(n, size=n_keys, replace=False).tolist()))
            spec = AugmentationSpec(kind, ratio=ratio, selection=policy)
        elif kind == "SlidingWindow":
            spec = AugmentationSpec(kind, window_len=int(rng.integers(1, MAX_LEN + 1)))
        elif kind == "TMaskR":
            spec = AugmentationSpec(kind, sigma=sigma)
        else:
            spec = AugmentationSpec(kind, ratio=ratio)
        out, errs = twice(lambda g: apply_id_operator(seq, spec, g, index=self.index,
                                                      keys=keys, mask_id=MASK_ID,
                                                      max_len=MAX_LEN))
        if kind == "Crop":
            errs += check_crop(seq, out, ratio)
        elif kind == "Reorder":
            errs += check_reorder(seq, out, ratio)
        elif kind == "SlidingWindow":
            errs += check_window(seq, out, spec.window_len)
        elif kind == "Mask":
            errs += check_mask(seq, out, ratio, spec.selection, keys)
        elif kind == "Substitute":
            errs += check_substitute(seq, out, ratio, spec.selection, keys, self.nearest)
        elif kind == "Insert":
            errs += check_insert(seq, out, ratio, self.nearest)
        elif kind == "TMaskR":
            errs += check_tmask_r(seq, out, sigma)
        else:
            errs += self.check_combo(kind, seq, out, ratio)
        return errs

    def check_combo(self, kind, seq, out, ratio):
        rand = SelectionPolicy()
        options = [check_crop(seq, out, ratio), check_reorder(seq, out, ratio),
                   check_mask(seq, out, ratio, rand, None)]
        if kind == "CMR" and len(out) > len(seq):
            return ["CMR produced a longer sequence"]
        if kind == "CMRSI":
            options += [check_substitute(seq, out, ratio, rand, None, self.nearest),
                        check_insert(seq, out, ratio, self.nearest)]
        if any(not o for o in options):
            return []
        return [f"{kind} output matches no pool member"]


def _masked(fn, rep, valid, p, *rest):
    # operators see only real rows, as they do inside a model hook
    out = rep.copy()
    out[valid] = fn(rep[valid], p, *rest)
    return out


def run_cases(kind, n=1000, runner=None):
    runner = runner or CaseRunner()
    failures = []
    for seed in range(n):
        for msg in runner.case(kind, seed):
            failures.append(f"{kind} case {seed}: {msg}")
    return failures

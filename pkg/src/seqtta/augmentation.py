"""Sequence augmentation operators and position-selection policies.

ID-level operators take and return plain lists of item ids. The two
representation-level operators (``tnoise``, ``tmask_b``) act on an
``(L, d)`` float matrix and are wired into a model through
:class:`~seqtta.models.EncodeHooks` by :func:`make_hooks`.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .models import EncodeHooks

logger = logging.getLogger(__name__)

KINDS = ("Crop", "Reorder", "SlidingWindow", "Mask", "Substitute", "Insert",
         "CMR", "CMRSI", "TNoise", "TMaskB", "TMaskR")
REPRESENTATION_KINDS = frozenset({"TNoise", "TMaskB"})
NEEDS_INDEX = frozenset({"Substitute", "Insert", "CMRSI"})
CMR_POOL = ("Crop", "Mask", "Reorder")
CMRSI_POOL = CMR_POOL + ("Substitute", "Insert")

_RELEVANT = {
    "Crop": {"ratio"},
    "Reorder": {"ratio"},
    "SlidingWindow": {"window_len"},
    "Mask": {"ratio", "selection"},
    "Substitute": {"ratio", "selection"},
    "Insert": {"ratio", "selection"},
    "CMR": {"ratio"},
    "CMRSI": {"ratio"},
    "TNoise": {"noise_lo", "noise_hi", "stage", "noise_centered"},
    "TMaskB": {"sigma"},
    "TMaskR": {"sigma"},
}
_OPTIONAL = {"selection", "stage", "noise_centered"}
_ALIASES = {k.lower().replace("-", "").replace("_", ""): k for k in KINDS}
_ALIASES.update({"windows": "SlidingWindow", "slidingwindows": "SlidingWindow"})


class AugmentationConfigError(ValueError):
    """An operator was configured with invalid or inapplicable parameters."""


def canonical_kind(kind):
    key = str(kind).lower().replace("-", "").replace("_", "").replace(" ", "")
    try:
        return _ALIASES[key]
    except KeyError:
        raise AugmentationConfigError(f"unknown operator kind {kind!r}") from None


def operated_count(ratio, n, minimum=1):
    """``max(minimum, floor(ratio * n))``; the epsilon absorbs binary rounding."""
    return max(minimum, int(math.floor(ratio * n + 1e-9)))


@dataclass(frozen=True)
class SelectionPolicy:
    mode: str = "Random"
    key_fraction: Optional[float] = None

    MODES = ("Random", "KeyFirst", "NonKeyFirst", "FixedProportion")

    def __post_init__(self):
        aliases = {"random": "Random", "keyfirst": "KeyFirst", "kf": "KeyFirst",
                   "nonkeyfirst": "NonKeyFirst", "nkf": "NonKeyFirst",
                   "fixedproportion": "FixedProportion", "fr": "FixedProportion"}
        mode = aliases.get(str(self.mode).lower().replace("-", "").replace("_", ""))
        if mode is None:
            raise AugmentationConfigError(f"unknown selection mode {self.mode!r}")
        object.__setattr__(self, "mode", mode)
        if mode == "FixedProportion":
            p = self.key_fraction
            if p is None or not 0.05 <= p <= 0.95:
                raise AugmentationConfigError(
                    "FixedProportion needs key_fraction in [0.05, 0.95]")
        elif self.key_fraction is not None:
            raise AugmentationConfigError(f"key_fraction is only valid for FixedProportion")

    @property
    def needs_keys(self):
        return self.mode != "Random"


@dataclass(frozen=True)
class AugmentationSpec:
    """Operator kind plus exactly the parameters that kind uses.

    ``noise_lo``/``noise_hi`` bound the TNoise interval; build it from the
    ``(a, b)`` pairs used in the literature with :meth:`tnoise_from_pair`.
    """

    kind: str
    ratio: Optional[float] = None
    sigma: Optional[float] = None
    window_len: Optional[int] = None
    noise_lo: Optional[float] = None
    noise_hi: Optional[float] = None
    stage: Optional[str] = None
    noise_centered: Optional[bool] = None
    selection: Optional[SelectionPolicy] = None

    def __post_init__(self):
        kind = canonical_kind(self.kind)
        object.__setattr__(self, "kind", kind)
        relevant = _RELEVANT[kind]
        for name in ("ratio", "sigma", "window_len", "noise_lo", "noise_hi",
                     "stage", "noise_centered", "selection"):
            value = getattr(self, name)
            if name not in relevant and value is not None:
                raise AugmentationConfigError(f"{kind} does not take parameter {name!r}")
            if name in relevant and value is None and name not in _OPTIONAL:
                raise AugmentationConfigError(f"{kind} requires parameter {name!r}")
        if self.ratio is not None and not 0.0 < self.ratio <= 1.0:
            raise AugmentationConfigError(f"ratio must be in (0, 1], got {self.ratio}")
        if self.sigma is not None and not 0.0 < self.sigma < 1.0:
            raise AugmentationConfigError(f"sigma must be in (0, 1), got {self.sigma}")
        if self.window_len is not None and (int(self.window_len) != self.window_len
                                            or self.window_len < 1):
            raise AugmentationConfigError("window_len must be a positive integer")
        if kind == "TNoise":
            if self.noise_lo > self.noise_hi:
                raise AugmentationConfigError("noise_lo must be <= noise_hi")
            if self.stage is None:
                object.__setattr__(self, "stage", "embedding")
            if self.stage not in ("embedding", "hidden"):
                raise AugmentationConfigError("stage must be 'embedding' or 'hidden'")
            if self.noise_centered is None:
                object.__setattr__(self, "noise_centered", False)
        if "selection" in relevant:
            sel = self.selection
            if sel is None:
                sel = SelectionPolicy()
            elif isinstance(sel, dict):
                sel = SelectionPolicy(**sel)
            elif isinstance(sel, str):
                sel = SelectionPolicy(sel)
            object.__setattr__(self, "selection", sel)

    @classmethod
    def tnoise_from_pair(cls, a, b, stage="embedding", centered=False):
        """TNoise over ``[min(a, b), max(a, b)]``."""
        return cls("TNoise", noise_lo=min(a, b), noise_hi=max(a, b), stage=stage,
                   noise_centered=centered)

    @property
    def is_id_level(self):
        return self.kind not in REPRESENTATION_KINDS

    @property
    def needs_index(self):
        return self.kind in NEEDS_INDEX

    @property
    def needs_keys(self):
        return self.selection is not None and self.selection.needs_keys

    @property
    def noise_interval(self):
        if self.noise_centered:
            r = max(abs(self.noise_lo), abs(self.noise_hi))
            return -r, r
        return self.noise_lo, self.noise_hi

    def label(self):
        parts = [f"{k}={v}" for k, v in self._params().items()
                 if k != "selection" and not (k == "noise_centered" and not v)]
        if self.selection is not None and self.selection.mode != "Random":
            sel = {"KeyFirst": "KF", "NonKeyFirst": "NKF", "FixedProportion": "FR"}
            parts.append(sel[self.selection.mode])
        return f"{self.kind}({', '.join(parts)})" if parts else self.kind

    def _params(self):
        return {k: v for k, v in asdict(self).items() if k != "kind" and v is not None}

    def to_dict(self):
        d = {"kind": self.kind}
        d.update(self._params())
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        allowed = {"kind", "ratio", "sigma", "window_len", "noise_lo", "noise_hi",
                   "stage", "noise_centered", "selection"}
        unknown = set(d) - allowed
        if unknown:
            raise AugmentationConfigError(f"unknown operator keys: {sorted(unknown)}")
        if "kind" not in d:
            raise AugmentationConfigError("operator spec needs a 'kind'")
        return cls(**d)

    def with_(self, **changes):
        d = self.to_dict()
        d.update(changes)
        return AugmentationSpec.from_dict(d)


class KeyAnnotation:
    """Per-user key positions into the sequence being augmented."""

    def __init__(self, keys):
        self._keys = {int(u): tuple(sorted({int(p) for p in pos})) for u, pos in keys.items()}

    def __eq__(self, other):
        return isinstance(other, KeyAnnotation) and self._keys == other._keys

    def __contains__(self, user):
        return int(user) in self._keys

    def __len__(self):
        return len(self._keys)

    def get(self, user):
        return self._keys.get(int(user), ())

    def validate(self, lengths):
        """Check positions against ``{user: sequence length}``."""
        for user, pos in self._keys.items():
            if user not in lengths:
                continue
            n = lengths[user]
            if pos and (pos[0] < 0 or pos[-1] >= n):
                raise AugmentationConfigError(
                    f"user {user}: key positions {pos} outside sequence of length {n}")
            if len(pos) > n // 2:
                raise AugmentationConfigError(
                    f"user {user}: {len(pos)} keys exceed half of length {n}")
        return self

    def to_dict(self):
        return {str(u): list(p) for u, p in sorted(self._keys.items())}

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise AugmentationConfigError(f"{path}: expected a json object user -> positions")
        return cls(raw)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n",
                              encoding="utf-8")


class ItemSimilarityIndex:
    """Nearest real item by embedding dot product.

    By default every query scans the whole catalog (``O(d |V|)``), which is
    the cost the timing analysis measures. ``precompute=True`` builds the
    full nearest-neighbour table once.
    """

    def __init__(self, table, num_items, precompute=False, chunk=1024):
        if num_items < 2:
            raise AugmentationConfigError("similarity index needs at least 2 items")
        self.table = np.asarray(table)
        self.num_items = num_items
        self.n_queries = 0
        self._nearest = None
        if precompute:
            real = self.table[1:num_items + 1]
            nearest = np.empty(num_items, dtype=np.int64)
            for start in range(0, num_items, chunk):
                block = real[start:start + chunk] @ real.T
                rows = np.arange(block.shape[0])
                block[rows, rows + start] = -np.inf
                nearest[start:start + chunk] = block.argmax(axis=1) + 1
            self._nearest = nearest

    def nearest(self, item):
        self.n_queries += 1
        if self._nearest is not None:
            return int(self._nearest[item - 1])
        if not 1 <= item <= self.num_items:
            raise IndexError(f"item {item} is not a real item id")
        scores = self.table[1:self.num_items + 1] @ self.table[item]
        scores[item - 1] = -np.inf
        return int(scores.argmax()) + 1


def select_positions(seq_len, count, policy=None, keys=None, rng=None):
    """Choose ``count`` distinct positions of a length-``seq_len`` sequence.

    Returns a sorted int array.
    """
    policy = policy or SelectionPolicy()
    rng = np.random.default_rng() if rng is None else rng
    if not 1 <= count <= seq_len:
        raise ValueError(f"count={count} must be in [1, {seq_len}]")
    if policy.mode == "Random":
        return np.sort(rng.choice(seq_len, size=count, replace=False))
    if keys is None:
        raise AugmentationConfigError(f"{policy.mode} selection needs key annotations")
    key = np.array(sorted({int(k) for k in keys if 0 <= int(k) < seq_len}), dtype=np.int64)
    non_key = np.setdiff1d(np.arange(seq_len), key)

    def take(pool, n):
        n = min(n, pool.size)
        return rng.choice(pool, size=n, replace=False) if n else np.empty(0, np.int64)

    if policy.mode == "KeyFirst":
        first, second, n_first = key, non_key, count
    elif policy.mode == "NonKeyFirst":
        first, second, n_first = non_key, key, count
    else:
        first, second = key, non_key
        n_first = min(int(math.floor(count * policy.key_fraction + 1e-9)), key.size)
        if count - n_first > non_key.size:
            n_first = count - non_key.size
    a = take(first, n_first)
    rest_first = np.setdiff1d(first, a)
    b = take(second, count - a.size)
    if a.size + b.size < count:
        b = np.concatenate([b, take(rest_first, count - a.size - b.size)])
    return np.sort(np.concatenate([a, b]).astype(np.int64))


# -- ID-level operators -------------------------------------------------------

def crop(seq, ratio, rng):
    n = len(seq)
    length = min(n, operated_count(ratio, n))
    start = int(rng.integers(0, n - length + 1))
    return list(seq[start:start + length])


def reorder(seq, ratio, rng):
    n = len(seq)
    length = min(n, operated_count(ratio, n))
    start = int(rng.integers(0, n - length + 1))
    out = list(seq)
    window = out[start:start + length]
    out[start:start + length] = [window[i] for i in rng.permutation(length)]
    return out


def sliding_window_sample(seq, window_len, rng=None, mode="sample"):
    n = len(seq)
    if window_len > n:
        logger.warning("window length %d exceeds sequence length %d; using whole sequence",
                       window_len, n)
        window_len = n
    if mode == "all":
        return [list(seq[i:i + window_len]) for i in range(n - window_len + 1)]
    if mode != "sample":
        raise ValueError(f"unknown sliding window mode {mode!r}")
    start = int(rng.integers(0, n - window_len + 1))
    return list(seq[start:start + window_len])


def mask(seq, ratio, mask_id, policy=None, keys=None, rng=None):
    pos = select_positions(len(seq), operated_count(ratio, len(seq)), policy, keys, rng)
    out = list(seq)
    for p in pos:
        out[p] = mask_id
    return out


def substitute(seq, ratio, index, policy=None, keys=None, rng=None):
    pos = select_positions(len(seq), operated_count(ratio, len(seq)), policy, keys, rng)
    out = list(seq)
    for p in pos:
        out[p] = index.nearest(seq[p])
    return out


def insert(seq, ratio, index, policy=None, keys=None, rng=None, max_len=None):
    pos = set(select_positions(len(seq), operated_count(ratio, len(seq)), policy, keys, rng)
              .tolist())
    out = []
    for i, item in enumerate(seq):
        out.append(item)
        if i in pos:
            out.append(index.nearest(item))
    if max_len is not None and len(out) > max_len:
        out = out[-max_len:]
    return out


def tmask_r(seq, sigma, rng):
    n = len(seq)
    n_remove = min(int(math.floor(n * sigma + 1e-9)), n - 1)
    if n_remove <= 0:
        return list(seq)
    drop = set(rng.choice(n, size=n_remove, replace=False).tolist())
    return [v for i, v in enumerate(seq) if i not in drop]


def combo(seq, kind, ratio, rng, mask_id, index=None, max_len=None):
    """Apply one uniformly chosen member of the CMR or CMRSI pool."""
    pool = CMR_POOL if kind == "CMR" else CMRSI_POOL
    choice = pool[int(rng.integers(len(pool)))]
    if choice == "Crop":
        return crop(seq, ratio, rng)
    if choice == "Reorder":
        return reorder(seq, ratio, rng)
    if choice == "Mask":
        return mask(seq, ratio, mask_id, rng=rng)
    if index is None:
        raise AugmentationConfigError(f"{kind} needs an item similarity index")
    if choice == "Substitute":
        return substitute(seq, ratio, index, rng=rng)
    return insert(seq, ratio, index, rng=rng, max_len=max_len)


def apply_id_operator(seq, spec, rng, index=None, keys=None, mask_id=None, max_len=None):
    """Dispatch an ID-level :class:`AugmentationSpec` on one sequence."""
    kind = spec.kind
    if not spec.is_id_level:
        raise AugmentationConfigError(f"{kind} is not an ID-level operator")
    if spec.needs_index and index is None:
        raise AugmentationConfigError(f"{kind} needs an item similarity index")
    if kind in ("Mask", "CMR", "CMRSI") and mask_id is None:
        raise AugmentationConfigError(f"{kind} needs the mask token id")
    if kind == "Crop":
        return crop(seq, spec.ratio, rng)
    if kind == "Reorder":
        return reorder(seq, spec.ratio, rng)
    if kind == "SlidingWindow":
        return sliding_window_sample(seq, spec.window_len, rng, mode="sample")
    if kind == "Mask":
        return mask(seq, spec.ratio, mask_id, spec.selection, keys, rng)
    if kind == "Substitute":
        return substitute(seq, spec.ratio, index, spec.selection, keys, rng)
    if kind == "Insert":
        return insert(seq, spec.ratio, index, spec.selection, keys, rng, max_len)
    if kind in ("CMR", "CMRSI"):
        return combo(seq, kind, spec.ratio, rng, mask_id, index, max_len)
    return tmask_r(seq, spec.sigma, rng)


# -- representation-level operators ------------------------------------------

def tnoise(rep, noise_lo, noise_hi, rng, valid=None):
    """Add i.i.d. Uniform[noise_lo, noise_hi] noise to the non-padding rows."""
    rep = np.asarray(rep, dtype=np.float64)
    out = rep.copy()
    rows = slice(None) if valid is None else np.asarray(valid, dtype=bool)
    target = out[rows]
    out[rows] = target + rng.uniform(noise_lo, noise_hi, size=target.shape)
    return out


def tmask_b(rep, sigma, rng, valid=None):
    """Zero ``max(1, floor(L * sigma))`` randomly chosen non-padding rows."""
    rep = np.asarray(rep, dtype=np.float64)
    real = np.arange(rep.shape[0]) if valid is None else np.flatnonzero(valid)
    out = rep.copy()
    if real.size == 0:
        return out
    count = min(real.size, operated_count(sigma, real.size))
    chosen = real[rng.choice(real.size, size=count, replace=False)]
    out[chosen] = 0.0
    return out


def make_hooks(spec, rng):
    """EncodeHooks realising a representation-level operator with its own RNG."""
    if spec.kind == "TNoise":
        lo, hi = spec.noise_interval

        def noise(rep):
            return tnoise(rep, lo, hi, rng)

        if spec.stage == "hidden":
            return EncodeHooks(post_encoder=noise)
        return EncodeHooks(post_embedding=noise)
    if spec.kind == "TMaskB":
        return EncodeHooks(post_embedding=lambda rep: tmask_b(rep, spec.sigma, rng))
    raise AugmentationConfigError(f"{spec.kind} is not a representation-level operator")


class SequenceAugmenter(BaseEstimator, TransformerMixin):
    """Apply one ID-level operator to each sequence of a batch.

    Parameters
    ----------
    spec : AugmentationSpec or dict
    mask_id : int, optional
        Needed by Mask, CMR and CMRSI.
    item_embeddings : ndarray, optional
        ``(|V| + 2, d)`` table for Substitute/Insert/CMRSI neighbour lookups.
    max_len : int, optional
    random_state : int, default=0
        Sequence ``i`` uses the stream ``(random_state, i)``.
    """

    def __init__(self, spec, mask_id=None, item_embeddings=None, max_len=None,
                 random_state=0):
        self.spec = spec
        self.mask_id = mask_id
        self.item_embeddings = item_embeddings
        self.max_len = max_len
        self.random_state = random_state

    def fit(self, X=None, y=None):
        spec = self.spec
        if isinstance(spec, dict):
            spec = AugmentationSpec.from_dict(spec)
        if not spec.is_id_level:
            raise AugmentationConfigError(f"{spec.kind} is not an ID-level operator")
        self.spec_ = spec
        self.index_ = None
        if spec.needs_index:
            if self.item_embeddings is None:
                raise AugmentationConfigError(f"{spec.kind} needs item_embeddings")
            table = np.asarray(self.item_embeddings)
            self.index_ = ItemSimilarityIndex(table, table.shape[0] - 2)
        return self

    def transform(self, X, keys=None):
        check_is_fitted(self, "spec_")
        out = []
        for i, seq in enumerate(X):
            rng = np.random.default_rng([int(self.random_state), i])
            user_keys = keys[i] if keys is not None else None
            out.append(apply_id_operator(list(seq), self.spec_, rng, index=self.index_,
                                         keys=user_keys, mask_id=self.mask_id,
                                         max_len=self.max_len))
        return out

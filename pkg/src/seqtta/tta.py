"""Test-time augmentation: score ``m`` augmented variants and average them."""

import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .augmentation import (
    AugmentationConfigError,
    AugmentationSpec,
    ItemSimilarityIndex,
    apply_id_operator,
    make_hooks,
)
from .metrics import top_k as _top_k
from .tensor_core.kernels import softmax

SPACES = ("probability", "logit")


@dataclass
class TtaConfig:
    spec: AugmentationSpec
    m: int = 10
    include_original: bool = False
    aggregate_space: str = "probability"
    global_seed: int = 0
    precompute_index: bool = False

    def __post_init__(self):
        if isinstance(self.spec, dict):
            self.spec = AugmentationSpec.from_dict(self.spec)
        if int(self.m) != self.m or self.m < 1:
            raise AugmentationConfigError(f"m must be a positive integer, got {self.m}")
        if self.aggregate_space not in SPACES:
            raise AugmentationConfigError(f"aggregate_space must be one of {SPACES}")

    def to_dict(self):
        return {"spec": self.spec.to_dict(), "m": self.m,
                "include_original": self.include_original,
                "aggregate_space": self.aggregate_space,
                "global_seed": self.global_seed,
                "precompute_index": self.precompute_index}


@dataclass
class PredictionScores:
    """Scores over the catalog; ``values[j]`` belongs to item id ``j + 1``."""

    values: np.ndarray
    space: str = "logit"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.space not in SPACES:
            raise ValueError(f"unknown score space {self.space!r}")

    def top_k(self, k):
        return _top_k(self.values, k)


@dataclass
class TtaResult:
    aggregated: PredictionScores
    top_k: np.ndarray
    per_variant_scores: Optional[np.ndarray] = None
    wall_time: float = 0.0


@dataclass
class Variant:
    """One augmented input: an id sequence plus optional representation hooks."""

    items: List[int]
    hooks: object = None


def variant_rng(global_seed, user, index):
    """Independent generator for variant ``index`` of ``user``."""
    return np.random.default_rng([int(global_seed), int(user), int(index)])


def generate_variants(seq, config, user=0, index=None, keys=None, mask_id=None,
                      max_len=None):
    """``config.m`` augmented variants of ``seq``.

    ID-level operators yield modified sequences; representation-level
    operators yield the unmodified sequence with per-variant hooks.
    """
    seq = list(seq)
    if not seq:
        raise ValueError("cannot augment an empty sequence")
    spec = config.spec
    user_keys = keys.get(user) if keys is not None else None
    if spec.needs_keys and user_keys is None:
        raise AugmentationConfigError(f"{spec.selection.mode} selection needs key annotations")
    out = []
    for i in range(config.m):
        rng = variant_rng(config.global_seed, user, i)
        if spec.is_id_level:
            items = apply_id_operator(seq, spec, rng, index=index, keys=user_keys,
                                      mask_id=mask_id, max_len=max_len)
            out.append(Variant(items))
        else:
            out.append(Variant(seq, make_hooks(spec, rng)))
    return out


def _canonical_mean(stack):
    # sorting each column first makes the sum independent of variant order
    return np.sort(stack, axis=0).sum(axis=0) / stack.shape[0]


def aggregate(scores, config=None, space=None):
    """Average a pool of :class:`PredictionScores`.

    In probability space, logit inputs are softmaxed first; in logit space
    raw scores are averaged. The result is bit-identical under any
    permutation of ``scores``.
    """
    if not scores:
        raise AugmentationConfigError("cannot aggregate an empty pool")
    space = space or (config.aggregate_space if config is not None else "probability")
    spaces = {s.space for s in scores}
    if len(spaces) != 1:
        raise ValueError("all score vectors must share one space")
    lengths = {s.values.shape for s in scores}
    if len(lengths) != 1:
        raise ValueError("all score vectors must have the same length")
    stack = np.stack([s.values for s in scores])
    src = spaces.pop()
    if space == "probability":
        if src == "logit":
            stack = softmax(stack)
    elif src != "logit":
        raise ValueError("logit-space aggregation needs logit inputs")
    return PredictionScores(_canonical_mean(stack), space)


class TtaEngine:
    """Batched TTA scoring for many users against one model.

    Originals are scored with exactly the same call as plain (non-TTA)
    inference, so an identity operator reproduces base scores bit for bit.
    """

    def __init__(self, model, config, keys=None, index=None):
        check_is_fitted(model, "params_")
        self.model = model
        self.config = config
        self.keys = keys
        self.mask_id = model.num_items_ + 1
        if index is None and config.spec.needs_index:
            index = ItemSimilarityIndex(model.params_["item_emb"].value, model.num_items_,
                                        precompute=config.precompute_index)
        self.index = index

    def variants(self, seqs, users):
        out = []
        for seq, user in zip(seqs, users):
            out.extend(generate_variants(seq, self.config, user, self.index, self.keys,
                                         self.mask_id, self.model.max_len))
        return out

    def variant_logits(self, seqs, users):
        """Raw scores of every variant, shape ``(B, m, V)``."""
        variants = self.variants(seqs, users)
        logits = self.model.decision_function([v.items for v in variants],
                                              [v.hooks for v in variants])
        return logits.reshape(len(seqs), self.config.m, -1)

    def score(self, seqs, users, base_logits=None, keep_variants=False):
        """Aggregated scores ``(B, V)`` in ``config.aggregate_space``."""
        cfg = self.config
        var = self.variant_logits(seqs, users)
        if cfg.include_original:
            if base_logits is None:
                base_logits = self.model.decision_function(seqs)
            var = np.concatenate([var, base_logits[:, None, :]], axis=1)
        pool = softmax(var) if cfg.aggregate_space == "probability" else var
        agg = np.stack([_canonical_mean(p) for p in pool])
        return (agg, pool) if keep_variants else agg


def predict_with_tta(model, seq, config, user=0, k=10, keys=None, index=None,
                     keep_variants=True):
    """Augment one sequence ``m`` times, score, aggregate and rank.

    ``wall_time`` covers variant generation, scoring and aggregation only.
    """
    engine = TtaEngine(model, config, keys=keys, index=index)
    start = time.perf_counter()
    agg, pool = engine.score([list(seq)], [user], keep_variants=True)
    wall = time.perf_counter() - start
    scores = PredictionScores(agg[0], config.aggregate_space)
    return TtaResult(scores, scores.top_k(k), pool[0] if keep_variants else None, wall)


class TTARecommender(BaseEstimator):
    """Wrap a fitted :class:`~seqtta.models.SequentialRecommender` with TTA.

    Parameters
    ----------
    estimator : SequentialRecommender
        Fitted if ``fit`` is called without data; otherwise fitted by ``fit``.
    augmentation : AugmentationSpec or dict
    m : int, default=10
    include_original : bool, default=False
    aggregate_space : {'probability', 'logit'}, default='probability'
    random_state : int, default=0
        Global seed of the per-(user, variant) RNG streams.
    keys : KeyAnnotation, optional
        Needed by key-aware selection policies.
    """

    def __init__(self, estimator, augmentation, m=10, include_original=False,
                 aggregate_space="probability", random_state=0, keys=None):
        self.estimator = estimator
        self.augmentation = augmentation
        self.m = m
        self.include_original = include_original
        self.aggregate_space = aggregate_space
        self.random_state = random_state
        self.keys = keys

    def _config(self):
        return TtaConfig(self.augmentation, self.m, self.include_original,
                         self.aggregate_space, self.random_state)

    def fit(self, split=None, y=None):
        if split is not None:
            self.estimator.fit(split)
        check_is_fitted(self.estimator, "params_")
        self.config_ = self._config()
        self.engine_ = TtaEngine(self.estimator, self.config_, keys=self.keys)
        self.num_items_ = self.estimator.num_items_
        return self

    def predict_proba(self, seqs, users=None):
        """Aggregated scores ``(B, V)`` (probabilities unless logit space)."""
        check_is_fitted(self, "engine_")
        users = list(range(len(seqs))) if users is None else list(users)
        return self.engine_.score([list(s) for s in seqs], users)

    def predict(self, seqs, users=None, k=10):
        return _top_k(self.predict_proba(seqs, users), k)

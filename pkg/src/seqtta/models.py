"""Next-item recommenders (GRU and causal self-attention) as sklearn estimators.

Both encoders share one tied item-embedding table: row 0 is padding (always
zero), rows ``1..V`` are real items and row ``V + 1`` is the mask token,
which is never trained. Batches are left-padded so the newest item is
always in the last column.
"""

import json
import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .metrics import ndcg_at_k, ranks_of_targets, top_k
from .tensor_core import kernels as K
from .tensor_core.checkpoint import dump_params, load_params
from .tensor_core.optim import Parameter, adam_step

logger = logging.getLogger(__name__)

ENCODERS = ("gru", "attention")


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class EncodeHooks:
    """Shape-preserving transforms applied to one sequence's ``(L, d)`` matrices.

    ``post_embedding`` sees the looked-up item embeddings, ``post_encoder``
    the encoder's hidden states. Padding rows are never passed in.
    """

    post_embedding: Optional[Callable] = None
    post_encoder: Optional[Callable] = None


def pad_left(seqs, length=None):
    """Left-pad id lists with 0 into an int matrix."""
    length = length or max((len(s) for s in seqs), default=1)
    out = np.zeros((len(seqs), max(length, 1)), dtype=np.int64)
    for i, s in enumerate(seqs):
        if len(s):
            out[i, -len(s):] = s
    return out


def _apply_hook(X, valid, hooks, stage):
    if hooks is None:
        return X
    if isinstance(hooks, EncodeHooks):
        hooks = [hooks] * X.shape[0]
    if len(hooks) != X.shape[0]:
        raise ValueError(f"{len(hooks)} hooks for a batch of {X.shape[0]}")
    out = None
    for b, h in enumerate(hooks):
        fn = getattr(h, stage) if h is not None else None
        if fn is None:
            continue
        rows = valid[b]
        before = X[b, rows]
        after = np.asarray(fn(before))
        if after.shape != before.shape:
            raise ValueError(
                f"{stage} hook changed shape {before.shape} -> {after.shape}")
        if out is None:
            out = X.copy()
        out[b, rows] = after
    return X if out is None else out


class SequentialRecommender(BaseEstimator):
    """Next-item prediction model trained with full-catalog softmax cross-entropy.

    Parameters
    ----------
    encoder : {'attention', 'gru'}, default='attention'
        Causal self-attention stack (SASRec-style) or a GRU (GRU4Rec-style).
    d : int, default=64
        Embedding and hidden size.
    max_len : int, default=50
        Longest input sequence; longer inputs keep their newest items.
    n_blocks : int, default=2
        Attention blocks, or stacked GRU layers for ``encoder='gru'``.
    n_heads : int, default=1
        Attention heads (attention encoder only).
    epochs : int, default=50
        Maximum training epochs.
    batch_size : int, default=256
    lr, beta1, beta2 : float
        Adam settings.
    patience : int, default=10
        Early-stopping patience, counted in validation evaluations.
    eval_every : int, default=1
        Epochs between validation NDCG@10 evaluations.
    random_state : int, default=0
        Seeds initialisation and batch order.

    Attributes
    ----------
    params_ : dict of str -> Parameter
    num_items_ : int
    loss_curve_ : list of float
        Mean training loss; entry 0 is measured before any update.
    valid_curve_ : list of (epoch, float)
        Validation NDCG@10 at each evaluation; epoch 0 is the untrained model.
    best_epoch_ : int
    """

    def __init__(self, encoder="attention", d=64, max_len=50, n_blocks=2, n_heads=1,
                 epochs=50, batch_size=256, lr=0.001, beta1=0.9, beta2=0.999,
                 patience=10, eval_every=1, random_state=0, verbose=0):
        self.encoder = encoder
        self.d = d
        self.max_len = max_len
        self.n_blocks = n_blocks
        self.n_heads = n_heads
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.patience = patience
        self.eval_every = eval_every
        self.random_state = random_state
        self.verbose = verbose

    # -- construction ---------------------------------------------------------

    def _validate_params(self):
        if self.encoder not in ENCODERS:
            raise ValueError(f"encoder must be one of {ENCODERS}, got {self.encoder!r}")
        if self.d < 1 or self.max_len < 3 or self.batch_size < 1:
            raise ValueError("need d >= 1, max_len >= 3, batch_size >= 1")
        if self.encoder == "attention" and self.d % self.n_heads:
            raise ValueError("d must be divisible by n_heads")
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")

    def _init_params(self, num_items, rng):
        d = self.d
        std = d ** -0.5

        def normal(*shape, scale=std):
            return Parameter(rng.normal(0.0, scale, size=shape))

        def zeros(*shape):
            return Parameter(np.zeros(shape))

        table = rng.normal(0.0, std, size=(num_items + 2, d))
        table[0] = 0.0
        params = {"item_emb": Parameter(table, frozen_rows=(0,))}
        if self.encoder == "attention":
            params["pos_emb"] = normal(self.max_len, d)
            for b in range(self.n_blocks):
                pre = f"block{b}."
                for name in ("q", "k", "v", "o"):
                    params[pre + "W" + name] = normal(d, d)
                    params[pre + "b" + name] = zeros(d)
                for name in ("W1", "W2"):
                    params[pre + name] = normal(d, d)
                params[pre + "b1"] = zeros(d)
                params[pre + "b2"] = zeros(d)
                for ln in ("ln1", "ln2"):
                    params[pre + ln + "_g"] = Parameter(np.ones(d))
                    params[pre + ln + "_b"] = zeros(d)
        else:
            for layer in range(self.n_blocks):
                pre = f"gru{layer}."
                params[pre + "Wx"] = normal(d, 3 * d)
                params[pre + "Wh"] = normal(d, 3 * d)
                params[pre + "bx"] = zeros(3 * d)
                params[pre + "bh"] = zeros(3 * d)
        return params

    def _group(self, prefix):
        n = len(prefix)
        return {k[n:]: p.value for k, p in self.params_.items() if k.startswith(prefix)}

    # -- forward / backward ---------------------------------------------------

    def _embed_ids(self, ids):
        return K.embedding_forward(self.params_["item_emb"].value, ids)[0]

    def _encoder_forward(self, E, valid, keep_cache=False):
        caches = []
        if self.encoder == "attention":
            L = E.shape[1]
            if L > self.max_len:
                raise ValueError(f"sequence length {L} exceeds max_len {self.max_len}")
            pos = np.arange(L - 1, -1, -1)
            X = np.where(valid[..., None], E + self.params_["pos_emb"].value[pos], 0.0)
            allowed = K.attention_mask(valid)
            for b in range(self.n_blocks):
                X, c = K.block_forward(X, self._group(f"block{b}."), allowed, self.n_heads)
                caches.append(c)
            H = X
        else:
            H = E
            for layer in range(self.n_blocks):
                H, c = K.gru_forward(H, self._group(f"gru{layer}."), valid)
                caches.append(c)
        return (H, caches) if keep_cache else H

    def _encoder_backward(self, dH, valid, caches):
        if self.encoder == "attention":
            dX = dH
            for b in range(self.n_blocks - 1, -1, -1):
                pre = f"block{b}."
                dX, g = K.block_backward(dX, caches[b], self._group(pre))
                for name, grad in g.items():
                    self.params_[pre + name].grad += grad
            dX = np.where(valid[..., None], dX, 0.0)
            L = dX.shape[1]
            self.params_["pos_emb"].grad[:L] += dX.sum(axis=0)[::-1]
            return dX
        dX = dH
        for layer in range(self.n_blocks - 1, -1, -1):
            pre = f"gru{layer}."
            dX, g = K.gru_backward(dX, caches[layer], self._group(pre))
            for name, grad in g.items():
                self.params_[pre + name].grad += grad
        return dX

    def _batch_loss(self, seqs, backward):
        inputs = [s[:-1][-self.max_len:] for s in seqs]
        targets = [s[1:][-self.max_len:] for s in seqs]
        ids = pad_left(inputs)
        tgt = pad_left(targets, ids.shape[1])
        valid = ids > 0
        table = self.params_["item_emb"].value
        V = self.num_items_
        E = self._embed_ids(ids)
        H, caches = self._encoder_forward(E, valid, keep_cache=True)
        Hv = H[valid]
        real = table[1:V + 1]
        logits = Hv @ real.T
        loss, dlogits = K.softmax_cross_entropy(logits, tgt[valid])
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"non-finite training loss {loss}")
        if backward:
            emb = self.params_["item_emb"]
            emb.grad[1:V + 1] += dlogits.T @ Hv
            dH = np.zeros_like(H)
            dH[valid] = dlogits @ real
            dE = self._encoder_backward(dH, valid, caches)
            emb.grad += K.embedding_backward(dE, ids, emb.shape)
        return loss, int(valid.sum())

    # -- public API -----------------------------------------------------------

    def embed(self, seqs):
        """Item-embedding matrices for a batch of id lists: ``(E, valid)``.

        ``E`` has shape ``(B, L, d)`` with zero rows at left padding.
        """
        check_is_fitted(self, "params_")
        seqs = [list(s)[-self.max_len:] for s in seqs]
        ids = pad_left(seqs)
        return self._embed_ids(ids), ids > 0

    def encode(self, E, valid, hooks=None):
        """Hidden states ``(B, L, d)``; hooks may be one EncodeHooks or one per row."""
        check_is_fitted(self, "params_")
        E = _apply_hook(E, valid, hooks, "post_embedding")
        H = self._encoder_forward(E, valid)
        return _apply_hook(H, valid, hooks, "post_encoder")

    def hidden_last(self, seqs, hooks=None, batch_size=512):
        """Final-position hidden vectors ``(B, d)`` after any hooks.

        Inputs are processed in length-sorted sub-batches; the result for a
        given list of inputs does not depend on anything else.
        """
        check_is_fitted(self, "params_")
        seqs = [list(s)[-self.max_len:] for s in seqs]
        if isinstance(hooks, EncodeHooks) or hooks is None:
            hooks = [hooks] * len(seqs)
        if len(hooks) != len(seqs):
            raise ValueError(f"{len(hooks)} hooks for {len(seqs)} sequences")
        out = np.zeros((len(seqs), self.d))
        order = np.argsort([len(s) for s in seqs], kind="stable")
        for start in range(0, len(seqs), batch_size):
            idx = order[start:start + batch_size]
            E, valid = self.embed([seqs[i] for i in idx])
            out[idx] = self.encode(E, valid, [hooks[i] for i in idx])[:, -1, :]
        return out

    def score_full(self, h_last):
        """Dot product of each hidden vector with every real item embedding."""
        check_is_fitted(self, "params_")
        table = self.params_["item_emb"].value
        return np.asarray(h_last) @ table[1:self.num_items_ + 1].T

    def decision_function(self, seqs, hooks=None):
        """Raw scores ``(B, V)``; column ``j`` is item id ``j + 1``."""
        return self.score_full(self.hidden_last(seqs, hooks))

    def predict_proba(self, seqs, hooks=None):
        return K.softmax(self.decision_function(seqs, hooks))

    def predict(self, seqs, k=10):
        """Top-``k`` item ids per sequence, ties broken towards smaller ids."""
        return top_k(self.decision_function(seqs), k)

    def _validation_ndcg(self, split, batch=512):
        inputs = split.train
        ranks = []
        for start in range(0, len(inputs), batch):
            scores = self.decision_function(inputs[start:start + batch])
            ranks.append(ranks_of_targets(scores, split.valid_target[start:start + batch]))
        if not ranks:
            return 0.0
        return float(np.mean(ndcg_at_k(np.concatenate(ranks), 10)))

    def _length_batches(self, lengths, rng):
        """Shuffled batches of similar-length sequences (less padding)."""
        order = np.lexsort((rng.random(lengths.size), lengths))
        batches = [order[i:i + self.batch_size] for i in range(0, order.size, self.batch_size)]
        return [batches[i] for i in rng.permutation(len(batches))]

    def _epoch_loss(self, seqs):
        total, count = 0.0, 0
        order = np.argsort([len(s) for s in seqs], kind="stable")
        for start in range(0, len(seqs), self.batch_size):
            batch = [seqs[i] for i in order[start:start + self.batch_size]]
            loss, n = self._batch_loss(batch, backward=False)
            total += loss * n
            count += n
        return total / max(count, 1)

    def fit(self, split, y=None):
        """Train on ``split.training_sequences()`` with next-item targets.

        Early-stops on validation NDCG@10 and restores the best parameters.
        """
        self._validate_params()
        seqs = [s for s in split.training_sequences() if len(s) >= 2]
        if not seqs:
            raise ValueError("no training sequence has two or more items")
        rng = np.random.default_rng(self.random_state)
        self.num_items_ = split.num_items
        self.params_ = self._init_params(split.num_items, rng)
        self.loss_curve_ = [self._epoch_loss(seqs)]
        # epoch 0 is recorded for reference; early stopping starts at epoch 1
        self.valid_curve_ = [(0, self._validation_ndcg(split))]
        best, best_params, since_best = -1.0, None, 0
        self.best_epoch_ = 0
        lengths = np.array([len(s) for s in seqs])
        for epoch in range(1, self.epochs + 1):
            batches = self._length_batches(lengths, rng)
            total, count = 0.0, 0
            for idx in batches:
                batch = [seqs[i] for i in idx]
                loss, n = self._batch_loss(batch, backward=True)
                for p in self.params_.values():
                    adam_step(p, self.lr, self.beta1, self.beta2)
                total += loss * n
                count += n
            self.loss_curve_.append(total / count)
            if epoch % self.eval_every and epoch != self.epochs:
                continue
            score = self._validation_ndcg(split)
            self.valid_curve_.append((epoch, score))
            if self.verbose:
                logger.info("epoch %d loss %.4f valid ndcg@10 %.4f",
                            epoch, self.loss_curve_[-1], score)
            if score > best:
                best, since_best, self.best_epoch_ = score, 0, epoch
                best_params = {k: p.copy() for k, p in self.params_.items()}
            else:
                since_best += 1
                if since_best >= self.patience:
                    break
        if best_params is not None:
            self.params_ = best_params
        self.n_epochs_run_ = len(self.loss_curve_) - 1
        return self

    # -- persistence ----------------------------------------------------------

    def to_json(self):
        check_is_fitted(self, "params_")
        meta = {"estimator": self.get_params(), "num_items": self.num_items_,
                "loss_curve": self.loss_curve_, "valid_curve": self.valid_curve_,
                "best_epoch": self.best_epoch_}
        return dump_params(self.params_, meta)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def from_json(cls, text):
        params, meta = load_params(text)
        model = cls(**meta["estimator"])
        model.params_ = params
        model.num_items_ = meta["num_items"]
        model.loss_curve_ = meta.get("loss_curve", [])
        model.valid_curve_ = [tuple(v) for v in meta.get("valid_curve", [])]
        model.best_epoch_ = meta.get("best_epoch", 0)
        return model

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def config_json(self):
        return json.dumps(self.get_params(), sort_keys=True)

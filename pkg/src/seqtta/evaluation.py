"""Full-catalog evaluation, similarity analysis, timing and sweeps."""

import copy
import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.utils.validation import check_is_fitted

from .augmentation import AugmentationSpec
from .datasets import DatasetSplit
from .metrics import KS, hit_at_k, ndcg_at_k, ranks_of_targets
from .metrics import top_k as _top_k
from .tensor_core.kernels import softmax
from .tensor_core.optim import Parameter
from .tta import TtaConfig, TtaEngine, _canonical_mean

SWEEP_AXES = ("sigma", "noise_interval", "m", "ratio")

SIGMA_GRID = tuple(round(0.1 * i, 1) for i in range(1, 10))
M_GRID = (5, 7, 9, 10, 11, 13, 15)
NOISE_GRID = ((0.005, 0.001), (0.05, 0.01), (0.5, 0.1), (1, 0.5), (2, 1))


@dataclass
class MetricReport:
    """HR@K and NDCG@K averaged over users.

    ``inference_minutes`` is wall-clock and therefore excluded from
    :meth:`metrics_dict`, which is what deterministic report files hold.
    """

    hr: dict
    ndcg: dict
    num_users: int
    inference_minutes: float = 0.0
    label: str = "base"

    def __post_init__(self):
        self.check()

    @classmethod
    def from_ranks(cls, ranks, inference_minutes=0.0, label="base"):
        ranks = np.asarray(ranks)
        if ranks.size == 0:
            raise ValueError("no users to evaluate")
        hr = {k: float(np.mean(hit_at_k(ranks, k))) for k in KS}
        ndcg = {k: float(np.mean(ndcg_at_k(ranks, k))) for k in KS}
        return cls(hr, ndcg, int(ranks.size), inference_minutes, label)

    def check(self):
        prev_h = prev_n = 0.0
        for k in sorted(self.hr):
            h, n = self.hr[k], self.ndcg[k]
            if not (0.0 <= n <= h + 1e-12 and h <= 1.0):
                raise AssertionError(f"metric bounds violated at K={k}: hr={h}, ndcg={n}")
            if h < prev_h or n < prev_n:
                raise AssertionError(f"metrics decrease at K={k}")
            prev_h, prev_n = h, n

    def metrics_dict(self):
        d = {"label": self.label, "num_users": self.num_users}
        for k in sorted(self.hr):
            d[f"hr@{k}"] = self.hr[k]
        for k in sorted(self.ndcg):
            d[f"ndcg@{k}"] = self.ndcg[k]
        return d

    def to_dict(self):
        d = self.metrics_dict()
        d["inference_minutes"] = self.inference_minutes
        return d

    def __eq__(self, other):
        if not isinstance(other, MetricReport):
            return NotImplemented
        return self.metrics_dict() == other.metrics_dict()


def _chunks(n, size):
    return [np.arange(s, min(s + size, n)) for s in range(0, n, size)]


def evaluate(model, split, tta=None, keys=None, exclude_seen=False, chunk_size=256,
             parallel=1, return_ranks=False, label=None, top_k=None):
    """Rank each user's test target over the whole catalog.

    Parameters
    ----------
    model : SequentialRecommender
    split : DatasetSplit
        ``test_input`` is scored and ``test_target`` is ranked.
    tta : TtaConfig, optional
        Score augmented variants instead of the plain input.
    keys : KeyAnnotation, optional
    exclude_seen : bool, default=False
        Drop items already in the input from the candidate set.
    chunk_size : int, default=256
        Users scored per batch; chunking is fixed so results do not depend
        on ``parallel``.
    parallel : int, default=1
        Worker threads. Ranks are gathered in user order either way.
    top_k : int, optional
        Also collect each user's top-``top_k`` item ids.

    Returns
    -------
    MetricReport
        Or ``(report, details)`` if ``return_ranks`` or ``top_k`` is set;
        ``details`` holds ``ranks`` and, if requested, ``top_k``.
    """
    check_is_fitted(model, "params_")
    inputs = split.test_input
    targets = np.asarray(split.test_target)
    users = split.users
    engine = TtaEngine(model, tta, keys=keys) if tta is not None else None

    def run(idx):
        seqs = [inputs[i] for i in idx]
        if engine is None:
            scores = softmax(model.decision_function(seqs))
        else:
            base = model.decision_function(seqs) if tta.include_original else None
            scores = engine.score(seqs, [users[i] for i in idx], base_logits=base)
        if exclude_seen:
            scores = scores.copy()
            for row, s in enumerate(seqs):
                seen = np.asarray([v for v in set(s) if 1 <= v <= model.num_items_], dtype=int)
                scores[row, seen - 1] = -np.inf
        ranked = _top_k(scores, top_k) if top_k else None
        return ranks_of_targets(scores, targets[idx]), ranked

    start = time.perf_counter()
    chunks = _chunks(len(inputs), chunk_size)
    if parallel > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    ranks = np.concatenate([p[0] for p in parts]) if parts else np.zeros(0, dtype=int)
    minutes = (time.perf_counter() - start) / 60.0
    if label is None:
        label = "base" if tta is None else tta.spec.label()
    report = MetricReport.from_ranks(ranks, minutes, label)
    if not (return_ranks or top_k):
        return report
    details = {"ranks": ranks}
    if top_k:
        details["top_k"] = np.concatenate([p[1] for p in parts])
    return report, details


@dataclass
class SimilarityReport:
    label: str
    mean: float
    per_user: dict = field(default_factory=dict)
    n_pairs: int = 0
    n_skipped: int = 0

    def to_dict(self):
        return {"label": self.label, "mean_cosine": self.mean, "n_pairs": self.n_pairs,
                "n_skipped": self.n_skipped, **{f"user_{k}": v for k, v in self.per_user.items()}}


def similarity_report(model, split, tta, keys=None, max_users=None):
    """Cosine between final hidden vectors of each variant and its original.

    Hidden vectors are taken after all hooks. Pairs with a zero vector are
    skipped and counted in ``n_skipped``.
    """
    engine = TtaEngine(model, tta, keys=keys)
    n = len(split.users) if max_users is None else min(max_users, len(split.users))
    inputs = split.test_input[:n]
    users = split.users[:n]
    h0 = model.hidden_last(inputs)
    variants = engine.variants(inputs, users)
    hv = model.hidden_last([v.items for v in variants], [v.hooks for v in variants])
    hv = hv.reshape(n, tta.m, -1)
    n0 = np.linalg.norm(h0, axis=1)[:, None]
    nv = np.linalg.norm(hv, axis=2)
    ok = (n0 > 0) & (nv > 0)
    cos = np.einsum("ud,umd->um", h0, hv) / np.where(ok, n0 * nv, 1.0)
    cos = np.clip(cos, -1.0, 1.0)
    valid = cos[ok]
    if valid.size == 0:
        raise ValueError("every pair had a zero vector")
    per_user = np.array([c[o].mean() for c, o in zip(cos, ok) if o.any()])
    summary = {"min": float(per_user.min()), "median": float(np.median(per_user)),
               "max": float(per_user.max())}
    return SimilarityReport(tta.spec.label(), float(valid.mean()), summary,
                            int(valid.size), int((~ok).sum()))


def resize_catalog(model, split, size, seed=0):
    """Copy of ``model`` and ``split`` over a catalog of ``size`` items.

    Item ``i`` maps to ``(i - 1) % size + 1``. Rows beyond the trained
    catalog are drawn to match the trained embedding scale. Used only for
    timing, where scores need not be meaningful.
    """
    check_is_fitted(model, "params_")
    rng = np.random.default_rng(seed)
    old = model.params_["item_emb"].value
    v_old = model.num_items_
    table = rng.normal(0.0, float(old[1:v_old + 1].std()), size=(size + 2, old.shape[1]))
    keep = min(size, v_old)
    table[1:keep + 1] = old[1:keep + 1]
    table[0] = 0.0
    m = copy.copy(model)
    m.params_ = dict(model.params_)
    m.params_["item_emb"] = Parameter(table, frozen_rows=(0,))
    m.num_items_ = size

    def remap(seq):
        return [(v - 1) % size + 1 for v in seq]

    new = DatasetSplit(size, list(split.users), [remap(s) for s in split.train],
                       [remap([v])[0] for v in split.valid_target],
                       [remap([v])[0] for v in split.test_target])
    return m, new


@dataclass
class TimingReport:
    """Median TTA inference seconds per operator and catalog size."""

    vocab_sizes: list
    base: dict
    times: dict
    substitute_queries: dict = field(default_factory=dict)
    num_users: int = 0
    m: int = 10

    def ratio(self, label):
        t = self.base if label == "base" else self.times[label]
        return t[self.vocab_sizes[-1]] / t[self.vocab_sizes[0]]

    def ratios(self):
        out = {"base": self.ratio("base")}
        out.update({k: self.ratio(k) for k in self.times})
        return out

    def rows(self):
        rows = [{"operator": "base", **{f"seconds@{v}": self.base[v] for v in self.vocab_sizes},
                 "ratio": self.ratio("base")}]
        for label, t in self.times.items():
            rows.append({"operator": label, **{f"seconds@{v}": t[v] for v in self.vocab_sizes},
                         "ratio": self.ratio(label)})
        return rows


def _shared_scoring(model, seqs, m):
    """The part of TTA cost every operator shares: score ``m`` plain copies."""
    logits = model.decision_function([s for s in seqs for _ in range(m)])
    pool = softmax(logits.reshape(len(seqs), m, -1))
    return np.stack([_canonical_mean(p) for p in pool])


def timing_report(model, split, specs, vocab_sizes, m=10, repeats=3, max_users=None,
                  seed=0):
    """Time TTA inference per operator at several catalog sizes.

    Each measurement is the median of ``repeats`` full passes over the
    users (variant generation, scoring, aggregation and ranking); model
    construction is excluded. The ``base`` row scores ``m`` unaugmented
    copies per user, i.e. the cost all operators share. Ratios are time at
    the largest size over time at the smallest.
    """
    if len(vocab_sizes) < 2:
        raise ValueError("need at least two catalog sizes")
    vocab_sizes = sorted(int(v) for v in vocab_sizes)
    if max_users is not None:
        n = min(max_users, len(split.users))
        split = DatasetSplit(split.num_items, split.users[:n], split.train[:n],
                             split.valid_target[:n], split.test_target[:n])
    specs = [s if isinstance(s, AugmentationSpec) else AugmentationSpec.from_dict(s)
             for s in specs]
    resized = {size: resize_catalog(model, split, size, seed) for size in vocab_sizes}
    configs = [None] + [TtaConfig(s, m=m, global_seed=seed) for s in specs]
    runs = {(size, i): [] for size in vocab_sizes for i in range(len(configs))}
    queries = {}

    def one_pass(mod, sp, cfg):
        inputs, users = sp.test_input, sp.users
        targets = np.asarray(sp.test_target)
        t0 = time.perf_counter()
        # the index is built inside the timed region: it is per-run work
        engine = TtaEngine(mod, cfg) if cfg is not None else None
        for idx in _chunks(len(users), 256):
            seqs = [inputs[i] for i in idx]
            if engine is None:
                scores = _shared_scoring(mod, seqs, m)
            else:
                scores = engine.score(seqs, [users[i] for i in idx])
            ranks_of_targets(scores, targets[idx])
        elapsed = time.perf_counter() - t0
        if engine is not None and engine.index is not None:
            queries[mod.num_items_] = engine.index.n_queries
        return elapsed

    # round-robin over repeats so slow drift in machine speed hits every cell alike
    for _ in range(repeats):
        for size in vocab_sizes:
            for i, cfg in enumerate(configs):
                runs[size, i].append(one_pass(*resized[size], cfg))
    base = {size: float(np.median(runs[size, 0])) for size in vocab_sizes}
    times = {s.label(): {size: float(np.median(runs[size, i + 1])) for size in vocab_sizes}
             for i, s in enumerate(specs)}
    return TimingReport(vocab_sizes, base, times, queries, len(split.users), m)


def _grid_config(config, axis, value):
    spec = config.spec
    if axis == "sigma":
        return TtaConfig(spec.with_(sigma=float(value)), config.m, config.include_original,
                         config.aggregate_space, config.global_seed)
    if axis == "ratio":
        return TtaConfig(spec.with_(ratio=float(value)), config.m, config.include_original,
                         config.aggregate_space, config.global_seed)
    if axis == "noise_interval":
        a, b = value
        new = AugmentationSpec.tnoise_from_pair(a, b, stage=spec.stage or "embedding",
                                                centered=bool(spec.noise_centered))
        return TtaConfig(new, config.m, config.include_original, config.aggregate_space,
                         config.global_seed)
    if axis == "m":
        return TtaConfig(spec, int(value), config.include_original, config.aggregate_space,
                         config.global_seed)
    raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


@dataclass
class SweepResult:
    axis: str
    grid: list
    reports: list

    def rows(self):
        out = []
        for value, rep in zip(self.grid, self.reports):
            v = "|".join(str(x) for x in value) if isinstance(value, (tuple, list)) else value
            out.append({self.axis: v, **rep.metrics_dict()})
        return out

    def best(self, metric="hr@10"):
        vals = [r[metric] for r in self.rows()]
        return self.grid[int(np.argmax(vals))]

    def write_csv(self, path):
        rows = self.rows()
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        return Path(path)

    def write_plot_data(self, path):
        """Whitespace-separated columns for gnuplot: index, value, HR@K, NDCG@K."""
        cols = [f"hr@{k}" for k in KS] + [f"ndcg@{k}" for k in KS]
        lines = [f"# axis={self.axis}", "# idx value " + " ".join(cols)]
        for i, row in enumerate(self.rows()):
            v = str(row[self.axis]).replace("|", ",")
            lines.append(f"{i} {v} " + " ".join(f"{row[c]:.6f}" for c in cols))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
        return Path(path)


def sweep(model, split, axis, grid, config, keys=None, parallel=1):
    """One :func:`evaluate` run per grid point, all with ``config.global_seed``."""
    grid = list(grid)
    if not grid:
        raise ValueError("sweep grid is empty")
    reports = []
    for value in grid:
        cfg = _grid_config(config, axis, value)
        reports.append(evaluate(model, split, tta=cfg, keys=keys, parallel=parallel))
    return SweepResult(axis, grid, reports)

"""Interaction loading, k-core filtering, sequence building and leave-one-out splits."""

import csv
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple

logger = logging.getLogger(__name__)

PAD_ID = 0


class DatasetError(ValueError):
    """The input cannot produce a usable dataset (e.g. an empty k-core)."""


class Interaction(NamedTuple):
    user: str
    item: str
    timestamp: int


class InteractionList(list):
    """A list of :class:`Interaction` that remembers how many rows were skipped."""

    def __init__(self, items=(), n_skipped=0):
        super().__init__(items)
        self.n_skipped = n_skipped


@dataclass
class Catalog:
    user_index: dict
    item_index: dict

    @property
    def num_users(self):
        return len(self.user_index)

    @property
    def num_items(self):
        return len(self.item_index)

    @property
    def mask_id(self):
        return self.num_items + 1

    @classmethod
    def from_interactions(cls, interactions):
        users = sorted({r.user for r in interactions})
        items = sorted({r.item for r in interactions})
        return cls({u: i for i, u in enumerate(users)},
                   {v: i + 1 for i, v in enumerate(items)})


@dataclass
class UserSequence:
    user: int
    items: List[int]

    def __len__(self):
        return len(self.items)


@dataclass
class DatasetSplit:
    """Leave-one-out split; per-user lists are aligned with ``users``."""

    num_items: int
    users: List[int]
    train: List[List[int]]
    valid_target: List[int]
    test_target: List[int]
    drop_log: List[dict] = field(default_factory=list)
    train_extra: List[List[int]] = field(default_factory=list)

    @property
    def test_input(self):
        return [t + [v] for t, v in zip(self.train, self.valid_target)]

    @property
    def mask_id(self):
        return self.num_items + 1

    def __len__(self):
        return len(self.users)

    def training_sequences(self):
        return self.train + self.train_extra

    def to_dict(self):
        return {
            "num_items": self.num_items,
            "users": self.users,
            "train": self.train,
            "valid_target": self.valid_target,
            "test_target": self.test_target,
            "drop_log": self.drop_log,
            "train_extra": self.train_extra,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["num_items"], list(d["users"]), [list(s) for s in d["train"]],
                   list(d["valid_target"]), list(d["test_target"]),
                   list(d.get("drop_log", [])),
                   [list(s) for s in d.get("train_extra", [])])


_FORMATS = {".csv": "csv", ".tsv": "tsv", ".jsonl": "json-lines",
            ".json": "json-lines", ".ndjson": "json-lines"}


def _parse_timestamp(raw):
    if isinstance(raw, bool):
        raise ValueError("boolean timestamp")
    if isinstance(raw, (int, float)):
        value = float(raw)
    else:
        text = str(raw).strip()
        try:
            return _check_ts(int(text))
        except ValueError:
            value = float(text)
    if not math.isfinite(value) or value != int(value):
        raise ValueError(f"bad timestamp {raw!r}")
    return _check_ts(int(value))


def _check_ts(ts):
    if ts < 0:
        raise ValueError(f"negative timestamp {ts}")
    return ts


def load_interactions(path, format=None):
    """Read ``user,item,timestamp`` records in file order.

    Malformed rows are skipped with a warning; the skip count is kept on the
    returned list as ``n_skipped``. A missing or unreadable file raises
    ``OSError``.
    """
    path = Path(path)
    fmt = format or _FORMATS.get(path.suffix.lower(), "csv")
    out = InteractionList()
    with open(path, encoding="utf-8", newline="") as fh:
        if fmt in ("csv", "tsv"):
            reader = csv.DictReader(fh, delimiter="," if fmt == "csv" else "\t")
            rows = ((i + 2, r) for i, r in enumerate(reader))
        elif fmt == "json-lines":
            rows = _jsonl_rows(fh)
        else:
            raise ValueError(f"unknown interaction format {fmt!r}")
        for lineno, row in rows:
            try:
                if row is None:
                    raise ValueError("unparseable line")
                user, item = row["user"], row["item"]
                if user is None or item is None or str(user) == "" or str(item) == "":
                    raise ValueError("empty key")
                out.append(Interaction(str(user), str(item),
                                       _parse_timestamp(row["timestamp"])))
            except (KeyError, TypeError, ValueError) as exc:
                out.n_skipped += 1
                logger.warning("%s:%d: skipping malformed row (%s)", path, lineno, exc)
    if not out:
        logger.warning("%s: no interactions loaded", path)
    logger.info("loaded %d interactions from %s (%d skipped)", len(out), path, out.n_skipped)
    return out


def _jsonl_rows(fh):
    for i, line in enumerate(fh):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            rec = None
        if rec is not None and not isinstance(rec, dict):
            rec = None
        yield i + 1, rec


def k_core_filter(interactions, k=5):
    """Iteratively drop users and items with fewer than ``k`` interactions."""
    if k < 1:
        raise ValueError("k must be >= 1")
    current = list(interactions)
    while True:
        users = Counter(r.user for r in current)
        items = Counter(r.item for r in current)
        kept = [r for r in current if users[r.user] >= k and items[r.item] >= k]
        if len(kept) == len(current):
            break
        current = kept
    if not current and interactions:
        logger.warning("%d-core of %d interactions is empty", k, len(interactions))
    return current


def build_sequences(interactions, catalog, max_len=50):
    """Per-user chronological item-id sequences, keeping the newest ``max_len``.

    Equal timestamps keep input order (Python's sort is stable).
    """
    if max_len < 3:
        raise ValueError("max_len must be >= 3")
    per_user = defaultdict(list)
    for r in interactions:
        per_user[r.user].append((r.timestamp, catalog.item_index[r.item]))
    seqs = []
    for raw, events in per_user.items():
        events.sort(key=lambda e: e[0])
        items = [v for _, v in events][-max_len:]
        seqs.append(UserSequence(catalog.user_index[raw], items))
    seqs.sort(key=lambda s: s.user)
    return seqs


def leave_one_out_split(sequences, num_items):
    """Last item -> test target, second-to-last -> validation target."""
    users, train, valid, test, drops = [], [], [], [], []
    for s in sequences:
        if len(s.items) < 3:
            drops.append({"user": s.user, "length": len(s.items),
                          "reason": "fewer than 3 interactions"})
            continue
        users.append(s.user)
        train.append(list(s.items[:-2]))
        valid.append(s.items[-2])
        test.append(s.items[-1])
    if drops:
        logger.info("dropped %d short sequences", len(drops))
    return DatasetSplit(num_items, users, train, valid, test, drops)


def dataset_stats(interactions):
    n_users = len({r.user for r in interactions})
    n_items = len({r.item for r in interactions})
    n = len(interactions)
    return {
        "users": n_users,
        "items": n_items,
        "interactions": n,
        "average_length": n / n_users if n_users else 0.0,
        "sparsity": 1.0 - n / (n_users * n_items) if n_users and n_items else 1.0,
    }


def expand_training_set(split, spec, rng, index=None, n_variants=1):
    """Training-time augmentation: add augmented copies of every training input.

    Sliding windows contribute every window; other ID-level operators
    contribute ``n_variants`` draws per sequence. Validation and test data
    are untouched.
    """
    from . import augmentation as aug

    if not spec.is_id_level:
        raise aug.AugmentationConfigError(
            f"{spec.kind} is a representation-level operator; "
            "training-set expansion needs an ID-level operator")
    extra = []
    for seq in split.train:
        if spec.kind == "SlidingWindow":
            extra.extend(aug.sliding_window_sample(seq, spec.window_len, rng, mode="all"))
        else:
            for _ in range(n_variants):
                extra.append(aug.apply_id_operator(
                    seq, spec, rng, index=index, mask_id=split.mask_id))
    return DatasetSplit(split.num_items, list(split.users), [list(s) for s in split.train],
                        list(split.valid_target), list(split.test_target),
                        list(split.drop_log), list(split.train_extra) + extra)


def prepare_dataset(path, k=5, max_len=50, format=None):
    """Load -> k-core -> sequences -> split. Returns ``(catalog, split, stats)``."""
    raw = load_interactions(path, format)
    core = k_core_filter(raw, k)
    if not core:
        raise DatasetError(f"{k}-core of {path} is empty ({len(raw)} raw interactions)")
    catalog = Catalog.from_interactions(core)
    seqs = build_sequences(core, catalog, max_len) if core else []
    split = leave_one_out_split(seqs, catalog.num_items)
    if not len(split):
        raise DatasetError(f"no user in {path} has a sequence long enough to split")
    stats = dataset_stats(core)
    stats.update({"raw_interactions": len(raw), "skipped_rows": raw.n_skipped,
                  "k_core": k, "max_len": max_len, "split_users": len(split)})
    return catalog, split, stats


def save_dataset(path, catalog, split, stats=None, config=None):
    body = {
        "format": "seqtta-dataset",
        "version": 1,
        "catalog": {"user_index": catalog.user_index, "item_index": catalog.item_index},
        "split": split.to_dict(),
        "stats": stats or {},
        "config": config or {},
    }
    text = json.dumps(body, sort_keys=True, separators=(",", ":"))
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_dataset(path):
    body = json.loads(Path(path).read_text(encoding="utf-8"))
    if body.get("format") != "seqtta-dataset":
        raise ValueError(f"{path} is not a seqtta dataset file")
    cat = body["catalog"]
    return (Catalog(cat["user_index"], cat["item_index"]),
            DatasetSplit.from_dict(body["split"]), body.get("stats", {}))

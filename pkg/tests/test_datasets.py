import json

import numpy as np
import pytest

from seqtta.augmentation import AugmentationConfigError, AugmentationSpec
from seqtta.datasets import (
    Catalog,
    DatasetError,
    DatasetSplit,
    Interaction,
    UserSequence,
    build_sequences,
    dataset_stats,
    expand_training_set,
    k_core_filter,
    leave_one_out_split,
    load_dataset,
    load_interactions,
    prepare_dataset,
    save_dataset,
)
from seqtta.synthetic import make_desk_interactions, write_interactions


def _rows(pairs):
    return [Interaction(u, i, t) for t, (u, i) in enumerate(pairs)]


class TestLoadInteractions:
    def test_csv_roundtrip(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("user,item,timestamp\na,x,3\nb,y,1\n")
        rows = load_interactions(p)
        assert rows == [Interaction("a", "x", 3), Interaction("b", "y", 1)]
        assert rows.n_skipped == 0

    def test_tsv_and_jsonl(self, tmp_path):
        t = tmp_path / "x.tsv"
        t.write_text("user\titem\ttimestamp\na\tx\t3\n")
        assert load_interactions(t) == [Interaction("a", "x", 3)]
        j = tmp_path / "x.jsonl"
        j.write_text('{"user": "a", "item": "x", "timestamp": 3}\n\n'
                     '{"user": 1, "item": 2, "timestamp": 4.0}\n')
        assert load_interactions(j) == [Interaction("a", "x", 3), Interaction("1", "2", 4)]

    def test_malformed_rows_skipped_and_counted(self, tmp_path, caplog):
        p = tmp_path / "x.csv"
        p.write_text("user,item,timestamp\na,x,3\nb,y,-1\nc,z,soon\n,w,2\nd,v,1.5\n")
        rows = load_interactions(p)
        assert rows == [Interaction("a", "x", 3)]
        assert rows.n_skipped == 4
        assert "skipping malformed row" in caplog.text

    def test_bad_json_line_skipped(self, tmp_path):
        p = tmp_path / "x.jsonl"
        p.write_text('{"user": "a", "item": "x", "timestamp": 3}\nnot json\n[1, 2]\n')
        rows = load_interactions(p)
        assert len(rows) == 1 and rows.n_skipped == 2

    def test_empty_file_warns(self, tmp_path, caplog):
        p = tmp_path / "x.csv"
        p.write_text("user,item,timestamp\n")
        assert load_interactions(p) == []
        assert "no interactions" in caplog.text

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_interactions(tmp_path / "nope.csv")


class TestKCore:
    def test_fixed_point_cascade(self):
        # dropping item "z" leaves user "c" with one interaction, which then goes too
        rows = _rows([("a", "x"), ("a", "y"), ("b", "x"), ("b", "y"), ("c", "x"), ("c", "z")])
        kept = k_core_filter(rows, k=2)
        assert {(r.user, r.item) for r in kept} == {("a", "x"), ("a", "y"), ("b", "x"),
                                                    ("b", "y")}

    def test_result_is_a_k_core(self):
        rows = make_desk_interactions(n_users=300, n_items=120, seed=3)
        kept = k_core_filter(rows, 5)
        users = {}
        items = {}
        for r in kept:
            users[r.user] = users.get(r.user, 0) + 1
            items[r.item] = items.get(r.item, 0) + 1
        assert min(users.values()) >= 5 and min(items.values()) >= 5

    def test_idempotent(self):
        rows = make_desk_interactions(n_users=200, n_items=90, seed=1)
        once = k_core_filter(rows, 5)
        assert k_core_filter(once, 5) == once

    def test_empty_core_warns(self, caplog):
        assert k_core_filter(_rows([("a", "x")]), 5) == []
        assert "empty" in caplog.text

    def test_bad_k(self):
        with pytest.raises(ValueError):
            k_core_filter([], 0)


class TestSequences:
    def test_chronological_and_truncated(self):
        rows = [Interaction("u", f"i{t}", 10 - t) for t in range(6)]
        cat = Catalog.from_interactions(rows)
        (seq,) = build_sequences(rows, cat, max_len=4)
        names = {v: k for k, v in cat.item_index.items()}
        assert [names[v] for v in seq.items] == ["i3", "i2", "i1", "i0"]

    def test_ties_keep_file_order(self):
        rows = [Interaction("u", "b", 1), Interaction("u", "a", 1), Interaction("u", "c", 0)]
        cat = Catalog.from_interactions(rows)
        (seq,) = build_sequences(rows, cat)
        assert seq.items == [cat.item_index["c"], cat.item_index["b"], cat.item_index["a"]]

    def test_catalog_ids_dense_and_sorted(self):
        cat = Catalog.from_interactions(_rows([("b", "y"), ("a", "x")]))
        assert cat.item_index == {"x": 1, "y": 2}
        assert cat.user_index == {"a": 0, "b": 1}
        assert cat.mask_id == 3

    def test_max_len_bound(self):
        with pytest.raises(ValueError):
            build_sequences([], Catalog({}, {}), max_len=2)


class TestLeaveOneOut:
    def test_split_layout(self):
        split = leave_one_out_split([UserSequence(0, [1, 2, 3, 4]), UserSequence(1, [5, 6])], 6)
        assert split.users == [0]
        assert split.train == [[1, 2]]
        assert split.valid_target == [3] and split.test_target == [4]
        assert split.test_input == [[1, 2, 3]]
        assert split.drop_log == [{"user": 1, "length": 2, "reason": "fewer than 3 interactions"}]

    def test_length_three_kept(self):
        split = leave_one_out_split([UserSequence(0, [1, 2, 3])], 3)
        assert split.train == [[1]]

    def test_dict_roundtrip(self):
        split = DatasetSplit(4, [0, 1], [[1], [2, 3]], [2, 4], [3, 1],
                             train_extra=[[1, 2, 3]])
        assert DatasetSplit.from_dict(json.loads(json.dumps(split.to_dict()))) == split


class TestStats:
    def test_values(self):
        rows = _rows([("a", "x"), ("a", "y"), ("b", "x")])
        s = dataset_stats(rows)
        assert s["users"] == 2 and s["items"] == 2 and s["interactions"] == 3
        assert s["average_length"] == 1.5
        assert s["sparsity"] == pytest.approx(1 - 3 / 4)


class TestExpandTrainingSet:
    def setup_method(self):
        self.split = DatasetSplit(9, [0, 1], [[1, 2, 3, 4], [5, 6]], [7, 8], [9, 1])

    def test_sliding_window_all(self):
        spec = AugmentationSpec("SlidingWindow", window_len=3)
        out = expand_training_set(self.split, spec, np.random.default_rng(0))
        assert out.train_extra == [[1, 2, 3], [2, 3, 4], [5, 6]]
        assert out.train == self.split.train
        assert out.test_target == self.split.test_target

    def test_id_operator_variants(self):
        spec = AugmentationSpec("Mask", ratio=0.5)
        out = expand_training_set(self.split, spec, np.random.default_rng(0), n_variants=3)
        assert len(out.train_extra) == 6
        assert all(10 in s for s in out.train_extra)

    def test_representation_level_rejected(self):
        spec = AugmentationSpec("TMaskB", sigma=0.5)
        with pytest.raises(AugmentationConfigError):
            expand_training_set(self.split, spec, np.random.default_rng(0))


class TestPrepare:
    def test_desk_pipeline_and_byte_stable_file(self, tmp_path):
        raw = write_interactions(tmp_path / "raw.csv",
                                 make_desk_interactions(n_users=200, n_items=90, seed=2))
        files = []
        for name in ("a.json", "b.json"):
            cat, split, stats = prepare_dataset(raw)
            save_dataset(tmp_path / name, cat, split, stats, {"k": 5})
            files.append((tmp_path / name).read_bytes())
        assert files[0] == files[1]
        cat2, split2, stats2 = load_dataset(tmp_path / "a.json")
        assert split2 == split and cat2 == cat and stats2 == stats
        assert stats["sparsity"] == pytest.approx(
            1 - stats["interactions"] / (stats["users"] * stats["items"]))

    def test_empty_core_is_fatal(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("user,item,timestamp\na,x,1\n")
        with pytest.raises(DatasetError, match="empty"):
            prepare_dataset(p)

    def test_not_a_dataset_file(self, tmp_path):
        p = tmp_path / "x.json"
        p.write_text("{}")
        with pytest.raises(ValueError):
            load_dataset(p)

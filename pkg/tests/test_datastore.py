import struct
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from guie.datastore import (DatasetManifest, FeatureBank, class_stats, draw_class_counts,
                            encode_feature_bank, filter_min_samples, load_feature_bank,
                            load_manifest, load_tensors, save_feature_bank, save_manifest,
                            save_tensors, split_unseen_classes, synth_block_corpus, synth_dataset)
from guie.numkit import RngStream


def random_manifest(seed, n=60, n_classes=9):
    rng = RngStream(seed)
    classes = [f"c{int(i)}" for i in rng.integers(0, n_classes, size=n)]
    return DatasetManifest([f"id{i}" for i in range(n)], classes, [f"v{c[-1]}" for c in classes])


def test_bank_round_trip_f32_exact(tmp_path):
    vec = RngStream(0).gaussian((5, 7))
    bank = FeatureBank([f"img/{i}.jpg" for i in range(5)], vec)
    save_feature_bank(bank, tmp_path / "b.guef")
    back = load_feature_bank(tmp_path / "b.guef")
    assert back.ids == bank.ids
    np.testing.assert_array_equal(back.vectors, vec.astype(np.float32).astype(np.float64))
    # a second round trip is bit-identical
    save_feature_bank(back, tmp_path / "c.guef")
    assert (tmp_path / "b.guef").read_bytes() == (tmp_path / "c.guef").read_bytes()


def test_bank_layout_size():
    raw = encode_feature_bank(FeatureBank(["a", "bc"], np.zeros((2, 3))))
    assert raw[:4] == b"GUEF"
    assert struct.unpack_from("<III", raw, 4) == (1, 2, 3)
    id_table = (2 + 1) + (2 + 2)
    assert len(raw) == 16 + 24 + id_table


def test_bank_corrupt_magic_and_truncation(tmp_path):
    raw = encode_feature_bank(FeatureBank(["a", "b"], np.ones((2, 3))))
    (tmp_path / "bad.guef").write_bytes(b"XUEF" + raw[4:])
    with pytest.raises(ValueError, match="magic"):
        load_feature_bank(tmp_path / "bad.guef")
    (tmp_path / "short.guef").write_bytes(raw[:30])
    with pytest.raises(ValueError, match="truncated"):
        load_feature_bank(tmp_path / "short.guef")
    (tmp_path / "tail.guef").write_bytes(raw + b"x")
    with pytest.raises(ValueError, match="trailing"):
        load_feature_bank(tmp_path / "tail.guef")


def test_bank_rejects_duplicates_and_nonfinite():
    with pytest.raises(ValueError, match="duplicate"):
        FeatureBank(["a", "a"], np.zeros((2, 2)))
    with pytest.raises(ValueError, match="non-finite"):
        FeatureBank(["a"], [[np.nan, 1.0]])


@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=32), min_size=1, max_size=24))
@settings(max_examples=50, deadline=None)
def test_bank_round_trip_property(values):
    d = len(values)
    bank = FeatureBank(["x"], np.array([values]))
    raw = encode_feature_bank(bank)
    from guie.datastore import decode_feature_bank
    back = decode_feature_bank(raw)
    np.testing.assert_array_equal(back.vectors, bank.vectors.astype(np.float32))
    assert back.dim == d


def test_tensor_container_round_trip(tmp_path):
    t = {"w": RngStream(1).gaussian((3, 4)), "s": np.array(2.5), "meta": '{"k": 1}'}
    save_tensors(t, tmp_path / "t.guef")
    back = load_tensors(tmp_path / "t.guef")
    np.testing.assert_array_equal(back["w"], t["w"])
    assert float(back["s"]) == 2.5 and back["meta"] == '{"k": 1}'
    with pytest.raises(ValueError, match="not a tensor container"):
        save_feature_bank(FeatureBank(["a"], np.ones((1, 2))), tmp_path / "b.guef")
        load_tensors(tmp_path / "b.guef")


def test_manifest_round_trip_and_validation(tmp_path):
    man = DatasetManifest(["a/1.jpg", "b-2"], ["x", "y"], ["food", "cars"])
    save_manifest(man, tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "id,class,vertical"
    assert load_manifest(tmp_path / "m.csv") == man
    (tmp_path / "bad.csv").write_text("id,class,vertical\nsp ace,x,y\n")
    with pytest.raises(ValueError, match="invalid id"):
        load_manifest(tmp_path / "bad.csv")
    (tmp_path / "hdr.csv").write_text("id,label\n")
    with pytest.raises(ValueError, match="header"):
        load_manifest(tmp_path / "hdr.csv")


def test_class_stats_examples():
    s = class_stats(DatasetManifest(["1", "2", "3"], ["a", "a", "b"], ["v"] * 3))
    assert s.counts == {"a": 2, "b": 1} and (s.n_min, s.n_max) == (1, 2)
    s = class_stats(DatasetManifest([str(i) for i in range(5)], ["z"] * 5, ["v"] * 5))
    assert s.n_min == s.n_max == 5
    with pytest.raises(ValueError):
        class_stats(DatasetManifest([], [], []))


@pytest.mark.parametrize("seed", range(5))
def test_class_stats_matches_naive_count(seed):
    man = random_manifest(seed)
    naive = {}
    for c in man.classes:
        naive[c] = naive.get(c, 0) + 1
    s = class_stats(man)
    assert s.counts == naive
    assert s.total == len(man) and s.n_min <= s.n_max


def test_filter_min_samples_examples():
    man = DatasetManifest([str(i) for i in range(7)], list("aabaaab"), ["v"] * 7)
    kept = filter_min_samples(man, 3)
    assert kept.ids == ["0", "1", "3", "4", "5"] and set(kept.classes) == {"a"}
    assert filter_min_samples(man, 1) == man


@given(st.integers(0, 10_000), st.integers(1, 6))
@settings(max_examples=40, deadline=None)
def test_filter_min_samples_recount_and_idempotent(seed, threshold):
    man = random_manifest(seed, n=40, n_classes=12)
    kept = filter_min_samples(man, threshold)
    assert all(n >= threshold for n in Counter(kept.classes).values())
    assert filter_min_samples(kept, threshold) == kept
    pos = [man.ids.index(k) for k in kept.ids]
    assert pos == sorted(pos)


def test_split_examples():
    man = DatasetManifest([f"i{i}" for i in range(30)], [f"c{i % 10}" for i in range(30)], ["v"] * 30)
    sp = split_unseen_classes(man, 0.2, seed=3)
    assert len(sp.val_classes) == 2
    train_classes = {man.classes[man.ids.index(k)] for k in sp.train_ids}
    assert not train_classes & set(sp.val_classes)
    assert split_unseen_classes(man, 0.2, seed=3) == sp
    with pytest.raises(ValueError):
        split_unseen_classes(DatasetManifest(["a"], ["c"], ["v"]), 0.5, 0)


def test_split_half_of_four_classes():
    man = DatasetManifest([f"i{i}" for i in range(12)], [f"c{i % 4}" for i in range(12)], ["v"] * 12)
    sp = split_unseen_classes(man, 0.5, seed=0)
    lookup = dict(zip(man.ids, man.classes))
    tr = {lookup[k] for k in sp.train_ids}
    va = {lookup[k] for k in sp.val_ids}
    assert len(tr) == 2 and len(va) == 2 and tr.isdisjoint(va)
    assert sorted(sp.train_ids + sp.val_ids) == sorted(man.ids)


@given(st.integers(0, 10_000), st.floats(0.05, 0.95))
@settings(max_examples=40, deadline=None)
def test_split_property(seed, frac):
    man = random_manifest(seed, n=50, n_classes=8)
    if len(set(man.classes)) < 2:
        return
    sp = split_unseen_classes(man, frac, seed)
    lookup = dict(zip(man.ids, man.classes))
    assert {lookup[k] for k in sp.train_ids}.isdisjoint({lookup[k] for k in sp.val_ids})
    assert Counter(sp.train_ids + sp.val_ids) == Counter(man.ids)


def test_synth_zero_spread_and_counts():
    bank, man = synth_dataset(4, 3, 6, 0.0, seed=2)
    x = bank.vectors.reshape(4, 3, 6)
    np.testing.assert_array_equal(x, np.repeat(x[:, :1], 3, axis=1))
    np.testing.assert_allclose(np.linalg.norm(x[:, 0], axis=1), 1.0)
    bank, man = synth_dataset(6, 5, 8, 0.1, seed=2)
    s = class_stats(man)
    assert s.n_min == s.n_max == 5


def test_synth_verticals_round_robin_and_determinism():
    b1, m1 = synth_dataset(7, [2, 3, 4, 5, 2, 3, 4], 5, 0.2, seed=9, n_verticals=3)
    b2, m2 = synth_dataset(7, [2, 3, 4, 5, 2, 3, 4], 5, 0.2, seed=9, n_verticals=3)
    assert m1 == m2 and encode_feature_bank(b1) == encode_feature_bank(b2)
    by_class = dict(zip(m1.classes, m1.verticals))
    assert [by_class[f"s{c:04d}"] for c in range(7)] == ["v0", "v1", "v2", "v0", "v1", "v2", "v0"]
    with pytest.raises(ValueError):
        synth_dataset(1, 3, 5, 0.1, 0)
    with pytest.raises(ValueError):
        synth_dataset(3, 3, 1, 0.1, 0)


def test_synth_nearest_center_accuracy():
    bank, man = synth_dataset(20, 10, 32, 0.05, seed=4)
    x = bank.vectors
    labels = np.array([int(c[1:]) for c in man.classes])
    centers = np.stack([x[labels == c].mean(axis=0) for c in range(20)])
    # oracle: brute-force nearest centre by Euclidean distance
    pred = [min(range(20), key=lambda c: float(np.sum((row - centers[c]) ** 2))) for row in x]
    assert np.mean(np.array(pred) == labels) >= 0.99


def test_draw_class_counts_range():
    counts = draw_class_counts(200, 5, 45, seed=1)
    assert min(counts) >= 5 and max(counts) <= 45 and len(set(counts)) > 20


def test_block_corpus_shares_layout():
    a, _ = synth_block_corpus(30, 5, seed=1, layout_seed=7)
    b, _ = synth_block_corpus(30, 5, seed=2, layout_seed=7)
    np.testing.assert_allclose(np.linalg.norm(a.vectors, axis=1), 1.0)
    # same dominant coordinates carry the signal in both corpora
    top_a = set(np.argsort(-a.vectors.var(axis=0))[:64])
    top_b = set(np.argsort(-b.vectors.var(axis=0))[:64])
    assert len(top_a & top_b) >= 56

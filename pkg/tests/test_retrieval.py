import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from guie.datastore import DatasetManifest, FeatureBank
from guie.numkit import RngStream
from guie.retrieval import (Index, Ranking, average_precision, build_index, evaluate, knn,
                            retrieval_map)


def make_index(vectors, classes=None, verticals=None):
    n = len(vectors)
    ids = [f"i{j:03d}" for j in range(n)]
    classes = classes or [f"c{j}" for j in range(n)]
    verticals = verticals or ["v"] * n
    return build_index(FeatureBank(ids, vectors), DatasetManifest(ids, classes, verticals))


def brute_force_knn(vectors, ids, query, k, skip=None):
    def norm(v):
        return math.sqrt(math.fsum(a * a for a in v))
    qn = norm(query)
    scored = []
    for j, row in enumerate(vectors):
        if ids[j] == skip:
            continue
        s = math.fsum(a * b for a, b in zip(row, query)) / (norm(row) * qn)
        scored.append((-s, j))
    scored.sort()
    return [ids[j] for _, j in scored[:k]], [-s for s, _ in scored[:k]]


def double_loop_ap(flags, total):
    acc = 0.0
    for i, hit in enumerate(flags):
        if hit:
            hits = sum(1 for j in range(i + 1) if flags[j])
            acc += hits / (i + 1)
    return acc / total


def test_build_index_contract():
    idx = make_index(RngStream(0).gaussian((6, 4)) * 5, verticals=["a", "b"] * 3)
    np.testing.assert_allclose(np.linalg.norm(idx.vectors, axis=1), 1.0, atol=1e-6)
    assert idx.lookup("i003") == ("c3", "b")
    bank = FeatureBank(["x", "y"], np.ones((2, 3)))
    with pytest.raises(ValueError, match="no bank id"):
        build_index(bank, DatasetManifest(["p"], ["c"], ["v"]))
    with pytest.raises(ValueError, match="missing"):
        build_index(bank, DatasetManifest(["x"], ["c"], ["v"]))


def test_exact_match_ranks_first():
    x = RngStream(1).gaussian((10, 5))
    idx = make_index(x)
    r = knn(idx, x[4:5], 3)[0]
    assert r.ids[0] == "i004" and abs(r.scores[0] - 1.0) < 1e-12


def test_orthogonal_query_ties_in_id_order():
    x = np.zeros((5, 4))
    x[:, 0] = np.arange(1, 6)
    x[:, 1] = 1.0
    idx = make_index(x)
    r = knn(idx, np.array([[0.0, 0.0, 1.0, 0.0]]), 5)[0]
    assert r.ids == [f"i{j:03d}" for j in range(5)] and r.scores == [0.0] * 5


def test_exclude_self_and_clip_warning():
    x = RngStream(2).gaussian((4, 3))
    idx = make_index(x)
    with pytest.warns(UserWarning, match="clipping"):
        r = knn(idx, x[:1], 10, exclude_self=True, query_ids=["i000"])[0]
    assert "i000" not in r.ids and len(r.ids) == 3


@pytest.mark.parametrize("seed", range(10))
def test_knn_matches_full_sort(seed):
    rng = RngStream(seed)
    x, q = rng.gaussian((50, 8)), rng.gaussian((10, 8))
    idx = make_index(x)
    for r, query in zip(knn(idx, q, 5), q):
        ids, scores = brute_force_knn(x.tolist(), idx.ids, query.tolist(), 5)
        assert r.ids == ids
        np.testing.assert_allclose(r.scores, scores, atol=1e-12)


def test_knn_rotation_invariant():
    rng = RngStream(3)
    x, q = rng.gaussian((40, 6)), rng.gaussian((8, 6))
    rot, _ = np.linalg.qr(rng.gaussian((6, 6)))
    a = knn(make_index(x), q, 7)
    b = knn(make_index(x @ rot), q @ rot, 7)
    for ra, rb in zip(a, b):
        assert ra.ids == rb.ids
        np.testing.assert_allclose(ra.scores, rb.scores, atol=1e-9)


def test_average_precision_examples():
    r = Ranking("q", ["a", "b", "c", "d"], [0.9, 0.8, 0.7, 0.6])
    assert average_precision(r, {"a", "c"}, 2) == pytest.approx((1 + 2 / 3) / 2, abs=1e-15)
    assert average_precision(r, {"a", "b", "c", "d"}, 4) == 1.0
    with pytest.raises(ValueError):
        average_precision(r, set(), 0)


@given(st.lists(st.booleans(), min_size=1, max_size=30), st.integers(0, 10))
@settings(max_examples=200, deadline=None)
def test_average_precision_matches_double_loop(flags, extra):
    total = sum(flags) + extra
    if total == 0:
        return
    ids = [f"x{i}" for i in range(len(flags))]
    r = Ranking("q", ids, [0.0] * len(ids))
    ap = average_precision(r, {k for k, f in zip(ids, flags) if f}, total)
    assert abs(ap - double_loop_ap(flags, total)) <= 1e-12
    assert 0.0 <= ap <= 1.0


@given(st.lists(st.booleans(), min_size=2, max_size=20), st.data())
@settings(max_examples=200, deadline=None)
def test_ap_monotone_when_relevant_moves_earlier(flags, data):
    hits = [i for i, f in enumerate(flags) if f]
    misses = [i for i, f in enumerate(flags) if not f]
    if not hits or not misses:
        return
    h = data.draw(st.sampled_from(hits))
    earlier = [m for m in misses if m < h]
    if not earlier:
        return
    m = data.draw(st.sampled_from(earlier))
    moved = list(flags)
    moved[h], moved[m] = moved[m], moved[h]
    assert double_loop_ap(moved, sum(flags)) >= double_loop_ap(flags, sum(flags))
    ids = [str(i) for i in range(len(flags))]
    r = Ranking("q", ids, [0.0] * len(ids))
    before = average_precision(r, {ids[i] for i, f in enumerate(flags) if f}, sum(flags))
    after = average_precision(r, {ids[i] for i, f in enumerate(moved) if f}, sum(flags))
    assert after >= before


def test_perfect_retrieval_all_verticals_one():
    # pairs of near-duplicates, one pair per class
    rng = RngStream(4)
    base = rng.gaussian((6, 10))
    x = np.vstack([base, base + 1e-3 * rng.gaussian((6, 10))])
    classes = [f"c{j % 6}" for j in range(12)]
    verticals = [("a", "b", "c")[j % 3] for j in range(12)]
    idx = make_index(x, classes, verticals)
    bank = FeatureBank(idx.ids, x)
    rep = evaluate(idx, bank, DatasetManifest(idx.ids, classes, verticals), k=5)
    assert rep.mAP == 1.0 and set(rep.per_vertical_mAP.values()) == {1.0}
    assert rep.precision_at_k == pytest.approx(0.2)


def test_identity_case_keep_self():
    x = RngStream(5).gaussian((9, 4))
    idx = make_index(x)
    bank = FeatureBank(idx.ids, x)
    rep = evaluate(idx, bank, DatasetManifest(idx.ids, idx.classes, idx.verticals), k=3,
                   exclude_self=False)
    assert rep.mAP == 1.0


def test_vertical_arithmetic_and_skips():
    # index: q1 finds its match at rank 1, q2 at rank 2, q3 matches nothing
    idx = Index(np.eye(4), ["g1", "g2", "g3", "g4"], ["A", "X", "B", "C"], ["v"] * 4)
    qv = np.array([[1.0, 0, 0, 0], [0, 0.9, 0.5, 0], [0, 0, 0, 1.0], [0, 1.0, 0, 0]])
    qman = DatasetManifest(["q1", "q2", "q3", "q4"], ["A", "B", "Z", "Q"], ["v1", "v1", "v2", "v2"])
    rep = evaluate(idx, FeatureBank(qman.ids, qv), qman, k=2, exclude_self=False)
    assert rep.per_query_ap == {"q1": 1.0, "q2": 0.5}
    assert rep.skipped == ["q3", "q4"]
    assert rep.per_vertical_mAP == {"v1": 0.75}
    qman2 = DatasetManifest(["q1", "q2", "q3"], ["A", "B", "X"], ["v1", "v1", "v2"])
    qv2 = np.array([[1.0, 0, 0, 0], [0, 0.9, 0.5, 0], [0, 0, 0, 1.0]])
    rep = evaluate(idx, FeatureBank(qman2.ids, qv2), qman2, k=2, exclude_self=False)
    assert rep.per_vertical_mAP == {"v1": 0.75, "v2": 0.0}
    assert rep.mAP == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(ValueError, match="no evaluable"):
        bad = DatasetManifest(["q"], ["nope"], ["v"])
        evaluate(idx, FeatureBank(["q"], np.ones((1, 4))), bad)


def expected_random_ap(relevant, candidates):
    """Exact mean AP of a uniformly random full ranking."""
    m, r = candidates, relevant
    return sum((1 + (i - 1) * (r - 1) / (m - 1)) / i for i in range(1, m + 1)) / m


def test_shuffled_labels_near_permutation_null():
    rng = RngStream(6)
    x = rng.gaussian((60, 6))
    classes = [f"c{j % 6}" for j in range(60)]
    idx_ids = [f"i{j:03d}" for j in range(60)]
    values = []
    for s in range(20):
        perm = RngStream(100 + s).permutation(60)
        shuffled = [classes[p] for p in perm]
        man = DatasetManifest(idx_ids, shuffled, ["v"] * 60)
        values.append(retrieval_map(x, man, k=59))
    null_mean = expected_random_ap(9, 59)
    values = np.array(values)
    assert abs(values.mean() - null_mean) <= 3 * values.std(ddof=1)


def test_global_map_is_count_weighted_vertical_mean():
    rng = RngStream(7)
    x = rng.gaussian((80, 5))
    classes = [f"c{int(c)}" for c in rng.integers(0, 12, size=80)]
    verticals = [f"v{int(c[1:]) % 3}" for c in classes]
    idx = make_index(x, classes, verticals)
    rep = evaluate(idx, FeatureBank(idx.ids, x), DatasetManifest(idx.ids, classes, verticals), k=10)
    total = sum(rep.per_vertical_mAP[v] * rep.per_vertical_count[v] for v in rep.per_vertical_mAP)
    assert abs(total / sum(rep.per_vertical_count.values()) - rep.mAP) <= 1e-12
    assert 0 <= rep.mAP <= 1 and 0 <= rep.precision_at_k <= 1


def test_report_text_format():
    rng = RngStream(8)
    x = rng.gaussian((20, 4))
    classes = [f"c{j % 4}" for j in range(20)]
    verticals = ["food" if j % 4 < 2 else "cars" for j in range(20)]
    idx = make_index(x, classes, verticals)
    rep = evaluate(idx, FeatureBank(idx.ids, x), DatasetManifest(idx.ids, classes, verticals))
    lines = rep.to_text().splitlines()
    assert lines[0].startswith("mAP,") and lines[1].startswith("precision_at_5,")
    vlines = [l.split(",") for l in lines if l.startswith("vertical,")]
    assert [v[1] for v in vlines] == ["cars", "food"] and all(v[3] == "10" for v in vlines)
    dump = rep.ap_dump().splitlines()[1:]
    assert np.mean([float(l.split(",")[1]) for l in dump]) == pytest.approx(rep.mAP, abs=1e-12)


def test_ties_follow_id_order_not_row_order():
    x = np.ones((4, 3))
    ids = ["d", "b", "a", "c"]
    idx = build_index(FeatureBank(ids, x), DatasetManifest(ids, ["k"] * 4, ["v"] * 4))
    r = knn(idx, np.ones((1, 3)), 4)[0]
    assert r.ids == ["a", "b", "c", "d"] and r.positions == [2, 1, 3, 0]

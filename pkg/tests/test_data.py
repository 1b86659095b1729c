import numpy as np
import pytest

from cfrec.data import (
    Dataset, Interaction, Rating, binarize, build_pointwise, co_rating_counts, from_rows,
    load_ratings, pair_negatives, prune_users,
)
from cfrec.errors import ContractError, EmptyDatasetError, ParseError
from cfrec.synthetic import synthetic_ratings


def write(tmp_path, text):
    p = tmp_path / "u.data"
    p.write_text(text)
    return p


def test_load_single_line(tmp_path):
    assert load_ratings(write(tmp_path, "196\t242\t3\t881250949\n")) == [Rating(196, 242, 3, 881250949)]


def test_load_preserves_order(tmp_path):
    got = load_ratings(write(tmp_path, "3\t1\t5\t0\n1\t2\t1\t0\n2\t9\t4\t7\n"))
    assert [(r.user_id, r.item_id) for r in got] == [(3, 1), (1, 2), (2, 9)]


def test_load_rating_out_of_range(tmp_path):
    with pytest.raises(ParseError, match="rating out of range"):
        load_ratings(write(tmp_path, "1\t1\t6\t0\n"))


def test_load_names_line_number(tmp_path):
    with pytest.raises(ParseError, match="line 2"):
        load_ratings(write(tmp_path, "1\t1\t4\t0\n1\t2\tx\t0\n"))


def test_load_wrong_field_count(tmp_path):
    with pytest.raises(ParseError, match="line 1"):
        load_ratings(write(tmp_path, "1 1 4 0\n"))


def test_load_duplicate_pair(tmp_path):
    with pytest.raises(ParseError, match="duplicate"):
        load_ratings(write(tmp_path, "1\t1\t4\t0\n1\t1\t2\t5\n"))


def test_load_empty_file(tmp_path):
    with pytest.raises(EmptyDatasetError):
        load_ratings(write(tmp_path, "\n\n"))


def test_binarize_threshold():
    rs = [Rating(0, 0, 3, 0), Rating(0, 1, 2, 0), Rating(0, 2, 5, 0)]
    assert [x.positive for x in binarize(rs, 3)] == [True, False, True]
    assert all(x.positive for x in binarize(rs, 1))
    with pytest.raises(ContractError):
        binarize(rs, 6)


def test_binarize_monotone():
    rs = synthetic_ratings(n_users=5, n_items=30, min_ratings=10, max_ratings=20)
    for t in range(1, 5):
        lo, hi = binarize(rs, t), binarize(rs, t + 1)
        assert all(a.positive or not b.positive for a, b in zip(lo, hi))


def _user(uid, n_pos, n_neg, start=0):
    return [Interaction(uid, start + k, k < n_pos) for k in range(n_pos + n_neg)]


def test_prune_boundaries():
    xs = _user(1, 9, 20) + _user(2, 10, 10) + _user(3, 20, 9)
    t = prune_users(xs, 10, 10)
    assert list(t.user_ids) == [2]
    assert len(t) == 20


def test_prune_zero_thresholds_keep_all_users():
    xs = _user(5, 1, 0) + _user(7, 0, 2, start=50)
    assert list(prune_users(xs, 0, 0).user_ids) == [5, 7]


def test_prune_empty_result():
    with pytest.raises(EmptyDatasetError):
        prune_users(_user(1, 3, 3), 10, 10)


def test_prune_drops_orphan_items_and_reindexes():
    xs = _user(1, 2, 2, start=100) + _user(2, 1, 1, start=500)
    t = prune_users(xs, 2, 2)
    assert list(t.item_ids) == [100, 101, 102, 103]
    assert t.items.max() == t.n_items - 1


def test_prune_idempotent_and_round_trip():
    rs = synthetic_ratings(n_users=30, n_items=80, min_ratings=15, max_ratings=30, seed=3)
    xs = binarize(rs)
    t = prune_users(xs, 5, 5)
    t2 = prune_users(t, 5, 5)
    assert np.array_equal(t.users, t2.users) and np.array_equal(t.items, t2.items)
    kept = set(t.user_ids.tolist())
    assert sorted(t.to_interactions(), key=lambda x: (x.user_id, x.item_id)) == \
        sorted((x for x in xs if x.user_id in kept), key=lambda x: (x.user_id, x.item_id))


def test_pair_negatives_single_candidate():
    t = from_rows([(0, 1, 5), (0, 2, 4), (0, 9, 1)], min_pos=0, min_neg=0)
    ds = pair_negatives(t)
    triples = [tuple(int(v) for v in (t.item_ids[ds.items[k]], t.item_ids[ds.negatives[k]])) for k in range(ds.n)]
    assert triples == [(1, 9), (2, 9)]


def test_pair_negatives_prefers_co_rated():
    # item 10 is co-rated with x=20 by five users, with y=21 by two
    rows = [(0, 10, 5), (0, 20, 1), (0, 21, 1)]
    rows += [(u, 10, 4) for u in range(1, 5)] + [(u, 20, 2) for u in range(1, 5)]
    rows += [(5, 10, 4), (5, 21, 2)]
    t = from_rows(rows, min_pos=0, min_neg=0)
    c = co_rating_counts(t)
    i, x, y = (int(np.searchsorted(t.item_ids, v)) for v in (10, 20, 21))
    assert c[i, x] == 5 and c[i, y] == 2
    ds = pair_negatives(t)
    k = ds.point_of(0, i)
    assert t.item_ids[ds.negatives[k]] == 20


def test_pair_negatives_tie_goes_to_smaller_id():
    rows = [(0, 1, 5), (0, 30, 1), (0, 20, 1)]
    ds = pair_negatives(from_rows(rows, min_pos=0, min_neg=0))
    assert ds.item_ids[ds.negatives[0]] == 20


def test_pair_negatives_without_negatives():
    with pytest.raises(ContractError):
        pair_negatives(from_rows([(0, 1, 5), (0, 2, 5)], min_pos=0, min_neg=0))


def test_pair_negatives_size_and_determinism():
    t = prune_users(binarize(synthetic_ratings(seed=2)), 10, 10)
    a, b = pair_negatives(t, seed=4), pair_negatives(t, seed=4)
    assert a.n == int(t.labels.sum())
    assert np.array_equal(a.negatives, b.negatives)
    assert np.all(a.items != a.negatives)


def test_build_pointwise_labels():
    t = from_rows([(0, 1, 5), (0, 2, 1), (1, 1, 2)], min_pos=0, min_neg=0)
    ds = build_pointwise(t)
    assert ds.n == 3
    assert ds.labels.tolist() == [True, False, False]
    assert ds.profiles() == [(0,), ()]


def test_without_keeps_shapes_and_profiles():
    ds = pair_negatives(prune_users(binarize(synthetic_ratings(seed=1)), 10, 10))
    z = ds.point_of(0, ds.profile(0)[0])
    smaller = ds.without([z])
    assert smaller.n == ds.n - 1 and smaller.n_total == ds.n_total
    assert smaller.profile(0) == ds.profile(0)[1:]
    assert smaller.pool_width == ds.pool_width
    with pytest.raises(ContractError):
        smaller.without([z])


def test_dataset_save_load(tmp_path):
    ds = pair_negatives(prune_users(binarize(synthetic_ratings(seed=1)), 10, 10)).without([3])
    ds.save(tmp_path / "d.json")
    back = Dataset.load(tmp_path / "d.json")
    for name in ("users", "items", "negatives", "user_ids", "item_ids", "active"):
        assert np.array_equal(getattr(ds, name), getattr(back, name))
    assert back.seen == ds.seen and back.kind == ds.kind

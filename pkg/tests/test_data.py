import numpy as np
import pytest

from moectr.data import (
    Dataset,
    SyntheticSpec,
    batch_iter,
    domain_batches,
    domain_proportions,
    generate_synthetic,
    load_csv,
    rule_agreement,
    split_dataset,
    write_csv,
    write_synthetic,
)
from moectr.models import FeatureSchema


def small_ds(n=10, n_domains=2, seed=0):
    rng = np.random.default_rng(seed)
    schema = FeatureSchema((("user_id", 20), ("item_id", 15)), n_domains=n_domains)
    ids = np.column_stack([rng.integers(0, 20, n), rng.integers(0, 15, n)])
    return Dataset(schema, ids, rng.integers(0, 2, n), rng.integers(0, n_domains, n))


def test_batch_iter_sizes_and_order():
    ds = small_ds(10)
    batches = list(batch_iter(ds, 4, shuffle=False))
    assert [len(b.labels) for b in batches] == [4, 4, 2]
    np.testing.assert_array_equal(np.concatenate([b.ids for b in batches]), ds.ids)


def test_batch_iter_shuffle_deterministic_and_complete():
    ds = small_ds(23)
    a = np.concatenate([b.ids for b in batch_iter(ds, 5, seed=3, epoch=1)])
    b = np.concatenate([b.ids for b in batch_iter(ds, 5, seed=3, epoch=1)])
    c = np.concatenate([b.ids for b in batch_iter(ds, 5, seed=3, epoch=2)])
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    np.testing.assert_array_equal(np.sort(a, axis=0), np.sort(ds.ids, axis=0))


def test_split_80_10_10_per_domain():
    rng = np.random.default_rng(1)
    schema = FeatureSchema((("user_id", 50), ("item_id", 50)), n_domains=3)
    n = 300
    ids = np.column_stack([rng.integers(0, 50, n), rng.integers(0, 50, n)])
    ds = Dataset(schema, ids, rng.integers(0, 2, n), np.repeat(np.arange(3), 100))
    tr, va, te = split_dataset(ds, (0.8, 0.1, 0.1), seed=0)
    for d in range(3):
        assert abs(len(tr.rows_of_domain(d)) - 80) <= 1
        assert abs(len(va.rows_of_domain(d)) - 10) <= 1
        assert abs(len(te.rows_of_domain(d)) - 10) <= 1
    assert len(tr) + len(va) + len(te) == n


def test_split_preserves_label_rates_and_determinism():
    spec = SyntheticSpec(n_domains=3, n_users=200, n_items=100,
                         rows_per_domain=400, positive_rate=0.3, seed=5)
    ds = generate_synthetic(spec)
    tr1 = split_dataset(ds, seed=7)
    tr2 = split_dataset(ds, seed=7)
    for a, b in zip(tr1, tr2):
        np.testing.assert_array_equal(a.ids, b.ids)
    tr, va, te = tr1
    for part in (tr, va, te):
        for d in range(3):
            rows = part.rows_of_domain(d)
            assert rows.size > 0
            rate = part.labels[rows].mean()
            assert abs(rate - 0.3) < 0.02 or rows.size < 50


def test_split_keeps_tiny_domains_everywhere():
    schema = FeatureSchema((("user_id", 10), ("item_id", 10)), n_domains=2)
    # Domain 1 has only 3 rows per label cell.
    ids = np.ones((106, 2), dtype=np.int64)
    domains = np.array([0] * 100 + [1] * 6)
    labels = np.array([0, 1] * 50 + [0, 0, 0, 1, 1, 1])
    ds = Dataset(schema, ids, labels, domains)
    for part in split_dataset(ds, seed=1):
        assert part.rows_of_domain(1).size > 0


def test_csv_round_trip_exact(tmp_path):
    ds = small_ds(37, seed=4)
    path = tmp_path / "d.csv"
    write_csv(ds, path)
    back = load_csv(path, ds.schema)
    np.testing.assert_array_equal(back.ids, ds.ids)
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_array_equal(back.domains, ds.domains)


def test_csv_byte_identical_per_spec(tmp_path):
    spec = SyntheticSpec(n_domains=2, n_users=50, n_items=40, rows_per_domain=100, seed=9)
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    write_synthetic(spec, p1)
    write_synthetic(spec, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert (tmp_path / "a.csv.spec.json").exists()


def test_duplicate_rows_permitted():
    schema = FeatureSchema((("user_id", 5), ("item_id", 5)), n_domains=1)
    ids = np.array([[1, 2], [1, 2], [1, 2]])
    ds = Dataset(schema, ids, np.array([0, 1, 0]), np.zeros(3, dtype=int))
    assert len(ds) == 3


def test_malformed_rows_cite_line_numbers(tmp_path):
    path = tmp_path / "bad.csv"
    rows = ["user_id,item_id,domain_id,label", "1,1,0,1", "2,1,0,0", "3,1,0,1",
            "4,1,0,2", "5,1,0,1"]
    path.write_text("\n".join(rows) + "\n")
    with pytest.raises(ValueError, match=":5:"):
        load_csv(path)
    path.write_text("user_id,item_id,domain_id,label\n1,1,0,1\n2,x,0,1\n")
    with pytest.raises(ValueError, match=":3:"):
        load_csv(path)
    path.write_text("user_id,item_id,domain_id,label\n1,-1,0,1\n")
    with pytest.raises(ValueError, match="negative"):
        load_csv(path)


def test_unknown_domain_rejected(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("user_id,item_id,domain_id,label\n1,1,5,1\n")
    schema = FeatureSchema((("user_id", 10), ("item_id", 10)), n_domains=2)
    with pytest.raises(ValueError, match="domain id 5"):
        load_csv(path, schema)


def test_empty_csv_rejected(tmp_path):
    path = tmp_path / "e.csv"
    path.write_text("user_id,item_id,domain_id,label\n")
    with pytest.raises(ValueError, match="no data rows"):
        load_csv(path)


def test_domain_proportions_sum_to_one():
    ds = small_ds(40, n_domains=3, seed=2)
    w = domain_proportions(ds)
    assert w.shape == (3,)
    assert abs(w.sum() - 1.0) < 1e-12


def test_generator_hits_positive_rate():
    for rate in (0.3, 0.5):
        spec = SyntheticSpec(n_domains=3, n_users=300, n_items=200,
                             rows_per_domain=2000, positive_rate=rate, seed=3)
        ds = generate_synthetic(spec)
        for d in range(3):
            rows = ds.rows_of_domain(d)
            assert abs(ds.labels[rows].mean() - rate) < 0.02


def test_generator_is_deterministic_and_pairs_distinct():
    spec = SyntheticSpec(n_domains=2, n_users=60, n_items=50, rows_per_domain=500, seed=8)
    a = generate_synthetic(spec)
    b = generate_synthetic(spec)
    np.testing.assert_array_equal(a.ids, b.ids)
    np.testing.assert_array_equal(a.labels, b.labels)
    for d in range(2):
        rows = a.rows_of_domain(d)
        pairs = {(int(u), int(i)) for u, i in a.ids[rows]}
        assert len(pairs) == rows.size


def test_too_many_interactions_rejected():
    with pytest.raises(ValueError, match="exceeds"):
        SyntheticSpec(n_users=10, n_items=10, rows_per_domain=101)


def test_divergence_zero_rules_agree_exactly():
    spec = SyntheticSpec(n_domains=4, divergence=0.0, seed=1)
    assert rule_agreement(spec) == 1.0


def test_rule_agreement_non_increasing_in_divergence():
    levels = (0.0, 0.4, 0.8)
    means = []
    for div in levels:
        vals = [rule_agreement(SyntheticSpec(n_domains=4, divergence=div, seed=s))
                for s in range(5)]
        means.append(np.mean(vals))
    assert means[0] >= means[1] - 1e-9
    assert means[1] >= means[2] - 1e-9
    assert means[2] < 0.95  # high divergence really does change the rules


def test_domain_batches_are_single_domain_and_cover_epoch():
    ds = small_ds(57, n_domains=3, seed=6)
    batches = domain_batches(ds, 8, seed=2, epoch=0)
    seen = []
    for d, rows in batches:
        assert (ds.domains[rows] == d).all()
        seen.append(rows)
    np.testing.assert_array_equal(np.sort(np.concatenate(seen)), np.arange(57))


def test_domain_batches_balanced_mode_evens_out_batch_counts():
    schema = FeatureSchema((("user_id", 9), ("item_id", 9)), n_domains=2)
    ids = np.ones((110, 2), dtype=np.int64)
    domains = np.array([0] * 100 + [1] * 10)
    ds = Dataset(schema, ids, np.zeros(110, dtype=int), domains)
    counts = {0: 0, 1: 0}
    for d, rows in domain_batches(ds, 10, seed=0, balanced=True):
        counts[d] += 1
    assert counts[0] == counts[1] == 10

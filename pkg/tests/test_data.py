import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from umix_bench.data import (FOUR_MOONS_LABELS, Dataset, DatasetError, FourMoonsSpec, SpuriousSpec,
                             distance_to_arc, generate_four_moons, generate_spurious, load_csv,
                             save_csv, spurious_group_counts)


def test_four_moons_counts():
    ds = generate_four_moons(FourMoonsSpec((1000, 1000, 50, 50), 0.1, seed=3))
    assert len(ds) == 2100
    np.testing.assert_array_equal(ds.group_counts(), [1000, 1000, 50, 50])


def test_four_moons_noiseless_points_on_arcs():
    ds = generate_four_moons(FourMoonsSpec((40, 30, 20, 10), 0.0, seed=1))
    for g in range(4):
        d = distance_to_arc(g, ds.features[ds.groups == g])
        assert np.max(d) < 1e-12


def test_four_moons_noisy_points_leave_arcs():
    ds = generate_four_moons(FourMoonsSpec((200, 200, 200, 200), 0.1, seed=1))
    assert np.mean(distance_to_arc(0, ds.features[ds.groups == 0])) > 0.01


@settings(max_examples=20, deadline=None)
@given(st.tuples(*[st.integers(1, 60)] * 4), st.integers(0, 2**31))
def test_four_moons_label_group_map_and_bookkeeping(sizes, seed):
    ds = generate_four_moons(FourMoonsSpec(sizes, 0.1, seed))
    np.testing.assert_array_equal(ds.labels, FOUR_MOONS_LABELS[ds.groups])
    assert ds.group_counts().sum() == len(ds)


def test_four_moons_deterministic():
    a = generate_four_moons(FourMoonsSpec(seed=4))
    b = generate_four_moons(FourMoonsSpec(seed=4))
    assert a.equals(b)
    assert not a.equals(generate_four_moons(FourMoonsSpec(seed=5)))


def test_spurious_group_proportions():
    tr, va, te = generate_spurious(SpuriousSpec(n_train=4000, n_test=4000, minority_fraction=0.05))
    np.testing.assert_array_equal(tr.group_counts(), [1900, 100, 100, 1900])
    np.testing.assert_array_equal(te.group_counts(), [1000] * 4)
    assert tr.d == 10


def test_spurious_counts_sum():
    for n, m in [(4001, 0.03), (999, 0.2), (10, 0.1)]:
        assert spurious_group_counts(n, m).sum() == n


def test_spurious_groups_match_label_and_attribute():
    tr, _, _ = generate_spurious(SpuriousSpec(seed=2))
    assert np.array_equal(tr.labels, tr.groups // 2)
    attr = tr.groups % 2
    majority = np.isin(tr.groups, [0, 3])
    assert np.all(attr[majority] == tr.labels[majority])
    assert np.all(attr[~majority] != tr.labels[~majority])


def test_spurious_deterministic():
    a = generate_spurious(SpuriousSpec(seed=8))
    b = generate_spurious(SpuriousSpec(seed=8))
    assert all(x.equals(y) for x, y in zip(a, b))


def test_spurious_bad_fraction():
    with pytest.raises(ValueError):
        SpuriousSpec(minority_fraction=0.5)


def test_no_spurious_signal_makes_attribute_groups_identical():
    # equal-label groups (0 vs 1, 2 vs 3) differ only by the attribute
    _, _, te = generate_spurious(SpuriousSpec(spurious_separation=0.0, n_test=8000, seed=6))
    for a, b in [(0, 1), (2, 3)]:
        xa, xb = te.features[te.groups == a], te.features[te.groups == b]
        se = np.sqrt(xa.var(0, ddof=1) / len(xa) + xb.var(0, ddof=1) / len(xb))
        assert np.all(np.abs(xa.mean(0) - xb.mean(0)) < 3 * se)


def test_csv_round_trip(tmp_path):
    ds = generate_four_moons(FourMoonsSpec((30, 20, 10, 5), 0.1, seed=2))
    save_csv(ds, tmp_path / "m.csv")
    back = load_csv(tmp_path / "m.csv", n_classes=2)
    assert back.equals(ds)
    assert back.fingerprint() == ds.fingerprint()


def test_csv_header_only(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("f0,f1,label\n")
    with pytest.raises(DatasetError, match="empty"):
        load_csv(p)


def test_csv_label_out_of_range_names_line(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("f0,label\n0.5,1\n0.2,2\n")
    with pytest.raises(DatasetError, match=":3:"):
        load_csv(p, n_classes=2)


def test_csv_malformed_row_names_line(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("f0,label\n0.5,1\nabc,0\n")
    with pytest.raises(DatasetError, match=":3:"):
        load_csv(p)


def test_csv_group_column_policy(tmp_path):
    p = tmp_path / "ng.csv"
    p.write_text("f0,f1,label\n1,2,0\n3,4,1\n")
    assert load_csv(p).groups is None
    with pytest.raises(DatasetError, match="group"):
        load_csv(p, groups="required")


def test_dataset_validates_lengths():
    with pytest.raises(DatasetError):
        Dataset(np.zeros((3, 2)), np.zeros(2, int))

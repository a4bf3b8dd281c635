import numpy as np
import pytest
from hypothesis import given, strategies as st

from stfl.data import (
    CREDIT_SCHEMA,
    PAYMENT_SCHEMA,
    DatasetSchema,
    FeatureNoveltyError,
    PartitionSpec,
    PartyDataset,
    VerticalSplitSpec,
    compute_stats,
    load_csv,
    load_named,
    partition,
    schema_from_header,
    standardize,
    vertical_split,
    write_csv,
)


def write(path, text):
    path.write_text(text)
    return path


def test_cancer_shape(cancer):
    assert len(cancer) == 569 and cancer.n_features == 30
    assert set(np.unique(cancer.labels)) == {0.0, 1.0}


def test_load_csv_reads_rows(tmp_path):
    p = write(tmp_path / "d.csv", "id,a,b,y\nr1,1,2,0\nr2,3.5,-1,1\n")
    ds = load_csv(p, DatasetSchema("id", ["a", "b"], "y"))
    assert ds.ids == ["r1", "r2"]
    np.testing.assert_array_equal(ds.rows(["r2"]), [[3.5, -1.0]])
    np.testing.assert_array_equal(ds.labels, [0, 1])


@pytest.mark.parametrize("body, match", [
    ("id,a,y\nr1,1,0\n", "missing column 'b'"),
    ("id,a,b,y\nr1,1,2,0\nr1,1,2,0\n", "duplicate id"),
    ("id,a,b,y\nr1,1,,0\n", "missing value"),
    ("id,a,b,y\nr1,1,NA,0\n", "missing value"),
    ("id,a,b,y\nr1,1,abc,0\n", "could not convert"),
    ("id,a,b,y\nr1,1,2,2\n", "not 0/1"),
])
def test_load_csv_rejects_bad_input(tmp_path, body, match):
    p = write(tmp_path / "d.csv", body)
    with pytest.raises(ValueError, match=match):
        load_csv(p, DatasetSchema("id", ["a", "b"], "y"))


def test_write_then_read_round_trips(tmp_path, cancer):
    small = cancer.subset(cancer.ids[:10])
    write_csv(small, tmp_path / "c.csv")
    back = load_csv(tmp_path / "c.csv", schema_from_header(tmp_path / "c.csv"))
    assert back.ids == small.ids and back.feature_names == small.feature_names
    np.testing.assert_array_equal(back.features, small.features)
    np.testing.assert_array_equal(back.labels, small.labels)


def test_named_loader_finds_files_and_subsamples(tmp_path, monkeypatch):
    cols = ["", "SeriousDlqin2yrs", *CREDIT_SCHEMA.feature_names]
    rows = [",".join([str(i), str(i % 2), *(str(i + k) for k in range(10))]) for i in range(1, 31)]
    write(tmp_path / "credit.csv", ",".join(cols) + "\n" + "\n".join(rows) + "\n")
    monkeypatch.setenv("STFL_DATA_DIR", str(tmp_path))
    ds = load_named("credit")
    assert len(ds) == 30 and ds.n_features == 10
    sub = load_named("credit", subsample=12, seed=3)
    assert len(sub) == 12 and sub.ids == load_named("credit", subsample=12, seed=3).ids
    with pytest.raises(FileNotFoundError):
        load_named("payment")
    with pytest.raises(ValueError):
        load_named("iris")


def test_payment_native_layout_and_missing_values(tmp_path, monkeypatch):
    cols = [PAYMENT_SCHEMA.id_column, *PAYMENT_SCHEMA.feature_names, PAYMENT_SCHEMA.label_column]
    rows = [",".join([str(i), *(str(i * k % 7) for k in range(len(PAYMENT_SCHEMA.feature_names))), str(i % 2)])
            for i in range(1, 21)]
    write(tmp_path / "payment.csv", ",".join(cols) + "\n" + "\n".join(rows) + "\n")
    monkeypatch.setenv("STFL_DATA_DIR", str(tmp_path))
    ds = load_named("payment")
    assert len(ds) == 20 and ds.n_features == 23
    assert set(np.unique(ds.labels)) == {0.0, 1.0}
    cells = rows[4].split(",")
    cells[2] = "NA"
    rows[4] = ",".join(cells)
    write(tmp_path / "payment.csv", ",".join(cols) + "\n" + "\n".join(rows) + "\n")
    with pytest.raises(ValueError, match="missing"):
        load_named("payment")


def test_generic_layout_is_accepted(tmp_path):
    body = "id,a,b,y\n" + "\n".join(f"r{i},{i},{2 * i},{i % 2}" for i in range(6)) + "\n"
    write(tmp_path / "credit.csv", body)
    ds = load_named("credit", data_dir=tmp_path)
    assert ds.feature_names == ["a", "b"] and len(ds) == 6


def test_partition_sizes_for_cancer(cancer):
    st_, tr, te = partition(cancer.ids, PartitionSpec(seed=0))
    assert (len(st_), len(tr), len(te)) == (227, 227, 115)


@given(st.integers(5, 400), st.integers(0, 2 ** 32 - 1))
def test_partition_is_disjoint_covering_and_seeded(n, seed):
    ids = [f"r{i}" for i in range(n)]
    a = partition(ids, PartitionSpec(seed=seed))
    assert a == partition(ids, PartitionSpec(seed=seed))
    sets = [set(p) for p in a]
    assert set().union(*sets) == set(ids)
    assert sum(len(s) for s in sets) == n
    assert len(a[0]) == int(0.4 * n) and len(a[1]) == int(0.4 * n)


def test_partition_rejects_small_or_bad_input():
    with pytest.raises(ValueError):
        partition(["a", "b", "c", "d"])
    with pytest.raises(ValueError):
        PartitionSpec(0.5, 0.5, 0.5)


def test_default_split_halves_cancer(cancer):
    host, (guest,) = vertical_split(cancer, VerticalSplitSpec.default(cancer.feature_names))
    assert host.n_features == 15 and guest.n_features == 15
    assert host.labels is not None and guest.labels is None


def test_split_reassembles_original(cancer):
    spec = VerticalSplitSpec.default(cancer.feature_names, n_guests=3)
    host, guests = vertical_split(cancer, spec)
    parts = [host, *guests]
    names = [n for p in parts for n in p.feature_names]
    table = np.hstack([p.features for p in parts])
    order = [names.index(n) for n in cancer.feature_names]
    np.testing.assert_array_equal(table[:, order], cancer.features)


def test_split_validation(cancer):
    names = cancer.feature_names
    with pytest.raises(FeatureNoveltyError):
        vertical_split(cancer, VerticalSplitSpec(list(names), [[names[0]]]))
    with pytest.raises(FeatureNoveltyError):
        vertical_split(cancer, VerticalSplitSpec(list(names), [[]]))
    with pytest.raises(ValueError, match="exactly once"):
        vertical_split(cancer, VerticalSplitSpec(names[:10], [names[9:]]))
    with pytest.raises(ValueError, match="exactly once"):
        vertical_split(cancer, VerticalSplitSpec(names[:10], [names[11:]]))


def test_standardize_constant_column():
    ds = PartyDataset(["a", "b", "c"], np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]]), ["x", "k"])
    out = standardize(ds, compute_stats(ds))
    assert np.all(out.features[:, 1] == 0)
    assert np.all(np.isfinite(out.features))


def test_train_split_is_centered_and_test_uses_train_stats(cancer):
    _, tr, te = partition(cancer.ids, PartitionSpec(seed=1))
    stats = compute_stats(cancer.subset(tr))
    train = standardize(cancer.subset(tr), stats)
    assert np.max(np.abs(train.features.mean(axis=0))) < 1e-10
    np.testing.assert_allclose(train.features.std(axis=0), 1.0, atol=1e-12)
    test = standardize(cancer.subset(te), stats)
    raw = cancer.subset(te).features
    np.testing.assert_allclose(test.features, (raw - stats.mean) / stats.std, atol=0)
    own = compute_stats(cancer.subset(te))
    assert not np.allclose(own.mean, stats.mean)


def test_dataset_lookup_errors(cancer):
    with pytest.raises(KeyError):
        cancer.rows(["nope"])
    with pytest.raises(KeyError):
        cancer.columns(["nope"])
    with pytest.raises(ValueError):
        PartyDataset(["a", "a"], np.zeros((2, 1)), ["x"])

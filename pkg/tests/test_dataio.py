import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bespokemlp import dataio
from bespokemlp.dataio import DataError, DataWarning, Dataset, SplitSpec

from conftest import write_csv


def toy(n, n_classes=2, n_features=2, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.random((n, n_features)), np.arange(n) % n_classes, [f"a{j}" for j in range(n_features)],
                   n_classes)


def test_dense_label_remap(tmp_path):
    p = write_csv(tmp_path / "t.csv", [[0.1, 2, 5], [0.2, 3, 6], [0.3, 4, 5]])
    d = dataio.load_csv(p)
    assert d.labels.tolist() == [0, 1, 0]
    assert d.n_classes == 2
    assert d.label_mapping == [5, 6]
    assert d.features.shape == (3, 2)


def test_header_and_named_label(tmp_path):
    p = write_csv(tmp_path / "t.csv", [["b", 1.0, 2.0], ["a", 3.0, 4.0]], header=["cls", "x", "y"])
    d = dataio.load_csv(p, label_column="cls")
    assert d.attribute_names == ["x", "y"]
    assert d.label_mapping == ["a", "b"]
    assert d.labels.tolist() == [1, 0]


def test_whitespace_delimiter(tmp_path):
    p = tmp_path / "seeds.txt"
    p.write_text("1.0 2.0\t3\n4.0  5.0 1\n")
    d = dataio.load_csv(p, delimiter=" ")
    assert d.features.tolist() == [[1.0, 2.0], [4.0, 5.0]]
    assert d.labels.tolist() == [1, 0]


def test_empty_file(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("")
    with pytest.raises(DataError, match="no rows"):
        dataio.load_csv(p)


def test_missing_file(tmp_path):
    with pytest.raises(DataError, match="no such file"):
        dataio.load_csv(tmp_path / "nope.csv")


def test_parse_error_location(tmp_path):
    p = write_csv(tmp_path / "t.csv", [[1.0, 2.0, 0], [1.0, "oops", 1]])
    with pytest.raises(DataError, match=r"t\.csv:2: column 1"):
        dataio.load_csv(p, header=False)


def test_ragged_row(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("1,2,0\n1,0\n")
    with pytest.raises(DataError, match="expected 3 columns"):
        dataio.load_csv(p)


def test_normalize_own_stats():
    d = Dataset(np.array([[0.0], [5.0], [10.0]]), [0, 1, 0], ["x"], 2)
    assert dataio.normalize(d, d).features.ravel().tolist() == [0.0, 0.5, 1.0]


def test_normalize_clamps_test_rows():
    tr = Dataset(np.array([[0.0], [10.0]]), [0, 1], ["x"], 2)
    te = Dataset(np.array([[12.0], [-1.0]]), [0, 1], ["x"], 2)
    assert dataio.normalize(te, tr).features.ravel().tolist() == [1.0, 0.0]


def test_constant_column_warns():
    d = Dataset(np.array([[4.0, 1.0], [4.0, 2.0], [4.0, 3.0]]), [0, 1, 0], ["c", "v"], 2)
    with pytest.warns(DataWarning, match="c"):
        out = dataio.normalize(d, d)
    assert out.features[:, 0].tolist() == [0.0, 0.0, 0.0]


def test_normalize_idempotent():
    d = toy(30, n_features=3)
    stats = dataio.NormStats.of(d)
    once = dataio.normalize(d, stats)
    twice = dataio.normalize(once, dataio.NormStats(np.zeros(3), np.ones(3)))
    np.testing.assert_array_equal(once.features, twice.features)


def test_split_counts_and_determinism():
    d = toy(10)
    tr, te = dataio.split(d, SplitSpec(0.7, 1))
    assert (len(tr), len(te)) == (7, 3)
    tr2, te2 = dataio.split(d, SplitSpec(0.7, 1))
    np.testing.assert_array_equal(tr.features, tr2.features)
    np.testing.assert_array_equal(te.labels, te2.labels)


def test_split_balanced():
    d = toy(100)
    tr, te = dataio.split(d, SplitSpec(0.7, 3))
    for part in (tr, te):
        c = np.bincount(part.labels, minlength=2)
        assert abs(int(c[0]) - int(c[1])) <= 1


def test_split_single_sample_class_goes_to_train():
    d = Dataset(np.arange(7.0)[:, None], [0, 0, 0, 1, 1, 1, 2], ["x"], 3)
    with pytest.warns(DataWarning, match="single sample"):
        tr, te = dataio.split(d, SplitSpec(0.7, 0))
    assert 2 in tr.labels and 2 not in te.labels


def test_split_too_small():
    with pytest.raises(DataError):
        dataio.split(toy(3), SplitSpec(0.7, 0))


def test_split_ratio_validated():
    with pytest.raises(DataError):
        SplitSpec(1.0, 0)


def test_kfold_sizes():
    folds = dataio.kfold(toy(10), 5, 0)
    assert [len(v) for _, v in folds] == [2] * 5
    assert sorted(len(v) for _, v in dataio.kfold(toy(3), 2, 0)) == [1, 2]


def test_kfold_errors():
    with pytest.raises(DataError):
        dataio.kfold(toy(3), 4)
    with pytest.raises(DataError):
        dataio.kfold(toy(3), 1)


def _row_keys(d):
    return sorted(map(tuple, np.column_stack([d.features, d.labels]).tolist()))


@settings(max_examples=1000, deadline=None)
@given(n=st.integers(4, 60), k=st.integers(2, 4), ratio=st.floats(0.1, 0.9), seed=st.integers(0, 2**32 - 1))
def test_partition_laws(n, k, ratio, seed):
    d = toy(n, n_classes=2, seed=seed % 97)
    tr, te = dataio.split(d, SplitSpec(ratio, seed))
    assert sorted(_row_keys(tr) + _row_keys(te)) == _row_keys(d)
    assert len(tr) + len(te) == n
    if k <= n:
        folds = dataio.kfold(d, k, seed)
        val = sorted(sum((_row_keys(v) for _, v in folds), []))
        assert val == _row_keys(d)
        for t, v in folds:
            assert len(t) + len(v) == n


def test_manifest_round_trip(tmp_path):
    d = toy(40, n_features=3)
    p = write_csv(tmp_path / "d.csv", np.column_stack([d.features, d.labels]).tolist())
    spec = SplitSpec(0.7, 5)
    tr, te, stats, raw = dataio.prepare(p, split_spec=spec)
    dataio.write_manifest(tmp_path / "m.json", source=str(p), label_column=-1, delimiter=",",
                          split_spec=spec, stats=stats, d=raw)
    m = dataio.read_manifest(tmp_path / "m.json")
    assert m["split"] == {"train_ratio": 0.7, "seed": 5}
    tr2, te2 = dataio.from_manifest(m)
    np.testing.assert_array_equal(tr.features, tr2.features)
    np.testing.assert_array_equal(te.labels, te2.labels)
    assert json.loads((tmp_path / "m.json").read_text())["n_classes"] == 2
    assert (tr.features >= 0).all() and (tr.features <= 1).all()


def test_seeds_fetch_conversion_loads(tmp_path):
    import importlib.util
    from pathlib import Path
    spec = importlib.util.spec_from_file_location(
        "fetch_seeds", Path(__file__).resolve().parents[1] / "scripts" / "fetch_seeds.py")
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    raw = (b"15.26\t14.84\t0.871\t5.763\t3.312\t2.221\t5.22\t1\n"
           b"14.88\t14.57\t0.8811\t5.554\t3.333\t1.018\t\t4.956\t2\n"
           b"14.29\t14.09\t0.905\t5.291\t3.337\t2.699\t4.825\t3\n")
    path = tmp_path / "seeds.csv"
    path.write_text(mod.convert(raw))
    d = dataio.load_csv(path)
    assert d.features.shape == (3, 7) and d.n_classes == 3
    assert d.attribute_names[0] == "area"
    with pytest.raises(ValueError):
        mod.convert(b"1 2 3\n")

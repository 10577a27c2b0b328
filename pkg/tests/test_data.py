import numpy as np
import pytest

from propulsion_lab.data import assign_split, blobs, hash_token, keywords, load_csv, load_dataset, moons, tokenize
from propulsion_lab.errors import ConfigError, DataError


def test_blobs_contract():
    ds = blobs(n=200, d=8, classes=2, sep=3.0, seed=7)
    assert len(ds) == 200 and ds.inputs.shape == (200, 8)
    assert np.bincount(ds.targets).tolist() == [100, 100]
    np.testing.assert_array_equal(blobs(n=200, d=8, classes=2, sep=3.0, seed=7).inputs, ds.inputs)


def test_other_generators():
    assert moons(50, seed=1).inputs.shape == (50, 2)
    kw = keywords(40, 6, 10, keyword=1, seed=0)
    has = (kw.inputs == 1).any(axis=1)
    np.testing.assert_array_equal(has.astype(int), kw.targets)
    assert kw.inputs.min() >= 1


def test_csv_text_fixture(tmp_path):
    f = tmp_path / "d.csv"
    f.write_text("label,text\n1,Good movie\n0,bad film\n1,GOOD movie\n")
    ds = load_csv(f, vocab_size=50, max_seq=4)
    assert len(ds) == 3 and ds.targets.tolist() == [1, 0, 1]
    np.testing.assert_array_equal(ds.inputs[0], ds.inputs[2])
    assert ds.mask[0].tolist() == [True, True]


def test_csv_numeric_fixture(tmp_path):
    f = tmp_path / "r.csv"
    f.write_text("target,f1,f2\n0.5,1,2\n-1.0,3,4\n")
    ds = load_csv(f)
    assert ds.task == "regression"
    np.testing.assert_array_equal(ds.inputs, [[1, 2], [3, 4]])


@pytest.mark.parametrize(
    "body,line",
    [("label,f1\n0,1\n1,x\n", 3), ("label,f1,f2\n0,1,2\n1,2\n", 3), ("label,text\nfoo,hi\n", 2)],
)
def test_csv_malformed_rows(tmp_path, body, line):
    f = tmp_path / "bad.csv"
    f.write_text(body)
    with pytest.raises(DataError) as err:
        load_csv(f)
    assert err.value.line == line


def test_csv_empty(tmp_path):
    f = tmp_path / "e.csv"
    f.write_text("")
    with pytest.raises(DataError):
        load_csv(f)
    f.write_text("label,text\n")
    with pytest.raises(DataError):
        load_csv(f)


def test_hashing_is_deterministic():
    assert tokenize("Hello World", 64, 8) == tokenize("hello   world", 64, 8)
    assert 1 <= hash_token("x", 64) < 64


def test_split_and_source_rules():
    ds = assign_split(blobs(100, seed=0), 0.25, seed=3)
    assert (ds.split == "validation").sum() == 25
    np.testing.assert_array_equal(assign_split(blobs(100, seed=0), 0.25, seed=3).split, ds.split)
    with pytest.raises(ConfigError):
        load_dataset({"generator": "blobs", "path": "x.csv"})
    with pytest.raises(ConfigError):
        load_dataset({})
    with pytest.raises(ConfigError):
        load_dataset({"generator": "spirals"})

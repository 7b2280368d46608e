import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from privaware.data import (
    Column,
    DataError,
    Dataset,
    Manifest,
    load_csv,
    normalize,
    one_hot,
    pca_fit,
    pca_transform,
    save_csv,
    split,
    synthetic_sum_dataset,
)
from privaware.numerics import RngStream

CSV = "age,color,label\n30,red,yes\n41,blue,no\n25,red,yes\n"
SCHEMA = {"age": "numeric", "color": "categorical"}


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_csv_roundtrip(tmp_path):
    ds = load_csv(_write(tmp_path, CSV), "label", SCHEMA)
    assert ds.n == 3 and ds.m == 2
    assert ds.classes == ("no", "yes")
    assert ds.columns[1].categories == ("blue", "red")
    out = tmp_path / "out.csv"
    save_csv(ds, out)
    back = load_csv(out, "label", SCHEMA)
    assert np.array_equal(back.X, ds.X) and np.array_equal(back.y, ds.y)
    assert back.columns == ds.columns


def test_csv_errors_name_location(tmp_path):
    with pytest.raises(DataError, match="row 2"):
        load_csv(_write(tmp_path, "age,color,label\n30,red,yes\n41,no\n"), "label", SCHEMA)
    with pytest.raises(DataError, match="age"):
        load_csv(_write(tmp_path, "age,color,label\nabc,red,yes\n"), "label", SCHEMA)
    with pytest.raises(DataError):
        load_csv(_write(tmp_path, "age,color,label\n,red,yes\n"), "label", SCHEMA)
    with pytest.raises(DataError):
        load_csv(_write(tmp_path, CSV), "label", SCHEMA, classes=["yes"])
    with pytest.raises(DataError):
        load_csv(_write(tmp_path, CSV), "missing", SCHEMA)


def test_one_hot_binary_and_numeric_passthrough(tmp_path):
    ds = load_csv(_write(tmp_path, CSV), "label", SCHEMA)
    enc = one_hot(ds)
    assert [c.name for c in enc.columns] == ["age", "color=blue", "color=red"]
    assert np.array_equal(enc.X[:, 0], ds.X[:, 0])
    assert np.all(enc.X[:, 1:].sum(axis=1) == 1)
    with pytest.raises(ValueError):
        one_hot(ds, ["age"])


def test_one_hot_adult_style_width():
    rng = RngStream(0)
    cards = [9, 16, 7, 15, 6, 5, 2, 42]  # eight categorical attributes
    n = 200
    cols, blocks = [], []
    for j, k in enumerate(cards):
        cols.append(Column(f"c{j}", "categorical", tuple(f"v{i:02d}" for i in range(k))))
        blocks.append(rng.integers(0, k, size=n))
    for j in range(6):  # six numeric attributes
        cols.append(Column(f"n{j}"))
        blocks.append(rng.random(n))
    ds = Dataset(np.column_stack(blocks), rng.integers(0, 2, size=n), cols)
    enc = one_hot(ds)
    assert enc.m == sum(cards) + 6 == 108


def test_split_sizes_and_partition():
    ds = synthetic_sum_dataset(100, 3, 1, RngStream(1))
    s = split(ds, (0.8, 0.1, 0.1), RngStream(2))
    assert (s.part("train").n, s.part("val").n, s.part("test").n) == (80, 10, 10)
    assert split(ds, (1.0, 0, 0)).part("train").n == 100
    s = split(ds, (0.33, 0.33), RngStream(3))
    assert s.part("").n == 100 - 33 - 33
    with pytest.raises(ValueError):
        split(ds, (0.8, 0.3))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 200), st.floats(0, 0.5), st.floats(0, 0.5))
def test_split_tags_are_a_partition(n, a, b):
    ds = Dataset(np.zeros((n, 1)), np.zeros(n, int), [Column("x")])
    s = split(ds, (a, b, 0.0), RngStream(n))
    counts = sum(s.part(t).n for t in ("train", "val", "test", ""))
    assert counts == n
    assert s.part("train").n == int(np.floor(a * n + 1e-9))


@pytest.mark.parametrize("expansion", [1, 5, 10, 50, 100])
def test_synthetic_sum_conserves_base_sum(expansion):
    rng = RngStream(4)
    ds = synthetic_sum_dataset(300, 10, expansion, rng)
    assert ds.m == 10 * expansion
    assert np.all(ds.X >= 0)
    base = RngStream(4).random((300, 10))
    assert np.allclose(ds.X.sum(axis=1), base.sum(axis=1), atol=1e-12, rtol=0)
    # grouping: each base feature's parts add back to it
    grouped = ds.X.reshape(300, 10, expansion).sum(axis=2)
    assert np.allclose(grouped, base, atol=1e-12)
    assert np.array_equal(ds.y, (base.sum(axis=1) > 5).astype(int))


def test_synthetic_labels_roughly_balanced():
    ds = synthetic_sum_dataset(5000, 10, 1, RngStream(5))
    assert 0.45 < ds.y.mean() < 0.55


def test_normalize():
    ds = Dataset(np.array([[-1.0, 0.5, 3.0], [1.0, 0.0, 3.0], [0.0, 1.0, 3.0]]), np.zeros(3, int),
                 [Column("a"), Column("b"), Column("c")])
    out = normalize(ds)
    assert np.array_equal(out.X[:, 0], [0.0, 1.0, 0.5])
    assert np.array_equal(out.X[:, 1], ds.X[:, 1])
    assert np.array_equal(out.X[:, 2], [0.0, 0.0, 0.0])
    assert np.array_equal(normalize(out).X, out.X)


def test_pca_against_independent_eigensolve():
    X = RngStream(6).normal(size=(50, 10))
    model = pca_fit(X, 4)
    Xc = X - X.mean(axis=0)
    ref = np.sort(np.linalg.svd(Xc, compute_uv=False) ** 2 / (len(X) - 1))[::-1][:4]
    assert np.allclose(model.explained_variance, ref, atol=1e-8)
    assert np.allclose(model.components.T @ model.components, np.eye(4), atol=1e-8)
    assert np.all(np.diff(model.explained_variance) <= 0)


def test_pca_full_rank_is_orthogonal_and_rank_one_line():
    X = RngStream(7).normal(size=(30, 5))
    model = pca_fit(X, 5)
    Z = pca_transform(model, X)
    assert np.max(np.abs(Z @ model.components.T + model.mean - X)) < 1e-8
    t = RngStream(8).normal(size=40)
    line = np.column_stack([t, 2 * t])
    m1 = pca_fit(line, 1)
    resid = line - m1.mean - pca_transform(m1, line) @ m1.components.T
    assert np.max(np.abs(resid)) < 1e-10
    with pytest.raises(ValueError):
        pca_fit(X, 6)


def test_manifest_roundtrip(tmp_path):
    m = Manifest(synthetic={"n": 100, "base_dim": 3, "expansion": 2, "seed": 1}, split_seed=4)
    p = tmp_path / "m.json"
    m.save(p)
    a, b = Manifest.load(p).materialize(), m.materialize()
    assert np.array_equal(a.X, b.X) and list(a.split_tags) == list(b.split_tags)
    p.write_text('{"path": "x.csv", "colour": 1}')
    with pytest.raises(DataError):
        Manifest.load(p)

"""Datasets: CSV I/O, one-hot encoding, splits, scaling, PCA and the synthetic-sum task."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import RngStream

SPLITS = ("train", "val", "test")
UNTAGGED = ""


class DataError(ValueError):
    """Malformed input data, with the offending location in the message."""


@dataclass(frozen=True)
class Column:
    name: str
    kind: str = "numeric"  # or "categorical"
    categories: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("numeric", "categorical"):
            raise ValueError(f"unknown column kind {self.kind!r}")


@dataclass
class Dataset:
    """Feature matrix, labels, column metadata and per-row split tags.

    Categorical columns hold integer codes into ``Column.categories``.
    """

    X: np.ndarray
    y: np.ndarray
    columns: list[Column]
    split_tags: np.ndarray | None = None
    task: str = "classification"
    label_name: str = "label"
    classes: tuple[str, ...] = ()

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            raise ValueError("X must be 2-D")
        self.y = np.asarray(self.y, dtype=np.int64 if self.task == "classification" else np.float64)
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError(f"X has {self.X.shape[0]} rows but y has {self.y.shape[0]}")
        if len(self.columns) != self.X.shape[1]:
            raise ValueError("column metadata does not match X")
        if self.split_tags is None:
            self.split_tags = np.full(self.n, UNTAGGED, dtype=object)
        if self.task == "classification" and self.n and self.y.min() < 0:
            raise ValueError("class indices must be nonnegative")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def m(self) -> int:
        return self.X.shape[1]

    @property
    def n_classes(self) -> int:
        if self.task != "classification":
            return 0
        return max(len(self.classes), int(self.y.max()) + 1 if self.n else 0)

    def subset(self, rows) -> Dataset:
        rows = np.asarray(rows)
        return replace(self, X=self.X[rows], y=self.y[rows], split_tags=self.split_tags[rows])

    def part(self, tag: str) -> Dataset:
        return self.subset(np.flatnonzero(self.split_tags == tag))

    def select(self, features) -> Dataset:
        features = list(features)
        return replace(self, X=self.X[:, features], columns=[self.columns[i] for i in features])


# --- CSV ------------------------------------------------------------------------

def _kind(schema: dict[str, str] | None, name: str) -> str:
    return (schema or {}).get(name, "numeric")


def load_csv(path, label: str, schema: dict[str, str] | None = None, task: str = "classification",
             classes: list[str] | None = None) -> Dataset:
    """Read a header-first CSV. ``schema`` maps column name to numeric/categorical.

    Missing values (empty cells, '?' in numeric columns) are rejected. With
    ``classes`` given, labels outside it raise; otherwise classes are the sorted
    observed labels.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if label not in header:
        raise DataError(f"{path}: label column {label!r} not in header")
    li = header.index(label)
    feat_names = [h for i, h in enumerate(header) if i != li]
    raw = []
    for r, row in enumerate(body, start=1):
        if len(row) != len(header):
            raise DataError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}")
        for c, cell in enumerate(row):
            if cell.strip() == "":
                raise DataError(f"{path}: missing value at row {r}, column {header[c]!r}")
        raw.append(row)

    cols, data = [], []
    for name in feat_names:
        ci = header.index(name)
        cells = [row[ci].strip() for row in raw]
        if _kind(schema, name) == "categorical":
            cats = tuple(sorted(set(cells)))
            index = {c: i for i, c in enumerate(cats)}
            data.append([index[c] for c in cells])
            cols.append(Column(name, "categorical", cats))
        else:
            vals = []
            for r, cell in enumerate(cells, start=1):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}: row {r}, column {name!r}: {cell!r} is not numeric") from None
            data.append(vals)
            cols.append(Column(name))
    X = np.array(data, dtype=np.float64).T.reshape(len(raw), len(feat_names))

    labels = [row[li].strip() for row in raw]
    if task == "classification":
        cls = tuple(classes) if classes is not None else tuple(sorted(set(labels)))
        index = {c: i for i, c in enumerate(cls)}
        for r, lab in enumerate(labels, start=1):
            if lab not in index:
                raise DataError(f"{path}: row {r}: unknown label class {lab!r}")
        y = np.array([index[l] for l in labels], dtype=np.int64)
    else:
        cls = ()
        try:
            y = np.array([float(l) for l in labels])
        except ValueError as e:
            raise DataError(f"{path}: non-numeric regression label ({e})") from None
    return Dataset(X, y, cols, task=task, label_name=label, classes=cls)


def save_csv(ds: Dataset, path) -> None:
    """Write features then the label column; categorical codes are written as their category strings."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([c.name for c in ds.columns] + [ds.label_name])
        for i in range(ds.n):
            row = []
            for j, col in enumerate(ds.columns):
                v = ds.X[i, j]
                row.append(col.categories[int(v)] if col.kind == "categorical" else repr(float(v)))
            if ds.task == "classification":
                row.append(ds.classes[ds.y[i]] if ds.classes else str(int(ds.y[i])))
            else:
                row.append(repr(float(ds.y[i])))
            w.writerow(row)


def schema_of(ds: Dataset) -> dict[str, str]:
    return {c.name: c.kind for c in ds.columns}


# --- transforms -----------------------------------------------------------------

def one_hot(ds: Dataset, columns=None) -> Dataset:
    """Replace categorical columns with one indicator per category (lexicographic order).

    ``columns`` lists names to encode; default is every categorical column.
    """
    names = [c.name for c in ds.columns]
    if columns is None:
        targets = {c.name for c in ds.columns if c.kind == "categorical"}
    else:
        targets = set(columns)
        for name in targets:
            if name not in names:
                raise ValueError(f"unknown column {name!r}")
            if ds.columns[names.index(name)].kind != "categorical":
                raise ValueError(f"column {name!r} is not categorical")
    blocks, cols = [], []
    for j, col in enumerate(ds.columns):
        if col.name in targets:
            codes = ds.X[:, j].astype(np.int64)
            ind = np.zeros((ds.n, len(col.categories)))
            ind[np.arange(ds.n), codes] = 1.0
            blocks.append(ind)
            cols += [Column(f"{col.name}={cat}") for cat in col.categories]
        else:
            blocks.append(ds.X[:, j:j + 1])
            cols.append(col)
    X = np.hstack(blocks) if blocks else np.zeros((ds.n, 0))
    return replace(ds, X=X, columns=cols)


def split(ds: Dataset, fractions=(0.8, 0.1, 0.1), rng: RngStream | None = None) -> Dataset:
    """Tag rows train/val/test with floor(f * n) rows each; leftovers stay untagged."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) > len(SPLITS) or any(f < 0 for f in fractions):
        raise ValueError("fractions must be up to three nonnegative numbers")
    if sum(fractions) > 1 + 1e-12:
        raise ValueError(f"fractions sum to {sum(fractions)} > 1")
    sizes = [int(np.floor(f * ds.n + 1e-9)) for f in fractions]
    if sum(sizes) > ds.n:
        raise ValueError("requested split sizes exceed dataset size")
    order = rng.permutation(ds.n) if rng is not None else np.arange(ds.n)
    tags = np.full(ds.n, UNTAGGED, dtype=object)
    start = 0
    for tag, size in zip(SPLITS, sizes):
        tags[order[start:start + size]] = tag
        start += size
    return replace(ds, split_tags=tags)


def split_counts(sizes: dict[str, int], ds: Dataset, rng: RngStream | None = None) -> Dataset:
    """Tag rows with exact counts, e.g. {'train': 50000, 'val': 5000}."""
    if sum(sizes.values()) > ds.n:
        raise ValueError("requested split sizes exceed dataset size")
    order = rng.permutation(ds.n) if rng is not None else np.arange(ds.n)
    tags = np.full(ds.n, UNTAGGED, dtype=object)
    start = 0
    for tag in SPLITS:
        size = sizes.get(tag, 0)
        tags[order[start:start + size]] = tag
        start += size
    return replace(ds, split_tags=tags)


def normalize(ds: Dataset, ref: Dataset | None = None) -> Dataset:
    """Per-column min-max scaling to [0, 1]; constant columns become 0.

    ``ref`` supplies the min/max (e.g. the training part) when given.
    """
    src = ds if ref is None else ref
    lo, hi = src.X.min(axis=0), src.X.max(axis=0)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    X = np.where(span > 0, (ds.X - lo) / safe, 0.0)
    return replace(ds, X=X)


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (m, k), orthonormal columns
    explained_variance: np.ndarray


def pca_fit(ds: Dataset | np.ndarray, k: int) -> PcaModel:
    X = ds.X if isinstance(ds, Dataset) else np.asarray(ds, dtype=np.float64)
    m = X.shape[1]
    if not 1 <= k <= m:
        raise ValueError(f"k must be in [1, {m}], got {k}")
    mean = X.mean(axis=0)
    cov = np.cov(X - mean, rowvar=False, bias=False).reshape(m, m)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:k]
    comps = vecs[:, order]
    # sign convention: largest-magnitude loading positive, for reproducible output
    signs = np.sign(comps[np.argmax(np.abs(comps), axis=0), np.arange(k)])
    comps = comps * np.where(signs == 0, 1.0, signs)
    return PcaModel(mean, comps, np.clip(vals[order], 0.0, None))


def pca_transform(model: PcaModel, ds: Dataset | np.ndarray):
    X = ds.X if isinstance(ds, Dataset) else np.asarray(ds, dtype=np.float64)
    Z = (X - model.mean) @ model.components
    if isinstance(ds, Dataset):
        cols = [Column(f"pc{i + 1}") for i in range(Z.shape[1])]
        return replace(ds, X=Z, columns=cols)
    return Z


# --- synthetic sum task ------------------------------------------------------------

def synthetic_sum_dataset(n: int, base_dim: int, expansion: int, rng: RngStream,
                          threshold: float | None = None) -> Dataset:
    """Base features U[0,1]^base_dim, label 1 iff their sum exceeds ``threshold``.

    Each base value is split into ``expansion`` nonnegative parts with
    Dirichlet(1, ..., 1) proportions drawn per row. Expanded columns are
    grouped by base feature: columns ``j*expansion .. (j+1)*expansion-1``
    come from base feature ``j``.
    """
    if n < 1 or base_dim < 1 or expansion < 1:
        raise ValueError("n, base_dim and expansion must be >= 1")
    base = rng.random((n, base_dim))
    if threshold is None:
        threshold = base_dim / 2.0
    y = (base.sum(axis=1) > threshold).astype(np.int64)
    if expansion == 1:
        X = base
    else:
        props = rng.gen.dirichlet(np.ones(expansion), size=(n, base_dim))
        X = (base[:, :, None] * props).reshape(n, base_dim * expansion)
    cols = [Column(f"f{j}_{p}") for j in range(base_dim) for p in range(expansion)]
    return Dataset(X, y, cols, task="classification", label_name="label", classes=("0", "1"))


# --- manifest -----------------------------------------------------------------------

@dataclass
class Manifest:
    """Dataset description for reproducible runs."""

    path: str | None = None
    label: str = "label"
    schema: dict = field(default_factory=dict)
    task: str = "classification"
    split_fractions: tuple = (0.8, 0.1, 0.1)
    split_seed: int = 0
    synthetic: dict | None = None  # {"n", "base_dim", "expansion", "seed"}

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.__dict__, fh, indent=2, default=list)

    @classmethod
    def load(cls, path) -> Manifest:
        with open(path) as fh:
            d = json.load(fh)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataError(f"unknown manifest keys: {sorted(unknown)}")
        if "split_fractions" in d:
            d["split_fractions"] = tuple(d["split_fractions"])
        return cls(**d)

    def materialize(self) -> Dataset:
        if self.synthetic is not None:
            s = self.synthetic
            ds = synthetic_sum_dataset(int(s["n"]), int(s["base_dim"]), int(s["expansion"]),
                                       RngStream(int(s.get("seed", 0)), 1))
        elif self.path is not None:
            ds = load_csv(self.path, self.label, self.schema, self.task)
        else:
            raise DataError("manifest needs a path or a synthetic spec")
        return split(ds, self.split_fractions, RngStream(self.split_seed, 2))

"""Dataset loading, vertical feature splits, partitioning and standardization."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

STD_FLOOR = 1e-8
DATA_DIR_ENV = "STFL_DATA_DIR"


class SetupError(RuntimeError):
    """A party configuration cannot take part in vertical training."""


class IdOverlapError(SetupError):
    """Host and a guest share no sample IDs."""


class FeatureNoveltyError(SetupError):
    """A guest brings no feature the host does not already hold."""


@dataclass
class DatasetSchema:
    id_column: str
    feature_names: List[str]
    label_column: Optional[str] = None


@dataclass
class PartyDataset:
    """One party's ID-indexed feature table; the host also holds labels."""

    ids: List[str]
    features: np.ndarray
    feature_names: List[str]
    labels: Optional[np.ndarray] = None
    _index: Dict[str, int] = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != len(self.ids):
            raise ValueError(f"{len(self.ids)} ids for a feature table of shape {self.features.shape}")
        if self.features.shape[1] != len(self.feature_names):
            raise ValueError("feature name count does not match the table width")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.float64).reshape(-1)
            if self.labels.shape[0] != len(self.ids):
                raise ValueError("label count does not match row count")
        self._index = {i: k for k, i in enumerate(self.ids)}
        if len(self._index) != len(self.ids):
            raise ValueError("duplicate IDs in dataset")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def row_indices(self, ids: Sequence[str]) -> np.ndarray:
        try:
            return np.fromiter((self._index[i] for i in ids), dtype=np.int64, count=len(ids))
        except KeyError as exc:
            raise KeyError(f"unknown id {exc.args[0]!r}") from None

    def has(self, identifier: str) -> bool:
        return identifier in self._index

    def rows(self, ids: Sequence[str]) -> np.ndarray:
        return self.features[self.row_indices(ids)]

    def subset(self, ids: Sequence[str]) -> "PartyDataset":
        idx = self.row_indices(ids)
        labels = None if self.labels is None else self.labels[idx]
        return PartyDataset(list(ids), self.features[idx], list(self.feature_names), labels)

    def columns(self, names: Sequence[str]) -> "PartyDataset":
        pos = {n: k for k, n in enumerate(self.feature_names)}
        missing = [n for n in names if n not in pos]
        if missing:
            raise KeyError(f"unknown feature {missing[0]!r}")
        cols = [pos[n] for n in names]
        return PartyDataset(list(self.ids), self.features[:, cols], list(names), None)


# -- loading ----------------------------------------------------------------------

def load_csv(path: Union[str, Path], schema: DatasetSchema) -> PartyDataset:
    """Read a headered CSV.

    Rejects missing columns, duplicate IDs, empty or non-numeric cells, and
    labels outside {0, 1}.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        pos = {name: k for k, name in enumerate(header)}
        wanted = [schema.id_column, *schema.feature_names]
        if schema.label_column is not None:
            wanted.append(schema.label_column)
        missing = [c for c in wanted if c not in pos]
        if missing:
            raise ValueError(f"{path}: missing column {missing[0]!r}")
        feat_pos = [pos[c] for c in schema.feature_names]
        ids: List[str] = []
        rows: List[List[float]] = []
        labels: List[float] = []
        seen = set()
        for line_no, rec in enumerate(reader, start=2):
            if not rec:
                continue
            rid = rec[pos[schema.id_column]]
            if rid in seen:
                raise ValueError(f"{path}:{line_no}: duplicate id {rid!r}")
            seen.add(rid)
            ids.append(rid)
            try:
                rows.append([_number(rec[k]) for k in feat_pos])
            except ValueError as exc:
                raise ValueError(f"{path}:{line_no}: {exc}") from None
            if schema.label_column is not None:
                y = _number(rec[pos[schema.label_column]])
                if y not in (0.0, 1.0):
                    raise ValueError(f"{path}:{line_no}: label {y} is not 0/1")
                labels.append(y)
    features = np.array(rows, dtype=np.float64).reshape(len(ids), len(schema.feature_names))
    return PartyDataset(ids, features, list(schema.feature_names),
                        np.array(labels) if schema.label_column is not None else None)


def _number(cell: str) -> float:
    s = cell.strip()
    if s == "" or s.upper() in ("NA", "NAN"):
        raise ValueError(f"missing value {cell!r}")
    v = float(s)
    if not math.isfinite(v):
        raise ValueError(f"non-finite value {cell!r}")
    return v


def write_csv(dataset: PartyDataset, path: Union[str, Path], id_column: str = "id",
              label_column: str = "y") -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        header = [id_column, *dataset.feature_names]
        if dataset.labels is not None:
            header.append(label_column)
        w.writerow(header)
        for k, rid in enumerate(dataset.ids):
            row = [rid, *(repr(float(v)) for v in dataset.features[k])]
            if dataset.labels is not None:
                row.append(str(int(dataset.labels[k])))
            w.writerow(row)


def read_header(path: Union[str, Path]) -> List[str]:
    with Path(path).open(newline="") as fh:
        return next(csv.reader(fh))


def schema_from_header(path: Union[str, Path], id_column: str = "id",
                       label_column: Optional[str] = "y") -> DatasetSchema:
    """Every column other than the ID and label is treated as a feature."""
    header = read_header(path)
    if label_column is not None and label_column not in header:
        label_column = None
    feats = [c for c in header if c not in (id_column, label_column)]
    return DatasetSchema(id_column, feats, label_column)


# Column layouts of the three benchmark tables.
PAYMENT_FEATURES = [
    "LIMIT_BAL", "SEX", "EDUCATION", "MARRIAGE", "AGE",
    "PAY_0", "PAY_2", "PAY_3", "PAY_4", "PAY_5", "PAY_6",
    *(f"BILL_AMT{i}" for i in range(1, 7)),
    *(f"PAY_AMT{i}" for i in range(1, 7)),
]
CREDIT_FEATURES = [
    "RevolvingUtilizationOfUnsecuredLines", "age", "NumberOfTime30-59DaysPastDueNotWorse",
    "DebtRatio", "MonthlyIncome", "NumberOfOpenCreditLinesAndLoans", "NumberOfTimes90DaysLate",
    "NumberRealEstateLoansOrLines", "NumberOfTime60-89DaysPastDueNotWorse", "NumberOfDependents",
]
PAYMENT_SCHEMA = DatasetSchema("ID", PAYMENT_FEATURES, "default.payment.next.month")
CREDIT_SCHEMA = DatasetSchema("id", CREDIT_FEATURES, "SeriousDlqin2yrs")


def load_cancer() -> PartyDataset:
    """Wisconsin diagnostic breast-cancer table (569 x 30) bundled with scikit-learn."""
    from sklearn.datasets import load_breast_cancer

    raw = load_breast_cancer()
    names = [n.replace(" ", "_") for n in raw.feature_names]
    ids = [f"c{i:04d}" for i in range(raw.data.shape[0])]
    return PartyDataset(ids, raw.data, names, raw.target.astype(np.float64))


def find_dataset_file(name: str, data_dir: Union[None, str, Path] = None) -> Optional[Path]:
    """Locate ``<name>.csv`` in ``data_dir`` or ``$STFL_DATA_DIR``."""
    base = data_dir or os.environ.get(DATA_DIR_ENV)
    if not base:
        return None
    p = Path(base) / f"{name}.csv"
    return p if p.exists() else None


def load_named(name: str, data_dir: Union[None, str, Path] = None,
               subsample: Optional[int] = None, seed: int = 0) -> PartyDataset:
    """Load ``cancer``, ``payment`` or ``credit``.

    ``cancer`` comes from scikit-learn. The other two are read from
    ``<data_dir>/<name>.csv`` in either their original column layout or a
    generic ``id, features..., y`` layout.
    """
    if name == "cancer":
        ds = load_cancer()
    elif name in ("payment", "credit"):
        path = find_dataset_file(name, data_dir)
        if path is None:
            raise FileNotFoundError(
                f"{name}.csv not found; put it in a directory and set {DATA_DIR_ENV} or pass data_dir"
            )
        header = read_header(path)
        native = PAYMENT_SCHEMA if name == "payment" else CREDIT_SCHEMA
        if native.id_column in header and native.label_column in header:
            schema = native
        elif header and header[0] == "" and native.label_column in header:
            # the public credit table ships with an unnamed index column
            schema = replace(native, id_column="")
        else:
            schema = schema_from_header(path)
        ds = load_csv(path, schema)
    else:
        raise ValueError(f"unknown dataset {name!r}")
    if subsample is not None and subsample < len(ds):
        pick = np.sort(np.random.default_rng(seed).choice(len(ds), size=subsample, replace=False))
        ds = ds.subset([ds.ids[i] for i in pick])
    return ds


# -- vertical split -------------------------------------------------------------

@dataclass
class VerticalSplitSpec:
    host_features: List[str]
    guest_features: List[List[str]]

    @classmethod
    def default(cls, feature_names: Sequence[str], n_guests: int = 1) -> "VerticalSplitSpec":
        """Host takes the first ceil(d/2) features; the rest is dealt to guests in contiguous blocks."""
        names = list(feature_names)
        h = math.ceil(len(names) / 2)
        rest = names[h:]
        blocks = [list(b) for b in np.array_split(np.array(rest, dtype=object), n_guests)]
        return cls(names[:h], [list(map(str, b)) for b in blocks])

    def validate(self, feature_names: Sequence[str]) -> None:
        host = set(self.host_features)
        for k, guest in enumerate(self.guest_features):
            if not set(guest) - host:
                raise FeatureNoveltyError(
                    f"guest {k + 1} holds no feature outside the host's feature space"
                )
        assigned = list(self.host_features) + [f for g in self.guest_features for f in g]
        if sorted(assigned) != sorted(feature_names):
            dup = {f for f in assigned if assigned.count(f) > 1}
            missing = set(feature_names) - set(assigned)
            raise ValueError(
                f"every feature must be assigned exactly once (duplicated: {sorted(dup)}, "
                f"unassigned: {sorted(missing)})"
            )


def vertical_split(dataset: PartyDataset, spec: VerticalSplitSpec) -> Tuple[PartyDataset, List[PartyDataset]]:
    spec.validate(dataset.feature_names)
    host = dataset.columns(spec.host_features)
    host.labels = None if dataset.labels is None else dataset.labels.copy()
    guests = [dataset.columns(g) for g in spec.guest_features]
    return host, guests


# -- partition ---------------------------------------------------------------------

@dataclass(frozen=True)
class PartitionSpec:
    self_taught: float = 0.4
    train: float = 0.4
    test: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.self_taught, self.train, self.test) < 0:
            raise ValueError("fractions must be non-negative")
        if abs(self.self_taught + self.train + self.test - 1.0) > 1e-9:
            raise ValueError("partition fractions must sum to 1")


def partition(ids: Sequence[str], spec: PartitionSpec = PartitionSpec()) -> Tuple[List[str], List[str], List[str]]:
    """Random disjoint split; floor sizes for the first two parts, remainder to test."""
    n = len(ids)
    if n < 5:
        raise ValueError("need at least 5 samples to partition")
    if len(set(ids)) != n:
        raise ValueError("duplicate IDs")
    order = np.random.default_rng(spec.seed).permutation(n)
    n_st = math.floor(spec.self_taught * n)
    n_tr = math.floor(spec.train * n)
    pick = [ids[i] for i in order]
    return pick[:n_st], pick[n_st:n_st + n_tr], pick[n_st + n_tr:]


# -- standardization ---------------------------------------------------------------

@dataclass
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray


def compute_stats(dataset: PartyDataset) -> FeatureStats:
    mean = dataset.features.mean(axis=0)
    std = np.maximum(dataset.features.std(axis=0), STD_FLOOR)
    return FeatureStats(mean, std)


def standardize(dataset: PartyDataset, stats: FeatureStats) -> PartyDataset:
    if stats.mean.shape[0] != dataset.n_features:
        raise ValueError("stats width does not match dataset width")
    return replace(dataset, features=(dataset.features - stats.mean) / stats.std,
                   feature_names=list(dataset.feature_names),
                   labels=None if dataset.labels is None else dataset.labels.copy())

"""Survival datasets, CSV ingestion and feature preprocessing."""

import csv
import math
from dataclasses import dataclass, field

import numpy as np


class SchemaError(ValueError):
    pass


class DataValidationError(ValueError):
    pass


@dataclass
class SurvivalDataset:
    """Covariates plus right-censored outcomes.

    ``times`` are strictly positive event-or-censoring times and ``events`` the
    0/1 event indicators.  ``treatment`` and ``weights`` are optional.
    """

    features: np.ndarray
    times: np.ndarray
    events: np.ndarray
    treatment: np.ndarray = None
    weights: np.ndarray = None
    feature_names: list = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim == 1:
            self.features = self.features[:, None]
        self.times = np.asarray(self.times, dtype=float).ravel()
        self.events = np.asarray(self.events).ravel().astype(int)
        n = self.times.size
        if self.features.shape[0] != n or self.events.size != n:
            raise DataValidationError("features, times and events must have the same length")
        if n == 0:
            raise DataValidationError("dataset is empty")
        if not np.all(np.isfinite(self.times)) or np.any(self.times <= 0):
            bad = int(np.flatnonzero(~(self.times > 0))[0])
            raise DataValidationError(f"times must be strictly positive (row {bad})")
        if not np.all((self.events == 0) | (self.events == 1)):
            raise DataValidationError("events must be 0/1")
        if not np.all(np.isfinite(self.features)):
            raise DataValidationError("features contain missing or non-finite values")
        if self.treatment is not None:
            self.treatment = np.asarray(self.treatment).ravel().astype(int)
            if self.treatment.size != n or not np.all((self.treatment == 0) | (self.treatment == 1)):
                raise DataValidationError("treatment must be a 0/1 vector of length n")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=float).ravel()
            if self.weights.size != n or np.any(self.weights < 0) or not np.any(self.weights > 0):
                raise DataValidationError("weights must be non-negative with at least one positive")
        if self.feature_names is None:
            self.feature_names = [f"x{j}" for j in range(self.features.shape[1])]

    @property
    def n(self):
        return self.times.size

    @property
    def d(self):
        return self.features.shape[1]

    def sample_weights(self):
        return np.ones(self.n) if self.weights is None else self.weights

    def subset(self, idx):
        idx = np.asarray(idx)
        return SurvivalDataset(
            self.features[idx], self.times[idx], self.events[idx],
            None if self.treatment is None else self.treatment[idx],
            None if self.weights is None else self.weights[idx],
            list(self.feature_names))

    def replace(self, **changes):
        kw = dict(features=self.features, times=self.times, events=self.events,
                  treatment=self.treatment, weights=self.weights,
                  feature_names=list(self.feature_names))
        kw.update(changes)
        return SurvivalDataset(**kw)


# ---------------------------------------------------------------------------
# raw tables

@dataclass
class Column:
    kind: str  # "numeric" | "categorical"
    values: np.ndarray  # float for numeric, object (str) for categorical
    missing: np.ndarray  # bool, one flag per cell


@dataclass
class RawTable:
    column_names: list
    columns: dict
    n_rows: int
    roles: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.column_names)) != len(self.column_names):
            raise SchemaError("column names must be unique")
        for name in self.column_names:
            col = self.columns[name]
            if col.values.shape[0] != self.n_rows or col.missing.shape[0] != self.n_rows:
                raise SchemaError(f"column {name!r} does not have {self.n_rows} entries")

    def __getitem__(self, name):
        return self.columns[name]


@dataclass
class Schema:
    time: str
    event: str
    treatment: str = None
    numeric: list = field(default_factory=list)
    categorical: list = field(default_factory=list)

    @classmethod
    def from_dict(cls, d):
        return cls(time=d["time"], event=d["event"], treatment=d.get("treatment"),
                   numeric=list(d.get("numeric", [])), categorical=list(d.get("categorical", [])))

    def to_dict(self):
        return {"time": self.time, "event": self.event, "treatment": self.treatment,
                "numeric": list(self.numeric), "categorical": list(self.categorical)}


def _parse_float(text):
    try:
        v = float(text)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


def _numeric_column(cells):
    vals = np.zeros(len(cells))
    miss = np.zeros(len(cells), dtype=bool)
    for i, c in enumerate(cells):
        v = _parse_float(c) if c.strip() != "" else None
        if v is None:
            miss[i] = True
        else:
            vals[i] = v
    return Column("numeric", vals, miss)


def _categorical_column(cells):
    miss = np.array([c.strip() == "" for c in cells], dtype=bool)
    vals = np.array([c.strip() for c in cells], dtype=object)
    return Column("categorical", vals, miss)


def load_csv(path, schema):
    """Parse a UTF-8 CSV with a header row into a :class:`RawTable`.

    Empty cells and unparseable numeric cells are flagged missing.  The time
    and event columns are validated row by row.
    """
    if isinstance(schema, dict):
        schema = Schema.from_dict(schema)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: file is empty")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if any(c.strip() for c in r)]
    required = [schema.time, schema.event] + ([schema.treatment] if schema.treatment else [])
    absent = [c for c in required + schema.numeric + schema.categorical if c not in header]
    if absent:
        raise SchemaError(f"{path}: missing required column(s) {absent}")
    for i, r in enumerate(body):
        if len(r) != len(header):
            raise SchemaError(f"{path}: row {i} has {len(r)} fields, expected {len(header)}")
    cells = {h: [r[j] for r in body] for j, h in enumerate(header)}

    columns = {}
    numeric_roles = set(required) | set(schema.numeric)
    for h in header:
        if h in schema.categorical:
            columns[h] = _categorical_column(cells[h])
        elif h in numeric_roles:
            columns[h] = _numeric_column(cells[h])
        else:
            col = _numeric_column(cells[h])
            nonblank = np.array([c.strip() != "" for c in cells[h]], dtype=bool)
            if np.any(col.missing & nonblank):
                col = _categorical_column(cells[h])
            columns[h] = col

    for name, label in ((schema.event, "event"), (schema.treatment, "treatment")):
        if name is None:
            continue
        col = columns[name]
        for i in range(len(body)):
            if col.missing[i] or col.values[i] not in (0.0, 1.0):
                raise DataValidationError(
                    f"{path}: row {i} (line {i + 2}): {label} value {cells[name][i]!r} is not 0 or 1")
    col = columns[schema.time]
    for i in range(len(body)):
        if col.missing[i] or not col.values[i] > 0:
            raise DataValidationError(
                f"{path}: row {i} (line {i + 2}): time value {cells[schema.time][i]!r} "
                "is not a positive number")
    roles = {"time": schema.time, "event": schema.event, "treatment": schema.treatment}
    return RawTable(header, columns, len(body), roles)


def table_from_arrays(data, time, event, treatment=None, categorical=()):
    """Build a RawTable from a dict of arrays; ``None``/NaN cells become missing."""
    names = list(data)
    cols = {}
    n = None
    for name in names:
        raw = list(data[name])
        n = len(raw) if n is None else n
        if name in categorical:
            miss = np.array([v is None or (isinstance(v, float) and math.isnan(v)) for v in raw])
            vals = np.array(["" if m else str(v) for v, m in zip(raw, miss)], dtype=object)
            cols[name] = Column("categorical", vals, miss)
        else:
            miss = np.array([v is None or not math.isfinite(float(v)) for v in raw])
            vals = np.array([0.0 if m else float(v) for v, m in zip(raw, miss)])
            cols[name] = Column("numeric", vals, miss)
    return RawTable(names, cols, n or 0, {"time": time, "event": event, "treatment": treatment})


# ---------------------------------------------------------------------------
# preprocessing

@dataclass
class PreprocessorState:
    numeric: list
    categorical: list
    impute: dict
    scale: dict  # name -> (mean, std)
    levels: dict  # name -> sorted list of levels

    def feature_names(self):
        names = list(self.numeric)
        for c in self.categorical:
            names += [f"{c}={lvl}" for lvl in self.levels[c]]
        return names

    def to_dict(self):
        return {"numeric": self.numeric, "categorical": self.categorical,
                "impute": self.impute, "scale": {k: list(v) for k, v in self.scale.items()},
                "levels": self.levels}

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["numeric"]), list(d["categorical"]), dict(d["impute"]),
                   {k: tuple(v) for k, v in d["scale"].items()}, {k: list(v) for k, v in d["levels"].items()})


def fit_preprocessor(table, numeric_cols=(), categorical_cols=()):
    """Mean/mode imputation, z-scoring with the population SD, one-hot encoding.

    A zero-variance numeric column is mapped to all zeros.  Mode ties are
    broken by lexicographic order of the levels.
    """
    impute, scale, levels = {}, {}, {}
    for name in numeric_cols:
        col = table[name]
        if col.kind != "numeric":
            raise SchemaError(f"column {name!r} is not numeric")
        ok = ~col.missing
        if not ok.any():
            raise DataValidationError(f"column {name!r} has no observed values")
        mean = float(col.values[ok].mean())
        filled = np.where(ok, col.values, mean)
        mu = float(filled.mean())
        sd = float(np.sqrt(np.mean((filled - mu) ** 2)))
        impute[name] = mean
        scale[name] = (mu, sd)
    for name in categorical_cols:
        col = table[name]
        ok = ~col.missing
        if not ok.any():
            raise DataValidationError(f"column {name!r} has no observed values")
        observed = [str(v) for v in col.values[ok]]
        lvls = sorted(set(observed))
        counts = {lvl: observed.count(lvl) for lvl in lvls}
        top = max(counts.values())
        impute[name] = min(lvl for lvl in lvls if counts[lvl] == top)
        levels[name] = lvls
    return PreprocessorState(list(numeric_cols), list(categorical_cols), impute, scale, levels)


def transform_features(state, table):
    blocks = []
    for name in state.numeric:
        col = table[name]
        filled = np.where(col.missing, state.impute[name], col.values)
        mu, sd = state.scale[name]
        blocks.append(((filled - mu) / sd if sd > 0 else np.zeros(table.n_rows))[:, None])
    for name in state.categorical:
        col = table[name]
        vals = [state.impute[name] if m else str(v) for v, m in zip(col.values, col.missing)]
        lvls = state.levels[name]
        block = np.zeros((table.n_rows, len(lvls)))
        index = {lvl: j for j, lvl in enumerate(lvls)}
        for i, v in enumerate(vals):
            j = index.get(v)
            if j is not None:
                block[i, j] = 1.0
        blocks.append(block)
    if not blocks:
        return np.zeros((table.n_rows, 0))
    return np.hstack(blocks)


def transform(state, table):
    """Apply a fitted preprocessor; returns a :class:`SurvivalDataset`."""
    roles = table.roles
    if not roles.get("time") or not roles.get("event"):
        raise SchemaError("table has no time/event roles; load it with load_csv")
    X = transform_features(state, table)
    times = table[roles["time"]].values.astype(float)
    events = table[roles["event"]].values.astype(int)
    treat = None
    if roles.get("treatment"):
        treat = table[roles["treatment"]].values.astype(int)
    return SurvivalDataset(X, times, events, treat, None, state.feature_names())

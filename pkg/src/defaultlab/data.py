"""Tabular data model, CSV interchange, scaling, splits and default transitions."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DimensionError,
    EmptyInputError,
    InsufficientDataError,
    ParseError,
    SchemaError,
    SplitError,
    UndefinedRowError,
)
from .seeding import derive_rng

KINDS = ("continuous", "count", "indicator")
RESERVED_COLUMNS = ("label", "quarter", "borrower_id", "current")
STATE_LABELS = ("current", "default")


def quarter_index(year, q):
    """2004Q1 -> 0."""
    return (int(year) - 2004) * 4 + (int(q) - 1)


def quarter_label(index):
    year, q = divmod(int(index), 4)
    return f"{2004 + year}Q{q + 1}"


@dataclass(frozen=True)
class FeatureSchema:
    names: tuple
    kinds: tuple
    groups: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "kinds", tuple(self.kinds))
        if self.groups is not None:
            object.__setattr__(self, "groups", tuple(self.groups))
        if len(set(self.names)) != len(self.names):
            raise SchemaError("feature names must be unique")
        if len(self.kinds) != len(self.names):
            raise SchemaError("kinds must cover every feature")
        bad = [k for k in self.kinds if k not in KINDS]
        if bad:
            raise SchemaError(f"unknown feature kind(s) {bad}; expected one of {KINDS}")
        if self.groups is not None and len(self.groups) != len(self.names):
            raise SchemaError("groups must give one label per feature")
        clash = set(self.names) & set(RESERVED_COLUMNS)
        if clash:
            raise SchemaError(f"feature names collide with reserved columns: {sorted(clash)}")

    @property
    def n_features(self):
        return len(self.names)

    def index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise SchemaError(f"unknown feature {name!r}") from None

    def group_members(self):
        """Mapping group label -> list of feature indices (in schema order)."""
        out = {}
        if self.groups is None:
            return out
        for j, g in enumerate(self.groups):
            if g is None or g == "":
                continue
            out.setdefault(g, []).append(j)
        return out

    def to_dict(self):
        return {
            "names": list(self.names),
            "kinds": list(self.kinds),
            "groups": None if self.groups is None else list(self.groups),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["names"], d["kinds"], d.get("groups"))


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ObservationTable:
    """Feature matrix plus labels, quarter stamps, ids and current flags.

    ``extra`` holds auxiliary numeric columns that are not model inputs
    (an external credit score, for example).
    """

    schema: FeatureSchema
    rows: np.ndarray
    labels: np.ndarray
    quarter: np.ndarray
    borrower_id: np.ndarray
    current_flag: np.ndarray
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            rows = rows.reshape(-1, self.schema.n_features)
        n = rows.shape[0]
        if rows.shape[1] != self.schema.n_features:
            raise DimensionError(
                f"table has {rows.shape[1]} columns, schema has {self.schema.n_features}"
            )
        object.__setattr__(self, "rows", _frozen(rows, np.float64))
        object.__setattr__(self, "labels", _frozen(self.labels, np.int8))
        object.__setattr__(self, "quarter", _frozen(self.quarter, np.int64))
        object.__setattr__(self, "borrower_id", _frozen(self.borrower_id, np.int64))
        object.__setattr__(self, "current_flag", _frozen(self.current_flag, bool))
        object.__setattr__(
            self, "extra", {k: _frozen(v, np.float64) for k, v in dict(self.extra).items()}
        )
        for name in ("labels", "quarter", "borrower_id", "current_flag"):
            if getattr(self, name).shape != (n,):
                raise DimensionError(f"{name} has length {getattr(self, name).shape}, expected {n}")
        for k, v in self.extra.items():
            if v.shape != (n,):
                raise DimensionError(f"extra column {k!r} has wrong length")
        if n and not np.isin(self.labels, (0, 1)).all():
            raise SchemaError("labels must be 0/1")
        if not np.isfinite(self.rows).all():
            raise ParseError("feature matrix contains NaN or infinite values")

    def __len__(self):
        return self.rows.shape[0]

    @property
    def n_features(self):
        return self.schema.n_features

    def take(self, index):
        """Row subset by integer index array or boolean mask."""
        index = np.asarray(index)
        return ObservationTable(
            schema=self.schema,
            rows=self.rows[index],
            labels=self.labels[index],
            quarter=self.quarter[index],
            borrower_id=self.borrower_id[index],
            current_flag=self.current_flag[index],
            extra={k: v[index] for k, v in self.extra.items()},
        )

    def with_rows(self, rows):
        return ObservationTable(
            schema=self.schema,
            rows=rows,
            labels=self.labels,
            quarter=self.quarter,
            borrower_id=self.borrower_id,
            current_flag=self.current_flag,
            extra=self.extra,
        )

    def column(self, name):
        if name in self.extra:
            return self.extra[name]
        return self.rows[:, self.schema.index(name)]

    @staticmethod
    def concat(tables):
        tables = list(tables)
        if not tables:
            raise EmptyInputError("nothing to concatenate")
        schema = tables[0].schema
        keys = list(tables[0].extra)
        return ObservationTable(
            schema=schema,
            rows=np.vstack([t.rows for t in tables]),
            labels=np.concatenate([t.labels for t in tables]),
            quarter=np.concatenate([t.quarter for t in tables]),
            borrower_id=np.concatenate([t.borrower_id for t in tables]),
            current_flag=np.concatenate([t.current_flag for t in tables]),
            extra={k: np.concatenate([t.extra[k] for t in tables]) for k in keys},
        )


# ---------------------------------------------------------------------------
# CSV interchange

def _format_cell(value, precision):
    if precision is None:
        return repr(float(value))
    return f"{float(value):.{precision}f}"


def emit_csv(table: ObservationTable, path, precision=None):
    """Write ``table`` as comma-separated UTF-8 with a header row.

    Column order: features (schema order), label, quarter, borrower_id,
    current, then auxiliary columns in sorted name order.  With
    ``precision=None`` floats are written with round-trip precision.
    """
    extra_names = sorted(table.extra)
    header = list(table.schema.names) + list(RESERVED_COLUMNS) + extra_names
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(table)):
            row = [_format_cell(v, precision) for v in table.rows[i]]
            row += [
                str(int(table.labels[i])),
                str(int(table.quarter[i])),
                str(int(table.borrower_id[i])),
                str(int(table.current_flag[i])),
            ]
            row += [_format_cell(table.extra[k][i], precision) for k in extra_names]
            w.writerow(row)


def _parse_float(text, row, column):
    try:
        v = float(text)
    except ValueError:
        raise ParseError(
            f"row {row}, column {column!r}: cannot parse {text!r} as a number", row, column
        ) from None
    if not math.isfinite(v):
        raise ParseError(f"row {row}, column {column!r}: non-finite value {text!r}", row, column)
    return v


def _parse_int(text, row, column):
    v = _parse_float(text, row, column)
    if v != int(v):
        raise ParseError(f"row {row}, column {column!r}: expected an integer, got {text!r}", row, column)
    return int(v)


def ingest_csv(path, schema: FeatureSchema) -> ObservationTable:
    """Read a panel CSV written in the interchange dialect.

    Rows are numbered from 1 for the first data line.  Columns outside the
    schema and the reserved set are kept as auxiliary numeric columns.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyInputError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            raise SchemaError(f"{path}: duplicate column names in header")
        for name in list(schema.names) + list(RESERVED_COLUMNS):
            if name not in header:
                raise SchemaError(f"{path}: missing column {name!r}")
        pos = {h: i for i, h in enumerate(header)}
        feat_pos = [pos[n] for n in schema.names]
        extra_names = [h for h in header if h not in schema.names and h not in RESERVED_COLUMNS]

        feats, labels, quarters, ids, current = [], [], [], [], []
        extra = {k: [] for k in extra_names}
        for r, cells in enumerate(reader, start=1):
            if not cells:
                continue
            if len(cells) != len(header):
                raise ParseError(
                    f"row {r}: expected {len(header)} cells, found {len(cells)}", r, None
                )
            feats.append([_parse_float(cells[p], r, header[p]) for p in feat_pos])
            y = _parse_int(cells[pos["label"]], r, "label")
            if y not in (0, 1):
                raise ParseError(f"row {r}, column 'label': expected 0 or 1, got {y}", r, "label")
            labels.append(y)
            quarters.append(_parse_int(cells[pos["quarter"]], r, "quarter"))
            ids.append(_parse_int(cells[pos["borrower_id"]], r, "borrower_id"))
            c = _parse_int(cells[pos["current"]], r, "current")
            if c not in (0, 1):
                raise ParseError(f"row {r}, column 'current': expected 0 or 1, got {c}", r, "current")
            current.append(c)
            for k in extra_names:
                extra[k].append(_parse_float(cells[pos[k]], r, k))
    if not labels:
        raise EmptyInputError(f"{path}: no data rows")
    return ObservationTable(
        schema=schema,
        rows=np.array(feats, dtype=np.float64).reshape(len(labels), schema.n_features),
        labels=labels,
        quarter=quarters,
        borrower_id=ids,
        current_flag=np.array(current, dtype=bool),
        extra={k: np.array(v) for k, v in extra.items()},
    )


# ---------------------------------------------------------------------------
# Scaling

@dataclass(frozen=True, eq=False)
class ScalingParams:
    means: np.ndarray
    std_devs: np.ndarray
    names: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "means", _frozen(self.means, np.float64))
        object.__setattr__(self, "std_devs", _frozen(self.std_devs, np.float64))
        if self.means.shape != self.std_devs.shape:
            raise DimensionError("means and std_devs differ in length")
        if not (self.std_devs > 0).all():
            raise ValueError("std_devs must be strictly positive")

    def to_dict(self):
        d = {"means": self.means.tolist(), "std_devs": self.std_devs.tolist()}
        if self.names is not None:
            d["names"] = list(self.names)
        return d

    @classmethod
    def from_dict(cls, d):
        names = d.get("names")
        return cls(np.array(d["means"]), np.array(d["std_devs"]), None if names is None else tuple(names))


def compute_scaling(table: ObservationTable) -> ScalingParams:
    """Column means and population standard deviations.

    Constant columns get a standard deviation of 1 so they scale to zero.
    """
    if len(table) < 2:
        raise InsufficientDataError(f"need at least 2 rows to compute scaling, got {len(table)}")
    x = table.rows
    means = x.mean(axis=0)
    std = np.sqrt(((x - means) ** 2).mean(axis=0))
    std = np.where(std > 0, std, 1.0)
    return ScalingParams(means, std, table.schema.names)


def apply_scaling(table: ObservationTable, params: ScalingParams) -> ObservationTable:
    if params.means.shape[0] != table.n_features:
        raise DimensionError(
            f"scaling params have {params.means.shape[0]} features, table has {table.n_features}"
        )
    return table.with_rows((table.rows - params.means) / params.std_devs)


def invert_scaling(table: ObservationTable, params: ScalingParams) -> ObservationTable:
    if params.means.shape[0] != table.n_features:
        raise DimensionError("scaling params do not match the table")
    return table.with_rows(table.rows * params.std_devs + params.means)


# ---------------------------------------------------------------------------
# Splits

@dataclass(frozen=True)
class SplitSpec:
    mode: str = "temporal"
    train_quarters: tuple = ()
    test_quarters: tuple = ()
    gap_quarters: int = 8
    fractions: tuple = (0.6, 0.2, 0.2)
    validation_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "train_quarters", tuple(sorted(int(q) for q in self.train_quarters)))
        object.__setattr__(self, "test_quarters", tuple(sorted(int(q) for q in self.test_quarters)))
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        if self.mode not in ("temporal", "pooled"):
            raise SplitError(f"unknown split mode {self.mode!r}")
        if self.mode == "temporal":
            if not self.train_quarters or not self.test_quarters:
                raise SplitError("temporal split needs train and test quarters")
            gap = min(self.test_quarters) - max(self.train_quarters)
            if gap < self.gap_quarters:
                raise SplitError(
                    f"test quarters start {gap} quarter(s) after training ends; "
                    f"at least {self.gap_quarters} required"
                )
        else:
            if len(self.fractions) != 3 or any(f < 0 for f in self.fractions):
                raise SplitError("pooled split needs three nonnegative fractions")
            if abs(sum(self.fractions) - 1.0) > 1e-9:
                raise SplitError(f"pooled fractions sum to {sum(self.fractions)}, not 1")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise SplitError("validation_fraction must lie in [0, 1)")


def make_split(table: ObservationTable, spec: SplitSpec):
    """Return ``(train, validation, test)`` tables.

    Temporal mode keeps the test quarters at least ``gap_quarters`` after the
    training quarters and carves a seeded random validation share out of the
    training rows.  Pooled mode shuffles all rows and cuts by fractions.
    """
    rng = derive_rng(spec.seed, "split", spec.mode)
    if spec.mode == "temporal":
        present = set(np.unique(table.quarter).tolist())
        missing = [q for q in spec.train_quarters + spec.test_quarters if q not in present]
        if missing:
            raise SplitError(f"quarters {missing} are not present in the table")
        train_idx = np.flatnonzero(np.isin(table.quarter, spec.train_quarters))
        test_idx = np.flatnonzero(np.isin(table.quarter, spec.test_quarters))
        perm = rng.permutation(train_idx)
        n_val = int(round(spec.validation_fraction * len(perm)))
        val_idx = np.sort(perm[:n_val])
        fit_idx = np.sort(perm[n_val:])
        parts = (fit_idx, val_idx, test_idx)
        required = (True, spec.validation_fraction > 0, True)
    else:
        n = len(table)
        perm = rng.permutation(n)
        n_train = int(round(spec.fractions[0] * n))
        n_val = int(round(spec.fractions[1] * n))
        parts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
        required = tuple(f > 0 for f in spec.fractions)
    for name, idx, req in zip(("train", "validation", "test"), parts, required):
        if req and len(idx) == 0:
            raise SplitError(f"{name} partition is empty")
    return tuple(table.take(idx) for idx in parts)


# ---------------------------------------------------------------------------
# Transition matrix

@dataclass(frozen=True, eq=False)
class TransitionMatrix:
    """Rows: state at observation (current, default); columns: 8-quarter outcome."""

    matrix: np.ndarray
    counts: np.ndarray
    labels: tuple = STATE_LABELS

    def __post_init__(self):
        object.__setattr__(self, "matrix", _frozen(self.matrix, np.float64))
        object.__setattr__(self, "counts", _frozen(self.counts, np.int64))

    def to_dict(self):
        return {
            "matrix": self.matrix.ravel().tolist(),
            "labels": list(self.labels),
            "counts": self.counts.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.array(d["matrix"], dtype=float).reshape(2, 2),
            np.array(d.get("counts", [0, 0, 0, 0])).reshape(2, 2),
            tuple(d.get("labels", STATE_LABELS)),
        )


def compute_transition_matrix(panel: ObservationTable) -> TransitionMatrix:
    """Empirical frequency of the 8-quarter outcome given the current state.

    Each row of the panel counts once (per-quarter frequencies).
    """
    state = (~panel.current_flag).astype(np.int64)
    counts = np.zeros((2, 2), dtype=np.int64)
    np.add.at(counts, (state, panel.labels.astype(np.int64)), 1)
    matrix = np.zeros((2, 2))
    for s in range(2):
        n = counts[s].sum()
        if n == 0:
            raise UndefinedRowError(STATE_LABELS[s])
        matrix[s, 1] = counts[s, 1] / n
        matrix[s, 0] = counts[s, 0] / n
    return TransitionMatrix(matrix, counts)


def write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def data_document(scaling: Optional[ScalingParams] = None,
                  transition: Optional[TransitionMatrix] = None):
    """JSON document carrying scaling params and/or a transition matrix."""
    doc = {}
    if scaling is not None:
        doc.update(scaling.to_dict())
    if transition is not None:
        doc.update(transition.to_dict())
    return doc


def read_schema(path) -> FeatureSchema:
    with open(path, encoding="utf-8") as fh:
        return FeatureSchema.from_dict(json.load(fh))


def quarters_in(table: ObservationTable) -> Sequence[int]:
    return np.unique(table.quarter).tolist()

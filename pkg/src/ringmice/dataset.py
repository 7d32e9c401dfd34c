"""Columnar tables with missingness masks, CSV I/O and row partitioning."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, UsageError
from .ring import CATEGORICAL, CONTINUOUS, AttrSpace, Triple, aggregate

FEATURE = "feature"
JOIN_KEY = "join-key"
ID = "id"
ROLES = (FEATURE, JOIN_KEY, ID)

LOW = "low"
HIGH = "high"


@dataclass(frozen=True)
class Column:
    name: str
    kind: str = CONTINUOUS
    role: str = FEATURE

    def __post_init__(self):
        if self.kind not in (CONTINUOUS, CATEGORICAL):
            raise UsageError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.role not in ROLES:
            raise UsageError(f"column {self.name!r}: unknown role {self.role!r}")


@dataclass
class Schema:
    columns: list[Column]
    mattrs: list[int] | None = None

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise UsageError("duplicate column names in schema")
        if self.mattrs is not None:
            for i in self.mattrs:
                if self.columns[i].role != FEATURE:
                    raise UsageError(f"{self.columns[i].name!r} is not a feature column")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise UsageError(f"unknown column {name!r}") from None

    def column(self, name: str) -> Column:
        return self.columns[self.index(name)]

    @property
    def features(self) -> list[int]:
        return [i for i, c in enumerate(self.columns) if c.role == FEATURE]

    def attr_space(self) -> AttrSpace:
        """Attribute space of the feature columns, in schema order."""
        feats = self.features
        return AttrSpace(tuple(self.columns[i].name for i in feats),
                         tuple(self.columns[i].kind for i in feats))

    @classmethod
    def parse(cls, text: str) -> "Schema":
        """Parse the line-oriented ``name,kind,role`` format ('#' starts a comment)."""
        cols = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if not 1 <= len(parts) <= 3:
                raise UsageError(f"schema line {lineno}: expected name,kind,role")
            try:
                cols.append(Column(*parts))
            except UsageError as e:
                raise UsageError(f"schema line {lineno}: {e}") from None
        if not cols:
            raise UsageError("schema declares no columns")
        return cls(cols)

    @classmethod
    def load(cls, path) -> "Schema":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise UsageError(f"cannot read schema {path}: {e}") from None
        return cls.parse(text)

    def dumps(self) -> str:
        return "".join(f"{c.name},{c.kind},{c.role}\n" for c in self.columns)


@dataclass
class Table:
    """Columnar table.

    ``columns`` hold float64 (continuous) or int64 codes (categorical and
    keys). ``masks[name][r]`` is True where the cell was originally missing;
    masked continuous cells hold NaN and masked categorical cells hold -1
    until imputed. ``dictionaries`` map codes back to the CSV strings.
    """

    schema: Schema
    columns: dict[str, np.ndarray]
    masks: dict[str, np.ndarray]
    dictionaries: dict[str, list[str]] = field(default_factory=dict)

    @property
    def row_count(self) -> int:
        for c in self.columns.values():
            return len(c)
        return 0

    def copy(self) -> "Table":
        return Table(self.schema,
                     {k: v.copy() for k, v in self.columns.items()},
                     {k: v.copy() for k, v in self.masks.items()},
                     {k: list(v) for k, v in self.dictionaries.items()})

    def feature_columns(self) -> list[np.ndarray]:
        return [self.columns[self.schema.columns[i].name] for i in self.schema.features]

    def mattrs(self) -> list[int]:
        """Indices (into the attribute space) of incomplete feature attributes."""
        feats = self.schema.features
        if self.schema.mattrs is not None:
            return [feats.index(i) for i in self.schema.mattrs]
        return [a for a, i in enumerate(feats)
                if self.masks[self.schema.columns[i].name].any()]

    def miss_matrix(self, attrs: Sequence[int]) -> np.ndarray:
        """Boolean (rows, len(attrs)) matrix of original missingness."""
        feats = self.schema.features
        n = self.row_count
        if not attrs:
            return np.zeros((n, 0), dtype=bool)
        return np.column_stack([self.masks[self.schema.columns[feats[a]].name] for a in attrs])

    @classmethod
    def from_arrays(cls, schema: Schema, columns: dict, masks: dict | None = None,
                    dictionaries: dict | None = None) -> "Table":
        cols = {}
        for c in schema.columns:
            arr = np.asarray(columns[c.name])
            cols[c.name] = arr.astype(np.float64 if c.kind == CONTINUOUS and c.role == FEATURE
                                      else np.int64)
        n = {len(v) for v in cols.values()}
        if len(n) > 1:
            raise UsageError("columns differ in length")
        rows = n.pop() if n else 0
        m = {c.name: np.zeros(rows, dtype=bool) for c in schema.columns}
        if masks:
            for k, v in masks.items():
                m[k] = np.asarray(v, dtype=bool).copy()
        dicts = {} if dictionaries is None else dict(dictionaries)
        return cls(schema, cols, m, dicts)


def _fmt_float(x: float) -> str:
    return repr(float(x))


def load_csv(path, schema: Schema, sorted_dictionaries: bool = False) -> Table:
    """Read a header-first UTF-8 CSV; an empty field marks a missing cell."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as e:
        raise UsageError(f"cannot open {path}: {e}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, header required") from None
        header = [h.strip() for h in header]
        if header != schema.names:
            raise DataError(f"{path}: header {header} does not match schema {schema.names}")
        raw = list(reader)
    ncol = len(header)
    cols: dict[str, np.ndarray] = {}
    masks: dict[str, np.ndarray] = {}
    dicts: dict[str, list[str]] = {}
    for r, rec in enumerate(raw):
        if len(rec) != ncol:
            raise DataError(f"{path}: row {r + 1} has {len(rec)} fields, expected {ncol}")
    for j, col in enumerate(schema.columns):
        cells = [rec[j] for rec in raw]
        mask = np.fromiter((c == "" for c in cells), dtype=bool, count=len(cells))
        if col.role != FEATURE and mask.any():
            r = int(np.flatnonzero(mask)[0])
            raise DataError(f"{path}: missing value in {col.role} column {col.name!r} at row {r + 1}")
        if col.kind == CONTINUOUS and col.role == FEATURE:
            vals = np.empty(len(cells))
            for r, c in enumerate(cells):
                if c == "":
                    vals[r] = np.nan
                    continue
                try:
                    vals[r] = float(c)
                except ValueError:
                    raise DataError(f"{path}: row {r + 1}, column {col.name!r}: "
                                    f"cannot parse {c!r} as a number") from None
                if not math.isfinite(vals[r]):
                    raise DataError(f"{path}: row {r + 1}, column {col.name!r}: non-finite value")
            cols[col.name] = vals
        else:
            observed = [c for c in cells if c != ""]
            levels = sorted(set(observed)) if sorted_dictionaries else list(dict.fromkeys(observed))
            lookup = {s: k for k, s in enumerate(levels)}
            cols[col.name] = np.fromiter((lookup.get(c, -1) for c in cells),
                                         dtype=np.int64, count=len(cells))
            dicts[col.name] = levels
        masks[col.name] = mask
    return Table(schema, cols, masks, dicts)


def _render(table: Table, name: str) -> list[str]:
    col = table.schema.column(name)
    vals = table.columns[name]
    mask = table.masks[name]
    if col.kind == CONTINUOUS and col.role == FEATURE:
        return ["" if np.isnan(v) else _fmt_float(v) for v in vals]
    levels = table.dictionaries.get(name)
    out = []
    for v in vals:
        if v < 0:
            out.append("")
        elif levels is None:
            out.append(str(int(v)))
        else:
            out.append(levels[v])
    return out


def write_csv(table: Table, path, emit_mask: bool = False) -> None:
    """Write values (imputed cells included); optionally a sibling 0/1 mask file."""
    names = table.schema.names
    rendered = [_render(table, n) for n in names]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        w.writerows(zip(*rendered))
    if emit_mask:
        with open(mask_path(path), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(names)
            w.writerows(zip(*[table.masks[n].astype(np.int8).astype(str) for n in names]))


def mask_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + ".mask" + p.suffix)


def initial_impute(t: Table) -> Table:
    """Mean (continuous) / mode (categorical) fill of originally-missing cells.

    Returns a new table; observed cells are left untouched. Mode ties go to
    the smallest code.
    """
    out = t.copy()
    for i in t.schema.features:
        col = t.schema.columns[i]
        mask = t.masks[col.name]
        if not mask.any():
            continue
        vals = out.columns[col.name]
        obs = vals[~mask]
        if obs.size == 0:
            raise DataError(f"column {col.name!r} has no observed values")
        if col.kind == CONTINUOUS:
            vals[mask] = math.fsum(obs.tolist()) / obs.size
        else:
            vals[mask] = int(np.argmax(np.bincount(obs)))
    return out


@dataclass
class PartitionSet:
    """Disjoint row partitions by count of missing (low) or observed (high) cells.

    ``attrs`` are attribute-space indices of the incomplete attributes.
    ``exactly_one[a]`` holds rows whose single missing (low) / observed (high)
    cell among ``attrs`` is attribute ``a``.
    """

    mode: str
    attrs: list[int]
    complete: np.ndarray
    all_missing: np.ndarray
    exactly_one: dict[int, np.ndarray]
    multi: np.ndarray
    miss: np.ndarray  # (rows, len(attrs)) boolean, immutable
    cached_triple: Triple | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def parts(self) -> list[np.ndarray]:
        return [self.complete, self.all_missing, self.multi, *self.exactly_one.values()]

    def rows_missing(self, attr: int, include_all_missing: bool = True) -> np.ndarray:
        """Rows where ``attr`` was originally missing, via the partitions."""
        key = ("miss", attr, include_all_missing)
        if key not in self._cache:
            k = self.attrs.index(attr)
            if self.mode == LOW:
                parts = [self.exactly_one[attr], self.multi[self.miss[self.multi, k]]]
            else:
                parts = [self.multi[self.miss[self.multi, k]]]
                parts += [r for a, r in self.exactly_one.items() if a != attr]
            if include_all_missing:
                parts.append(self.all_missing)
            self._cache[key] = np.sort(np.concatenate(parts)).astype(np.int64)
        return self._cache[key]

    def rows_observed(self, attr: int, include_complete: bool = False) -> np.ndarray:
        """Rows where ``attr`` was observed (complete rows optional)."""
        key = ("obs", attr, include_complete)
        if key not in self._cache:
            k = self.attrs.index(attr)
            if self.mode == HIGH:
                parts = [self.exactly_one[attr], self.multi[~self.miss[self.multi, k]]]
            else:
                parts = [self.multi[~self.miss[self.multi, k]]]
                parts += [r for a, r in self.exactly_one.items() if a != attr]
            if include_complete:
                parts.append(self.complete)
            self._cache[key] = np.sort(np.concatenate(parts)).astype(np.int64)
        return self._cache[key]


def partition_miss(miss: np.ndarray, attrs: Sequence[int], mode: str) -> PartitionSet:
    """Partition rows given the (rows, len(attrs)) original-missingness matrix."""
    if mode not in (LOW, HIGH):
        raise UsageError(f"unknown partition mode {mode!r}")
    attrs = list(attrs)
    if not attrs:
        raise UsageError("partition requires at least one incomplete attribute")
    nmiss = miss.sum(axis=1)
    k = len(attrs)
    complete = np.flatnonzero(nmiss == 0)
    all_missing = np.flatnonzero(nmiss == k)
    counted = nmiss if mode == LOW else k - nmiss
    if k == 1:
        single = np.zeros(len(nmiss), dtype=bool)
    else:
        single = counted == 1
    flag = miss if mode == LOW else ~miss
    exactly_one = {}
    for j, a in enumerate(attrs):
        exactly_one[a] = np.flatnonzero(single & flag[:, j])
    multi = np.flatnonzero((nmiss > 0) & (nmiss < k) & ~single)
    return PartitionSet(mode, attrs, complete, all_missing, exactly_one, multi, miss)


def partition(t: Table, mode: str, attrs: Sequence[int] | None = None,
              columns: Sequence[np.ndarray] | None = None, threads: int = 1,
              with_triple: bool = True) -> PartitionSet:
    """Route rows into complete / all-missing / exactly-one / multi parts.

    Low mode counts missing cells among ``attrs``; high mode counts observed
    cells. ``cached_triple`` aggregates the complete rows over ``columns``
    (default: the table's feature columns).
    """
    attrs = t.mattrs() if attrs is None else list(attrs)
    p = partition_miss(t.miss_matrix(attrs), attrs, mode)
    if with_triple:
        cols = t.feature_columns() if columns is None else columns
        p.cached_triple = aggregate(cols, t.schema.attr_space(), p.complete, threads)
    return p


def rows_missing_in(t: Table, p: PartitionSet, attr: int) -> np.ndarray:
    """Low mode: rows missing ``attr``. High mode: incomplete rows observing ``attr``."""
    if p.mode == LOW:
        return p.rows_missing(attr)
    return p.rows_observed(attr)

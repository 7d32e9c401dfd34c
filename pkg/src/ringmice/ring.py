"""Generalized cofactor ring.

A :class:`Triple` ``(n, s, q)`` holds relation-valued aggregates: ``n`` is the
count, ``s[i]`` the per-attribute sums and ``q[i, j]`` the pairwise
interaction sums. Continuous attributes contribute relations keyed by the
empty tuple; categorical attributes contribute relations keyed by their
category codes, which is how one-hot encoding is avoided until
:func:`to_dense` expands the aggregate into a real-valued cofactor matrix.

Two routes produce triples from data: :func:`lift` plus :func:`triple_add`
(the textbook fold) and :func:`aggregate`, a chunked bulk kernel that builds
the one-hot Gram matrix per chunk with BLAS and scatters it back into
relations. Both produce the same canonical form.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import UsageError

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"

Key = tuple

# relative threshold below which subtraction residue is dropped
SUB_PRUNE_RTOL = 1e-12

DEFAULT_CHUNK = 1 << 16
# categorical domains up to this size expand by direct comparison
SMALL_DOMAIN = 16
# an index array with at most len/RUN_FACTOR breaks is processed as contiguous slices
RUN_FACTOR = 256


class Relation:
    """Finite map from category-key tuples to float weights.

    Canonical form never stores a weight of exactly zero.
    """

    __slots__ = ("entries",)

    def __init__(self, entries: dict | None = None):
        self.entries: dict[Key, float] = {} if entries is None else entries

    @classmethod
    def scalar(cls, c: float) -> "Relation":
        c = float(c)
        return cls({(): c}) if c != 0.0 else cls()

    @classmethod
    def single(cls, key: Key, w: float) -> "Relation":
        w = float(w)
        return cls({key: w}) if w != 0.0 else cls()

    def __bool__(self) -> bool:
        return bool(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[Key]:
        return iter(self.entries)

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}: {v!r}" for k, v in sorted(self.entries.items()))
        return "{" + inner + "}"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Relation):
            return NotImplemented
        return self.entries == other.entries

    def items(self):
        return self.entries.items()

    def get(self, key: Key, default: float = 0.0) -> float:
        return self.entries.get(key, default)

    @property
    def arity(self) -> int | None:
        for k in self.entries:
            return len(k)
        return None

    def value(self) -> float:
        """Weight of the empty key (the scalar view); 0.0 when absent."""
        return self.entries.get((), 0.0)

    def add(self, other: "Relation") -> "Relation":
        out = dict(self.entries)
        for k, w in other.entries.items():
            v = out.get(k, 0.0) + w
            if v == 0.0:
                out.pop(k, None)
            else:
                out[k] = v
        return Relation(out)

    def sub(self, other: "Relation", rtol: float = SUB_PRUNE_RTOL) -> "Relation":
        out = dict(self.entries)
        for k, w in other.entries.items():
            a = out.get(k, 0.0)
            v = a - w
            if abs(v) <= rtol * max(abs(a), abs(w)):
                out.pop(k, None)
            else:
                out[k] = v
        return Relation(out)

    def scale(self, c: float) -> "Relation":
        if c == 0.0:
            return Relation()
        return Relation({k: w * c for k, w in self.entries.items()})

    def join(self, other: "Relation") -> "Relation":
        """Natural join over disjoint key variables: concatenated keys, multiplied weights."""
        out: dict[Key, float] = {}
        for ka, wa in self.entries.items():
            for kb, wb in other.entries.items():
                v = wa * wb
                if v != 0.0:
                    k = ka + kb
                    out[k] = out.get(k, 0.0) + v
        return Relation(out)

    def isclose(self, other: "Relation", rtol: float, atol: float = 0.0) -> bool:
        keys = set(self.entries) | set(other.entries)
        for k in keys:
            a, b = self.entries.get(k, 0.0), other.entries.get(k, 0.0)
            if abs(a - b) > atol + rtol * max(abs(a), abs(b)):
                return False
        return True


@dataclass(frozen=True)
class AttrSpace:
    """Ordered attributes that index every triple's ``s`` and ``q`` slots."""

    names: tuple[str, ...]
    kinds: tuple[str, ...]

    def __post_init__(self):
        if len(self.names) != len(self.kinds):
            raise UsageError("names and kinds differ in length")
        if len(set(self.names)) != len(self.names):
            raise UsageError("attribute names must be unique")
        for k in self.kinds:
            if k not in (CONTINUOUS, CATEGORICAL):
                raise UsageError(f"unknown attribute kind {k!r}")

    @classmethod
    def of(cls, *pairs: tuple[str, str]) -> "AttrSpace":
        return cls(tuple(p[0] for p in pairs), tuple(p[1] for p in pairs))

    @property
    def m(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise UsageError(f"unknown attribute {name!r}") from None

    def is_categorical(self, i: int) -> bool:
        return self.kinds[i] == CATEGORICAL


class Triple:
    """Value of the generalized cofactor ring.

    ``q`` is stored sparsely as ``{(i, j): Relation}`` with ``i <= j``; the
    lower triangle is implied. Empty relations are never stored in ``q``.
    """

    __slots__ = ("space", "n", "s", "q")

    def __init__(self, space: AttrSpace, n: Relation | None = None,
                 s: list[Relation] | None = None, q: dict | None = None):
        self.space = space
        self.n = Relation() if n is None else n
        self.s = [Relation() for _ in range(space.m)] if s is None else s
        self.q: dict[tuple[int, int], Relation] = {} if q is None else q

    @classmethod
    def zero(cls, space: AttrSpace) -> "Triple":
        return cls(space)

    @classmethod
    def one(cls, space: AttrSpace) -> "Triple":
        return cls(space, Relation.scalar(1.0))

    @property
    def m(self) -> int:
        return self.space.m

    @property
    def count(self) -> float:
        return self.n.value()

    def qij(self, i: int, j: int) -> Relation:
        if i > j:
            i, j = j, i
        return self.q.get((i, j), Relation())

    def support(self) -> set[int]:
        sup = {i for i, r in enumerate(self.s) if r}
        for i, j in self.q:
            sup.add(i)
            sup.add(j)
        return sup

    def is_zero(self) -> bool:
        return not self.n and not self.q and not any(self.s)

    def __add__(self, other: "Triple") -> "Triple":
        return triple_add(self, other)

    def __sub__(self, other: "Triple") -> "Triple":
        return triple_sub(self, other)

    def __mul__(self, other: "Triple") -> "Triple":
        return triple_mul(self, other)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Triple):
            return NotImplemented
        return (self.space == other.space and self.n == other.n
                and self.s == other.s and self.q == other.q)

    def isclose(self, other: "Triple", rtol: float = 1e-9, atol: float = 0.0) -> bool:
        _check_space(self, other)
        if not self.n.isclose(other.n, rtol, atol):
            return False
        if not all(a.isclose(b, rtol, atol) for a, b in zip(self.s, other.s)):
            return False
        for key in set(self.q) | set(other.q):
            if not self.qij(*key).isclose(other.qij(*key), rtol, atol):
                return False
        return True

    def __repr__(self) -> str:
        q = ", ".join(f"{k}: {v!r}" for k, v in sorted(self.q.items()))
        return f"Triple(n={self.n!r}, s={self.s!r}, q={{{q}}})"


def _check_space(a: Triple, b: Triple) -> None:
    if a.space != b.space:
        raise UsageError("triples are over different attribute spaces")


def triple_add(a: Triple, b: Triple) -> Triple:
    _check_space(a, b)
    q = dict(a.q)
    for key, r in b.q.items():
        merged = q[key].add(r) if key in q else r
        if merged:
            q[key] = merged
        else:
            q.pop(key, None)
    return Triple(a.space, a.n.add(b.n), [x.add(y) for x, y in zip(a.s, b.s)], q)


def triple_sub(a: Triple, b: Triple) -> Triple:
    _check_space(a, b)
    q = dict(a.q)
    for key, r in b.q.items():
        diff = q.get(key, Relation()).sub(r)
        if diff:
            q[key] = diff
        else:
            q.pop(key, None)
    return Triple(a.space, a.n.sub(b.n), [x.sub(y) for x, y in zip(a.s, b.s)], q)


def triple_mul(a: Triple, b: Triple) -> Triple:
    """Ring product of triples over disjoint attribute supports."""
    _check_space(a, b)
    sa, sb = a.support(), b.support()
    if sa & sb:
        raise UsageError(f"triple_mul operands share attributes {sorted(sa & sb)}")
    m = a.m
    s = [Relation() for _ in range(m)]
    for i in sa:
        s[i] = b.n.join(a.s[i])
    for i in sb:
        s[i] = a.n.join(b.s[i])
    q: dict[tuple[int, int], Relation] = {}
    for key, r in a.q.items():
        v = b.n.join(r)
        if v:
            q[key] = v
    for key, r in b.q.items():
        v = a.n.join(r)
        if v:
            q[key] = v
    for i in sa:
        if not a.s[i]:
            continue
        for j in sb:
            if not b.s[j]:
                continue
            v = a.s[i].join(b.s[j]) if i < j else b.s[j].join(a.s[i])
            if v:
                q[(min(i, j), max(i, j))] = v
    return Triple(a.space, a.n.join(b.n), s, q)


def lift_con(x: float, i: int, space: AttrSpace) -> Triple:
    t = Triple.one(space)
    t.s[i] = Relation.scalar(x)
    sq = Relation.scalar(x * x)
    if sq:
        t.q[(i, i)] = sq
    return t


def lift_cat(code: int, i: int, space: AttrSpace) -> Triple:
    t = Triple.one(space)
    key = (int(code),)
    t.s[i] = Relation({key: 1.0})
    t.q[(i, i)] = Relation({key: 1.0})
    return t


def _is_absent(v) -> bool:
    return v is None or (isinstance(v, float) and math.isnan(v))


def lift(row_values: Sequence, space: AttrSpace) -> Triple:
    """Map one complete row to a triple in a single step (no ring products)."""
    if len(row_values) != space.m:
        raise UsageError(f"row has {len(row_values)} values, space has {space.m}")
    keys: list[Key] = []
    vals: list[float] = []
    for i, v in enumerate(row_values):
        if _is_absent(v):
            raise UsageError(f"cannot lift absent value of {space.names[i]!r}; impute first")
        if space.is_categorical(i):
            keys.append((int(v),))
            vals.append(1.0)
        else:
            keys.append(())
            vals.append(float(v))
    s = [Relation.single(k, w) for k, w in zip(keys, vals)]
    q: dict[tuple[int, int], Relation] = {}
    for i in range(space.m):
        for j in range(i, space.m):
            if i == j:
                r = Relation.single(keys[i], vals[i] * vals[i])
            else:
                r = Relation.single(keys[i] + keys[j], vals[i] * vals[j])
            if r:
                q[(i, j)] = r
    return Triple(space, Relation.scalar(1.0), s, q)


def fold_lift(rows: Iterable[Sequence], space: AttrSpace) -> Triple:
    """Reference aggregation: triple_add over per-row lifts."""
    acc = Triple.zero(space)
    for row in rows:
        acc = triple_add(acc, lift(row, space))
    return acc


# ---------------------------------------------------------------------------
# dense expansion


@dataclass
class DenseLayout:
    """Column layout of a one-hot expansion with a leading intercept column.

    Continuous attributes take one column; a categorical attribute takes one
    column per code in ``codes[i]`` (sorted ascending).
    """

    space: AttrSpace
    attrs: tuple[int, ...]
    codes: dict[int, np.ndarray] = field(default_factory=dict)
    offsets: dict[int, int] = field(init=False)
    width: int = field(init=False)

    def __post_init__(self):
        self.offsets = {}
        w = 1
        for i in self.attrs:
            self.offsets[i] = w
            w += len(self.codes[i]) if self.space.is_categorical(i) else 1
        self.width = w

    def span(self, i: int) -> slice:
        lo = self.offsets[i]
        hi = lo + (len(self.codes[i]) if self.space.is_categorical(i) else 1)
        return slice(lo, hi)

    @property
    def index_map(self) -> dict[str, slice]:
        return {self.space.names[i]: self.span(i) for i in self.attrs}

    def expand(self, columns: Sequence[np.ndarray], rows=None, out=None) -> np.ndarray:
        """One-hot design matrix (intercept first) for ``rows`` of ``columns``.

        ``columns`` is indexed by attribute id. Codes absent from the layout
        expand to all-zero indicator columns.
        """
        n = _nrows(columns, rows, self.attrs)
        D = np.zeros((n, self.width)) if out is None else out
        D[:, 0] = 1.0
        runs = contiguous_runs(rows) if isinstance(rows, np.ndarray) else None
        for i in self.attrs:
            col = take_rows(columns[i], rows, runs)
            lo = self.offsets[i]
            if self.space.is_categorical(i):
                codes = self.codes[i]
                if len(codes) == 0:
                    continue
                if len(codes) <= SMALL_DOMAIN:
                    for k, c in enumerate(codes):
                        np.equal(col, c, out=D[:, lo + k], casting="unsafe")
                    continue
                pos = np.searchsorted(codes, col)
                pos_c = np.minimum(pos, len(codes) - 1)
                hit = codes[pos_c] == col
                r = np.flatnonzero(hit)
                D[r, lo + pos_c[r]] = 1.0
            else:
                D[:, lo] = col
        return D


def take_rows(col: np.ndarray, rows, runs: list | None = None) -> np.ndarray:
    """``col[rows]``, copying contiguous runs instead of gathering when ``runs`` is given."""
    if rows is None:
        return col
    if runs is not None and not isinstance(rows, slice):
        if len(runs) == 1:
            return col[runs[0][0]:runs[0][1]]
        return np.concatenate([col[a:b] for a, b in runs]) if runs else col[:0]
    return col[rows]


def _nrows(columns, rows, attrs) -> int:
    if rows is not None:
        if isinstance(rows, slice):
            return len(range(*rows.indices(len(columns[attrs[0]]))))
        return len(rows)
    if not attrs:
        return 0
    return len(columns[attrs[0]])


@dataclass
class DenseCofactor:
    """Real-valued cofactor matrix over the one-hot expansion of a triple."""

    matrix: np.ndarray
    layout: DenseLayout

    @property
    def space(self) -> AttrSpace:
        return self.layout.space

    @property
    def count(self) -> float:
        return float(self.matrix[0, 0])

    @property
    def index_map(self) -> dict[str, slice]:
        return self.layout.index_map

    @property
    def category_dictionaries(self) -> dict[str, list[int]]:
        sp = self.layout.space
        return {sp.names[i]: [int(c) for c in v] for i, v in self.layout.codes.items()}


def layout_of(t: Triple, attrs: Sequence[int] | None = None) -> DenseLayout:
    space = t.space
    attrs = tuple(range(space.m)) if attrs is None else tuple(attrs)
    codes = {}
    for i in attrs:
        if space.is_categorical(i):
            codes[i] = np.array(sorted(k[0] for k in t.s[i]), dtype=np.int64)
    return DenseLayout(space, attrs, codes)


def to_dense(t: Triple) -> DenseCofactor:
    layout = layout_of(t)
    space = t.space
    w = layout.width
    M = np.zeros((w, w))
    M[0, 0] = t.count
    pos = {i: {int(c): k for k, c in enumerate(layout.codes[i])}
           for i in layout.codes}

    def cols(i: int, key: Key) -> int | None:
        if space.is_categorical(i):
            k = pos[i].get(key[0])
            return None if k is None else layout.offsets[i] + k
        return layout.offsets[i]

    for i in range(space.m):
        for key, v in t.s[i].items():
            c = cols(i, key)
            if c is not None:
                M[0, c] = M[c, 0] = v
    for (i, j), rel in t.q.items():
        ci, cj = space.is_categorical(i), space.is_categorical(j)
        for key, v in rel.items():
            if i == j:
                a = b = cols(i, key)
            else:
                a = cols(i, key[:1] if ci else ())
                b = cols(j, key[-1:] if cj else ())
            if a is None or b is None:
                continue
            M[a, b] = M[b, a] = v
    return DenseCofactor(M, layout)


def triple_from_gram(G: np.ndarray, layout: DenseLayout) -> Triple:
    """Scatter a one-hot Gram matrix (intercept first) into canonical relations."""
    space = layout.space
    t = Triple(space, Relation.scalar(G[0, 0]))
    keyed: dict[int, list[tuple[Key, int]]] = {}
    for i in layout.attrs:
        if space.is_categorical(i):
            lo = layout.offsets[i]
            keyed[i] = [((int(c),), lo + k) for k, c in enumerate(layout.codes[i])]
        else:
            keyed[i] = [((), layout.offsets[i])]
    for i in layout.attrs:
        t.s[i] = Relation({k: float(G[0, c]) for k, c in keyed[i] if G[0, c] != 0.0})
    attrs = sorted(layout.attrs)
    for a, i in enumerate(attrs):
        for j in attrs[a:]:
            ent: dict[Key, float] = {}
            if i == j:
                for k, c in keyed[i]:
                    v = G[c, c]
                    if v != 0.0:
                        ent[k] = float(v)
            else:
                for ki, ci in keyed[i]:
                    row = G[ci]
                    for kj, cj in keyed[j]:
                        v = row[cj]
                        if v != 0.0:
                            ent[ki + kj] = float(v)
            if ent:
                t.q[(i, j)] = Relation(ent)
    return t


# ---------------------------------------------------------------------------
# bulk aggregation


def observed_codes(col: np.ndarray) -> np.ndarray:
    """Sorted distinct non-negative codes present in ``col``."""
    if col.size == 0:
        return np.zeros(0, dtype=np.int64)
    lo, hi = int(col.min()), int(col.max())
    if lo < 0:
        raise UsageError("category codes must be non-negative")
    if hi < (1 << 16):
        return np.flatnonzero(np.bincount(col, minlength=hi + 1)).astype(np.int64)
    return np.unique(col).astype(np.int64)


def chunk_bounds(n: int, chunk: int) -> list[tuple[int, int]]:
    return [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]


def map_chunks(fn, items: list, threads: int = 1) -> list:
    """``[fn(x) for x in items]``, optionally on a thread pool; order preserved."""
    if threads <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def contiguous_runs(rows: np.ndarray) -> list[tuple[int, int]] | None:
    """``[(lo, hi), ...]`` if sorted ``rows`` form few long runs, else None."""
    if len(rows) == 0:
        return []
    breaks = np.flatnonzero(np.diff(rows) != 1)
    if len(breaks) + 1 > max(1, len(rows) // RUN_FACTOR):
        return None
    starts = np.concatenate(([0], breaks + 1))
    stops = np.concatenate((breaks + 1, [len(rows)]))
    if np.any(rows[stops - 1] - rows[starts] != stops - 1 - starts):
        return None
    return [(int(rows[a]), int(rows[b - 1]) + 1) for a, b in zip(starts, stops)]


def row_blocks(n_total: int, rows, chunk: int) -> list:
    """Row selectors (slices or index arrays) covering ``rows`` in order, each at most ``chunk`` long."""
    if rows is None:
        return [slice(lo, hi) for lo, hi in chunk_bounds(n_total, chunk)]
    if isinstance(rows, slice):
        lo, hi, _ = rows.indices(n_total)
        return [slice(lo + a, lo + b) for a, b in chunk_bounds(max(hi - lo, 0), chunk)]
    runs = contiguous_runs(rows)
    if runs is None:
        return [rows[lo:hi] for lo, hi in chunk_bounds(len(rows), chunk)]
    return [slice(lo + a, lo + b) for lo, hi in runs for a, b in chunk_bounds(hi - lo, chunk)]


def gram(columns: Sequence[np.ndarray], layout: DenseLayout, rows=None,
         threads: int = 1, chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    """One-hot Gram matrix over ``rows``, summed block by block in a fixed order.

    The blocking depends only on ``rows`` and ``chunk``, never on
    ``threads``, so the floating-point result is identical for every thread
    count.
    """
    n_total = len(columns[layout.attrs[0]]) if layout.attrs else 0
    if rows is None and not layout.attrs:
        return np.zeros((1, 1))

    def part(sel):
        D = layout.expand(columns, sel)
        return D.T @ D

    G = np.zeros((layout.width, layout.width))
    for P in map_chunks(part, row_blocks(n_total, rows, chunk), threads):
        G += P
    return G


def data_layout(columns: Sequence[np.ndarray], space: AttrSpace, rows=None,
                attrs: Sequence[int] | None = None) -> DenseLayout:
    attrs = tuple(range(space.m)) if attrs is None else tuple(attrs)
    codes = {}
    runs = contiguous_runs(rows) if isinstance(rows, np.ndarray) else None
    for i in attrs:
        if space.is_categorical(i):
            codes[i] = observed_codes(np.asarray(take_rows(columns[i], rows, runs)))
    return DenseLayout(space, attrs, codes)


def aggregate(columns: Sequence[np.ndarray], space: AttrSpace, rows=None,
              threads: int = 1, chunk: int = DEFAULT_CHUNK) -> Triple:
    """Bulk ``SUM(lift(row))`` over the rows of a columnar dataset.

    ``columns[i]`` holds attribute ``i`` (float64 for continuous, integer
    codes for categorical). ``rows`` optionally restricts to a subset given
    as an index array. All cells must be present (no NaN).
    """
    if len(columns) != space.m:
        raise UsageError(f"expected {space.m} columns, got {len(columns)}")
    if rows is not None:
        rows = np.asarray(rows)
    n = _nrows(columns, rows, tuple(range(space.m))) if space.m else 0
    if n == 0:
        return Triple.zero(space)
    layout = data_layout(columns, space, rows)
    G = gram(columns, layout, rows, threads, chunk)
    return triple_from_gram(G, layout)

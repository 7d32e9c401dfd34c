"""Cofactor aggregates over tree-shaped joins without materializing the join.

Per-table partial triples are grouped on join keys and combined with ring
multiplication, bottom-up over a user-supplied join tree. Partial triples
for one table share a dense one-hot layout, so a :class:`KeyedTriples` is
stored as a batch of Gram matrices (one per key) and the ring product runs
vectorized across keys; indexing it yields ordinary :class:`Triple` values.
"""

from __future__ import annotations

import re
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataset import FEATURE, Schema, Table, load_csv
from .errors import DataError, UsageError
from .ring import (AttrSpace, DenseLayout, Triple, chunk_bounds, observed_codes, row_blocks,
                   triple_from_gram)


@dataclass(frozen=True)
class Edge:
    left: str
    right: str
    left_key: str
    right_key: str


@dataclass
class JoinSpec:
    """Join tree rooted at ``tables[0]``; ``attrs`` selects features per table."""

    tables: list[str]
    edges: list[Edge]
    attrs: dict[str, list[str]]
    paths: dict[str, tuple[Path, Path]] = field(default_factory=dict)

    def validate(self) -> None:
        if not self.tables:
            raise UsageError("join spec lists no tables")
        if len(set(self.tables)) != len(self.tables):
            raise UsageError("duplicate table names in join spec")
        known = set(self.tables)
        for e in self.edges:
            if e.left not in known or e.right not in known:
                raise UsageError(f"edge {e.left}.{e.left_key} = {e.right}.{e.right_key} "
                                 f"names an unknown table")
        if len(self.edges) != len(self.tables) - 1:
            raise UsageError("join spec is not a tree (cyclic or disconnected)")
        seen = {self.tables[0]}
        queue = deque([self.tables[0]])
        while queue:
            t = queue.popleft()
            for nb, _, _ in self.neighbours(t):
                if nb in seen:
                    continue
                seen.add(nb)
                queue.append(nb)
        if seen != known:
            raise UsageError("join spec is not a tree (cyclic or disconnected)")
        names = [a for t in self.tables for a in self.attrs.get(t, [])]
        dup = {a for a in names if names.count(a) > 1}
        if dup:
            raise UsageError(f"attributes selected in more than one table: {sorted(dup)}")

    def neighbours(self, table: str):
        for e in self.edges:
            if e.left == table:
                yield e.right, e.left_key, e.right_key
            elif e.right == table:
                yield e.left, e.right_key, e.left_key

    def children(self, table: str, parent: str | None):
        """(child, own key column, child key column) for every tree child."""
        return [(nb, k, ck) for nb, k, ck in self.neighbours(table) if nb != parent]

    def space(self, tables: Mapping[str, Table]) -> AttrSpace:
        names, kinds = [], []
        for t in self.tables:
            sch = tables[t].schema
            for a in self.attrs.get(t, []):
                col = sch.column(a)
                if col.role != FEATURE:
                    raise UsageError(f"{t}.{a} is not a feature column")
                names.append(a)
                kinds.append(col.kind)
        return AttrSpace(tuple(names), tuple(kinds))

    @classmethod
    def parse(cls, text: str, base: Path | None = None) -> "JoinSpec":
        """Parse the line-oriented join spec format (see README)."""
        tables: list[str] = []
        edges: list[Edge] = []
        attrs: dict[str, list[str]] = {}
        paths: dict[str, tuple[Path, Path]] = {}
        base = Path(".") if base is None else base
        edge_re = re.compile(r"^(\w+)\.(\w+)\s*=\s*(\w+)\.(\w+)$")
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("table "):
                parts = line.split()
                if len(parts) not in (2, 4):
                    raise UsageError(f"join spec line {lineno}: expected 'table NAME [CSV SCHEMA]'")
                tables.append(parts[1])
                if len(parts) == 4:
                    paths[parts[1]] = (base / parts[2], base / parts[3])
            elif line.startswith("select "):
                head, _, rest = line[len("select "):].partition(":")
                attrs[head.strip()] = [a.strip() for a in rest.split(",") if a.strip()]
            else:
                m = edge_re.match(line)
                if not m:
                    raise UsageError(f"join spec line {lineno}: cannot parse {line!r}")
                edges.append(Edge(m.group(1), m.group(3), m.group(2), m.group(4)))
        spec = cls(tables, edges, attrs, paths)
        spec.validate()
        return spec

    @classmethod
    def load(cls, path) -> "JoinSpec":
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as e:
            raise UsageError(f"cannot read join spec {path}: {e}") from None
        return cls.parse(text, p.parent)

    def load_tables(self, sorted_dictionaries: bool = False) -> dict[str, Table]:
        out = {}
        for t in self.tables:
            if t not in self.paths:
                raise UsageError(f"join spec gives no CSV/schema for table {t!r}")
            csv_path, schema_path = self.paths[t]
            out[t] = load_csv(csv_path, Schema.load(schema_path), sorted_dictionaries)
        return out


# ---------------------------------------------------------------------------
# batched keyed triples


def _grams_by_group(D_fn, n: int, inv: np.ndarray, K: int, w: int,
                    chunk: int = 4096) -> np.ndarray:
    """Per-group Gram matrices of the rows produced by ``D_fn(row_ids)``."""
    out = np.zeros((K, w, w))
    if n == 0:
        return out
    order = np.argsort(inv, kind="stable")
    g_sorted = inv[order]
    if K * 64 <= n:
        bounds = np.flatnonzero(np.diff(g_sorted)) + 1
        starts = np.concatenate(([0], bounds))
        stops = np.concatenate((bounds, [n]))
        for lo, hi in zip(starts, stops):
            g = g_sorted[lo]
            for clo, chi in chunk_bounds(hi - lo, 1 << 16):
                D = D_fn(order[lo + clo:lo + chi])
                out[g] += D.T @ D
        return out
    for lo, hi in chunk_bounds(n, chunk):
        D = D_fn(order[lo:hi])
        O = (D[:, :, None] * D[:, None, :]).reshape(hi - lo, w * w)
        gs = g_sorted[lo:hi]
        starts = np.concatenate(([0], np.flatnonzero(np.diff(gs)) + 1))
        out[gs[starts]] += np.add.reduceat(O, starts, axis=0).reshape(-1, w, w)
    return out


@dataclass
class KeyedTriples:
    """Map from join-key tuple to partial triple, stored as a Gram batch.

    ``keys`` is ``(K, len(key_names))`` int64 in a key encoding shared with
    the tables being joined; ``grams[k]`` is the one-hot Gram matrix
    (intercept first) of group ``k`` under ``layout``.
    """

    key_names: tuple[str, ...]
    keys: np.ndarray
    grams: np.ndarray
    layout: DenseLayout

    def __len__(self) -> int:
        return len(self.keys)

    def __iter__(self):
        for k in self.keys:
            yield tuple(int(v) for v in k)

    def _pos(self, key) -> int:
        key = tuple(key) if isinstance(key, (tuple, list)) else (key,)
        hit = np.flatnonzero((self.keys == np.asarray(key)).all(axis=1))
        if hit.size == 0:
            raise KeyError(key)
        return int(hit[0])

    def __getitem__(self, key) -> Triple:
        return triple_from_gram(self.grams[self._pos(key)], self.layout)

    def __contains__(self, key) -> bool:
        try:
            self._pos(key)
        except KeyError:
            return False
        return True

    def items(self):
        for k, G in zip(self, self.grams):
            yield k, triple_from_gram(G, self.layout)

    def fold(self) -> Triple:
        if len(self) == 0:
            return Triple.zero(self.layout.space)
        return triple_from_gram(self.grams.sum(axis=0), self.layout)

    def regroup(self, names: Sequence[str]) -> "KeyedTriples":
        cols = [self.key_names.index(nm) for nm in names]
        sub = self.keys[:, cols]
        if len(sub) == 0:
            return KeyedTriples(tuple(names), sub, self.grams[:0], self.layout)
        uniq, inv = np.unique(sub, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        grams = np.zeros((len(uniq),) + self.grams.shape[1:])
        np.add.at(grams, inv, self.grams)
        return KeyedTriples(tuple(names), uniq, grams, self.layout)


def table_layout(table: Table, space: AttrSpace, attrs: Sequence[str], rows=None) -> DenseLayout:
    ids = tuple(space.index(a) for a in attrs)
    codes = {}
    for a, i in zip(attrs, ids):
        if space.is_categorical(i):
            col = table.columns[a] if rows is None else table.columns[a][rows]
            codes[i] = observed_codes(col)
    return DenseLayout(space, ids, codes)


def partial_aggregate(table: Table, group_keys: Sequence[str] | Mapping[str, np.ndarray],
                      attrs: Sequence[str], space: AttrSpace, rows=None) -> KeyedTriples:
    """``SELECT keys, SUM(lift(attrs)) FROM table GROUP BY keys``.

    ``group_keys`` is a list of key column names, or a mapping from key
    name to an already-encoded key array aligned with the table's rows.
    """
    if isinstance(group_keys, Mapping):
        key_names = tuple(group_keys)
        key_cols = [np.asarray(v) for v in group_keys.values()]
    else:
        key_names = tuple(group_keys)
        key_cols = [table.columns[k] for k in key_names]
    rows = np.arange(table.row_count) if rows is None else np.asarray(rows)
    layout = table_layout(table, space, attrs, rows)
    if len(rows) == 0:
        return KeyedTriples(key_names, np.zeros((0, len(key_names)), dtype=np.int64),
                            np.zeros((0, layout.width, layout.width)), layout)
    kmat = np.column_stack([c[rows] for c in key_cols]) if key_cols else np.zeros((len(rows), 0), np.int64)
    uniq, inv = np.unique(kmat, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    cols_by_attr = [None] * space.m
    for a in attrs:
        cols_by_attr[space.index(a)] = table.columns[a]

    def D_fn(local):
        return layout.expand(cols_by_attr, rows[local])

    grams = _grams_by_group(D_fn, len(rows), inv, len(uniq), layout.width)
    return KeyedTriples(key_names, uniq.astype(np.int64), grams, layout)


def _merge_layouts(a: DenseLayout, b: DenseLayout) -> DenseLayout:
    if set(a.attrs) & set(b.attrs):
        raise UsageError(f"combine operands share attributes "
                         f"{sorted(a.space.names[i] for i in set(a.attrs) & set(b.attrs))}")
    codes = dict(a.codes)
    codes.update(b.codes)
    return DenseLayout(a.space, a.attrs + b.attrs, codes)


def _mul_grams(Ga: np.ndarray, Gb: np.ndarray) -> np.ndarray:
    """Batched ring product of Gram-encoded triples over disjoint layouts."""
    K, wa, _ = Ga.shape
    wb = Gb.shape[1]
    w = wa + wb - 1
    na = Ga[:, 0, 0][:, None]
    nb = Gb[:, 0, 0][:, None]
    sa = Ga[:, 0, 1:]
    sb = Gb[:, 0, 1:]
    out = np.zeros((K, w, w))
    A = slice(1, wa)
    B = slice(wa, w)
    out[:, 0, 0] = na[:, 0] * nb[:, 0]
    out[:, 0, A] = nb * sa
    out[:, 0, B] = na * sb
    out[:, A, 0] = out[:, 0, A]
    out[:, B, 0] = out[:, 0, B]
    out[:, A, A] = nb[:, :, None] * Ga[:, 1:, 1:]
    out[:, B, B] = na[:, :, None] * Gb[:, 1:, 1:]
    out[:, A, B] = sa[:, :, None] * sb[:, None, :]
    out[:, B, A] = np.swapaxes(out[:, A, B], 1, 2)
    return out


def combine(left: KeyedTriples, right: KeyedTriples, on: str,
            output_key: Sequence[str] | str | None = None):
    """Join two keyed partials on ``on`` and multiply matching triples.

    ``right`` must be keyed by ``on`` alone. Keys missing on either side
    contribute nothing (inner join). With ``output_key`` the products are
    re-grouped by those left key columns; otherwise they are folded into a
    single :class:`Triple`.
    """
    if right.key_names != (on,):
        raise UsageError(f"right side must be keyed by {on!r} alone, got {right.key_names}")
    if on not in left.key_names:
        raise UsageError(f"left side has no key {on!r}")
    layout = _merge_layouts(left.layout, right.layout)
    col = left.key_names.index(on)
    rk = right.keys[:, 0]
    if len(rk):
        pos = np.minimum(np.searchsorted(rk, left.keys[:, col]), len(rk) - 1)
        hit = np.flatnonzero(rk[pos] == left.keys[:, col])
    else:
        pos = hit = np.zeros(0, dtype=np.int64)
    grams = _mul_grams(left.grams[hit], right.grams[pos[hit]])
    joined = KeyedTriples(left.key_names, left.keys[hit], grams, layout)
    if output_key is None:
        return joined.fold()
    names = (output_key,) if isinstance(output_key, str) else tuple(output_key)
    return joined.regroup(names)


def fold_root(table: Table, attrs: Sequence[str], space: AttrSpace,
              children: Sequence[tuple[np.ndarray, KeyedTriples]], rows=None,
              chunk: int = 1 << 16) -> Triple:
    """Fold ``lift(row) * child_1[key_1(row)] * ...`` over the rows of the root table.

    ``children`` pairs each child's per-row key codes with its partials keyed
    by those codes. Each block of the product's Gram matrix is a weighted
    Gram over the root rows (fact x fact, fact x child, child x child) or a
    count-weighted sum of the child's own blocks (child diagonal), so the
    join itself is never formed. Rows without a match in some child drop out.
    """
    rows = np.arange(table.row_count) if rows is None else np.asarray(rows)
    flayout = table_layout(table, space, attrs, rows)
    layout = flayout
    for _, kt in children:
        layout = _merge_layouts(layout, kt.layout)
    wf = flayout.width
    spans, lo = [], wf
    for _, kt in children:
        spans.append(slice(lo, lo + kt.layout.width - 1))
        lo += kt.layout.width - 1
    G = np.zeros((layout.width, layout.width))
    cols_by_attr = [None] * space.m
    for a in attrs:
        cols_by_attr[space.index(a)] = table.columns[a]
    counts = [np.zeros(len(kt)) for _, kt in children]
    for sel in row_blocks(len(rows), None, chunk):
        r = rows[sel]
        valid = np.ones(len(r), dtype=bool)
        pos = []
        for codes, kt in children:
            keys = kt.keys[:, 0]
            c = codes[r]
            if len(keys) == 0:
                valid[:] = False
                pos.append(np.zeros(len(r), dtype=np.int64))
                continue
            p = np.minimum(np.searchsorted(keys, c), len(keys) - 1)
            valid &= keys[p] == c
            pos.append(p)
        if not valid.any():
            continue
        r = r[valid]
        pos = [p[valid] for p in pos]
        D = flayout.expand(cols_by_attr, r)
        N = [kt.grams[p, 0, 0] for p, (_, kt) in zip(pos, children)]
        S = [kt.grams[p, 0, 1:] for p, (_, kt) in zip(pos, children)]

        def weight(skip: tuple[int, ...]) -> np.ndarray:
            w = np.ones(len(r))
            for k, n_k in enumerate(N):
                if k not in skip:
                    w = w * n_k
            return w

        G[:wf, :wf] += D.T @ (weight(())[:, None] * D)
        for c, span in enumerate(spans):
            cross = D.T @ (weight((c,))[:, None] * S[c])
            G[:wf, span] += cross
            counts[c] += np.bincount(pos[c], weights=weight((c,)), minlength=len(counts[c]))
            for e in range(c + 1, len(spans)):
                G[span, spans[e]] += (weight((c, e))[:, None] * S[c]).T @ S[e]
    for c, (span, (_, kt)) in enumerate(zip(spans, children)):
        G[span, span] += np.tensordot(counts[c], kt.grams[:, 1:, 1:], axes=1)
        for e in range(c + 1, len(spans)):
            G[spans[e], span] = G[span, spans[e]].T
        G[span, :wf] = G[:wf, span].T
    if G[0, 0] == 0:
        return Triple.zero(space)
    return triple_from_gram(G, layout)


# ---------------------------------------------------------------------------
# join-tree evaluation


class _KeyCodec:
    """Shared integer encoding of join-key values across tables."""

    def __init__(self, tables: Mapping[str, Table]):
        self.tables = tables
        self._cache: dict[tuple[str, str, str, str], tuple[np.ndarray, np.ndarray]] = {}

    def _raw(self, table: str, col: str) -> np.ndarray:
        t = self.tables[table]
        vals = t.columns[col]
        d = t.dictionaries.get(col)
        if d is not None:
            return np.asarray(d, dtype=object)[vals].astype(str)
        return vals

    def edge(self, lt: str, lk: str, rt: str, rk: str) -> tuple[np.ndarray, np.ndarray]:
        key = (lt, lk, rt, rk)
        if key not in self._cache:
            a, b = self._raw(lt, lk), self._raw(rt, rk)
            if a.dtype.kind != b.dtype.kind:
                a, b = a.astype(str), b.astype(str)
            _, inv = np.unique(np.concatenate([a, b]), return_inverse=True)
            inv = inv.reshape(-1).astype(np.int64)
            self._cache[key] = (inv[:len(a)], inv[len(a):])
        return self._cache[key]


def _check_tables(tables: Mapping[str, Table], spec: JoinSpec) -> None:
    spec.validate()
    for t in spec.tables:
        if t not in tables:
            raise UsageError(f"no table named {t!r}")
    for e in spec.edges:
        for t, k in ((e.left, e.left_key), (e.right, e.right_key)):
            if k not in tables[t].columns:
                raise UsageError(f"table {t!r} has no key column {k!r}")


def _evaluate(node: str, parent: str | None, parent_key: str | None, tables, spec, space,
              codec: _KeyCodec, rows_by_table: Mapping[str, np.ndarray] | None = None):
    table = tables[node]
    keys: dict[str, np.ndarray] = {}
    if parent is not None:
        own, ptable, pkey = parent_key
        keys["__up__"] = codec.edge(ptable, pkey, node, own)[1]
    kids = []
    for child, own_key, child_key in spec.children(node, parent):
        name = f"{node}.{own_key}->{child}"
        keys[name] = codec.edge(node, own_key, child, child_key)[0]
        kids.append((child, name, (child_key, node, own_key)))
    rows = None if rows_by_table is None else rows_by_table.get(node)
    part = partial_aggregate(table, keys, spec.attrs.get(node, []), space, rows)
    for k, (child, name, pk) in enumerate(kids):
        sub = _evaluate(child, node, pk, tables, spec, space, codec, rows_by_table)
        sub = KeyedTriples((name,), sub.keys, sub.grams, sub.layout)
        rest = [nm for nm in part.key_names if nm != name]
        part = combine(part, sub, name, rest)
    if parent is not None:
        return KeyedTriples(("__up__",), part.keys, part.grams, part.layout)
    return part


def aggregate_join(tables: Mapping[str, Table], spec: JoinSpec,
                   space: AttrSpace | None = None) -> Triple:
    """Cofactor triple of the natural join described by ``spec``, factorized."""
    _check_tables(tables, spec)
    space = spec.space(tables) if space is None else space
    codec = _KeyCodec(tables)
    root = spec.tables[0]
    return fold_root(tables[root], spec.attrs.get(root, []), space,
                     _root_children(root, tables, spec, space, codec))


def _root_children(root, tables, spec, space, codec):
    out = []
    for child, own_key, child_key in spec.children(root, None):
        sub = _evaluate(child, root, (child_key, root, own_key), tables, spec, space, codec)
        out.append((codec.edge(root, own_key, child, child_key)[0], sub))
    return out


def _join_index(lkeys: np.ndarray, rkeys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-index pairs of an equi-join (all matches, left order preserved)."""
    order = np.argsort(rkeys, kind="stable")
    rs = rkeys[order]
    lo = np.searchsorted(rs, lkeys, "left")
    hi = np.searchsorted(rs, lkeys, "right")
    cnt = hi - lo
    li = np.repeat(np.arange(len(lkeys)), cnt)
    within = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    ri = order[lo[li] + within]
    return li, ri


def materialize_join(tables: Mapping[str, Table], spec: JoinSpec) -> dict[str, np.ndarray]:
    """Row indices of every table in the materialized join, aligned per output row."""
    _check_tables(tables, spec)
    codec = _KeyCodec(tables)
    root = spec.tables[0]
    idx = {root: np.arange(tables[root].row_count)}
    queue = deque([(root, None)])
    while queue:
        node, parent = queue.popleft()
        for child, own_key, child_key in spec.children(node, parent):
            lk, rk = codec.edge(node, own_key, child, child_key)
            li, ri = _join_index(lk[idx[node]], rk)
            idx = {t: v[li] for t, v in idx.items()}
            idx[child] = ri
            queue.append((child, node))
    return idx


def materialized_columns(tables: Mapping[str, Table], spec: JoinSpec,
                         space: AttrSpace | None = None) -> tuple[AttrSpace, list[np.ndarray]]:
    space = spec.space(tables) if space is None else space
    idx = materialize_join(tables, spec)
    cols: list[np.ndarray] = [None] * space.m
    for t in spec.tables:
        for a in spec.attrs.get(t, []):
            cols[space.index(a)] = tables[t].columns[a][idx[t]]
    return space, cols


# ---------------------------------------------------------------------------
# data source for imputation over normalized data


class NormalizedData:
    """MICE data source over a star/snowflake join with missing values in the root only.

    Dimension partials are computed once; every aggregate over a subset of
    root rows re-groups only those rows and multiplies in the cached partials.
    """

    def __init__(self, tables: Mapping[str, Table], spec: JoinSpec):
        _check_tables(tables, spec)
        self.tables = dict(tables)
        self.spec = spec
        self.root = spec.tables[0]
        self.fact = self.tables[self.root]
        self.space = spec.space(self.tables)
        for t in spec.tables[1:]:
            tab = self.tables[t]
            for a in spec.attrs.get(t, []):
                if tab.masks[a].any():
                    raise DataError(f"dimension table {t!r} has missing values in {a!r}; "
                                    f"only the root table may be incomplete")
        self._codec = _KeyCodec(self.tables)
        self.fact_attrs = list(spec.attrs.get(self.root, []))
        self.attr_ids = {a: self.space.index(a) for a in self.fact_attrs}
        self._children = _root_children(self.root, self.tables, spec, self.space, self._codec)
        idx = materialize_join(self.tables, spec)
        n = self.fact.row_count
        if len(idx[self.root]) != n or not np.array_equal(idx[self.root], np.arange(n)):
            raise DataError("every root row must match exactly one row in each dimension "
                            "table to be imputed over the join")
        self._dim_rows = {t: idx[t] for t in spec.tables[1:]}
        self.columns: list[np.ndarray | None] = [None] * self.space.m
        for a in self.fact_attrs:
            self.columns[self.space.index(a)] = self.fact.columns[a]

    @property
    def n_rows(self) -> int:
        return self.fact.row_count

    def aggregate(self, rows=None, threads: int = 1) -> Triple:
        return fold_root(self.fact, self.fact_attrs, self.space, self._children, rows)

    def columns_at(self, rows) -> list[np.ndarray]:
        out: list[np.ndarray] = [None] * self.space.m
        for t in self.spec.tables:
            for a in self.spec.attrs.get(t, []):
                col = self.tables[t].columns[a]
                i = self.space.index(a)
                out[i] = col[rows] if t == self.root else col[self._dim_rows[t][rows]]
        return out

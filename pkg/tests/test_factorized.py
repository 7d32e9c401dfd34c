import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import max_rel_err
from ringmice.dataset import JOIN_KEY, Column, Schema, Table
from ringmice.errors import DataError, UsageError
from ringmice.factorized import (Edge, JoinSpec, NormalizedData, aggregate_join, combine,
                                 materialized_columns, partial_aggregate)
from ringmice.mice import MiceConfig, run, run_join
from ringmice.ring import CATEGORICAL, CONTINUOUS, AttrSpace, Relation, aggregate, to_dense


def make_table(spec_cols, data, masks=None):
    """``spec_cols`` is a list of (name, kind, role) tuples."""
    schema = Schema([Column(*c) for c in spec_cols])
    return Table.from_arrays(schema, data, masks)


def single(value):
    return Relation.scalar(value)


def test_partial_aggregate_example():
    t = make_table([("k", CATEGORICAL, JOIN_KEY), ("x", CONTINUOUS, "feature")],
                   {"k": [1, 1, 2], "x": [2.0, 4.0, 1.0]})
    sp = AttrSpace.of(("x", CONTINUOUS))
    kt = partial_aggregate(t, ["k"], ["x"], sp)
    assert sorted(kt) == [(1,), (2,)]
    one, two = kt[1], kt[2]
    assert (one.n, one.s[0], one.qij(0, 0)) == (single(2), single(6), single(20))
    assert (two.n, two.s[0], two.qij(0, 0)) == (single(1), single(1), single(1))


def test_partial_aggregate_empty_table():
    t = make_table([("k", CATEGORICAL, JOIN_KEY), ("x", CONTINUOUS, "feature")],
                   {"k": [], "x": []})
    kt = partial_aggregate(t, ["k"], ["x"], AttrSpace.of(("x", CONTINUOUS)))
    assert len(kt) == 0
    assert kt.fold().is_zero()


def fact_and_dim():
    sp = AttrSpace.of(("x", CONTINUOUS), ("z", CONTINUOUS))
    fact = make_table([("k", CATEGORICAL, JOIN_KEY), ("x", CONTINUOUS, "feature")],
                      {"k": [1, 1, 2, 3], "x": [2.0, 4.0, 1.0, 9.0]})
    dim = make_table([("k", CATEGORICAL, JOIN_KEY), ("z", CONTINUOUS, "feature")],
                     {"k": [1, 2, 5], "z": [10.0, 20.0, 30.0]})
    return sp, fact, dim


def test_combine_inner_join_semantics():
    sp, fact, dim = fact_and_dim()
    left = partial_aggregate(fact, ["k"], ["x"], sp)
    right = partial_aggregate(dim, ["k"], ["z"], sp)
    got = combine(left, right, "k")
    # key 3 (fact only) and key 5 (dim only) drop out
    want = aggregate([np.array([2.0, 4.0, 1.0]), np.array([10.0, 10.0, 20.0])], sp)
    assert got.isclose(want, rtol=1e-12)
    grouped = combine(left, right, "k", "k")
    assert sorted(grouped) == [(1,), (2,)]


def test_combine_rejects_overlap_and_bad_keys():
    sp, fact, dim = fact_and_dim()
    left = partial_aggregate(fact, ["k"], ["x"], sp)
    with pytest.raises(UsageError):
        combine(left, partial_aggregate(fact, ["k"], ["x"], sp), "k")
    with pytest.raises(UsageError):
        combine(left, partial_aggregate(dim, ["k"], ["z"], sp), "missing")


def test_key_only_dimension_acts_as_filter():
    sp, fact, _ = fact_and_dim()
    sp = AttrSpace.of(("x", CONTINUOUS))
    keys_only = make_table([("k", CATEGORICAL, JOIN_KEY)], {"k": [1, 3]})
    spec = JoinSpec(["fact", "keys"], [Edge("fact", "keys", "k", "k")], {"fact": ["x"]})
    got = aggregate_join({"fact": fact, "keys": keys_only}, spec, sp)
    assert got.isclose(aggregate([np.array([2.0, 4.0, 9.0])], sp), rtol=1e-12)


def snowflake(rng, n_fact=300, dup_dim=False):
    """fact -(s)- store -(r)- region, plus fact -(p)- product."""
    n_store, n_region, n_prod = 12, 4, 7
    store_keys = np.arange(n_store)
    if dup_dim:
        store_keys = np.concatenate([store_keys, [0, 3, 3]])
    tables = {
        "fact": make_table(
            [("s", CATEGORICAL, JOIN_KEY), ("p", CATEGORICAL, JOIN_KEY),
             ("x", CONTINUOUS, "feature"), ("c", CATEGORICAL, "feature")],
            {"s": rng.integers(0, n_store + 2, n_fact), "p": rng.integers(0, n_prod, n_fact),
             "x": rng.normal(size=n_fact), "c": rng.integers(0, 3, n_fact)}),
        "store": make_table(
            [("s", CATEGORICAL, JOIN_KEY), ("r", CATEGORICAL, JOIN_KEY), ("size", CONTINUOUS, "feature")],
            {"s": store_keys, "r": rng.integers(0, n_region, len(store_keys)),
             "size": rng.uniform(1, 5, len(store_keys))}),
        "region": make_table(
            [("r", CATEGORICAL, JOIN_KEY), ("zone", CATEGORICAL, "feature")],
            {"r": np.arange(n_region), "zone": rng.integers(0, 2, n_region)}),
        "product": make_table(
            [("p", CATEGORICAL, JOIN_KEY), ("price", CONTINUOUS, "feature")],
            {"p": np.arange(n_prod), "price": rng.uniform(5, 50, n_prod)}),
    }
    spec = JoinSpec(["fact", "store", "region", "product"],
                    [Edge("fact", "store", "s", "s"), Edge("store", "region", "r", "r"),
                     Edge("fact", "product", "p", "p")],
                    {"fact": ["x", "c"], "store": ["size"], "region": ["zone"], "product": ["price"]})
    spec.validate()
    return tables, spec


@pytest.mark.parametrize("dup_dim", [False, True])
def test_snowflake_matches_materialized(rng, dup_dim):
    tables, spec = snowflake(rng, dup_dim=dup_dim)
    got = to_dense(aggregate_join(tables, spec))
    space, cols = materialized_columns(tables, spec)
    want = to_dense(aggregate(cols, space))
    assert got.matrix.shape == want.matrix.shape
    assert max_rel_err(got.matrix, want.matrix) <= 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 80), st.booleans())
def test_factorized_equals_materialized_property(seed, n_fact, dup_dim):
    rng = np.random.default_rng(seed)
    tables, spec = snowflake(rng, n_fact=n_fact, dup_dim=dup_dim)
    space, cols = materialized_columns(tables, spec)
    want = aggregate(cols, space)
    got = aggregate_join(tables, spec)
    if want.is_zero():
        assert got.is_zero()
    else:
        assert max_rel_err(to_dense(got).matrix, to_dense(want).matrix) <= 1e-9


def test_cyclic_spec_rejected():
    spec_text = ("table a\ntable b\ntable c\n"
                 "a.k = b.k\nb.j = c.j\nc.i = a.i\n")
    with pytest.raises(UsageError, match="tree"):
        JoinSpec.parse(spec_text)


def test_spec_rejects_duplicate_attribute_and_unknown_table():
    with pytest.raises(UsageError):
        JoinSpec(["a", "b"], [Edge("a", "b", "k", "k")], {"a": ["x"], "b": ["x"]}).validate()
    with pytest.raises(UsageError):
        JoinSpec(["a", "b"], [Edge("a", "zz", "k", "k")], {}).validate()


def test_spec_parse(tmp_path):
    text = ("# star schema\n"
            "table flights flights.csv flights.schema\n"
            "table airports airports.csv airports.schema\n"
            "select flights: Dist, AirTime\n"
            "select airports: Elevation\n"
            "flights.origin = airports.code\n")
    spec = JoinSpec.parse(text, tmp_path)
    assert spec.tables == ["flights", "airports"]
    assert spec.edges == [Edge("flights", "airports", "origin", "code")]
    assert spec.attrs == {"flights": ["Dist", "AirTime"], "airports": ["Elevation"]}
    assert spec.paths["airports"] == (tmp_path / "airports.csv", tmp_path / "airports.schema")
    with pytest.raises(UsageError, match="line 1"):
        JoinSpec.parse("nonsense here\n")


def star_with_missing(rng, n=400):
    n_dim = 10
    dim = make_table([("d", CATEGORICAL, JOIN_KEY), ("w", CONTINUOUS, "feature"),
                      ("g", CATEGORICAL, "feature")],
                     {"d": np.arange(n_dim), "w": rng.normal(size=n_dim), "g": rng.integers(0, 3, n_dim)})
    d = rng.integers(0, n_dim, n)
    x = rng.normal(size=n)
    y = 2 * x + dim.columns["w"][d] + rng.normal(size=n) * 0.1
    mx = rng.random(n) < 0.15
    my = rng.random(n) < 0.15
    fact = make_table([("d", CATEGORICAL, JOIN_KEY), ("x", CONTINUOUS, "feature"),
                       ("y", CONTINUOUS, "feature")],
                      {"d": d, "x": np.where(mx, np.nan, x), "y": np.where(my, np.nan, y)},
                      {"x": mx, "y": my})
    spec = JoinSpec(["fact", "dim"], [Edge("fact", "dim", "d", "d")],
                    {"fact": ["x", "y"], "dim": ["w", "g"]})
    return {"fact": fact, "dim": dim}, spec


def materialized_table(tables, spec):
    space, cols = materialized_columns(tables, spec)
    fact = tables["fact"]
    schema = Schema([Column(nm, kd) for nm, kd in zip(space.names, space.kinds)])
    data = dict(zip(space.names, cols))
    masks = {a: fact.masks[a] for a in spec.attrs["fact"]}
    return Table.from_arrays(schema, data, masks)


@pytest.mark.parametrize("strategy", ["baseline", "low", "high"])
def test_run_join_matches_materialized_run(rng, strategy):
    tables, spec = star_with_missing(rng)
    cfg = MiceConfig(iterations=2, strategy=strategy, seed=3)
    joined, _ = run_join(tables, spec, cfg)
    flat, _ = run(materialized_table(tables, spec), cfg)
    for a in ("x", "y"):
        diff = np.max(np.abs(joined.columns[a] - flat.columns[a]))
        assert diff <= 1e-6 * (1 + np.max(np.abs(flat.columns[a])))


def test_normalized_data_rejects_incomplete_dimension(rng):
    tables, spec = star_with_missing(rng)
    dim = tables["dim"]
    dim.masks["w"][0] = True
    with pytest.raises(DataError, match="dimension"):
        NormalizedData(tables, spec)


def test_normalized_data_rejects_dangling_fact_rows(rng):
    tables, spec = star_with_missing(rng)
    tables["fact"].columns["d"][0] = 99
    with pytest.raises(DataError, match="exactly one"):
        NormalizedData(tables, spec)

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from ringmice.dataset import Column, Schema, Table
from ringmice.errors import DataError, UsageError
from ringmice.evalbench import (MAR, MCAR, MNAR, InjectionSpec, Scenario, SynthSpec, benchmark,
                                evaluate, fit_downstream, format_table, inject,
                                masking_probabilities, mean_impute, predict_downstream,
                                r2_score, split, synth, write_timings_csv)
from ringmice.models import predict_lda, train_lda
from ringmice.ring import aggregate


def complete_table(rng, n=2000):
    schema = Schema([Column("a"), Column("b"), Column("d")])
    return Table.from_arrays(schema, {"a": rng.normal(size=n), "b": rng.normal(size=n),
                                      "d": rng.normal(size=n)})


def test_mcar_count_within_binomial_bound():
    t = Table.from_arrays(Schema([Column("a")]), {"a": np.arange(10_000.0)})
    masked, truth = inject(t, InjectionSpec(MCAR, 0.2, ["a"], seed=11))
    assert 1880 <= int(masked.masks["a"].sum()) <= 2120
    assert np.array_equal(truth["a"], t.columns["a"])
    assert np.isnan(masked.columns["a"][masked.masks["a"]]).all()


def test_mar_masks_follow_driver(rng):
    t = complete_table(rng, 20_000)
    masked, _ = inject(t, InjectionSpec(MAR, 0.2, ["a", "b"], driver="d", seed=1))
    for name in ("a", "b"):
        m = masked.masks[name]
        assert t.columns["d"][m].mean() > t.columns["d"][~m].mean()
        assert abs(m.mean() - 0.2) <= 3 * math.sqrt(0.2 * 0.8 / 20_000) + 0.005
    assert not masked.masks["d"].any()


def test_mnar_masks_follow_own_value(rng):
    t = complete_table(rng, 20_000)
    masked, _ = inject(t, InjectionSpec(MNAR, 0.3, ["a"], seed=2))
    m = masked.masks["a"]
    assert t.columns["a"][m].mean() > t.columns["a"][~m].mean()


def test_rate_zero_masks_nothing(rng):
    t = complete_table(rng)
    for pattern, driver in ((MCAR, None), (MAR, "d"), (MNAR, None)):
        masked, _ = inject(t, InjectionSpec(pattern, 0.0, ["a"], driver=driver))
        assert not any(m.any() for m in masked.masks.values())


def test_injection_spec_validation(rng):
    with pytest.raises(UsageError):
        InjectionSpec(MAR, 0.2, ["a"])
    with pytest.raises(UsageError):
        InjectionSpec(MAR, 0.2, ["a", "d"], driver="d")
    with pytest.raises(UsageError):
        InjectionSpec(MCAR, 1.0, ["a"])
    with pytest.raises(UsageError):
        InjectionSpec("sometimes", 0.1)
    t = complete_table(rng)
    once, _ = inject(t, InjectionSpec(MCAR, 0.2, ["a"]))
    with pytest.raises(DataError):
        inject(once, InjectionSpec(MCAR, 0.2, ["a"]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 0.9), st.sampled_from([MCAR, MAR, MNAR]))
def test_injection_expectation_and_targets(seed, rate, pattern):
    rng = np.random.default_rng(seed)
    t = complete_table(rng, 3000)
    driver = "d" if pattern == MAR else None
    masked, _ = inject(t, InjectionSpec(pattern, rate, ["a"], driver=driver, seed=seed))
    assert not masked.masks["b"].any() and not masked.masks["d"].any()
    n = 3000
    assert abs(masked.masks["a"].mean() - rate) <= 4 * math.sqrt(rate * (1 - rate) / n)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 0.99))
def test_masking_probabilities_hit_rate(seed, rate):
    z = np.random.default_rng(seed).normal(size=500) * 3
    p = masking_probabilities(z, rate)
    assert abs(p.mean() - rate) <= 1e-9
    assert np.all((p >= 0) & (p <= 1))
    order = np.argsort(z)
    assert np.all(np.diff(p[order]) >= -1e-15)


def test_evaluate_perfect_imputation(rng):
    t = complete_table(rng)
    masked, truth = inject(t, InjectionSpec(MCAR, 0.3, ["a"], seed=4))
    perfect = masked.copy()
    perfect.columns["a"] = truth["a"].copy()
    rep = evaluate(perfect, truth)
    assert rep.cell_rmse == {"a": 0.0}
    assert rep.cell_rmse_pooled == 0.0


def test_evaluate_categorical_error_rate():
    schema = Schema([Column("c", "categorical"), Column("x")])
    t = Table.from_arrays(schema, {"c": [0, 1, 2, 1], "x": [1.0, 2.0, 3.0, 4.0]},
                          {"c": [True, True, False, False]})
    t.columns["c"][:2] = [0, 2]
    rep = evaluate(t, {"c": np.array([0, 1, 2, 1])})
    assert rep.cell_error_rate == {"c": 0.5}


def test_evaluate_is_row_order_invariant(rng):
    t = complete_table(rng)
    masked, truth = inject(t, InjectionSpec(MCAR, 0.3, ["a", "b"], seed=4))
    imputed = mean_impute(masked)
    perm = rng.permutation(t.row_count)
    shuffled = Table(imputed.schema, {k: v[perm] for k, v in imputed.columns.items()},
                     {k: v[perm] for k, v in imputed.masks.items()})
    a = evaluate(imputed, truth)
    b = evaluate(shuffled, {k: v[perm] for k, v in truth.items()})
    for name in ("a", "b"):
        assert a.cell_rmse[name] == pytest.approx(b.cell_rmse[name], rel=1e-12)


def test_constant_prediction_r2_not_positive():
    y = np.array([1.0, 2.0, 3.0, 4.0])
    assert r2_score(y, np.full(4, y.mean())) == pytest.approx(0.0, abs=1e-15)
    assert r2_score(y, np.full(4, 10.0)) < 0
    assert r2_score(y, y) == 1.0


def test_synth_deterministic():
    a = synth(500, SynthSpec(seed=3))
    b = synth(500, SynthSpec(seed=3))
    for name in a.schema.names:
        assert np.array_equal(a.columns[name], b.columns[name])
    c = synth(500, SynthSpec(seed=4))
    assert not np.array_equal(a.columns["y"], c.columns["y"])


def test_synth_realizes_requested_r2():
    t = synth(100_000, SynthSpec(seed=1))
    layout, theta = fit_downstream(t, "y")
    r2 = r2_score(t.columns["y"], predict_downstream(layout, theta, t))
    assert abs(r2 - 0.9) <= 0.03


def test_synth_zero_noise_is_collinear():
    t = synth(2000, SynthSpec(r2=1.0, seed=2))
    X = np.column_stack([np.ones(t.row_count)] + [t.columns[f"x{j}"] for j in range(6)]
                        + [t.columns["c0"] == k for k in range(3)])
    coef, *_ = np.linalg.lstsq(X, t.columns["y"], rcond=None)
    resid = t.columns["y"] - X @ coef
    assert np.max(np.abs(resid)) <= 1e-9 * np.max(np.abs(t.columns["y"]))


def lda_error_bound(spec: SynthSpec) -> float:
    """Bayes error of equally spaced classes along the shifted feature, other features used
    only to cancel the shared factor (an upper bound for the full-information classifier)."""
    rho, p, K = spec.feature_corr, spec.continuous, spec.classes
    idio = 1.0 - rho
    factor_left = rho * idio / (idio + (p - 1) * rho)
    gap = spec.separation * math.sqrt(idio) / math.sqrt(idio + factor_left)
    return 2 * (K - 1) / K * norm.cdf(-gap / 2)


def test_synth_classes_are_learnable():
    spec = SynthSpec(seed=5)
    train, test = split(synth(50_000, spec), 0.2, seed=1)
    sp = train.schema.attr_space()
    target = sp.index("c0")
    model = train_lda(aggregate(train.feature_columns(), sp), target)
    pred = predict_lda(model, test.feature_columns())
    acc = float(np.mean(pred == test.columns["c0"]))
    bound = lda_error_bound(spec)
    n = test.row_count
    assert acc >= 1 - bound - 3 * math.sqrt(bound * (1 - bound) / n)


def test_split_partitions_rows():
    t = synth(1000, SynthSpec(seed=0))
    train, test = split(t, 0.2, seed=3)
    assert train.row_count == 800 and test.row_count == 200
    merged = np.sort(np.concatenate([train.columns["y"], test.columns["y"]]))
    assert np.array_equal(merged, np.sort(t.columns["y"]))


def test_scenario_parse():
    sc = Scenario.parse("# timing\npattern = mar\nrate=0.6\nrows=2000\nstrategy = baseline, high\nseed=4\n")
    assert (sc.pattern, sc.rate, sc.rows, sc.strategies, sc.seed) == ("mar", 0.6, 2000, ["baseline", "high"], 4)
    with pytest.raises(UsageError):
        Scenario.parse("speed=11\n")
    with pytest.raises(UsageError):
        Scenario.parse("rows=lots\n")


def test_benchmark_small(tmp_path):
    sc = Scenario(rate=0.2, rows=2000, iterations=2, repetitions=3)
    rep = benchmark(sc)
    assert set(rep["strategies"]) == {"baseline", "low", "high"}
    for s in rep["strategies"].values():
        assert len(s["runs"]) == 3
        assert s["per_iteration"] > 0
    assert "baseline" in format_table(rep)
    write_timings_csv(rep, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0].startswith("strategy,per_iteration") and len(lines) == 4

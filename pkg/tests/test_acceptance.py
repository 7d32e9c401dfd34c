"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Sizes and tolerances are the stated ones; nothing here is scaled down.
"""

import math
import os
import statistics
import time

import numpy as np
import pytest

from conftest import max_rel_err, onehot_gram, random_table
from ringmice.cli import main as cli_main
from ringmice.dataset import JOIN_KEY, Column, Schema, Table, write_csv
from ringmice.evalbench import (MCAR, InjectionSpec, Scenario, SynthSpec, benchmark, evaluate,
                                inject, mean_impute, split, synth)
from ringmice.factorized import Edge, JoinSpec, aggregate_join, materialized_columns
from ringmice.mice import BASELINE, HIGH, LOW, MiceConfig, run
from ringmice.models import (GdConfig, loss_and_gradient, residual_variance, train_lda,
                             train_ridge)
from ringmice.ring import CATEGORICAL, CONTINUOUS, AttrSpace, aggregate, to_dense


# ---------------------------------------------------------------------------
# 1. ring oracle

def test_criterion_01_ring_oracle(verdict):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        m = int(rng.integers(1, 7))
        kinds = list(rng.choice([CONTINUOUS, CATEGORICAL], m))
        n = int(rng.integers(1, 1001))
        space, cols = random_table(rng, n, kinds, n_cat=int(rng.integers(1, 6)))
        got = to_dense(aggregate(cols, space)).matrix
        worst = max(worst, max_rel_err(got, onehot_gram(cols, space)))
    elapsed = time.perf_counter() - t0
    verdict(1, "ring oracle", worst <= 1e-9 and elapsed < 30,
            f"200 tables, max rel err {worst:.2e} (<= 1e-9), {elapsed:.1f}s (< 30s)")


# ---------------------------------------------------------------------------
# 2. factorized equivalence

def random_tree_join(rng):
    """Up to 4 tables in a random tree, up to 200 rows each, shared small key domains.

    The root always selects an attribute so the materialized oracle has a row count.
    """
    n_tables = int(rng.integers(1, 5))
    names = [f"t{i}" for i in range(n_tables)]
    cols_by_table = {nm: ([], {}) for nm in names}
    edges = []
    for i in range(1, n_tables):
        parent = names[int(rng.integers(0, i))]
        key = f"k{i}"
        edges.append(Edge(parent, names[i], key, key))
        for nm in (parent, names[i]):
            cols_by_table[nm][0].append(Column(key, CATEGORICAL, JOIN_KEY))
    domains = {f"k{i}": int(rng.integers(20, 61)) for i in range(1, n_tables)}
    attrs = {}
    tables = {}
    for t_idx, nm in enumerate(names):
        schema_cols, data = cols_by_table[nm]
        n = int(rng.integers(1, 201))
        for c in schema_cols:
            data[c.name] = rng.integers(0, domains[c.name], n)
        attrs[nm] = []
        for a in range(int(rng.integers(1 if t_idx == 0 else 0, 3))):
            aname = f"{nm}a{a}"
            if rng.random() < 0.5:
                schema_cols.append(Column(aname, CATEGORICAL))
                data[aname] = rng.integers(0, int(rng.integers(1, 6)), n)
            else:
                schema_cols.append(Column(aname))
                data[aname] = rng.normal(size=n) * rng.uniform(0.1, 10)
            attrs[nm].append(aname)
        tables[nm] = Table.from_arrays(Schema(schema_cols), data)
    return tables, JoinSpec(names, edges, attrs)


def test_criterion_02_factorized_equivalence(verdict):
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    worst, empty = 0.0, 0
    for _ in range(100):
        tables, spec = random_tree_join(rng)
        got = aggregate_join(tables, spec)
        space, cols = materialized_columns(tables, spec)
        want = aggregate(cols, space)
        if want.is_zero():
            empty += 1
            worst = max(worst, 0.0 if got.is_zero() else math.inf)
            continue
        worst = max(worst, max_rel_err(to_dense(got).matrix, to_dense(want).matrix))
    elapsed = time.perf_counter() - t0
    verdict(2, "factorized equivalence", worst <= 1e-9 and elapsed < 30,
            f"100 tree joins ({empty} empty), max rel err {worst:.2e} (<= 1e-9), "
            f"{elapsed:.1f}s (< 30s)")


# ---------------------------------------------------------------------------
# 3. regression oracle

def test_criterion_03_regression_oracle(verdict):
    rng = np.random.default_rng(303)
    worst_fit = worst_grad = 0.0
    for _ in range(50):
        p = int(rng.integers(1, 6))
        n = int(rng.integers(50, 500))
        names = tuple(f"x{j}" for j in range(p)) + ("y",)
        sp = AttrSpace(names, (CONTINUOUS,) * (p + 1))
        X = rng.normal(size=(n, p)) * rng.uniform(0.5, 2.0, p) + rng.normal(size=p)
        y = X @ rng.normal(size=p) + rng.normal() + rng.normal(size=n) * 0.5
        C = to_dense(aggregate([*X.T, y], sp))
        ridge = float(rng.uniform(1e-4, 1e-2))
        model = train_ridge(C, p, GdConfig(ridge=ridge))
        A = np.column_stack([np.ones(n), X])
        reg = np.eye(p + 1) * n * ridge
        reg[0, 0] = 0.0
        want = np.linalg.solve(A.T @ A + reg, A.T @ y)
        worst_fit = max(worst_fit, np.max(np.abs(model.coefficients - want)) / np.max(np.abs(want)))

        penalized = np.ones(p + 2)
        penalized[0] = 0.0
        theta = rng.normal(size=p + 2)
        _, grad = loss_and_gradient(C.matrix, theta, C.count, ridge, penalized)
        fd = np.empty_like(theta)
        h = 1e-5
        for k in range(len(theta)):
            step = np.zeros_like(theta)
            step[k] = h
            fd[k] = (loss_and_gradient(C.matrix, theta + step, C.count, ridge, penalized)[0]
                     - loss_and_gradient(C.matrix, theta - step, C.count, ridge, penalized)[0]) / (2 * h)
        worst_grad = max(worst_grad, np.max(np.abs(grad - fd)) / max(np.max(np.abs(grad)), 1e-12))
    verdict(3, "regression oracle", worst_fit <= 1e-3 and worst_grad <= 1e-5,
            f"50 problems, coefficient rel err {worst_fit:.2e} (<= 1e-3), "
            f"gradient vs finite differences {worst_grad:.2e} (<= 1e-5)")


# ---------------------------------------------------------------------------
# 4. residual variance oracle

def test_criterion_04_residual_variance(verdict):
    rng = np.random.default_rng(404)
    worst = 0.0
    for _ in range(50):
        sp = AttrSpace.of(("a", CONTINUOUS), ("c", CATEGORICAL), ("b", CONTINUOUS), ("y", CONTINUOUS))
        n = int(rng.integers(20, 400))
        cols = [rng.normal(size=n), rng.integers(0, 4, n), rng.normal(size=n) * 3, rng.normal(size=n)]
        C = to_dense(aggregate(cols, sp))
        theta = rng.normal(size=C.matrix.shape[0])
        theta[C.layout.offsets[3]] = -1.0
        resid = C.layout.expand(cols) @ theta
        want = float(resid @ resid) / n
        worst = max(worst, abs(residual_variance(C, theta) - want) / want)
    line = to_dense(aggregate([np.array([1.0, 2.0, 3.0]), np.array([2.0, 4.0, 6.0])],
                              AttrSpace.of(("x", CONTINUOUS), ("y", CONTINUOUS))))
    perfect = residual_variance(line, np.array([0.0, 2.0, -1.0]))
    verdict(4, "residual variance oracle", worst <= 1e-9 and perfect == 0.0,
            f"50 problems, rel err {worst:.2e} (<= 1e-9), perfect fit gives {float(perfect)!r}")


# ---------------------------------------------------------------------------
# 5. LDA oracle

def test_criterion_05_lda_oracle(verdict):
    rng = np.random.default_rng(505)
    worst = 0.0
    for _ in range(30):
        n = int(rng.integers(50, 800))
        k = int(rng.integers(2, 5))
        y = rng.integers(0, k, n)
        y[:k] = np.arange(k)
        sp = AttrSpace.of(("a", CONTINUOUS), ("c", CATEGORICAL), ("b", CONTINUOUS), ("y", CATEGORICAL))
        cols = [rng.normal(size=n) + y, rng.integers(0, 3, n), rng.normal(size=n) * 2 - y, y]
        model = train_lda(aggregate(cols, sp), 3)
        X = model.layout.expand(cols)[:, 1:]
        classes = np.unique(y)
        priors = np.array([np.mean(y == c) for c in classes])
        means = np.array([X[y == c].mean(axis=0) for c in classes])
        centred = X - means[np.searchsorted(classes, y)]
        sigma = centred.T @ centred / n
        for got, want in ((model.priors, priors), (model.means, means), (model.sigma, sigma)):
            worst = max(worst, np.max(np.abs(got - want)) / np.max(np.abs(want)))
    toy = train_lda(aggregate([np.array([1.0, 2.0, 4.0, 6.0]), np.array([0, 0, 1, 1])],
                              AttrSpace.of(("x", CONTINUOUS), ("y", CATEGORICAL))), 1)
    boundary = (toy.b[0] - toy.b[1]) / (toy.a[1, 0] - toy.a[0, 0])
    toy_ok = (np.allclose(toy.priors, [0.5, 0.5], atol=5e-5)
              and np.allclose(toy.means[:, 0], [1.5, 5.0], atol=5e-5)
              and abs(toy.sigma[0, 0] - 0.625) <= 5e-5 and abs(boundary - 3.25) <= 5e-5)
    verdict(5, "LDA oracle", worst <= 1e-9 and toy_ok,
            f"30 problems, max rel err {worst:.2e} (<= 1e-9); 4-row example "
            f"pi={np.round(toy.priors, 4).tolist()} mu={np.round(toy.means[:, 0], 4).tolist()} "
            f"sigma={toy.sigma[0, 0]:.4f} boundary={boundary:.4f}")


# ---------------------------------------------------------------------------
# 6. cross-strategy MICE equivalence

def incomplete_table(rng, rows, rate):
    latent = rng.normal(size=rows)
    kinds = [CONTINUOUS, CONTINUOUS, CATEGORICAL, CONTINUOUS, CATEGORICAL, CONTINUOUS]
    cols, data, masks = [], {}, {}
    for i, kind in enumerate(kinds):
        name = f"a{i}"
        cols.append(Column(name, kind))
        if kind == CATEGORICAL:
            v = np.digitize(latent + rng.normal(size=rows), [-0.7, 0.0, 0.7])
        else:
            v = latent * rng.uniform(0.5, 2) + rng.normal(size=rows)
        m = rng.random(rows) < rate
        data[name] = np.where(m, -1, v) if kind == CATEGORICAL else np.where(m, np.nan, v)
        masks[name] = m
    return Table.from_arrays(Schema(cols), data, masks)


def test_criterion_06_cross_strategy_equivalence(verdict):
    rng = np.random.default_rng(606)
    worst, audits = 0.0, []
    for rate in (0.05, 0.2, 0.6):
        t = incomplete_table(rng, 5000, rate)
        outs = {}
        for strategy in (BASELINE, LOW, HIGH):
            out, report = run(t, MiceConfig(iterations=5, strategy=strategy, seed=6, audit=True))
            outs[strategy] = np.column_stack([c.astype(float) for c in out.feature_columns()])
            if strategy == LOW:
                audits.extend(report["audit"])
        base = outs[BASELINE]
        scale = np.maximum(np.abs(base), 1.0)
        for strategy in (LOW, HIGH):
            worst = max(worst, float(np.max(np.abs(outs[strategy] - base) / scale)))
    verdict(6, "cross-strategy equivalence", worst <= 1e-6 and all(audits) and len(audits) == 15,
            f"rates 5/20/60% on 5000x6, max rel cell diff {worst:.2e} (<= 1e-6), "
            f"low audit {sum(audits)}/{len(audits)} iterations")


# ---------------------------------------------------------------------------
# 7. imputation quality against mean imputation

def quality_run(seed):
    data = synth(100_000, SynthSpec(seed=seed))
    train, test = split(data, 0.2, seed=seed)
    masked, truth = inject(train, InjectionSpec(MCAR, 0.2, ["x0", "x1", "x2", "c0"], seed=seed))
    mice_out, _ = run(masked, MiceConfig(iterations=5, seed=seed))
    mice_q = evaluate(mice_out, truth, test, "y")
    mean_q = evaluate(mean_impute(masked), truth, test, "y")
    return mice_q, mean_q


def test_criterion_07_quality(verdict):
    t0 = time.perf_counter()
    results = [quality_run(seed) for seed in (1, 2, 3)]
    elapsed = time.perf_counter() - t0
    ratio = statistics.median(m.cell_rmse_pooled / b.cell_rmse_pooled for m, b in results)
    mice_down = statistics.median(m.downstream_rmse for m, _ in results)
    mean_down = statistics.median(b.downstream_rmse for _, b in results)
    passed = ratio <= 0.6 and mice_down < mean_down and elapsed < 120
    verdict(7, "quality vs mean imputation", passed,
            f"median cell RMSE ratio {ratio:.3f} (<= 0.6), downstream RMSE "
            f"{mice_down:.4f} vs {mean_down:.4f} (strictly lower), {elapsed:.1f}s (< 120s)")


# ---------------------------------------------------------------------------
# 8 and 9. timing on 10^6 x 8

@pytest.mark.slow
def test_criterion_08_low_rate_speedup(verdict):
    t0 = time.perf_counter()
    sc = Scenario(rate=0.05, rows=1_000_000, strategies=[BASELINE, LOW], iterations=3, repetitions=3)
    rep = benchmark(sc)["strategies"]
    base, low = rep[BASELINE]["per_iteration"], rep[LOW]["per_iteration"]
    elapsed = time.perf_counter() - t0
    verdict(8, "low-rate sharing speedup", low <= 0.6 * base and elapsed < 600,
            f"per-iteration median baseline {base:.3f}s, low {low:.3f}s, "
            f"ratio {low / base:.3f} (<= 0.6), {elapsed:.0f}s (< 600s)")


@pytest.mark.slow
def test_criterion_09_high_rate_strategy(verdict):
    sc = Scenario(rate=0.6, rows=1_000_000, strategies=[BASELINE, HIGH], iterations=3, repetitions=3)
    rep = benchmark(sc)["strategies"]
    base, high = rep[BASELINE]["per_iteration"], rep[HIGH]["per_iteration"]
    verdict(9, "high-rate strategy", high <= base,
            f"per-iteration median baseline {base:.3f}s, high {high:.3f}s, ratio {high / base:.3f} (<= 1)")


# ---------------------------------------------------------------------------
# 10. determinism across thread counts

def test_criterion_10_thread_determinism(tmp_path, verdict):
    data = synth(300_000, SynthSpec(seed=10))
    masked, _ = inject(data, InjectionSpec(MCAR, 0.2, ["x0", "x1", "x2", "x3", "c0"], seed=10))
    write_csv(masked, tmp_path / "in.csv")
    (tmp_path / "in.schema").write_text(masked.schema.dumps(), encoding="utf-8")
    threads = max(4, os.cpu_count() or 1)
    outputs = {}
    for strategy in (BASELINE, LOW, HIGH):
        for n in (1, threads):
            out = tmp_path / f"{strategy}_{n}.csv"
            code = cli_main(["impute", "--input", str(tmp_path / "in.csv"),
                             "--schema", str(tmp_path / "in.schema"), "--output", str(out),
                             "--strategy", strategy, "--iterations", "2", "--seed", "10",
                             "--threads", str(n)])
            assert code == 0
            outputs[strategy, n] = out.read_bytes()
    same = all(outputs[s, 1] == outputs[s, threads] for s in (BASELINE, LOW, HIGH))
    verdict(10, "thread determinism", same,
            f"impute CSV bytes identical for --threads 1 vs {threads} under baseline/low/high: {same}")

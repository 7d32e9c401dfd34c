"""Missing-value injection and synthetic data, plus quality metrics and timing benchmarks."""

from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import FEATURE, JOIN_KEY, Column, Schema, Table, initial_impute
from .errors import DataError, UsageError
from .models import solve_spd
from .ring import CATEGORICAL, CONTINUOUS, DenseLayout, aggregate, data_layout, to_dense

MCAR = "mcar"
MAR = "mar"
MNAR = "mnar"
PATTERNS = (MCAR, MAR, MNAR)


# ---------------------------------------------------------------------------
# injection


@dataclass
class InjectionSpec:
    pattern: str = MCAR
    rate: float = 0.2
    targets: list[str] = field(default_factory=list)
    driver: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise UsageError(f"unknown pattern {self.pattern!r}; choose from {PATTERNS}")
        if not 0.0 <= self.rate < 1.0:
            raise UsageError(f"rate must lie in [0, 1), got {self.rate}")
        if self.pattern == MAR:
            if self.driver is None:
                raise UsageError("MAR injection needs a driver column")
            if self.driver in self.targets:
                raise UsageError("the MAR driver must not be a target column")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _standardize(v: np.ndarray) -> np.ndarray:
    v = v.astype(float)
    sd = v.std()
    return np.zeros_like(v) if sd == 0 else (v - v.mean()) / sd


def masking_probabilities(z: np.ndarray, rate: float) -> np.ndarray:
    """``clip(c * sigmoid(2z), 0, 1)`` with ``c`` chosen so the mean equals ``rate``.

    ``c`` starts at ``rate / mean(sigmoid(2z))``; when clipping lowers the
    mean below ``rate`` it is raised by bisection.
    """
    if rate == 0.0:
        return np.zeros(len(z))
    s = _sigmoid(2.0 * z)
    c = rate / s.mean()
    p = np.clip(c * s, 0.0, 1.0)
    if p.mean() >= rate * (1 - 1e-12):
        return p
    lo, hi = c, c
    while np.clip(hi * s, 0.0, 1.0).mean() < rate:
        hi *= 2.0
        if hi > 1e300:
            raise DataError(f"masking rate {rate} is not reachable")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.clip(mid * s, 0.0, 1.0).mean() < rate:
            lo = mid
        else:
            hi = mid
    return np.clip(hi * s, 0.0, 1.0)


def inject(t: Table, spec: InjectionSpec) -> tuple[Table, dict[str, np.ndarray]]:
    """Mask target cells; returns the masked table and the original target columns."""
    targets = spec.targets or [t.schema.columns[i].name for i in t.schema.features]
    for name in targets + ([spec.driver] if spec.driver else []):
        col = t.schema.column(name)
        if col.role != FEATURE:
            raise UsageError(f"{name!r} is not a feature column")
        if t.masks[name].any():
            raise DataError(f"column {name!r} already has missing values; inject needs complete input")
    rng = np.random.default_rng(spec.seed)
    out = t.copy()
    truth = {}
    n = t.row_count
    driver_z = _standardize(t.columns[spec.driver]) if spec.pattern == MAR else None
    for name in targets:
        u = rng.random(n)
        if spec.pattern == MCAR:
            p = np.full(n, spec.rate)
        elif spec.pattern == MAR:
            p = masking_probabilities(driver_z, spec.rate)
        else:
            p = masking_probabilities(_standardize(t.columns[name]), spec.rate)
        mask = u < p
        truth[name] = t.columns[name].copy()
        out.masks[name] = mask
        vals = out.columns[name]
        if t.schema.column(name).kind == CONTINUOUS:
            vals[mask] = np.nan
        else:
            vals[mask] = -1
    return out, truth


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthSpec:
    """Latent one-factor features, class-shifted categoricals and a linear target.

    Continuous features share a common factor with correlation
    ``feature_corr``. Each categorical column's class shifts one continuous
    feature by ``separation * c`` idiosyncratic standard deviations. The
    target is ``y = X beta + noise`` with noise scaled so that the population
    R^2 equals ``r2``.
    """

    continuous: int = 6
    categorical: int = 1
    classes: int = 3
    feature_corr: float = 0.9
    separation: float = 4.0
    r2: float = 0.9
    seed: int = 0
    target: str = "y"

    def __post_init__(self):
        if self.continuous < 1:
            raise UsageError("synth needs at least one continuous feature")
        if not 0.0 <= self.feature_corr < 1.0:
            raise UsageError("feature_corr must lie in [0, 1)")
        if not 0.0 < self.r2 <= 1.0:
            raise UsageError("r2 must lie in (0, 1]")
        if self.classes < 2:
            raise UsageError("categorical columns need at least 2 classes")


def synth_schema(spec: SynthSpec) -> Schema:
    cols = [Column(f"x{j}") for j in range(spec.continuous)]
    cols += [Column(f"c{k}", CATEGORICAL) for k in range(spec.categorical)]
    cols.append(Column(spec.target))
    return Schema(cols)


def synth(rows: int, spec: SynthSpec | None = None) -> Table:
    spec = SynthSpec() if spec is None else spec
    rng = np.random.default_rng(spec.seed)
    rho = spec.feature_corr
    factor = rng.standard_normal(rows)
    X = math.sqrt(rho) * factor[:, None] + math.sqrt(1.0 - rho) * rng.standard_normal((rows, spec.continuous))
    cats = []
    for k in range(spec.categorical):
        c = rng.integers(0, spec.classes, rows)
        X[:, k % spec.continuous] += spec.separation * math.sqrt(1.0 - rho) * c
        cats.append(c)
    beta = rng.uniform(0.5, 1.5, spec.continuous) * rng.choice([-1.0, 1.0], spec.continuous)
    signal = X @ beta
    for k, c in enumerate(cats):
        signal = signal + 0.5 * (k + 1) * c
    noise = rng.standard_normal(rows)
    if spec.r2 < 1.0:
        sd = math.sqrt(signal.var() * (1.0 - spec.r2) / spec.r2)
        y = signal + sd * noise
    else:
        y = signal
    columns = {f"x{j}": X[:, j] for j in range(spec.continuous)}
    columns.update({f"c{k}": c for k, c in enumerate(cats)})
    columns[spec.target] = y
    return Table.from_arrays(synth_schema(spec), columns)


def split(t: Table, test_fraction: float = 0.2, seed: int = 0) -> tuple[Table, Table]:
    """Random row split into (train, test)."""
    if not 0.0 < test_fraction < 1.0:
        raise UsageError("test_fraction must lie in (0, 1)")
    n = t.row_count
    perm = np.random.default_rng(seed).permutation(n)
    n_test = int(round(n * test_fraction))
    test_rows, train_rows = np.sort(perm[:n_test]), np.sort(perm[n_test:])

    def take(rows):
        return Table(t.schema, {k: v[rows].copy() for k, v in t.columns.items()},
                     {k: v[rows].copy() for k, v in t.masks.items()},
                     {k: list(v) for k, v in t.dictionaries.items()})

    return take(train_rows), take(test_rows)


# ---------------------------------------------------------------------------
# quality metrics


@dataclass
class QualityReport:
    cell_rmse: dict[str, float]
    cell_error_rate: dict[str, float]
    cell_rmse_pooled: float
    downstream_rmse: float
    downstream_r2: float
    runtime: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def fit_downstream(train: Table, target: str, ridge: float = 1e-6):
    """Closed-form ridge of ``target`` on every other feature; returns (layout, theta)."""
    sp = train.schema.attr_space()
    cols = train.feature_columns()
    C = to_dense(aggregate(cols, sp))
    layout = C.layout
    t = layout.offsets[sp.index(target)]
    keep = [k for k in range(layout.width) if k != t]
    n = C.count
    A = C.matrix[np.ix_(keep, keep)]
    reg = n * ridge * np.ones(len(keep))
    reg[0] = 0.0
    theta = solve_spd(A + np.diag(reg), C.matrix[keep, t])
    full = np.zeros(layout.width)
    full[keep] = theta
    return layout, full


def predict_downstream(layout: DenseLayout, theta: np.ndarray, t: Table) -> np.ndarray:
    return layout.expand(t.feature_columns()) @ theta


def r2_score(y: np.ndarray, pred: np.ndarray) -> float:
    sst = float(np.sum((y - y.mean()) ** 2))
    sse = float(np.sum((y - pred) ** 2))
    return 1.0 - sse / sst if sst > 0 else (1.0 if sse == 0 else -math.inf)


def evaluate(imputed: Table, truth: dict[str, np.ndarray], test: Table | None = None,
             target: str | None = None) -> QualityReport:
    """Cell metrics at originally-masked positions plus an optional downstream fit.

    ``cell_rmse_pooled`` divides each column's errors by that column's
    ground-truth standard deviation before pooling all masked cells.
    """
    rmse, err = {}, {}
    pooled_sse, pooled_n = 0.0, 0
    for name, true in truth.items():
        mask = imputed.masks[name]
        if not mask.any():
            continue
        got = imputed.columns[name][mask]
        want = true[mask]
        if imputed.schema.column(name).kind == CONTINUOUS:
            d = got - want
            rmse[name] = float(np.sqrt(np.mean(d * d)))
            sd = float(true.std()) or 1.0
            pooled_sse += float(np.sum((d / sd) ** 2))
            pooled_n += int(mask.sum())
        else:
            err[name] = float(np.mean(got != want))
    pooled = math.sqrt(pooled_sse / pooled_n) if pooled_n else 0.0
    d_rmse = d_r2 = math.nan
    if test is not None and target is not None:
        layout, theta = fit_downstream(imputed, target)
        y = test.columns[target]
        pred = predict_downstream(layout, theta, test)
        d_rmse = float(np.sqrt(np.mean((y - pred) ** 2)))
        d_r2 = r2_score(y, pred)
    return QualityReport(rmse, err, pooled, d_rmse, d_r2)


def mean_impute(t: Table) -> Table:
    """Mean/mode imputation (the quality reference)."""
    return initial_impute(t)


# ---------------------------------------------------------------------------
# benchmark harness


@dataclass
class Scenario:
    """One benchmark configuration; ``strategies`` are timed on identical data."""

    pattern: str = MCAR
    rate: float = 0.05
    rows: int = 100_000
    columns: int = 8
    incomplete: int = 7
    strategies: list[str] = field(default_factory=lambda: ["baseline", "low", "high"])
    iterations: int = 1
    repetitions: int = 3
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.columns < 3:
            raise UsageError("a scenario needs at least 3 columns")
        if not 1 <= self.incomplete < self.columns:
            raise UsageError("incomplete must lie in [1, columns)")
        if self.repetitions < 1 or self.iterations < 1 or self.rows < 1:
            raise UsageError("rows, iterations and repetitions must be positive")

    @classmethod
    def parse(cls, text: str) -> "Scenario":
        """``key=value`` lines; ``strategies`` (or ``strategy``) is a comma list."""
        kinds = {f.name: f.type for f in fields(cls)}
        kw: dict = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = (p.strip() for p in line.partition("="))
            if not sep:
                raise UsageError(f"scenario line {lineno}: expected key=value")
            if key == "strategy":
                key = "strategies"
            if key not in kinds:
                raise UsageError(f"scenario line {lineno}: unknown key {key!r}")
            try:
                if key == "strategies":
                    kw[key] = [s.strip() for s in val.split(",") if s.strip()]
                elif key == "pattern":
                    kw[key] = val
                elif key == "rate":
                    kw[key] = float(val)
                else:
                    kw[key] = int(float(val))
            except ValueError:
                raise UsageError(f"scenario line {lineno}: bad value {val!r} for {key}") from None
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "Scenario":
        try:
            return cls.parse(Path(path).read_text(encoding="utf-8"))
        except OSError as e:
            raise UsageError(f"cannot read scenario {path}: {e}") from None


def scenario_table(sc: Scenario) -> tuple[Table, dict[str, np.ndarray]]:
    """Synthetic table for a scenario with missing values injected."""
    spec = SynthSpec(continuous=sc.columns - 2, categorical=1, seed=sc.seed)
    t = synth(sc.rows, spec)
    feats = [t.schema.columns[i].name for i in t.schema.features]
    targets = feats[:sc.incomplete]
    driver = feats[-1] if sc.pattern == MAR else None
    return inject(t, InjectionSpec(sc.pattern, sc.rate, targets, driver, sc.seed + 1))


def benchmark(sc: Scenario, table: Table | None = None) -> dict:
    """Time each strategy ``repetitions`` times; report medians per phase and per iteration."""
    from .mice import MiceConfig, run

    t = scenario_table(sc)[0] if table is None else table
    out = {"scenario": asdict(sc), "strategies": {}}
    for strategy in sc.strategies:
        reps = []
        for _ in range(sc.repetitions):
            cfg = MiceConfig(iterations=sc.iterations, strategy=strategy, seed=sc.seed,
                             threads=sc.threads)
            t0 = time.perf_counter()
            _, rep = run(t, cfg)
            wall = time.perf_counter() - t0
            reps.append({"wall": wall, "timings": rep["timings"],
                         "per_iteration": statistics.fmean(rep["iteration_times"]),
                         "resolved": rep["strategy"]})
        out["strategies"][strategy] = {
            "resolved": reps[0]["resolved"],
            "per_iteration": statistics.median(r["per_iteration"] for r in reps),
            "wall": statistics.median(r["wall"] for r in reps),
            "phases": {p: statistics.median(r["timings"][p] for r in reps)
                       for p in reps[0]["timings"]},
            "runs": reps,
        }
    return out


def format_table(report: dict) -> str:
    """Plain-text phase table of a benchmark report."""
    strategies = report["strategies"]
    phases = list(next(iter(strategies.values()))["phases"]) if strategies else []
    head = ["strategy", "per_iter"] + phases + ["wall"]
    lines = ["  ".join(f"{h:>14}" for h in head)]
    for name, s in strategies.items():
        vals = [s["per_iteration"]] + [s["phases"][p] for p in phases] + [s["wall"]]
        lines.append("  ".join([f"{name:>14}"] + [f"{v:14.4f}" for v in vals]))
    return "\n".join(lines)


def write_timings_csv(report: dict, path) -> None:
    strategies = report["strategies"]
    phases = list(next(iter(strategies.values()))["phases"]) if strategies else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "per_iteration"] + phases + ["wall"])
        for name, s in strategies.items():
            w.writerow([name, repr(s["per_iteration"])] + [repr(s["phases"][p]) for p in phases]
                       + [repr(s["wall"])])


# ---------------------------------------------------------------------------
# factorized vs materialized timing


def star_tables(fact_rows: int, dim_fraction: float = 0.01, dims: int = 2, seed: int = 0):
    """Star schema: one fact table, ``dims`` dimension tables of ~``dim_fraction`` its size."""
    from .factorized import Edge, JoinSpec

    rng = np.random.default_rng(seed)
    n_dim = max(1, int(fact_rows * dim_fraction))
    tables, edges, attrs = {}, [], {}
    fact_cols = {"f0": rng.standard_normal(fact_rows), "f1": rng.standard_normal(fact_rows)}
    fact_schema = [Column("f0"), Column("f1")]
    for d in range(dims):
        key = f"k{d}"
        fact_cols[key] = rng.integers(0, n_dim, fact_rows)
        fact_schema.append(Column(key, CONTINUOUS, JOIN_KEY))
        dcols = {key: np.arange(n_dim), f"d{d}a": rng.standard_normal(n_dim),
                 f"d{d}c": rng.integers(0, 4, n_dim)}
        dschema = Schema([Column(key, CONTINUOUS, JOIN_KEY), Column(f"d{d}a"),
                          Column(f"d{d}c", CATEGORICAL)])
        tables[f"dim{d}"] = Table.from_arrays(dschema, dcols)
        edges.append(Edge("fact", f"dim{d}", key, key))
        attrs[f"dim{d}"] = [f"d{d}a", f"d{d}c"]
    tables["fact"] = Table.from_arrays(Schema(fact_schema), fact_cols)
    attrs["fact"] = ["f0", "f1"]
    spec = JoinSpec(["fact"] + [f"dim{d}" for d in range(dims)], edges, attrs)
    return tables, spec


def benchmark_join(fact_rows: int, repetitions: int = 3, seed: int = 0) -> dict:
    """Median times of factorized vs materialize-then-aggregate, plus an equality check."""
    from .factorized import aggregate_join, materialized_columns

    tables, spec = star_tables(fact_rows, seed=seed)
    fact_t, mat_t = [], []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        a = aggregate_join(tables, spec)
        fact_t.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        sp, cols = materialized_columns(tables, spec)
        b = aggregate(cols, sp)
        mat_t.append(time.perf_counter() - t0)
    return {"fact_rows": fact_rows,
            "factorized": statistics.median(fact_t),
            "materialized": statistics.median(mat_t),
            "equal": bool(a.isclose(b, rtol=1e-9))}

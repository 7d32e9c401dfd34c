"""Chained-equations imputation driven by cofactor aggregates.

Three strategies compute the same per-attribute training aggregate:

* ``baseline`` scans the rows observing the attribute every time;
* ``low`` keeps one aggregate ``C`` over all rows that are not missing every
  incomplete attribute, subtracts the rows missing the attribute before
  training and adds them back (re-lifted) after writing their imputations;
* ``high`` caches the complete rows once and scans only the incomplete rows
  that observe the attribute.

Rows missing every incomplete attribute never enter a training set; the low
and high strategies impute them at the end of each iteration with that
iteration's models, which gives the same values as imputing them inline
because the noise draws are keyed by (seed, iteration, attribute, row).
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dataset import HIGH, LOW, PartitionSet, Table, initial_impute, partition_miss
from .errors import NumericError, RingMiceError, UsageError
from .models import (GdConfig, LdaModel, RegressionModel, predict_lda, predict_stochastic,
                     train_lda, train_ridge)
from .noise import noise_stream
from .ring import AttrSpace, Triple, aggregate, to_dense

BASELINE = "baseline"
AUTO = "auto"
STRATEGIES = (BASELINE, LOW, HIGH, AUTO)
REGRESSION = "regression"
LDA = "lda"
PHASES = ("partition", "initial_impute", "cofactor", "delta", "train", "predict", "write")
EARLY_STOP_RTOL = 1e-4
AUDIT_RTOL = 1e-6


@dataclass
class MiceConfig:
    iterations: int = 5
    strategy: str = AUTO
    auto_threshold: float = 0.2
    gd: GdConfig = field(default_factory=GdConfig)
    seed: int = 0
    models: dict[str, str] = field(default_factory=dict)  # attribute name -> regression | lda
    early_stop: bool = False
    audit: bool = False
    threads: int = 1
    lda_shrinkage: float = 0.0

    def __post_init__(self):
        if self.iterations < 1:
            raise UsageError("iterations must be >= 1")
        if self.strategy not in STRATEGIES:
            raise UsageError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if not 0.0 < self.auto_threshold < 1.0:
            raise UsageError("auto threshold must lie in (0, 1)")
        for name, kind in self.models.items():
            if kind not in (REGRESSION, LDA):
                raise UsageError(f"model override for {name!r} must be regression or lda")
        if self.threads < 1:
            raise UsageError("threads must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def pattern_order(miss: np.ndarray) -> np.ndarray:
    """Row permutation grouping rows by their missingness pattern.

    Each partition becomes one contiguous block, and the rows missing or
    observing any attribute form at most ``2 ** (k - 1)`` contiguous runs.
    """
    bits = np.zeros(len(miss), dtype=np.int64)
    for j in range(miss.shape[1]):
        bits |= miss[:, j].astype(np.int64) << j
    return np.argsort(bits, kind="stable")


class TableSource:
    """Data source over a single in-memory table (the working copy).

    With ``order`` the source works on a physically reordered copy of the
    feature columns; :meth:`finish` writes the values back in table order.
    Noise keys always use original row ids.
    """

    def __init__(self, table: Table, order: np.ndarray | None = None):
        self.table = table
        self.order = order
        self.space: AttrSpace = table.schema.attr_space()
        feats = table.schema.features
        self._names = [table.schema.columns[i].name for i in feats]
        cols = table.feature_columns()
        masks = [table.masks[nm] for nm in self._names]
        if order is None:
            self.columns, self._masks = cols, masks
        else:
            self.columns = [c[order] for c in cols]
            self._masks = [m[order] for m in masks]

    @property
    def n_rows(self) -> int:
        return self.table.row_count

    def mask(self, attr: int) -> np.ndarray:
        return self._masks[attr]

    def aggregate(self, rows=None, threads: int = 1) -> Triple:
        return aggregate(self.columns, self.space, rows, threads)

    def design(self, rows):
        return self.columns, rows

    def noise_keys(self, rows: np.ndarray) -> np.ndarray:
        return rows if self.order is None else self.order[rows]

    def finish(self) -> None:
        if self.order is None:
            return
        for name, col in zip(self._names, self.columns):
            self.table.columns[name][self.order] = col


class JoinSource:
    """Adapter giving a :class:`factorized.NormalizedData` the source interface."""

    def __init__(self, data):
        self.data = data
        self.space = data.space
        self.columns = data.columns

    @property
    def n_rows(self) -> int:
        return self.data.n_rows

    def mask(self, attr: int) -> np.ndarray:
        name = self.space.names[attr]
        if name not in self.data.fact.masks:
            return np.zeros(self.n_rows, dtype=bool)
        return self.data.fact.masks[name]

    def aggregate(self, rows=None, threads: int = 1) -> Triple:
        return self.data.aggregate(rows, threads)

    def design(self, rows):
        return self.data.columns_at(rows), None

    def noise_keys(self, rows: np.ndarray) -> np.ndarray:
        return rows

    def finish(self) -> None:
        pass


@dataclass
class MiceState:
    source: object
    cfg: MiceConfig
    strategy: str
    mattrs: list[int]
    partitions: PartitionSet | None = None
    C: Triple | None = None
    timings: dict[str, float] = field(default_factory=lambda: {p: 0.0 for p in PHASES})
    iteration: int = 0

    def clock(self, phase: str, since: float) -> float:
        now = time.perf_counter()
        self.timings[phase] += now - since
        return now


def resolve_strategy(cfg: MiceConfig, miss: np.ndarray) -> tuple[str, float]:
    """Pick the strategy; the auto rule uses the missing fraction of incomplete-attribute cells."""
    rate = float(miss.mean()) if miss.size else 0.0
    if cfg.strategy != AUTO:
        return cfg.strategy, rate
    return (LOW if rate <= cfg.auto_threshold else HIGH), rate


def _model_kind(state: MiceState, attr: int) -> str:
    sp = state.source.space
    kind = state.cfg.models.get(sp.names[attr])
    if kind is None:
        return LDA if sp.is_categorical(attr) else REGRESSION
    if kind == REGRESSION and sp.is_categorical(attr):
        raise UsageError(f"cannot fit a regression to categorical attribute {sp.names[attr]!r}")
    if kind == LDA and not sp.is_categorical(attr):
        raise UsageError(f"cannot fit LDA to continuous attribute {sp.names[attr]!r}")
    return kind


def train_cofactor_baseline(state: MiceState, attr: int) -> Triple:
    """Aggregate over the rows observing ``attr``, scanned directly."""
    rows = np.flatnonzero(~state.source.mask(attr))
    return state.source.aggregate(rows, state.cfg.threads)


def train_cofactor_high(state: MiceState, attr: int) -> Triple:
    """Cached complete-row triple plus the incomplete rows observing ``attr``."""
    p = state.partitions
    rows = p.rows_observed(attr, include_complete=False)
    return p.cached_triple + state.source.aggregate(rows, state.cfg.threads)


def train_cofactor_low(state: MiceState, attr: int) -> tuple[Triple, Triple]:
    """``(C - ΔC, ΔC)`` with ΔC over the rows missing ``attr`` (all-missing rows excluded)."""
    rows = state.partitions.rows_missing(attr, include_all_missing=False)
    delta = state.source.aggregate(rows, state.cfg.threads)
    return state.C - delta, delta


def train_model(state: MiceState, attr: int, C_train: Triple):
    sp = state.source.space
    if not C_train.count > 0:
        raise NumericError(f"attribute {sp.names[attr]!r} is missing in every row; cannot train")
    cof = to_dense(C_train)
    if _model_kind(state, attr) == LDA:
        return train_lda(cof, attr, state.cfg.lda_shrinkage)
    return train_ridge(cof, attr, state.cfg.gd)


def predict_rows(state: MiceState, attr: int, model, rows: np.ndarray) -> np.ndarray:
    cols, sel = state.source.design(rows)
    if isinstance(model, LdaModel):
        return predict_lda(model, cols, sel)
    u1, u2 = noise_stream(state.cfg.seed, state.iteration, attr, state.source.noise_keys(rows))
    return predict_stochastic(model, cols, sel, u1, u2)


def apply_imputations(state: MiceState, attr: int, model, rows: np.ndarray,
                      C_train: Triple | None = None) -> None:
    """Predict and write ``rows`` of ``attr``; for low, fold the re-lifted rows back into C."""
    t0 = time.perf_counter()
    if len(rows) == 0:
        if C_train is not None:
            state.C = C_train
        return
    vals = predict_rows(state, attr, model, rows)
    t0 = state.clock("predict", t0)
    col = state.source.columns[attr]
    col[rows] = vals.astype(col.dtype, copy=False)
    t0 = state.clock("write", t0)
    if C_train is not None:
        state.C = C_train + state.source.aggregate(rows, state.cfg.threads)
        state.clock("delta", t0)


def audit_low(state: MiceState, rtol: float = AUDIT_RTOL) -> bool:
    """Compare the maintained C with a from-scratch aggregate."""
    p = state.partitions
    keep = np.ones(state.source.n_rows, dtype=bool)
    keep[p.all_missing] = False
    fresh = state.source.aggregate(np.flatnonzero(keep), state.cfg.threads)
    return state.C.isclose(fresh, rtol=rtol)


def _params(model) -> np.ndarray:
    return model.a.ravel() if isinstance(model, LdaModel) else model.theta


def _max_rel_change(old, new) -> float:
    a, b = _params(old), _params(new)
    if a.shape != b.shape:
        return math.inf
    scale = np.maximum(np.abs(a), np.abs(b))
    scale[scale == 0] = 1.0
    return float(np.max(np.abs(a - b) / scale, initial=0.0))


def _step(state: MiceState, attr: int, it: int):
    """One chained-equation step for ``attr``. Returns the fitted model."""
    p = state.partitions
    t0 = time.perf_counter()
    C_keep = None
    if state.strategy == BASELINE:
        C_train = train_cofactor_baseline(state, attr)
        rows = np.flatnonzero(state.source.mask(attr))
        state.clock("cofactor", t0)
    elif state.strategy == LOW:
        C_train, _ = train_cofactor_low(state, attr)
        rows = p.rows_missing(attr, include_all_missing=False)
        C_keep = C_train
        state.clock("delta", t0)
    else:
        C_train = train_cofactor_high(state, attr)
        rows = p.rows_missing(attr, include_all_missing=False)
        state.clock("cofactor", t0)
    t0 = time.perf_counter()
    model = train_model(state, attr, C_train)
    state.clock("train", t0)
    apply_imputations(state, attr, model, rows, C_keep)
    return model


def _miss(source, mattrs: Sequence[int]) -> np.ndarray:
    if not mattrs:
        return np.zeros((source.n_rows, 0), dtype=bool)
    return np.column_stack([source.mask(a) for a in mattrs])


def _run_source(source, mattrs: Sequence[int], cfg: MiceConfig) -> tuple[MiceState, dict]:
    sp = source.space
    report = {
        "config": cfg.to_dict(),
        "mattrs": [sp.names[a] for a in mattrs],
        "iterations": [],
        "iteration_times": [],
        "audit": [],
        "models_trained": 0,
        "stopped_early": False,
    }
    miss = _miss(source, mattrs)
    strategy, rate = resolve_strategy(cfg, miss)
    report["strategy"] = strategy
    report["missing_rate"] = rate
    state = MiceState(source, cfg, strategy, list(mattrs))
    if not mattrs:
        report["timings"] = state.timings
        return state, report
    for a in mattrs:
        _model_kind(state, a)

    t0 = time.perf_counter()
    if strategy in (LOW, HIGH):
        state.partitions = partition_miss(miss, mattrs, strategy)
        if strategy == HIGH:
            state.partitions.cached_triple = source.aggregate(state.partitions.complete, cfg.threads)
        else:
            keep = np.ones(source.n_rows, dtype=bool)
            keep[state.partitions.all_missing] = False
            state.C = source.aggregate(np.flatnonzero(keep), cfg.threads)
    state.clock("partition", t0)

    previous: dict[int, object] = {}
    for it in range(1, cfg.iterations + 1):
        state.iteration = it
        t_it = time.perf_counter()
        models = {}
        for a in mattrs:
            try:
                models[a] = _step(state, a, it)
            except RingMiceError as e:
                raise type(e)(f"iteration {it}, attribute {sp.names[a]!r}: {e}") from e
            report["models_trained"] += 1
        if strategy != BASELINE:
            rows = state.partitions.all_missing
            for a in mattrs:
                apply_imputations(state, a, models[a], rows)
        report["iteration_times"].append(time.perf_counter() - t_it)
        report["iterations"].append({
            "iteration": it,
            "models": {sp.names[a]: m.to_dict() for a, m in models.items()},
        })
        if cfg.audit and strategy == LOW:
            report["audit"].append(audit_low(state))
        if cfg.early_stop and previous:
            change = max(_max_rel_change(previous[a], models[a]) for a in mattrs)
            if change < EARLY_STOP_RTOL:
                report["stopped_early"] = True
                previous = models
                break
        previous = models
    report["timings"] = state.timings
    return state, report


def run(t: Table, cfg: MiceConfig | None = None) -> tuple[Table, dict]:
    """Impute every originally-missing feature cell of ``t``; the input is not modified."""
    cfg = MiceConfig() if cfg is None else cfg
    t0 = time.perf_counter()
    work = initial_impute(t)
    elapsed = time.perf_counter() - t0
    mattrs = work.mattrs()
    t0 = time.perf_counter()
    miss = work.miss_matrix(mattrs)
    strategy, _ = resolve_strategy(cfg, miss)
    order = pattern_order(miss) if strategy in (LOW, HIGH) and mattrs else None
    source = TableSource(work, order)
    prep = time.perf_counter() - t0
    state, report = _run_source(source, mattrs, cfg)
    t0 = time.perf_counter()
    source.finish()
    report["timings"]["write"] += time.perf_counter() - t0
    report["timings"]["initial_impute"] += elapsed
    report["timings"]["partition"] += prep
    return work, report


def run_join(tables: Mapping[str, Table], spec, cfg: MiceConfig | None = None) -> tuple[Table, dict]:
    """Impute the root (fact) table of a join without materializing the join.

    Dimension tables must be complete; every fact row must match exactly one
    row in each dimension table.
    """
    from .factorized import NormalizedData

    cfg = MiceConfig() if cfg is None else cfg
    root = spec.tables[0]
    t0 = time.perf_counter()
    work = initial_impute(tables[root])
    elapsed = time.perf_counter() - t0
    t0 = time.perf_counter()
    data = NormalizedData({**tables, root: work}, spec)
    prep = time.perf_counter() - t0
    source = JoinSource(data)
    selected = set(spec.attrs.get(root, []))
    feats = work.schema.features
    mattrs = []
    for a in work.mattrs():
        name = work.schema.columns[feats[a]].name
        if name not in selected:
            raise UsageError(f"incomplete column {name!r} is not selected in the join spec")
        mattrs.append(source.space.index(name))
    state, report = _run_source(source, sorted(mattrs), cfg)
    report["timings"]["initial_impute"] += elapsed
    report["timings"]["partition"] += prep
    return work, report

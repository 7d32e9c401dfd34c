"""Regression and LDA models trained from cofactor aggregates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, lapack

from .errors import NumericError, UsageError
from .ring import DenseCofactor, DenseLayout, Triple, to_dense

# pivot^2 below this fraction of the largest diagonal entry counts as singular
SINGULAR_RTOL = 1e-13
LDA_FALLBACK_SHRINKAGE = 1e-6
DIVERGENCE_PATIENCE = 5


@dataclass
class GdConfig:
    learning_rate: float = 0.1
    ridge: float = 1e-4
    max_epochs: int = 10000
    tol: float = 1e-9  # relative loss decrease over `window` epochs
    window: int = 5
    standardize: bool = True
    dof_correction: bool = False  # sigma^2 over N - M - 1 instead of N

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise UsageError("learning_rate must be positive")
        if self.ridge < 0:
            raise UsageError("ridge must be non-negative")
        if self.max_epochs < 1:
            raise UsageError("max_epochs must be >= 1")


def solve_spd(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve ``A X = B`` for symmetric positive definite ``A`` by Cholesky."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise UsageError("solve_spd needs a square matrix")
    if A.shape[0] == 0:
        return np.zeros_like(B)
    c, info = lapack.dpotrf(A, lower=True, clean=True)
    if info > 0:
        raise NumericError(f"matrix is singular: leading minor at pivot {info - 1} "
                           f"is not positive definite")
    if info < 0:
        raise UsageError(f"invalid argument {-info} passed to Cholesky")
    piv = np.diag(c) ** 2
    scale = max(float(np.max(np.abs(np.diag(A)))), np.finfo(float).tiny)
    bad = np.flatnonzero(piv <= SINGULAR_RTOL * scale)
    if bad.size:
        raise NumericError(f"matrix is numerically singular at pivot {int(bad[0])}")
    return cho_solve((c, True), B)


# ---------------------------------------------------------------------------
# ridge / stochastic linear regression


@dataclass
class RegressionModel:
    """Linear model over a dense cofactor layout.

    ``theta`` spans every layout column (intercept first) and carries -1 at
    the target's column, so ``X theta`` is the residual vector.
    """

    theta: np.ndarray
    sigma2: float
    target: int
    layout: DenseLayout
    epochs: int = 0

    @property
    def target_col(self) -> int:
        return self.layout.offsets[self.target]

    @property
    def coefficients(self) -> np.ndarray:
        """Public view: theta without the pinned target coefficient."""
        return np.delete(self.theta, self.target_col)

    def predict_mean(self, columns: Sequence[np.ndarray], rows=None) -> np.ndarray:
        D = self.layout.expand(columns, rows)
        th = self.theta.copy()
        th[self.target_col] = 0.0
        return D @ th

    def to_dict(self) -> dict:
        sp = self.layout.space
        return {
            "model": "regression",
            "target": sp.names[self.target],
            "columns": column_labels(self.layout),
            "theta": [float(v) for v in self.theta],
            "sigma2": float(self.sigma2),
            "epochs": self.epochs,
        }


def column_labels(layout: DenseLayout) -> list[str]:
    sp = layout.space
    out = ["(intercept)"]
    for i in layout.attrs:
        if sp.is_categorical(i):
            out += [f"{sp.names[i]}={int(c)}" for c in layout.codes[i]]
        else:
            out.append(sp.names[i])
    return out


def _loss(C: np.ndarray, th: np.ndarray, n: float, pen: np.ndarray) -> float:
    return float(th @ C @ th) / (2.0 * n) + 0.5 * float(pen @ (th * th))


def loss_and_gradient(C: np.ndarray, theta: np.ndarray, n: float, ridge: float,
                      reg_mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Ridge objective ``θᵀCθ/2N + λ/2‖θ_reg‖²`` and its gradient."""
    pen = ridge * reg_mask
    g = C @ theta / n + pen * theta
    return _loss(C, theta, n, pen), g


def _basis(C: np.ndarray, n: float, target_col: int, standardize: bool):
    """Change of basis x = A z; predictors centred and scaled, target raw."""
    w = C.shape[0]
    A = np.eye(w)
    if not standardize:
        return A
    mean = C[0] / n
    var = np.diag(C) / n - mean * mean
    for k in range(1, w):
        if k == target_col:
            continue
        sd = math.sqrt(var[k]) if var[k] > 1e-12 * max(np.diag(C)[k] / n, 1e-300) else 1.0
        A[k, 0] = mean[k]
        A[k, k] = sd
    return A


def train_ridge(cof: DenseCofactor, target: int, cfg: GdConfig | None = None) -> RegressionModel:
    """Batch gradient descent on the cofactor with the target weight pinned to -1.

    The intercept is not penalised. With ``cfg.standardize`` the descent
    runs in a centred/scaled basis with the penalty still measured on the
    raw coefficients, so the optimum (and every prediction) is unchanged.
    """
    cfg = GdConfig() if cfg is None else cfg
    layout = cof.layout
    sp = layout.space
    if target not in layout.offsets:
        raise UsageError(f"target {target} not in cofactor layout")
    if sp.is_categorical(target):
        raise UsageError(f"regression target {sp.names[target]!r} is categorical")
    C = cof.matrix
    n = C[0, 0]
    if not n > 0:
        raise NumericError(f"cannot train on an empty training set (target {sp.names[target]!r})")
    t = layout.offsets[target]
    w = C.shape[0]
    reg = np.ones(w)
    reg[0] = 0.0
    reg[t] = 0.0
    free = np.ones(w, dtype=bool)
    free[t] = False

    A = _basis(C, n, t, cfg.standardize)
    Ainv = np.linalg.inv(A)
    Cz = Ainv @ C @ Ainv.T
    # raw theta = A^{-T} phi; penalty on raw coordinates
    d = np.diag(A).copy()
    pen = cfg.ridge * reg / (d * d)

    phi = np.zeros(w)
    phi[t] = -1.0
    phi[0] = C[0, t] / n
    step = cfg.learning_rate
    losses = [_loss(Cz, phi, n, pen)]
    rising = 0
    floor = 1e-30 * max(C[t, t] / n, 1e-300)
    epochs = 0
    for epochs in range(1, cfg.max_epochs + 1):
        g = Cz @ phi / n + pen * phi
        g[~free] = 0.0
        phi = phi - step * g
        L = _loss(Cz, phi, n, pen)
        if not math.isfinite(L):
            raise NumericError(f"gradient descent diverged for {sp.names[target]!r}; "
                               f"use a smaller learning rate than {step}")
        rising = rising + 1 if L > losses[-1] else 0
        if rising >= DIVERGENCE_PATIENCE:
            raise NumericError(f"gradient descent diverged for {sp.names[target]!r} "
                               f"(loss rose {rising} epochs); use a smaller learning rate than {step}")
        losses.append(L)
        if L <= floor:
            break
        if epochs >= cfg.window and losses[-1 - cfg.window] - L <= cfg.tol * abs(L):
            break
    theta = np.linalg.solve(A.T, phi)
    theta[t] = -1.0
    m_eff = int(free.sum()) - 1
    sigma2 = residual_variance(cof, theta, dof=m_eff if cfg.dof_correction else None)
    return RegressionModel(theta, sigma2, target, layout, epochs)


def residual_variance(cof: DenseCofactor, theta: np.ndarray, dof: int | None = None) -> float:
    """``θᵀCθ / N`` (or over ``N - dof - 1``), clamped at zero."""
    C = cof.matrix
    n = C[0, 0]
    denom = n if dof is None else n - dof - 1
    if denom <= 0:
        raise NumericError("too few rows for the residual variance denominator")
    v = float(theta @ C @ theta) / denom
    return max(v, 0.0)


def box_muller(u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def predict_stochastic(model: RegressionModel, columns: Sequence[np.ndarray], rows,
                       u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
    """Deterministic fit plus Box-Muller noise scaled by the residual std."""
    mu = model.predict_mean(columns, rows)
    if model.sigma2 == 0.0:
        return mu
    return mu + box_muller(u1, u2) * math.sqrt(model.sigma2)


# ---------------------------------------------------------------------------
# linear discriminant analysis


@dataclass
class LdaModel:
    classes: np.ndarray
    priors: np.ndarray
    means: np.ndarray          # (C, w) over the feature layout, no intercept
    a: np.ndarray              # (C, w)
    b: np.ndarray              # (C,)
    sigma: np.ndarray
    shrinkage: float
    target: int
    layout: DenseLayout        # feature layout (target excluded)
    dropped: list[int] = field(default_factory=list)

    def scores(self, columns: Sequence[np.ndarray], rows=None) -> np.ndarray:
        X = self.layout.expand(columns, rows)[:, 1:]
        return X @ self.a.T + self.b

    def to_dict(self) -> dict:
        sp = self.layout.space
        return {
            "model": "lda",
            "target": sp.names[self.target],
            "columns": column_labels(self.layout)[1:],
            "classes": [int(c) for c in self.classes],
            "priors": self.priors.tolist(),
            "means": self.means.tolist(),
            "a": self.a.tolist(),
            "b": self.b.tolist(),
            "shrinkage": self.shrinkage,
        }


def lda_statistics(cof: DenseCofactor, target: int):
    """Class statistics (counts and means) plus the pooled covariance, read off a cofactor.

    Row 0 of the cofactor holds ``SUM(1) group by Y`` in the target columns;
    the feature rows of those columns hold ``SUM(X_i) group by Y``.
    """
    layout = cof.layout
    M = cof.matrix
    n = M[0, 0]
    tspan = layout.span(target)
    classes = layout.codes[target]
    feat_cols = [k for k in range(1, layout.width) if not tspan.start <= k < tspan.stop]
    counts = M[0, tspan]
    sums = M[np.ix_(feat_cols, range(tspan.start, tspan.stop))].T
    means = sums / counts[:, None]
    Q = M[np.ix_(feat_cols, feat_cols)]
    sigma = Q / n - (means.T * counts) @ means / n
    sigma = 0.5 * (sigma + sigma.T)
    return classes, counts, means, sigma, feat_cols


def train_lda(t: Triple | DenseCofactor, target: int, shrinkage: float = 0.0) -> LdaModel:
    """Closed-form LDA from the cofactor aggregate.

    ``Σ ← (1-γ)Σ + γ·diag(Σ)``; when Σ is singular at γ = 0 the fit is
    retried once with a small γ and the value used is recorded. Features with
    zero pooled variance cannot enter the solve and get zero weight.
    """
    cof = to_dense(t) if isinstance(t, Triple) else t
    layout = cof.layout
    sp = layout.space
    if target not in layout.offsets or not sp.is_categorical(target):
        raise UsageError(f"LDA target must be a categorical attribute in the layout")
    classes, counts, means, sigma, _ = lda_statistics(cof, target)
    n = cof.count
    if len(classes) < 2:
        raise NumericError(f"LDA for {sp.names[target]!r} needs at least 2 observed classes, "
                           f"found {len(classes)}")
    if not n > len(classes):
        raise NumericError(f"LDA for {sp.names[target]!r} needs more rows than classes")
    priors = counts / n
    feat_attrs = tuple(i for i in layout.attrs if i != target)
    flayout = DenseLayout(sp, feat_attrs, {i: layout.codes[i] for i in feat_attrs
                                           if sp.is_categorical(i)})
    diag = np.diag(sigma)
    live = np.flatnonzero(diag > 1e-12 * max(float(diag.max(initial=0.0)), 1e-300))
    dropped = [int(k) for k in np.setdiff1d(np.arange(len(diag)), live)]
    S = sigma[np.ix_(live, live)]
    mu = means[:, live]
    gamma = float(shrinkage)

    def shrink(g):
        return (1.0 - g) * S + g * np.diag(np.diag(S))

    try:
        sol = solve_spd(shrink(gamma), mu.T)
    except NumericError:
        if gamma != 0.0:
            raise
        gamma = LDA_FALLBACK_SHRINKAGE
        sol = solve_spd(shrink(gamma), mu.T)
    a = np.zeros_like(means)
    a[:, live] = sol.T
    b = np.log(priors) - 0.5 * np.einsum("cw,cw->c", mu, sol.T)
    return LdaModel(classes, priors, means, a, b, sigma, gamma, target, flayout, dropped)


def predict_lda(model: LdaModel, columns: Sequence[np.ndarray], rows=None) -> np.ndarray:
    """Arg-max class code per row; ties resolve to the smallest code."""
    S = model.scores(columns, rows)
    return model.classes[np.argmax(S, axis=1)]

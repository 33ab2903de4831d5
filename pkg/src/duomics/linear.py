"""Deterministic full-batch solvers shared by gene selection and probes.

Everything here runs in float64 with zero-initialized parameters and a
Nesterov-accelerated gradient loop with backtracking, so a fit is a pure
function of its inputs. No stochastic steps, no data-order dependence
beyond float summation order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data_model import ValidationError

GRAD_TOL = 1e-6
MAX_ITER = 5000


def accelerated_gd(
    fun_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0: np.ndarray,
    tol: float = GRAD_TOL,
    max_iter: int = MAX_ITER,
) -> np.ndarray:
    """Minimize a smooth convex objective; returns the iterate whose gradient
    norm first drops to tol, or the last iterate at the cap."""
    x = x0.astype(np.float64).copy()
    y = x.copy()
    t = 1.0
    lip = 1.0
    f_y, g_y = fun_grad(y)
    for _ in range(max_iter):
        if np.linalg.norm(g_y) <= tol:
            return y
        # backtracking on the majorization at y
        while True:
            x_next = y - g_y / lip
            f_next, _ = fun_grad(x_next)
            gap = x_next - y
            if f_next <= f_y + g_y @ gap + 0.5 * lip * (gap @ gap) + 1e-12:
                break
            lip *= 2.0
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y_next = x_next + ((t - 1.0) / t_next) * (x_next - x)
        f_y_next, g_y_next = fun_grad(y_next)
        # restart momentum when it stops paying off
        if f_y_next > f_next:
            y_next = x_next
            f_y_next, g_y_next = fun_grad(y_next)
            t_next = 1.0
        x, y, t = x_next, y_next, t_next
        f_y, g_y = f_y_next, g_y_next
        lip *= 0.9
    return y


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _log1pexp(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    big = z > 30
    out[big] = z[big]
    out[~big] = np.log1p(np.exp(z[~big]))
    return out


@dataclass
class LinearClassifier:
    """L2-regularized logistic model; one column of (weights, bias) per
    one-vs-rest problem, a single column for binary labels."""

    weights: np.ndarray  # (d, n_problems)
    bias: np.ndarray  # (n_problems,)
    n_classes: int

    def scores(self, X: np.ndarray) -> np.ndarray:
        return X.astype(np.float64) @ self.weights + self.bias

    def predict(self, X: np.ndarray) -> np.ndarray:
        s = self.scores(X)
        if self.n_classes == 2:
            return (s[:, 0] > 0).astype(np.int64)
        return np.argmax(s, axis=1).astype(np.int64)

    def importance(self) -> np.ndarray:
        """Per-feature importance: squared coefficient, summed over problems."""
        return (self.weights.astype(np.float64) ** 2).sum(axis=1)


def _fit_binary(X: np.ndarray, target: np.ndarray, reg: float) -> np.ndarray:
    n, d = X.shape

    def fun_grad(wb: np.ndarray) -> tuple[float, np.ndarray]:
        w, b = wb[:d], wb[d]
        z = X @ w + b
        f = float(np.mean(_log1pexp(z) - target * z) + 0.5 * reg * (w @ w))
        r = (_sigmoid(z) - target) / n
        return f, np.concatenate([X.T @ r + reg * w, [r.sum()]])

    return accelerated_gd(fun_grad, np.zeros(d + 1))


def fit_linear_classifier(
    X: np.ndarray, y: np.ndarray, n_classes: int, reg: float = 1e-3
) -> LinearClassifier:
    """Fit by deterministic full-batch gradient descent; one-vs-rest above
    two classes. The intercept is not penalized."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise ValidationError("X must be (n, d) with one label per row")
    if len(np.unique(y)) < 2:
        raise ValidationError("need at least two distinct labels to fit a classifier")
    if reg < 0:
        raise ValidationError("regularization strength must be >= 0")
    problems = 1 if n_classes == 2 else n_classes
    weights = np.empty((X.shape[1], problems))
    bias = np.empty(problems)
    for c in range(problems):
        target = (y == (1 if n_classes == 2 else c)).astype(np.float64)
        wb = _fit_binary(X, target, reg)
        weights[:, c] = wb[:-1]
        bias[c] = wb[-1]
    return LinearClassifier(weights=weights, bias=bias, n_classes=n_classes)


def accuracy(pred: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(pred == y))


def macro_f1(pred: np.ndarray, y: np.ndarray, n_classes: int) -> float:
    """Unweighted mean over classes of 2TP / (2TP + FP + FN); empty classes
    contribute zero."""
    scores = []
    for c in range(n_classes):
        tp = np.sum((pred == c) & (y == c))
        fp = np.sum((pred == c) & (y != c))
        fn = np.sum((pred != c) & (y == c))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def stratified_fold_indices(y: np.ndarray, n_folds: int, seed: int) -> list[np.ndarray]:
    """Deal each class round-robin into n_folds after a seeded shuffle, so
    per-class fold counts differ by at most one."""
    y = np.asarray(y)
    if n_folds < 2:
        raise ValidationError("need at least 2 folds")
    rng = np.random.default_rng([seed, 0xF01D5])
    folds: list[list[int]] = [[] for _ in range(n_folds)]
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        if len(idx) < n_folds:
            raise ValidationError(
                f"class {cls} has {len(idx)} samples, fewer than {n_folds} folds"
            )
        for j, i in enumerate(rng.permutation(idx)):
            folds[j % n_folds].append(int(i))
    return [np.array(sorted(f), dtype=np.int64) for f in folds]


def ridge_fit(X: np.ndarray, Y: np.ndarray, reg: float = 1e-3) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Closed-form ridge with intercept; returns (coef, x_mean, y_mean)."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    xm = X.mean(axis=0)
    ym = Y.mean(axis=0)
    Xc = X - xm
    Yc = Y - ym
    gram = Xc.T @ Xc + reg * np.eye(X.shape[1])
    coef = np.linalg.solve(gram, Xc.T @ Yc)
    return coef, xm, ym


def ridge_r2(
    coef: np.ndarray, xm: np.ndarray, ym: np.ndarray, X: np.ndarray, Y: np.ndarray
) -> float:
    """R-squared of a fitted ridge model on (X, Y), relative to the training mean."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    resid = Y - ym - (X - xm) @ coef
    base = Y - ym
    denom = float((base**2).sum())
    if denom == 0.0:
        return 0.0
    return 1.0 - float((resid**2).sum()) / denom

"""Classification/regression metrics, grouped stratified k-fold, and statistics.

The paired t-test computes its p-value through the regularized incomplete beta
function, evaluated with a Lentz continued fraction to ~1e-12, so no external
stats library is needed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    classes: tuple[str, ...]
    counts: np.ndarray  # (n, n) int64, rows = true, cols = predicted

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion_matrix(y_true, y_pred, classes: tuple[str, ...]) -> ConfusionMatrix:
    if len(y_true) != len(y_pred):
        raise ValueError("y_true and y_pred must have equal length")
    index = {c: i for i, c in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        if t not in index or p not in index:
            raise ValueError(f"label outside class list: {t!r}/{p!r}")
        counts[index[t], index[p]] += 1
    return ConfusionMatrix(tuple(classes), counts)


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(cm.counts)) / cm.total


def f1_macro(cm: ConfusionMatrix) -> float:
    """Unweighted mean of per-class F1; a class with no TP, FP, and FN scores 0."""
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    f1s = []
    for k in range(len(cm.classes)):
        tp = float(cm.counts[k, k])
        fp = float(cm.counts[:, k].sum() - tp)
        fn = float(cm.counts[k, :].sum() - tp)
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom > 0 else 0.0)
    return float(np.mean(f1s))


def mae(preds, targets) -> float:
    preds, targets = np.asarray(preds, float), np.asarray(targets, float)
    if preds.size == 0 or preds.shape != targets.shape:
        raise ValueError("predictions and targets must be equal-length and non-empty")
    return float(np.mean(np.abs(preds - targets)))


def one_off_accuracy(preds, targets) -> float:
    """Fraction of predictions with absolute error strictly smaller than 1."""
    preds, targets = np.asarray(preds, float), np.asarray(targets, float)
    if preds.size == 0 or preds.shape != targets.shape:
        raise ValueError("predictions and targets must be equal-length and non-empty")
    return float(np.mean(np.abs(preds - targets) < 1.0))


@dataclass(frozen=True)
class FoldPlan:
    k: int
    fold_of: dict[str, int]
    seed: int


def kfold_splits(scan_ids, scan_labels, k: int = 10, seed: int = 0) -> FoldPlan:
    """Stratified grouped folds: scans are dealt per class, all of a scan's
    nodules inherit its fold, and per-class fold sizes differ by at most one."""
    scan_ids = list(scan_ids)
    scan_labels = list(scan_labels)
    if len(scan_ids) != len(scan_labels):
        raise ValueError("scan_ids and scan_labels must align")
    if len(set(scan_ids)) != len(scan_ids):
        raise ValueError("duplicate scan ids")
    if k < 2 or k > len(scan_ids):
        raise ValueError(f"k={k} incompatible with {len(scan_ids)} scans")
    rng = np.random.default_rng(seed)
    by_class: dict[str, list[str]] = {}
    for sid, lab in zip(scan_ids, scan_labels):
        by_class.setdefault(lab, []).append(sid)
    fold_of: dict[str, int] = {}
    offset = 0
    for lab in sorted(by_class):
        scans = by_class[lab]
        order = rng.permutation(len(scans))
        for j, idx in enumerate(order):
            fold_of[scans[int(idx)]] = (offset + j) % k
        offset += len(scans)
    return FoldPlan(k, fold_of, seed)


def permutation_test(score_fn, X, y, n_perm: int = 1000, seed: int = 0) -> float:
    """p = (1 + #{permuted score >= observed}) / (1 + n_perm)."""
    if n_perm < 1:
        raise ValueError(f"n_perm must be >= 1, got {n_perm}")
    y = np.asarray(y)
    observed = score_fn(X, y)
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(n_perm):
        hits += score_fn(X, y[rng.permutation(len(y))]) >= observed
    return (1 + hits) / (1 + n_perm)


def paired_t_test(a, b) -> tuple[float, float]:
    """Two-sided paired t-test; identical inputs give (t=0, p=1)."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape or a.size < 2:
        raise ValueError("need two equal-length score lists of length >= 2")
    d = a - b
    n = d.size
    sd = float(d.std(ddof=1))
    mean = float(d.mean())
    if sd == 0.0:
        return (0.0, 1.0) if mean == 0.0 else (math.copysign(math.inf, mean), 0.0)
    t = mean / (sd / math.sqrt(n))
    return t, t_sf_two_sided(t, n - 1)


def t_sf_two_sided(t: float, df: int) -> float:
    """Two-sided tail probability of the t distribution."""
    if df < 1:
        raise ValueError(f"degrees of freedom must be >= 1, got {df}")
    x = df / (df + t * t)
    return betainc_regularized(df / 2.0, 0.5, x)


def betainc_regularized(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b) via Lentz's continued fraction."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must be in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return float(x == 1.0)
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(ln_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(ln_front) * _betacf(b, a, 1.0 - x) / b


def _betacf(a: float, b: float, x: float, max_iter: int = 300, eps: float = 1e-14) -> float:
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")

"""Linear SVM with hinge loss, one-vs-rest multiclass, and C selection.

The binary solver is dual coordinate descent for the L1-hinge objective

    min_w 1/2 ||w||^2 + C * sum_i max(0, 1 - y_i (w.x_i + b))

with the bias handled as an augmented constant feature (so it carries the same
small regularization as liblinear's default intercept handling).  Coordinates
are visited in a fixed cyclic order, making the solver fully deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_C_GRID = (0.01, 0.03, 0.1, 0.3, 1, 3, 10, 30, 100, 300, 1000)
MAX_COORD_UPDATES = 100_000
OBJECTIVE_TOL = 1e-6


@dataclass(frozen=True)
class SvmModel:
    classes: tuple[str, ...]
    weights: np.ndarray  # (n_classes, dim)
    biases: np.ndarray  # (n_classes,)
    C: float

    def decision_values(self, X: np.ndarray) -> np.ndarray:
        return np.atleast_2d(X) @ self.weights.T + self.biases

    def predict(self, X: np.ndarray) -> list[str]:
        d = self.decision_values(X)
        return [self.classes[i] for i in np.argmax(d, axis=1)]


def hinge_objective(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, C: float) -> float:
    margins = y * (X @ w + b)
    return 0.5 * float(w @ w) + C * float(np.maximum(0.0, 1.0 - margins).sum())


def svm_train(X: np.ndarray, y: np.ndarray, C: float,
              max_iter: int = MAX_COORD_UPDATES,
              tol: float = OBJECTIVE_TOL) -> tuple[np.ndarray, float]:
    """Binary hinge-loss linear SVM; y must be +-1 with both classes present."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if C <= 0:
        raise ValueError(f"C must be positive, got {C}")
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("X must be (n, dim) aligned with y")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise ValueError("training data must contain both classes")

    n, dim = X.shape
    Xa = np.concatenate([X, np.ones((n, 1))], axis=1)  # bias as constant feature
    qii = (Xa * Xa).sum(axis=1)
    alpha = np.zeros(n)
    w = np.zeros(dim + 1)
    updates = 0
    prev_obj = hinge_objective(w[:dim], w[dim], X, y, C)
    while updates < max_iter:
        for i in range(n):
            if updates >= max_iter:
                break
            updates += 1
            g = y[i] * (Xa[i] @ w) - 1.0
            a_new = min(max(alpha[i] - g / qii[i], 0.0), C)
            if a_new != alpha[i]:
                w += (a_new - alpha[i]) * y[i] * Xa[i]
                alpha[i] = a_new
        obj = hinge_objective(w[:dim], w[dim], X, y, C)
        if abs(prev_obj - obj) <= tol * max(1.0, abs(obj)):
            break
        prev_obj = obj
    return w[:dim].copy(), float(w[dim])


def svm_train_ovr(X: np.ndarray, y: list[str] | np.ndarray, C: float,
                  classes: tuple[str, ...] | None = None,
                  max_iter: int = MAX_COORD_UPDATES) -> SvmModel:
    """One binary problem per class; prediction takes the argmax decision value."""
    y = np.asarray(y)
    if classes is None:
        classes = tuple(sorted(set(y.tolist())))
    if len(classes) < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    X = np.asarray(X, dtype=np.float64)
    weights = np.zeros((len(classes), X.shape[1]))
    biases = np.zeros(len(classes))
    for k, cls in enumerate(classes):
        yk = np.where(y == cls, 1.0, -1.0)
        weights[k], biases[k] = svm_train(X, yk, C, max_iter=max_iter)
    return SvmModel(tuple(classes), weights, biases, float(C))


def svm_predict(model: SvmModel, x: np.ndarray) -> str:
    """Predicted label of a single vector; ties break to the lowest class index."""
    return model.predict(x[None, :])[0]


def select_C(
    X: np.ndarray,
    y: list[str] | np.ndarray,
    groups: list[str] | np.ndarray,
    grid: tuple[float, ...] = DEFAULT_C_GRID,
    k: int = 10,
    seed: int = 0,
    max_iter: int = MAX_COORD_UPDATES,
) -> tuple[SvmModel, float, dict[float, float]]:
    """Pick C by mean F1-macro over grouped stratified folds, then refit on all data.

    Rows sharing a group (scan) stay in one fold.  Ties in the mean score go to
    the smaller C.  Returns (model, best_C, mean score per C).
    """
    from .metrics import confusion_matrix, f1_macro, kfold_splits

    if not grid:
        raise ValueError("C grid is empty")
    y = np.asarray(y)
    groups = np.asarray(groups)
    group_ids = []
    group_labels = []
    seen = {}
    for g, lab in zip(groups, y):
        if g not in seen:
            seen[g] = lab
            group_ids.append(g)
            group_labels.append(lab)
    plan = kfold_splits(group_ids, group_labels, k=k, seed=seed)
    classes = tuple(sorted(set(y.tolist())))
    folds = np.array([plan.fold_of[g] for g in groups])

    scores: dict[float, float] = {}
    for C in grid:
        per_fold = []
        for f in range(k):
            train, test = folds != f, folds == f
            if len(set(y[train].tolist())) < 2 or not test.any():
                continue
            model = svm_train_ovr(X[train], y[train], C, classes=classes, max_iter=max_iter)
            cm = confusion_matrix(y[test].tolist(), model.predict(X[test]), classes)
            per_fold.append(f1_macro(cm))
        scores[float(C)] = float(np.mean(per_fold)) if per_fold else 0.0
    best_c = min(scores, key=lambda c: (-scores[c], c))
    model = svm_train_ovr(X, y, best_c, classes=classes, max_iter=max_iter)
    return model, best_c, scores

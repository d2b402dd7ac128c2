"""Binary soft-margin SVM trained with SMO, feature scaling and k-fold CV.

Labels are -1/+1; +1 is the positive ("diseased") class for the
sensitivity/specificity/F1 metrics.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FoldInfeasibleError, ShapeError
from .tensor import Rng

TAU = 1e-12
DEFAULT_C_GRID = (0.1, 1.0, 10.0, 100.0)


@dataclass(frozen=True)
class KernelDesc:
    kind: str = "rbf"
    gamma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("linear", "rbf"):
            raise ValueError(f"kernel must be 'linear' or 'rbf', got {self.kind!r}")
        if self.kind == "rbf" and not self.gamma > 0:
            raise ValueError(f"rbf gamma must be > 0, got {self.gamma}")

    def __call__(self, a, b) -> np.ndarray:
        if self.kind == "linear":
            return a @ b.T
        return np.exp(-self.gamma * sq_distances(a, b))


def sq_distances(a, b) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d, 0.0)


@dataclass
class Scaler:
    """Per-feature min/max ranges learned on a training split."""

    mins: np.ndarray
    maxs: np.ndarray
    clamp: tuple[float, float] = (-0.5, 1.5)

    @classmethod
    def fit(cls, x) -> "Scaler":
        x = np.asarray(x, dtype=np.float64)
        return cls(x.min(axis=0), x.max(axis=0))

    def apply(self, x) -> np.ndarray:
        """(x - min) / (max - min); constant features map to 0, results are clamped."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1] != self.mins.shape[0]:
            raise ShapeError(f"expected {self.mins.shape[0]} features, got {x.shape[1]}")
        span = self.maxs - self.mins
        safe = np.where(span > 0, span, 1.0)
        out = np.where(span > 0, (x - self.mins) / safe, 0.0)
        return np.clip(out, *self.clamp)


def scale_fit(x):
    scaler = Scaler.fit(x)
    return scaler.apply(x), scaler


def scale_apply(x, scaler: Scaler):
    return scaler.apply(x)


@dataclass
class SvmModel:
    support_vectors: np.ndarray
    dual_coef: np.ndarray  # alpha_i * y_i for each support vector
    bias: float
    kernel: KernelDesc
    C: float
    scaler: Scaler | None = None
    support: np.ndarray | None = None  # indices of the support vectors in the training set
    alphas: np.ndarray | None = None  # all training duals, training-set order
    n_iter: int = 0

    def decision_function(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.support_vectors.shape[1]:
            raise ShapeError(
                f"expected (n, {self.support_vectors.shape[1]}) features, got {x.shape}"
            )
        if self.scaler is not None:
            x = self.scaler.apply(x)
        if len(self.dual_coef) == 0:
            return np.full(len(x), self.bias)
        return self.kernel(x, self.support_vectors) @ self.dual_coef + self.bias


def _as_pm1(y) -> np.ndarray:
    y = np.asarray(y)
    classes = np.unique(y)
    if set(classes.tolist()) <= {-1, 1}:
        return y.astype(np.float64)
    if set(classes.tolist()) <= {0, 1}:
        return np.where(y == 1, 1.0, -1.0)
    raise ValueError(f"binary labels must be in {{-1, +1}} or {{0, 1}}, got {classes}")


def canonical_order(x, y) -> np.ndarray:
    """Permutation sorting samples by label, then lexicographically by features."""
    x = np.asarray(x, dtype=np.float64).reshape(len(y), -1)
    keys = tuple(x[:, j] for j in range(x.shape[1] - 1, -1, -1)) + (np.asarray(y),)
    return np.lexsort(keys)


def solve_dual(K, y, C, tol=1e-3, max_iter=100_000):
    """SMO with maximal-violating-pair selection.

    Minimizes 0.5 a'Qa - sum(a) s.t. 0 <= a <= C, y'a = 0 with Q = yy' * K.
    Returns (alpha, rho, iterations).
    """
    n = len(y)
    Q = (y[:, None] * y[None, :]) * K
    diag = np.diag(Q).copy()
    alpha = np.zeros(n)
    grad = -np.ones(n)
    pos = y > 0
    it = 0
    for it in range(1, max_iter + 1):
        up = np.where(pos, alpha < C, alpha > 0)
        low = np.where(pos, alpha > 0, alpha < C)
        score = -y * grad
        if not up.any() or not low.any():
            break
        i = int(np.argmax(np.where(up, score, -np.inf)))
        j = int(np.argmin(np.where(low, score, np.inf)))
        if score[i] - score[j] < tol:
            break
        ai, aj = alpha[i], alpha[j]
        if y[i] != y[j]:
            quad = max(diag[i] + diag[j] + 2.0 * Q[i, j], TAU)
            delta = (-grad[i] - grad[j]) / quad
            diff = ai - aj
            ni, nj = ai + delta, aj + delta
            if diff > 0:
                if nj < 0:
                    nj, ni = 0.0, diff
            elif ni < 0:
                ni, nj = 0.0, -diff
            if diff > 0:
                if ni > C:
                    ni, nj = C, C - diff
            elif nj > C:
                nj, ni = C, C + diff
        else:
            quad = max(diag[i] + diag[j] - 2.0 * Q[i, j], TAU)
            delta = (grad[i] - grad[j]) / quad
            total = ai + aj
            ni, nj = ai - delta, aj + delta
            if total > C:
                if ni > C:
                    ni, nj = C, total - C
            elif nj < 0:
                nj, ni = 0.0, total
            if total > C:
                if nj > C:
                    nj, ni = C, total - C
            elif ni < 0:
                ni, nj = 0.0, total
        grad += Q[:, i] * (ni - ai) + Q[:, j] * (nj - aj)
        alpha[i], alpha[j] = ni, nj
    rho = _rho(alpha, grad, y, C)
    return alpha, rho, it


def _rho(alpha, grad, y, C):
    yg = y * grad
    free = (alpha > 0) & (alpha < C)
    if free.any():
        return float(yg[free].mean())
    at_upper = alpha >= C
    ub_mask = np.where(at_upper, y < 0, y > 0)
    lb_mask = ~ub_mask
    ub = yg[ub_mask].min() if ub_mask.any() else np.inf
    lb = yg[lb_mask].max() if lb_mask.any() else -np.inf
    if np.isinf(ub) or np.isinf(lb):
        return float(ub if np.isfinite(ub) else lb)
    return float((ub + lb) / 2)


def svm_train(
    x, y, C: float = 1.0, kernel: KernelDesc | None = None, tol: float = 1e-3,
    max_iter: int = 100_000, scale: bool = False,
) -> SvmModel:
    """Fit a binary SVM. ``scale=True`` learns min/max ranges first and stores them.

    Samples are put in a canonical order before solving, so the result does
    not depend on the order of the training set.
    """
    kernel = kernel or KernelDesc()
    x = np.asarray(x, dtype=np.float64)
    y = _as_pm1(y)
    if x.ndim != 2 or len(x) != len(y):
        raise ShapeError(f"expected (n, d) features and n labels, got {x.shape} and {y.shape}")
    if not ((y > 0).any() and (y < 0).any()):
        raise ValueError("svm_train needs at least one example of each class")
    scaler = None
    if scale:
        scaler = Scaler.fit(x)
        x = scaler.apply(x)
    order = canonical_order(x, y)
    xs, ys = x[order], y[order]
    alpha_sorted, rho, n_iter = solve_dual(kernel(xs, xs), ys, C, tol, max_iter)
    alphas = np.empty_like(alpha_sorted)
    alphas[order] = alpha_sorted
    sv = np.flatnonzero(alpha_sorted > 0)
    return SvmModel(
        support_vectors=xs[sv],
        dual_coef=alpha_sorted[sv] * ys[sv],
        bias=-rho,
        kernel=kernel,
        C=C,
        scaler=scaler,
        support=np.sort(order[sv]),
        alphas=alphas,
        n_iter=n_iter,
    )


def svm_predict(model: SvmModel, x):
    """Returns ``(labels, decision_values)``; a decision value of exactly 0 maps to +1."""
    f = model.decision_function(x)
    return np.where(f >= 0, 1, -1), f


def dual_objective(alpha, K, y) -> float:
    """Value of the maximized dual: sum(a) - 0.5 a'Qa."""
    y = _as_pm1(y)
    ay = alpha * y
    return float(alpha.sum() - 0.5 * ay @ K @ ay)


# -- evaluation ---------------------------------------------------------------------


@dataclass
class BinaryMetrics:
    tp: int
    fn: int
    tn: int
    fp: int

    @property
    def n(self):
        return self.tp + self.fn + self.tn + self.fp

    @property
    def accuracy(self):
        return (self.tp + self.tn) / self.n if self.n else 0.0

    @property
    def sensitivity(self):
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def specificity(self):
        return self.tn / (self.tn + self.fp) if self.tn + self.fp else 0.0

    @property
    def precision(self):
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def f1(self):
        p, r = self.precision, self.sensitivity
        return 2 * p * r / (p + r) if p + r else 0.0

    def __add__(self, other):
        return BinaryMetrics(self.tp + other.tp, self.fn + other.fn, self.tn + other.tn, self.fp + other.fp)


def binary_metrics(y_true, y_pred) -> BinaryMetrics:
    t = _as_pm1(y_true) > 0
    p = _as_pm1(y_pred) > 0
    return BinaryMetrics(
        tp=int(np.sum(t & p)), fn=int(np.sum(t & ~p)), tn=int(np.sum(~t & ~p)), fp=int(np.sum(~t & p))
    )


@dataclass(frozen=True)
class FoldPlan:
    """Seeded k-fold assignment.

    Samples are first put in canonical order (label, then features), so the
    assignment depends on the data and the seed but not on sample order.
    """

    k: int = 5
    seed: int = 0
    stratified: bool = True

    def assign(self, x, y) -> np.ndarray:
        y = np.asarray(y)
        n = len(y)
        if self.k < 2 or self.k > n:
            raise FoldInfeasibleError(f"cannot make {self.k} folds from {n} samples")
        order = canonical_order(np.asarray(x).reshape(n, -1), y)
        folds = np.empty(n, dtype=np.int64)
        if self.stratified:
            labels, counts = np.unique(y, return_counts=True)
            if counts.min() < self.k:
                raise FoldInfeasibleError(
                    f"stratified {self.k}-fold needs >= {self.k} samples per class, smallest class has {counts.min()}"
                )
            for c_index, label in enumerate(labels):
                members = order[y[order] == label]
                perm = Rng(self.seed, c_index).permutation(len(members))
                folds[members[perm]] = np.arange(len(members)) % self.k
        else:
            perm = Rng(self.seed, 0).permutation(n)
            folds[order[perm]] = np.arange(n) % self.k
        return folds

    def splits(self, x, y):
        folds = self.assign(x, y)
        return [(np.flatnonzero(folds != f), np.flatnonzero(folds == f)) for f in range(self.k)]


@dataclass
class CVResult:
    C: float
    gamma: float | None
    folds: list[BinaryMetrics]
    predictions: np.ndarray  # out-of-fold labels, sample order
    decision: np.ndarray  # out-of-fold decision values
    grid: dict = field(default_factory=dict)  # (C, gamma) -> mean accuracy

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([f.accuracy for f in self.folds])

    @property
    def accuracy(self) -> float:
        return float(self.accuracies.mean())

    @property
    def std(self) -> float:
        return float(self.accuracies.std())

    @property
    def pooled(self) -> BinaryMetrics:
        total = self.folds[0]
        for f in self.folds[1:]:
            total = total + f
        return total


def default_gamma_grid(dim: int):
    return tuple(sorted({1.0 / dim, 0.01, 0.1, 1.0}))


def cross_validate(
    x, y, plan: FoldPlan, c_grid=DEFAULT_C_GRID, gamma_grid=None, kernel: str = "rbf",
    fit_log: list | None = None,
) -> CVResult:
    """Grid search over (C, gamma) maximizing mean fold accuracy.

    Ties go to the smaller C, then the smaller gamma. Scaling ranges are fit
    on each training fold only. If ``fit_log`` is a list, the training indices
    seen by every fit are appended to it.
    """
    x = np.asarray(x, dtype=np.float64)
    y = _as_pm1(y)
    if kernel == "linear":
        gamma_grid = (None,)
    elif gamma_grid is None:
        gamma_grid = default_gamma_grid(x.shape[1])
    splits = plan.splits(x, y)
    prepared = []
    for train, test in splits:
        if fit_log is not None:
            fit_log.append(train.copy())
        scaler = Scaler.fit(x[train])
        xtr, xte = scaler.apply(x[train]), scaler.apply(x[test])
        order = canonical_order(xtr, y[train])
        xtr, ytr = xtr[order], y[train][order]
        if kernel == "linear":
            kernels = {None: (xtr @ xtr.T, xte @ xtr.T)}
        else:
            d_tr, d_te = sq_distances(xtr, xtr), sq_distances(xte, xtr)
            kernels = {g: (np.exp(-g * d_tr), np.exp(-g * d_te)) for g in gamma_grid}
        prepared.append((train, test, ytr, kernels))

    grid = {}
    best = None
    for C in sorted(c_grid):
        for gamma in sorted(gamma_grid, key=lambda g: -1 if g is None else g):
            folds = []
            preds = np.zeros(len(y), dtype=np.int64)
            dec = np.zeros(len(y))
            for train, test, ytr, kernels in prepared:
                k_tr, k_te = kernels[gamma]
                alpha, rho, _ = solve_dual(k_tr, ytr, C)
                f = k_te @ (alpha * ytr) - rho
                p = np.where(f >= 0, 1, -1)
                preds[test], dec[test] = p, f
                folds.append(binary_metrics(y[test], p))
            result = CVResult(C, gamma, folds, preds, dec)
            grid[(C, gamma)] = result.accuracy
            if best is None or result.accuracy > best.accuracy:
                best = result
    best.grid = grid
    return best

"""Transfer representation learning: a network trained on a large source
task is reused as a feature extractor ("codebook") for a small target task.

Steps: train the source network, tap intermediate activations as features,
classify them with an SVM, optionally fuse feature sets or classifiers, and
compare with fine-tuning the whole network on the target data.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from fnmatch import fnmatchcase
from pathlib import Path

import numpy as np

from .arch.network import activations, logits_id
from .arch.spec import INPUT_ID, ArchSpec
from .dataio import Dataset, save_ppm
from .errors import ShapeError, SpecError
from .params import ParamStore
from .svm import (
    DEFAULT_C_GRID,
    BinaryMetrics,
    CVResult,
    FoldPlan,
    KernelDesc,
    Scaler,
    binary_metrics,
    canonical_order,
    cross_validate,
    solve_dual,
)
from .tensor import Rng
from .training import (
    InitPolicy,
    SgdConfig,
    TrainResult,
    evaluate,
    fit_input,
    init_params,
    param_stream,
    train,
)

log = logging.getLogger(__name__)

METRICS_HEADER = ("method", "accuracy", "std", "sensitivity", "specificity", "f1")


@dataclass
class MetricsRow:
    method: str
    accuracy: float
    std: float
    sensitivity: float
    specificity: float
    f1: float

    @classmethod
    def from_folds(cls, method: str, folds: list[BinaryMetrics]) -> "MetricsRow":
        """Mean and population std of fold accuracy; other metrics from the pooled confusion."""
        acc = np.array([f.accuracy for f in folds])
        pooled = folds[0]
        for f in folds[1:]:
            pooled = pooled + f
        return cls(method, float(acc.mean()), float(acc.std()), pooled.sensitivity, pooled.specificity, pooled.f1)

    def values(self) -> tuple:
        return (self.method, self.accuracy, self.std, self.sensitivity, self.specificity, self.f1)


def rows_to_csv(rows: list[MetricsRow]) -> str:
    lines = [",".join(METRICS_HEADER)]
    for r in rows:
        lines.append(",".join([r.method] + [f"{v:.6f}" for v in r.values()[1:]]))
    return "\n".join(lines) + "\n"


def rows_to_text(rows: list[MetricsRow]) -> str:
    width = max([len(r.method) for r in rows] + [len("method")])
    head = f"{'method':<{width}}  {'accuracy(std)':>16}  {'sensitivity':>11}  {'specificity':>11}  {'f1':>6}"
    lines = [head, "-" * len(head)]
    for r in rows:
        acc = f"{100 * r.accuracy:.2f}({100 * r.std:.2f})"
        lines.append(
            f"{r.method:<{width}}  {acc:>16}  {100 * r.sensitivity:>10.2f}%  {100 * r.specificity:>10.2f}%  {r.f1:>6.3f}"
        )
    return "\n".join(lines) + "\n"


# -- feature extraction ------------------------------------------------------------


@dataclass(frozen=True)
class TapPoint:
    """Where to read features: a node id plus how to turn a map into a vector."""

    node: str
    rule: str = "flatten"  # or "gap" (channel means of a (C, H, W) map)

    def __post_init__(self):
        if self.rule not in ("flatten", "gap"):
            raise ValueError(f"tap rule must be 'flatten' or 'gap', got {self.rule!r}")

    def dim(self, shapes: dict) -> int:
        shape = shapes[self.node]
        if self.rule == "gap":
            if len(shape) != 3:
                raise ShapeError(f"gap rule needs a (C, H, W) node, {self.node!r} is {shape}")
            return shape[0]
        return int(np.prod(shape))


def extract_features(params: ParamStore, spec: ArchSpec, tap: TapPoint, images, batch_size: int = 128) -> np.ndarray:
    """One feature row per image: test-mode activations of the tap node."""
    if tap.node != INPUT_ID and tap.node not in spec.node_map:
        raise SpecError(f"tap node {tap.node!r} not found in spec {spec.name!r}", node=tap.node)
    x = fit_input(np.asarray(images, dtype=np.float64), spec)
    acts = x if tap.node == INPUT_ID else activations(spec, params, x, tap.node, batch_size)
    if tap.rule == "gap":
        if acts.ndim != 4:
            raise ShapeError(f"gap rule needs a spatial node, {tap.node!r} has shape {acts.shape[1:]}")
        return acts.mean(axis=(2, 3))
    return acts.reshape(len(acts), -1)


def handcrafted_features(images, bins: int = 8) -> np.ndarray:
    """Pixel-statistics stand-in for domain-specific hand-crafted features.

    Per image: an 8-bin histogram of each channel over [0, 1] (fractions),
    the mean of each channel, the std of each channel, and the mean squared
    luminance derivative in four orientations (horizontal, vertical and the
    two diagonals, the latter divided by sqrt(2) per unit step). Layout:
    ``hist[c0], hist[c1], hist[c2], mean[c0..c2], std[c0..c2], energy[4]``,
    3*8 + 6 + 4 = 34 values for RGB input.
    """
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"handcrafted features need (N, 3, H, W) images, got {x.shape}")
    n = len(x)
    idx = np.clip((x * bins).astype(np.int64), 0, bins - 1).reshape(n, 3, -1)
    hist = np.stack([np.stack([np.bincount(idx[i, c], minlength=bins) for c in range(3)]) for i in range(n)])
    hist = hist.reshape(n, -1) / idx.shape[2]
    flat = x.reshape(n, 3, -1)
    lum = x.mean(axis=1)
    dx = lum[:, :, 1:] - lum[:, :, :-1]
    dy = lum[:, 1:, :] - lum[:, :-1, :]
    d45 = (lum[:, 1:, 1:] - lum[:, :-1, :-1]) / np.sqrt(2.0)
    d135 = (lum[:, 1:, :-1] - lum[:, :-1, 1:]) / np.sqrt(2.0)
    energy = np.stack([(d**2).reshape(n, -1).mean(axis=1) for d in (dx, dy, d45, d135)], axis=1)
    return np.concatenate([hist, flat.mean(axis=2), flat.std(axis=2), energy], axis=1)


# -- classification and fusion -----------------------------------------------------


def binary_target(labels, positives) -> np.ndarray:
    """+1 for labels in ``positives``, -1 otherwise."""
    return np.where(np.isin(labels, list(positives)), 1, -1)


def transfer_classify(features, labels, plan: FoldPlan, method: str = "transfer",
                      c_grid=DEFAULT_C_GRID, gamma_grid=None) -> tuple[MetricsRow, CVResult]:
    cv = cross_validate(features, labels, plan, c_grid, gamma_grid)
    return MetricsRow.from_folds(method, cv.folds), cv


@dataclass(frozen=True)
class FusionConfig:
    """``feature`` fusion concatenates member features; ``classifier`` fusion
    stacks a second SVM on the first-layer SVMs' decision values."""

    mode: str = "feature"
    c_grid: tuple = DEFAULT_C_GRID
    gamma_grid: tuple | None = None
    second_kernel: str = "rbf"

    def __post_init__(self):
        if self.mode not in ("feature", "classifier"):
            raise ValueError(f"fusion mode must be 'feature' or 'classifier', got {self.mode!r}")


def _check_members(members, labels, minimum=2):
    if len(members) < minimum:
        raise ValueError(f"fusion needs at least {minimum} members, got {len(members)}")
    for m in members:
        if len(m) != len(labels):
            raise ShapeError(f"member with {len(m)} rows does not align with {len(labels)} labels")


def _unique_columns(members):
    """Drop members identical to an earlier one (bitwise), keeping first occurrences."""
    kept = []
    for m in members:
        if not any(k.shape == m.shape and np.array_equal(k, m) for k in kept):
            kept.append(m)
    return kept


def _fit_predict(xtr, ytr, xte, C, gamma, kernel="rbf"):
    scaler = Scaler.fit(xtr)
    xtr, xte = scaler.apply(xtr), scaler.apply(xte)
    k = KernelDesc(kernel, gamma if gamma is not None else 1.0)
    order = canonical_order(xtr, ytr)
    xtr, ytr = xtr[order], ytr[order]
    alpha, rho, _ = solve_dual(k(xtr, xtr), ytr.astype(np.float64), C)
    return k(xte, xtr) @ (alpha * ytr) - rho


def stacked_decisions(members, labels, plan: FoldPlan, cfg: FusionConfig = FusionConfig(),
                      fit_log: list | None = None):
    """Out-of-fold predictions of the two-layer classifier.

    For each outer fold, every first-layer SVM is tuned by an inner
    cross-validation on the training part only; its inner out-of-fold
    decision values train the second layer, and a first-layer model fit on
    the whole training part scores the test part. Members that are bitwise
    identical are collapsed to one column before stacking, so duplicating a
    member does not change any prediction.
    """
    labels = np.asarray(labels)
    members = _unique_columns([np.asarray(m, dtype=np.float64) for m in members])
    n = len(labels)
    preds = np.zeros(n, dtype=np.int64)
    folds = []
    for f, (train, test) in enumerate(plan.splits(members[0], labels)):
        if fit_log is not None:
            fit_log.append(train.copy())
        inner = replace(plan, seed=plan.seed + 1 + f)
        z_train, z_test = [], []
        for m in members:
            cv = cross_validate(m[train], labels[train], inner, cfg.c_grid, cfg.gamma_grid)
            z_train.append(cv.decision)
            z_test.append(_fit_predict(m[train], labels[train], m[test], cv.C, cv.gamma))
        z_train, z_test = np.stack(z_train, axis=1), np.stack(z_test, axis=1)
        top = cross_validate(z_train, labels[train], inner, cfg.c_grid, cfg.gamma_grid, kernel=cfg.second_kernel)
        dec = _fit_predict(z_train, labels[train], z_test, top.C, top.gamma, cfg.second_kernel)
        preds[test] = np.where(dec >= 0, 1, -1)
        folds.append(binary_metrics(labels[test], preds[test]))
    return preds, folds


def fuse(cfg: FusionConfig, members, labels, plan: FoldPlan, method: str | None = None) -> MetricsRow:
    _check_members(members, labels)
    if cfg.mode == "feature":
        x = np.concatenate([np.asarray(m, dtype=np.float64).reshape(len(labels), -1) for m in members], axis=1)
        row, _ = transfer_classify(x, labels, plan, method or "feature-fusion", cfg.c_grid, cfg.gamma_grid)
        return row
    _, folds = stacked_decisions(members, labels, plan, cfg)
    return MetricsRow.from_folds(method or "classifier-fusion", folds)


# -- source training and fine-tuning -----------------------------------------------


def train_source_codebook(source: Dataset, spec: ArchSpec, cfg: SgdConfig, rng: Rng | int = 0,
                          init: InitPolicy | None = None, **kwargs) -> TrainResult:
    """Supervised training on the source classes; the result is the codebook."""
    return train(spec, source, cfg, rng=rng, init=init, **kwargs)


@dataclass(frozen=True)
class FinetunePlan:
    """Which layers get a fresh start and how fast they learn.

    ``replace`` holds node-id patterns; matching layers are re-initialized
    with ``init`` (and the logits layer resized to ``head_classes`` if it
    matches). Their learning rate is multiplied by ``lr_multiplier``.
    """

    replace: tuple[str, ...] = ("fc6", "fc7", "fc8")
    head_classes: int | None = None
    init: InitPolicy = InitPolicy("gaussian", 0.0, 0.01)
    lr_multiplier: float = 10.0
    freeze: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.lr_multiplier > 0:
            raise ValueError(f"lr multiplier must be > 0, got {self.lr_multiplier}")

    def matches(self, node_id: str) -> bool:
        return any(fnmatchcase(node_id, p) for p in self.replace)


def finetune_setup(codebook: ParamStore, spec: ArchSpec, plan: FinetunePlan, cfg: SgdConfig,
                   rng: Rng) -> tuple[ArchSpec, ParamStore, SgdConfig]:
    """Target spec, starting parameters and SGD config for fine-tuning."""
    head = logits_id(spec)
    target = spec
    if plan.head_classes is not None and plan.matches(head):
        target = spec.with_node(head, out=plan.head_classes)
    fresh = {
        f"{n.id}.{suffix}"
        for n in target.nodes
        if n.kind in ("conv", "dense") and plan.matches(n.id)
        for suffix in ("w", "b")
    }
    params = codebook.copy()
    params.spec_hash = target.hash()
    new = init_params(target, plan.init, rng, names=fresh)
    for name in fresh:
        params[name] = new[name]
        params.velocity.pop(name, None)
    multipliers = tuple((f"{p}.*", plan.lr_multiplier) for p in plan.replace) + cfg.lr_multipliers
    frozen = tuple(f"{p}.*" for p in plan.freeze) + cfg.frozen
    return target, params, replace(cfg, lr_multipliers=multipliers, frozen=frozen)


def finetune_model(codebook: ParamStore, spec: ArchSpec, plan: FinetunePlan, dataset: Dataset,
                   cfg: SgdConfig, rng: Rng | int = 0, **kwargs) -> tuple[ArchSpec, TrainResult]:
    """Train the whole network on target data, starting from the codebook."""
    rng = Rng(rng) if isinstance(rng, int) else rng
    target, params, tuned = finetune_setup(codebook, spec, plan, cfg, rng.child(param_stream("finetune")))
    return target, train(target, dataset, tuned, rng=rng, init=params, **kwargs)


def finetune(codebook: ParamStore, spec: ArchSpec, plan: FinetunePlan, dataset: Dataset, cfg: SgdConfig,
             folds: FoldPlan, rng: Rng | int = 0, positives=None, method: str = "fine-tune") -> MetricsRow:
    """Cross-validated fine-tuning.

    With ``positives`` the target labels become binary (class 1 = positive)
    and metrics treat class 1 as the positive class; otherwise labels are used
    as-is and the metrics need ``head_classes == 2``.
    """
    rng = Rng(rng) if isinstance(rng, int) else rng
    labels = dataset.labels
    if positives is not None:
        labels = np.isin(labels, list(positives)).astype(np.int64)
    data = Dataset(dataset.images, labels, 2)
    pm = np.where(labels == 1, 1, -1)
    results = []
    for f, (train_idx, test_idx) in enumerate(folds.splits(data.images, labels)):
        target, res = finetune_model(codebook, spec, plan, data.subset(train_idx), cfg, rng.child(f))
        ev = evaluate(res.params, target, data.subset(test_idx), k=1)
        pred = np.where(ev.probs.argmax(axis=1) == 1, 1, -1)
        results.append(binary_metrics(pm[test_idx], pred))
    return MetricsRow.from_folds(method, results)


# -- activation maps ---------------------------------------------------------------


def normalize_map(a: np.ndarray) -> np.ndarray:
    """Min-max scale to bytes 0..255 (as /255 reals); a constant map becomes 128."""
    lo, hi = float(a.min()), float(a.max())
    if hi == lo:
        return np.full(a.shape, 128 / 255.0)
    return np.rint(255.0 * (a - lo) / (hi - lo)) / 255.0


def export_activation_maps(params: ParamStore, spec: ArchSpec, image, node_ids, out_dir) -> list[Path]:
    """One grayscale PPM per channel of each requested (C, H, W) node."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    x = fit_input(np.asarray(image, dtype=np.float64)[None], spec)
    written = []
    for node in node_ids:
        if node not in spec.node_map:
            raise SpecError(f"node {node!r} not found in spec {spec.name!r}", node=node)
        acts = activations(spec, params, x, node)[0]
        if acts.ndim != 3:
            raise ShapeError(f"node {node!r} is not a spatial feature map (shape {acts.shape})")
        for c, fmap in enumerate(acts):
            path = out_dir / f"{node}_c{c:03d}.ppm"
            save_ppm(path, normalize_map(fmap))
            written.append(path)
    return written


# -- the end-to-end desk experiment ------------------------------------------------


@dataclass
class TransferResult:
    rows: list[MetricsRow] = field(default_factory=list)
    source_error: float = float("nan")
    codebook: ParamStore | None = None

    def row(self, method: str) -> MetricsRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

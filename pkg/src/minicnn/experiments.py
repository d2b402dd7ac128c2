"""Desk-scale comparative experiments.

All three run on small grayscale images (synthetic shapes by default, or an
IDX digit set) so they finish on one CPU core in minutes.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .arch.analyzer import analyze
from .arch.spec import ArchSpec, parse_archspec, shipped_spec
from .dataio import Dataset, load_checkpoint, load_dataset, save_checkpoint
from .svm import DEFAULT_C_GRID, FoldPlan
from .synthetic import SyntheticConfig, gen_synthetic
from .tensor import Rng
from .training import InitPolicy, SgdConfig, evaluate, init_params, replace_activations, train
from .transfer import (
    FinetunePlan,
    FusionConfig,
    TapPoint,
    TransferResult,
    binary_target,
    extract_features,
    finetune,
    fuse,
    handcrafted_features,
    train_source_codebook,
    transfer_classify,
)

log = logging.getLogger(__name__)

# He-style init: plain N(0, 0.01) leaves these small networks stuck at
# chance level for many epochs at desk learning rates.
DESK_INIT = InitPolicy("scaled")


def _median(values) -> float:
    return float(np.median(np.asarray(values, dtype=np.float64)))


# -- activation comparison ---------------------------------------------------------


@dataclass
class ActivationReport:
    threshold: float
    max_epochs: int
    curves: dict[str, list[np.ndarray]] = field(default_factory=dict)  # per seed, train error per epoch
    epochs: dict[str, list[int | None]] = field(default_factory=dict)

    def median_epochs(self, kind: str) -> float:
        """Median epochs to threshold; runs that never reach it count as ``max_epochs + 1``."""
        return _median([self.max_epochs + 1 if e is None else e for e in self.epochs[kind]])

    def to_text(self) -> str:
        lines = [f"epochs to {100 * self.threshold:.0f}% training error (per seed, then median)"]
        for kind, eps in self.epochs.items():
            shown = " ".join("-" if e is None else str(e) for e in eps)
            lines.append(f"{kind:<8} {shown}   median {self.median_epochs(kind):g}")
        for kind, curves in self.curves.items():
            for seed, c in enumerate(curves):
                lines.append(f"curve {kind} seed{seed}: " + " ".join(f"{v:.3f}" for v in c))
        return "\n".join(lines) + "\n"


def compare_activations(
    spec: ArchSpec,
    dataset: Dataset,
    cfg: SgdConfig = SgdConfig(epochs=40),
    seeds=range(5),
    kinds=("relu", "tanh"),
    threshold: float = 0.25,
    init: InitPolicy = DESK_INIT,
) -> ActivationReport:
    """Epochs until the test-mode training-set error drops to ``threshold``.

    Every activation node of ``spec`` is switched to each kind in turn; seeds
    and everything else are shared, so runs differ only in the activation.
    """
    report = ActivationReport(threshold, cfg.epochs)
    for kind in kinds:
        net = replace_activations(spec, kind)
        report.curves[kind], report.epochs[kind] = [], []
        for seed in seeds:
            res = train(net, dataset, cfg, rng=seed, init=init, eval_train=True,
                        stop=lambda m: m.train_top1 <= threshold)
            report.curves[kind].append(res.metrics.column("train_top1"))
            report.epochs[kind].append(res.metrics.epochs_to("train_top1", threshold))
            log.info("%s seed %s: %s epochs", kind, seed, report.epochs[kind][-1])
    return report


# -- depth comparison --------------------------------------------------------------


def deep_net_spec(blocks: int = 9, width: int = 8, residual: bool = True, classes: int = 10,
                  size: int = 28, channels: int = 1) -> ArchSpec:
    """Stem conv, ``blocks`` two-conv blocks, 1x1 conv, pool and a dense head.

    That makes ``2 * blocks + 2`` convolutions. The plain and residual
    versions share every parameter name and shape; only the shortcuts differ.
    """
    name = f"{'residual' if residual else 'plain'}{2 * blocks + 2}"
    lines = [
        f"name {name}",
        f"input {channels}x{size}x{size}",
        f"node stem conv out={width} k=3x3 s=2 p=1 from=input",
        "node stem_r act relu from=stem",
    ]
    prev = "stem_r"
    for i in range(1, blocks + 1):
        b = f"b{i}"
        if residual:
            lines.append(f"node {b} residual layers=2 out={width} from={prev}")
        else:
            lines += [
                f"node {b}.conv1 conv out={width} k=3x3 s=1 p=1 from={prev}",
                f"node {b}.relu1 act relu from={b}.conv1",
                f"node {b}.conv2 conv out={width} k=3x3 s=1 p=1 from={b}.relu1",
                f"node {b} act relu from={b}.conv2",
            ]
        prev = b
    lines += [
        f"node head conv out={width} k=1x1 s=1 p=0 from={prev}",
        "node head_r act relu from=head",
        "node hp pool max k=2x2 s=2 p=0 from=head_r",
        f"node fc dense out={classes} from=hp",
        "node prob softmax from=fc",
        "output prob",
    ]
    return parse_archspec("\n".join(lines) + "\n")


# Without normalization layers, residual sums double the activation variance
# per block under He init; starting each branch at zero keeps blocks identity-like.
RESIDUAL_ZERO = ("*.conv2.w",)


@dataclass
class DepthReport:
    plain_params: int
    residual_params: int
    conv_layers: int
    initial_loss: dict[str, list[float]] = field(default_factory=dict)
    final_loss: dict[str, list[float]] = field(default_factory=dict)
    curves: dict[str, list[np.ndarray]] = field(default_factory=dict)

    def median_final(self, kind: str) -> float:
        return _median(self.final_loss[kind])

    def to_text(self) -> str:
        lines = [
            f"conv layers: {self.conv_layers}; parameters plain {self.plain_params:,d}, residual {self.residual_params:,d}",
            f"{'net':<9} {'initial loss (median)':>22} {'final train loss per seed':<40} median",
        ]
        for kind in self.final_loss:
            finals = " ".join(f"{v:.4f}" for v in self.final_loss[kind])
            lines.append(
                f"{kind:<9} {_median(self.initial_loss[kind]):>22.4f} {finals:<40} {self.median_final(kind):.4f}"
            )
        return "\n".join(lines) + "\n"


def compare_depth(
    plain: ArchSpec,
    residual: ArchSpec,
    dataset: Dataset,
    cfg: SgdConfig = SgdConfig(lr=0.01, epochs=15),
    seeds=range(5),
    init: InitPolicy = DESK_INIT,
    residual_init: InitPolicy | None = None,
) -> DepthReport:
    """Final training loss of matched plain and residual networks over seeds.

    Parameter budgets must agree within 5%. The residual net defaults to
    ``init`` with the last conv of every branch zeroed (:data:`RESIDUAL_ZERO`).
    """
    pa, ra = analyze(plain), analyze(residual)
    if abs(pa.total_params - ra.total_params) > 0.05 * max(pa.total_params, ra.total_params):
        raise ValueError(f"parameter budgets differ by more than 5%: {pa.total_params} vs {ra.total_params}")
    residual_init = residual_init or InitPolicy(init.scheme, init.mean, init.std, RESIDUAL_ZERO)
    convs = sum(1 for n in plain.nodes if n.kind == "conv")
    report = DepthReport(pa.total_params, ra.total_params, convs)
    for kind, spec, policy in (("plain", plain, init), ("residual", residual, residual_init)):
        report.initial_loss[kind], report.final_loss[kind], report.curves[kind] = [], [], []
        for seed in seeds:
            start = init_params(spec, policy, Rng(seed).child(0))
            report.initial_loss[kind].append(evaluate(start, spec, dataset).loss)
            res = train(spec, dataset, cfg, rng=seed, init=start)
            report.curves[kind].append(res.metrics.column("train_loss"))
            report.final_loss[kind].append(float(res.metrics[-1].train_loss))
            log.info("%s seed %s: final train loss %.4f", kind, seed, report.final_loss[kind][-1])
    return report


# -- transfer ----------------------------------------------------------------------


@dataclass(frozen=True)
class TransferConfig:
    """The desk transfer task: source and target classes are disjoint.

    The target task is binary (``positives`` vs the other target classes).
    With ``images``/``labels`` set, data come from an IDX pair; otherwise
    from the synthetic shapes generator.
    """

    source_classes: tuple[int, ...] = (0, 1, 2, 3, 4)
    target_classes: tuple[int, ...] = (5, 6, 7, 8, 9)
    positives: tuple[int, ...] = (5, 6)
    source_per_class: int = 300
    target_per_class: int = 50
    size: int = 28
    images: str | None = None
    labels: str | None = None
    spec: str = "desk_codebook"
    taps: tuple[str, ...] = ("pool5", "r6", "r7")
    folds: int = 5
    stratified: bool = True
    c_grid: tuple[float, ...] = DEFAULT_C_GRID
    gamma_grid: tuple[float, ...] | None = None
    source_sgd: SgdConfig = SgdConfig(batch_size=32, lr=0.01, epochs=15)
    finetune_sgd: SgdConfig = SgdConfig(batch_size=16, lr=0.001, epochs=30)
    finetune_plan: FinetunePlan = FinetunePlan(head_classes=2)


def load_spec(name_or_path: str) -> ArchSpec:
    from .arch.spec import load_archspec

    path = Path(name_or_path)
    return load_archspec(path) if path.suffix == ".spec" or path.exists() else shipped_spec(name_or_path)


def desk_datasets(cfg: TransferConfig, seed: int) -> tuple[Dataset, Dataset]:
    """(source, target); source labels are re-indexed 0..k-1, target labels keep their class ids."""
    rng = Rng(seed, 0x7A)
    if cfg.images:
        full = load_dataset(cfg.images, cfg.labels)
        source = full.select_classes(cfg.source_classes).per_class(cfg.source_per_class, rng.child(0))
        target = full.select_classes(cfg.target_classes, relabel=False).per_class(cfg.target_per_class, rng.child(1))
        return source, target
    classes = max(cfg.source_classes + cfg.target_classes) + 1
    src = gen_synthetic(SyntheticConfig(classes, cfg.source_per_class, cfg.size, seed=2 * seed))
    tgt = gen_synthetic(SyntheticConfig(classes, cfg.target_per_class, cfg.size, seed=2 * seed + 1))
    return src.select_classes(cfg.source_classes), tgt.select_classes(cfg.target_classes, relabel=False)


def run_transfer(cfg: TransferConfig = TransferConfig(), seed: int = 0, codebook_path=None,
                 force: bool = False, finetune_rows: bool = True) -> TransferResult:
    """Steps 1-5 on the desk task; one metrics row per method.

    If ``codebook_path`` names an existing checkpoint for the same spec, the
    source network is loaded instead of retrained.
    """
    spec = load_spec(cfg.spec)
    source, target = desk_datasets(cfg, seed)
    result = TransferResult()
    if codebook_path is not None and Path(codebook_path).exists():
        codebook = load_checkpoint(codebook_path, spec.hash(), force).params
        log.info("step 1 skipped: loaded source codebook from %s", codebook_path)
    else:
        log.info("step 1: training source network on %d images", len(source))
        codebook = train_source_codebook(source, spec, cfg.source_sgd, rng=seed, init=DESK_INIT).params
        if codebook_path is not None:
            save_checkpoint(codebook_path, codebook, spec.hash())
    result.codebook = codebook
    result.source_error = evaluate(codebook, spec, source, k=1).top1
    log.info("source training error %.4f", result.source_error)

    y = binary_target(target.labels, cfg.positives)
    plan = FoldPlan(cfg.folds, seed, cfg.stratified)
    grids = (cfg.c_grid, cfg.gamma_grid)
    raw = target.images.reshape(len(target), -1)
    rows = [transfer_classify(raw, y, plan, "raw-pixel", *grids)[0]]
    feats = {}
    for tap in cfg.taps:
        feats[tap] = extract_features(codebook, spec, TapPoint(tap), target.images)
        rows.append(transfer_classify(feats[tap], y, plan, f"transfer-{tap}", *grids)[0])
    hand = handcrafted_features(target.to_rgb().images)
    deepest = feats[cfg.taps[-1]]
    rows.append(fuse(FusionConfig("feature", *grids), [deepest, hand], y, plan, "feature-fusion"))
    rows.append(fuse(FusionConfig("classifier", *grids), [deepest, hand], y, plan, "classifier-fusion"))
    if finetune_rows:
        rows.append(
            finetune(codebook, spec, cfg.finetune_plan, target, cfg.finetune_sgd, plan, rng=seed,
                     positives=cfg.positives)
        )
    result.rows = rows
    return result

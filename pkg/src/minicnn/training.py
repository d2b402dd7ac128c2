"""Minibatch SGD with momentum, weight initialization, metrics and evaluation."""
from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field, replace
from fnmatch import fnmatchcase

import numpy as np

from . import layers as L
from .arch.analyzer import param_shapes
from .arch.network import forward, logits_id
from .arch.spec import ArchSpec
from .augment import center_crop, ten_crop
from .autodiff import GradcheckReport, Tape, check_gradients
from .dataio import Dataset
from .errors import DivergenceError, ShapeError
from .params import ParamStore
from .tensor import Rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SgdConfig:
    """Hyperparameters for :func:`sgd_step` and :func:`train`.

    ``lr_multipliers`` maps fnmatch patterns over parameter names to learning
    rate factors; the first matching pattern wins, unmatched names use 1.
    Parameters matching a ``frozen`` pattern are never updated.
    """

    batch_size: int = 64
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    epochs: int = 10
    lr_multipliers: tuple[tuple[str, float], ...] = ()
    frozen: tuple[str, ...] = ()

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        for pattern, factor in self.lr_multipliers:
            if not factor > 0:
                raise ValueError(f"lr multiplier for {pattern!r} must be > 0, got {factor}")

    def multiplier(self, name: str) -> float:
        for pattern, factor in self.lr_multipliers:
            if fnmatchcase(name, pattern):
                return factor
        return 1.0


@dataclass(frozen=True)
class InitPolicy:
    """Weight initialization; biases always start at zero.

    ``gaussian`` draws N(mean, std); ``scaled`` draws N(0, 2 / fan_in);
    ``zeros`` sets everything to 0. Weights whose names match one of
    ``zero_patterns`` are zeroed regardless of scheme.
    """

    scheme: str = "gaussian"
    mean: float = 0.0
    std: float = 0.01
    zero_patterns: tuple[str, ...] = ()

    def __post_init__(self):
        if self.scheme not in ("gaussian", "scaled", "zeros"):
            raise ValueError(f"unknown init scheme {self.scheme!r}")
        if self.scheme == "gaussian" and not self.std > 0:
            raise ValueError(f"gaussian init needs std > 0, got {self.std}")

    def sample(self, name: str, shape: tuple, rng: Rng) -> np.ndarray:
        if (
            self.scheme == "zeros"
            or name.endswith(".b")
            or any(fnmatchcase(name, p) for p in self.zero_patterns)
        ):
            return np.zeros(shape)
        if self.scheme == "gaussian":
            return rng.normal(self.mean, self.std, shape)
        fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)


def param_stream(name: str) -> int:
    """Stable per-tensor stream id, so adding a layer leaves the others' draws unchanged."""
    return zlib.crc32(name.encode("utf-8"))


def init_params(spec: ArchSpec, policy: InitPolicy = InitPolicy(), rng: Rng | None = None,
                names=None) -> ParamStore:
    """Allocate every learnable tensor of ``spec`` (only ``names`` if given)."""
    rng = rng or Rng(0)
    store = ParamStore(spec_hash=spec.hash())
    for name, shape in param_shapes(spec).items():
        if names is None or name in names:
            store[name] = policy.sample(name, shape, rng.child(param_stream(name)))
    return store


def sgd_step(params: ParamStore, grads: dict, cfg: SgdConfig) -> ParamStore:
    """In-place momentum update.

    v <- momentum * v + g + weight_decay * w;  w <- w - lr * multiplier * v.
    """
    for name, g in grads.items():
        if any(fnmatchcase(name, p) for p in cfg.frozen):
            continue
        w = params[name]
        if g.shape != w.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {w.shape}")
        v = params.velocity.get(name)
        v = g + cfg.weight_decay * w if v is None else cfg.momentum * v + g + cfg.weight_decay * w
        params.velocity[name] = v
        params[name] = w - (cfg.lr * cfg.multiplier(name)) * v
    return params


# -- metrics -----------------------------------------------------------------------


def rank_classes(scores: np.ndarray) -> np.ndarray:
    """Class indices by descending score; ties go to the lower index."""
    return np.argsort(-scores, axis=1, kind="stable")


def top_k_error(scores, labels, k: int = 1) -> float:
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if len(labels) == 0:
        return float("nan")
    top = rank_classes(scores)[:, :k]
    return float(1.0 - np.mean(np.any(top == labels[:, None], axis=1)))


def _fmt(x: float) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    test_loss: float = float("nan")
    top1: float = float("nan")
    topk: float = float("nan")
    train_top1: float = float("nan")  # test-mode error on the training set, when requested


@dataclass
class Metrics:
    k: int = 5
    history: list[EpochMetrics] = field(default_factory=list)

    CSV_HEADER = "epoch,train_loss,test_loss,top1,topk"

    def append(self, m: EpochMetrics):
        self.history.append(m)

    def __len__(self):
        return len(self.history)

    def __getitem__(self, i) -> EpochMetrics:
        return self.history[i]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(m, name) for m in self.history])

    def to_csv(self) -> str:
        rows = [self.CSV_HEADER]
        for m in self.history:
            rows.append(",".join([str(m.epoch), _fmt(m.train_loss), _fmt(m.test_loss), _fmt(m.top1), _fmt(m.topk)]))
        return "\n".join(rows) + "\n"

    def epochs_to(self, column: str, threshold: float) -> int | None:
        """First epoch whose ``column`` value is <= ``threshold``."""
        for m in self.history:
            if getattr(m, column) <= threshold:
                return m.epoch
        return None


# -- evaluation --------------------------------------------------------------------


@dataclass
class EvalResult:
    mode: str
    loss: float
    top1: float
    topk: float
    probs: np.ndarray
    k: int = 5


EVAL_MODES = ("single-crop", "ten-crop")


def fit_input(images: np.ndarray, spec: ArchSpec) -> np.ndarray:
    """Center-crop a batch to the spec's input size (no-op if it already matches)."""
    c, h, w = spec.input_shape
    if images.shape[1:] == (c, h, w):
        return images
    if images.shape[1] != c or images.shape[2] < h or images.shape[3] < w or h != w:
        raise ShapeError(f"images {images.shape[1:]} cannot be cropped to spec input {(c, h, w)}")
    return np.stack([center_crop(img, h) for img in images])


def _probs(spec, params, images, batch_size):
    target = logits_id(spec)
    out = []
    for i in range(0, len(images), batch_size):
        logits = forward(spec, params, images[i : i + batch_size], until=target)[target].value
        out.append(L.softmax_array(logits))
    return np.concatenate(out, axis=0) if out else np.zeros((0, 0))


def evaluate(params: ParamStore, spec: ArchSpec, dataset: Dataset, mode: str = "single-crop",
             k: int = 5, batch_size: int = 256) -> EvalResult:
    """Test-mode loss and top-1/top-k error.

    ``ten-crop`` averages the softmax outputs of the ten crops before ranking.
    """
    if mode not in EVAL_MODES:
        raise ValueError(f"mode must be one of {EVAL_MODES}, got {mode!r}")
    if mode == "single-crop":
        probs = _probs(spec, params, fit_input(dataset.images, spec), batch_size)
    else:
        size = spec.input_shape[1]
        crops = [ten_crop(img, size) for img in dataset.images]
        probs = np.zeros((len(dataset), 0))
        total = None
        for j in range(10):
            p = _probs(spec, params, np.stack([c[j] for c in crops]), batch_size)
            total = p if total is None else total + p
        probs = total / 10.0
    labels = dataset.labels
    picked = probs[np.arange(len(labels)), labels]
    loss = float(-np.mean(np.log(np.maximum(picked, np.finfo(float).tiny))))
    return EvalResult(mode, loss, top_k_error(probs, labels, 1), top_k_error(probs, labels, k), probs, k)


# -- training ----------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ParamStore
    metrics: Metrics


def batch_gradients(spec, params, images, labels, rng=None, mode="train"):
    """Loss and named parameter gradients for one batch."""
    tape = Tape()
    fwd = forward(spec, params, images, tape, mode=mode, rng=rng, until=logits_id(spec))
    loss = L.softmax_cross_entropy(fwd[logits_id(spec)], labels)
    tape.backward(loss)
    grads = {name: node.grad for name, node in fwd.params.items()}
    return float(loss.value[0]), grads


def train(
    spec: ArchSpec,
    dataset: Dataset,
    cfg: SgdConfig,
    augment=None,
    rng: Rng | int = 0,
    init: ParamStore | InitPolicy | None = None,
    eval_set: Dataset | None = None,
    k: int = 5,
    eval_train: bool = False,
    on_epoch=None,
    stop=None,
) -> TrainResult:
    """Run ``cfg.epochs`` epochs of minibatch SGD on ``dataset``.

    The result is a pure function of the arguments: batch order, dropout
    masks and augmentation all draw from streams derived from ``rng``.
    ``init`` may be a ready ParamStore (copied, not modified) or an
    :class:`InitPolicy`. ``on_epoch(metrics_row, params)`` is called after
    every epoch; training ends early once ``stop(metrics_row)`` is true.
    """
    rng = Rng(rng) if isinstance(rng, int) else rng
    n = len(dataset)
    if n == 0:
        raise ValueError("empty training set")
    if cfg.batch_size > n:
        raise ValueError(f"batch size {cfg.batch_size} exceeds dataset size {n}")
    if isinstance(init, ParamStore):
        params = init.copy()
    else:
        params = init_params(spec, init or InitPolicy(), rng.child(0))
    metrics = Metrics(k)
    base_images = dataset.images if augment is not None else fit_input(dataset.images, spec)
    for epoch in range(1, cfg.epochs + 1):
        epoch_rng = rng.child(1, epoch)
        order = epoch_rng.child(0).permutation(n)
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            batch_rng = epoch_rng.child(1, b)
            if augment is not None:
                x = np.stack([augment(base_images[i], batch_rng.child(0, j)) for j, i in enumerate(idx)])
            else:
                x = base_images[idx]
            loss, grads = batch_gradients(spec, params, x, dataset.labels[idx], batch_rng.child(1))
            if not math.isfinite(loss):
                raise DivergenceError(
                    f"loss became {loss} at epoch {epoch}, batch {b} (lr={cfg.lr}); "
                    "try a smaller learning rate"
                )
            sgd_step(params, grads, cfg)
            total += loss * len(idx)
            seen += len(idx)
        row = EpochMetrics(epoch, total / seen)
        if eval_set is not None:
            ev = evaluate(params, spec, eval_set, k=k)
            row.test_loss, row.top1, row.topk = ev.loss, ev.top1, ev.topk
        if eval_train:
            row.train_top1 = evaluate(params, spec, dataset, k=k).top1
        metrics.append(row)
        log.info(
            "epoch %d train_loss %.6f test_loss %.6f top1 %.4f", epoch, row.train_loss, row.test_loss, row.top1
        )
        if on_epoch is not None:
            on_epoch(row, params)
        if stop is not None and stop(row):
            break
    return TrainResult(params, metrics)


def gradcheck_model(spec: ArchSpec, params: ParamStore, images, labels, eps: float = 1e-5,
                    threshold: float = 1e-4, budget: int = 20_000) -> GradcheckReport:
    """Finite-difference check of every parameter of ``spec`` under the
    test-mode cross-entropy loss on one batch."""
    images = fit_input(np.asarray(images, dtype=np.float64), spec)
    target = logits_id(spec)

    def loss_fn(tape, leaves):
        fwd = forward(spec, params, images, tape, until=target, leaves=leaves)
        return L.softmax_cross_entropy(fwd[target], labels)

    return check_gradients(loss_fn, dict(params.items()), eps, threshold, budget)


def replace_activations(spec: ArchSpec, fn: str) -> ArchSpec:
    """Copy of ``spec`` with every activation node switched to ``fn``."""
    for node in spec.nodes:
        if node.kind == "act":
            spec = spec.with_node(node.id, fn=fn)
    return replace(spec, name=f"{spec.name}-{fn}")

"""Differentiable layers: activations, convolution, pooling, dense, dropout, losses.

Every function takes and returns :class:`~minicnn.autodiff.Node` values on a
shared tape. Image batches are (N, C, H, W); dense inputs of higher rank are
flattened to (N, D) first.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .autodiff import Node, register_op
from .errors import ShapeError

ACTIVATIONS = ("relu", "sigmoid", "tanh")


@dataclass
class ConvParams:
    weight: Node  # (C_out, C_in, kh, kw)
    bias: Node  # (C_out,)
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class DropoutConfig:
    """``p`` is the probability of zeroing a unit during training.

    Training does not rescale surviving units; test mode multiplies every
    output by ``p`` instead.
    """

    p: float = 0.5
    mode: str = "train"

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ValueError(f"dropout p must lie in (0, 1), got {self.p}")
        if self.mode not in ("train", "test"):
            raise ValueError(f"dropout mode must be 'train' or 'test', got {self.mode!r}")


# -- activations -------------------------------------------------------------


@register_op("relu")
class _Relu:
    @staticmethod
    def forward(ctx, z):
        mask = z > 0
        ctx["kink"] = mask
        return np.where(mask, z, 0.0)

    @staticmethod
    def backward(ctx, g):
        return (g * ctx["kink"],)


def _sigmoid(z):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


@register_op("sigmoid")
class _Sigmoid:
    @staticmethod
    def forward(ctx, z):
        y = _sigmoid(z)
        ctx["y"] = y
        return y

    @staticmethod
    def backward(ctx, g):
        y = ctx["y"]
        return (g * y * (1.0 - y),)


@register_op("tanh")
class _Tanh:
    @staticmethod
    def forward(ctx, z):
        y = np.tanh(z)
        ctx["y"] = y
        return y

    @staticmethod
    def backward(ctx, g):
        return (g * (1.0 - ctx["y"] ** 2),)


def activation(kind: str, z: Node) -> Node:
    if kind not in ACTIVATIONS:
        raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")
    return z.tape.record(kind, [z])


def relu(z: Node) -> Node:
    return z.tape.record("relu", [z])


# -- convolution ---------------------------------------------------------------


@register_op("conv2d")
class _Conv2d:
    @staticmethod
    def forward(ctx, x, w, b, stride=1, pad=0):
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d expects (N,C,H,W) input and 4-D weights, got {x.shape}, {w.shape}")
        n, c_in = x.shape[:2]
        c_out, w_in, kh, kw = w.shape
        if w_in != c_in:
            raise ShapeError(f"conv2d channel mismatch: input has {c_in}, weights expect {w_in}")
        if b.shape != (c_out,):
            raise ShapeError(f"conv2d bias shape {b.shape} does not match {c_out} filters")
        cols = T.im2col(x, (kh, kw), stride, pad)
        h_out = T.conv_output_size(x.shape[2], kh, stride, pad)
        w_out = T.conv_output_size(x.shape[3], kw, stride, pad)
        out = w.reshape(c_out, -1) @ cols + b[:, None]
        ctx.update(cols=cols, w=w, x_shape=x.shape)
        return out.reshape(c_out, n, h_out, w_out).transpose(1, 0, 2, 3)

    @staticmethod
    def backward(ctx, g):
        w = ctx["w"]
        c_out, _, kh, kw = w.shape
        g2 = g.transpose(1, 0, 2, 3).reshape(c_out, -1)
        dw = (g2 @ ctx["cols"].T).reshape(w.shape)
        db = g2.sum(axis=1)
        if not ctx.get("needs_grad", (True,))[0]:
            return None, dw, db
        dcols = w.reshape(c_out, -1).T @ g2
        dx = T.col2im(dcols, ctx["x_shape"], (kh, kw), ctx["stride"], ctx["pad"])
        return dx, dw, db


def conv2d(x: Node, params: ConvParams) -> Node:
    """z[n, k, i, j] = w_k . x_patch(i, j) + b_k at every output position."""
    return x.tape.record(
        "conv2d", [x, params.weight, params.bias], stride=params.stride, pad=params.pad
    )


def mlpconv(x: Node, stages: list[ConvParams]) -> Node:
    """A small MLP shared across spatial positions.

    The first stage may use any kernel size; later stages must be 1x1
    convolutions. Each stage is followed by ReLU.
    """
    if not stages:
        raise ValueError("mlpconv needs at least one stage")
    out = x
    for i, stage in enumerate(stages):
        c_out, c_in, kh, kw = stage.weight.shape
        if c_in != out.shape[1]:
            raise ShapeError(
                f"mlpconv stage {i} expects {c_in} input channels, got {out.shape[1]}"
            )
        if i > 0 and (kh, kw) != (1, 1):
            raise ShapeError(f"mlpconv stage {i} must be 1x1, got {kh}x{kw}")
        out = relu(conv2d(out, stage))
    return out


# -- pooling ---------------------------------------------------------------------


def _tiled_max_forward(ctx, x, k):
    """Max pooling over non-overlapping k x k tiles, without im2col."""
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    tiles = x[:, :, : ho * k, : wo * k].reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
    tiles = tiles.reshape(n, c, ho, wo, k * k)
    arg = tiles.argmax(axis=-1)
    ctx.update(kink=arg, x_shape=x.shape, tiled=True)
    return np.take_along_axis(tiles, arg[..., None], axis=-1)[..., 0]


def _tiled_max_backward(ctx, g):
    arg = ctx["kink"]
    n, c, ho, wo = arg.shape
    k = ctx["stride"]
    routed = np.zeros((n, c, ho, wo, k * k))
    np.put_along_axis(routed, arg[..., None], g[..., None], axis=-1)
    routed = routed.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
    dx = np.zeros(ctx["x_shape"])
    dx[:, :, : ho * k, : wo * k] = routed
    return dx


@register_op("maxpool")
class _MaxPool:
    @staticmethod
    def forward(ctx, x, window, stride, pad=0):
        n, c = x.shape[:2]
        kh, kw = window
        if pad == 0 and kh == kw == stride:
            return _tiled_max_forward(ctx, x, kh)
        cols = T.im2col(x, window, stride, pad, pad_value=-np.inf).reshape(c, kh * kw, -1)
        arg = cols.argmax(axis=1)
        out = np.take_along_axis(cols, arg[:, None, :], axis=1)[:, 0, :]
        h_out = T.conv_output_size(x.shape[2], kh, stride, pad)
        w_out = T.conv_output_size(x.shape[3], kw, stride, pad)
        ctx.update(kink=arg, x_shape=x.shape)
        return out.reshape(c, n, h_out, w_out).transpose(1, 0, 2, 3)

    @staticmethod
    def backward(ctx, g):
        if ctx.get("tiled"):
            return (_tiled_max_backward(ctx, g),)
        arg = ctx["kink"]
        c = arg.shape[0]
        kh, kw = ctx["window"]
        routed = np.zeros((c, kh * kw, arg.shape[1]))
        np.put_along_axis(
            routed, arg[:, None, :], g.transpose(1, 0, 2, 3).reshape(c, 1, -1), axis=1
        )
        dx = T.col2im(routed.reshape(c * kh * kw, -1), ctx["x_shape"], (kh, kw), ctx["stride"], ctx["pad"])
        return (dx,)


@register_op("avgpool")
class _AvgPool:
    @staticmethod
    def forward(ctx, x, window, stride, pad=0):
        n, c = x.shape[:2]
        kh, kw = window
        cols = T.im2col(x, window, stride, pad).reshape(c, kh * kw, -1)
        h_out = T.conv_output_size(x.shape[2], kh, stride, pad)
        w_out = T.conv_output_size(x.shape[3], kw, stride, pad)
        ctx["x_shape"] = x.shape
        return cols.mean(axis=1).reshape(c, n, h_out, w_out).transpose(1, 0, 2, 3)

    @staticmethod
    def backward(ctx, g):
        kh, kw = ctx["window"]
        c = g.shape[1]
        spread = g.transpose(1, 0, 2, 3).reshape(c, 1, -1) / (kh * kw)
        spread = np.broadcast_to(spread, (c, kh * kw, spread.shape[2]))
        dx = T.col2im(spread.reshape(c * kh * kw, -1), ctx["x_shape"], (kh, kw), ctx["stride"], ctx["pad"])
        return (dx,)


def pool2d(kind: str, x: Node, window, stride: int, pad: int = 0) -> Node:
    """Windowed max or mean. Max pooling pads with -inf, average pooling with 0."""
    if isinstance(window, int):
        window = (window, window)
    if kind not in ("max", "avg"):
        raise ValueError(f"pool kind must be 'max' or 'avg', got {kind!r}")
    op = "maxpool" if kind == "max" else "avgpool"
    return x.tape.record(op, [x], window=tuple(window), stride=stride, pad=pad)


@register_op("gap")
class _GlobalAvgPool:
    @staticmethod
    def forward(ctx, x):
        ctx["x_shape"] = x.shape
        return T.reduce("mean", x, axes=(2, 3))

    @staticmethod
    def backward(ctx, g):
        n, c, h, w = ctx["x_shape"]
        return (np.broadcast_to(g[:, :, None, None] / (h * w), ctx["x_shape"]).copy(),)


def global_avg_pool(x: Node) -> Node:
    """(N, C, H, W) -> (N, C) spatial mean. Has no parameters."""
    if x.value.ndim != 4:
        raise ShapeError(f"global_avg_pool expects (N,C,H,W), got {x.shape}")
    return x.tape.record("gap", [x])


# -- dense, reshaping ------------------------------------------------------------


@register_op("dense")
class _Dense:
    @staticmethod
    def forward(ctx, x, w, b):
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
            raise ShapeError(
                f"dense shape mismatch: input {x.shape} (D={flat.shape[1]}), W {w.shape}, b {b.shape}"
            )
        ctx.update(x=flat, w=w, x_shape=x.shape)
        return flat @ w + b

    @staticmethod
    def backward(ctx, g):
        dx = (g @ ctx["w"].T).reshape(ctx["x_shape"])
        return dx, ctx["x"].T @ g, g.sum(axis=0)


def dense(x: Node, w: Node, b: Node) -> Node:
    return x.tape.record("dense", [x, w, b])


def flatten(x: Node) -> Node:
    return x.tape.record("reshape", [x], shape=(x.shape[0], -1))


@register_op("concat")
class _Concat:
    @staticmethod
    def forward(ctx, *xs, axis=1):
        ctx["sizes"] = [x.shape[axis] for x in xs]
        try:
            return np.concatenate(xs, axis=axis)
        except ValueError as exc:
            raise ShapeError(f"cannot concatenate shapes {[x.shape for x in xs]}: {exc}") from None

    @staticmethod
    def backward(ctx, g):
        bounds = np.cumsum(ctx["sizes"])[:-1]
        return tuple(np.split(g, bounds, axis=ctx["axis"]))


def concat(xs: list[Node], axis: int = 1) -> Node:
    return xs[0].tape.record("concat", list(xs), axis=axis)


# -- dropout ---------------------------------------------------------------------


@register_op("dropout")
class _Dropout:
    @staticmethod
    def forward(ctx, x, p, mask=None):
        if mask is None:
            return x * p
        return x * mask

    @staticmethod
    def backward(ctx, g):
        mask = ctx.get("mask")
        return (g * ctx["p"] if mask is None else g * mask,)


def dropout(x: Node, cfg: DropoutConfig, rng: T.Rng | None = None, mask=None):
    """Returns ``(output, mask)``; ``mask`` is None in test mode.

    Pass ``mask`` explicitly to replay a previous draw.
    """
    if cfg.mode == "test":
        return x.tape.record("dropout", [x], p=cfg.p), None
    if mask is None:
        if rng is None:
            raise ValueError("train-mode dropout needs an rng or an explicit mask")
        mask = (~rng.bernoulli(cfg.p, x.shape)).astype(T.DTYPE)
    return x.tape.record("dropout", [x], p=cfg.p, mask=mask), mask


# -- outputs and losses ----------------------------------------------------------


def softmax_array(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@register_op("softmax")
class _Softmax:
    @staticmethod
    def forward(ctx, x):
        s = softmax_array(x)
        ctx["s"] = s
        return s

    @staticmethod
    def backward(ctx, g):
        s = ctx["s"]
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)


def softmax(x: Node) -> Node:
    return x.tape.record("softmax", [x])


@register_op("softmax_ce")
class _SoftmaxCrossEntropy:
    @staticmethod
    def forward(ctx, logits, labels):
        n, k = logits.shape
        labels = np.asarray(labels)
        if labels.shape != (n,):
            raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= k):
            raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        ctx["probs"] = np.exp(logp)
        return np.array([-logp[np.arange(n), labels].mean()])

    @staticmethod
    def backward(ctx, g):
        probs = ctx["probs"]
        n = probs.shape[0]
        d = probs.copy()
        d[np.arange(n), ctx["labels"]] -= 1.0
        return (d * (g[0] / n),)


def softmax_cross_entropy(logits: Node, labels) -> Node:
    """Mean over the batch of -log softmax(logits)[label]; shape (1,)."""
    return logits.tape.record("softmax_ce", [logits], labels=np.asarray(labels, dtype=np.int64))


@register_op("mse")
class _MeanSquaredError:
    @staticmethod
    def forward(ctx, out, target):
        diff = out - target
        ctx["diff"] = diff
        return np.array([np.mean(diff**2)])

    @staticmethod
    def backward(ctx, g):
        diff = ctx["diff"]
        return (2.0 * diff * (g[0] / diff.size),)


def mse(out: Node, target) -> Node:
    target = T.as_tensor(target)
    if target.shape != out.shape:
        raise ShapeError(f"mse target shape {target.shape} != output shape {out.shape}")
    return out.tape.record("mse", [out], target=target)

"""Dense real64 arrays and the handful of kernels everything else is built on.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 and rank 1-4.
Image batches use the (N, C, H, W) layout.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

DTYPE = np.float64

_ELEMENTWISE = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
    "max": np.maximum,
    "min": np.minimum,
}

_REDUCE = ("sum", "mean", "max")


def as_tensor(x, copy=False) -> np.ndarray:
    """Convert ``x`` to a float64 array of rank 1-4."""
    arr = np.array(x, dtype=DTYPE, copy=copy) if copy else np.asarray(x, dtype=DTYPE)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if not 1 <= arr.ndim <= 4:
        raise ShapeError(f"tensor rank must be 1-4, got shape {arr.shape}")
    return arr


def elementwise(op: str, a, b, axis: int | None = None) -> np.ndarray:
    """Apply a binary op componentwise.

    ``b`` must either have the same shape as ``a`` or be rank-1 with length
    ``a.shape[axis]``, in which case it is broadcast along that axis.
    """
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape == b.shape:
        return fn(a, b)
    if b.ndim == 1 and axis is not None:
        if not -a.ndim <= axis < a.ndim or a.shape[axis] != b.shape[0]:
            raise ShapeError(
                f"cannot broadcast shape {b.shape} along axis {axis} of shape {a.shape}"
            )
        view = [1] * a.ndim
        view[axis] = b.shape[0]
        return fn(a, b.reshape(view))
    raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def matmul(a, b) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def _normalize_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} invalid for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def reduce(op: str, x, axes=None) -> np.ndarray:
    """Reduce over ``axes`` (all axes when None), removing them from the shape.

    Sums accumulate strictly left to right in row-major order over the
    reduced axes, so results do not depend on numpy's pairwise summation.
    A full reduction returns shape (1,).
    """
    if op not in _REDUCE:
        raise ValueError(f"unknown reduce op {op!r}")
    x = as_tensor(x)
    axes = _normalize_axes(axes, x.ndim)
    keep = [ax for ax in range(x.ndim) if ax not in axes]
    moved = np.transpose(x, keep + list(axes))
    kept_shape = tuple(x.shape[ax] for ax in keep)
    count = int(np.prod([x.shape[ax] for ax in axes]))
    flat = moved.reshape(kept_shape + (count,))
    if op == "max":
        out = flat.max(axis=-1)
    else:
        out = np.cumsum(flat, axis=-1)[..., -1]
        if op == "mean":
            out = out / count
    out = np.asarray(out, dtype=DTYPE)
    return out.reshape(1) if out.ndim == 0 else out


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _window_geometry(shape, kernel, stride, pad):
    kh, kw = kernel
    h_out = conv_output_size(shape[-2], kh, stride, pad)
    w_out = conv_output_size(shape[-1], kw, stride, pad)
    if h_out < 1 or w_out < 1:
        raise ShapeError(
            f"degenerate output {h_out}x{w_out} for input {shape[-2]}x{shape[-1]}, "
            f"kernel {kh}x{kw}, stride {stride}, pad {pad}"
        )
    return h_out, w_out


def im2col(x, kernel, stride: int = 1, pad: int = 0, pad_value: float = 0.0) -> np.ndarray:
    """Lower an image (C, H, W) or batch (N, C, H, W) to patch columns.

    Returns shape (C*kh*kw, N*H_out*W_out); column ``n*H_out*W_out + j``
    holds the receptive field of output position ``j`` of image ``n``.
    Out-of-bounds taps read ``pad_value``.
    """
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"im2col expects rank 3 or 4 input, got {x.shape}")
    kh, kw = kernel
    n, c = x.shape[:2]
    h_out, w_out = _window_geometry(x.shape, kernel, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=pad_value)
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * (h_out - 1) + 1 : stride, : stride * (w_out - 1) + 1 : stride]
    # (N, C, Ho, Wo, kh, kw) -> (C, kh, kw, N, Ho, Wo)
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(
        c * kh * kw, n * h_out * w_out
    )


def col2im(cols, shape, kernel, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back into an image.

    ``shape`` is the (C, H, W) or (N, C, H, W) shape of the original input.
    """
    shape = tuple(shape)
    batched = len(shape) == 4
    n, c, h, w = shape if batched else (1,) + shape
    kh, kw = kernel
    h_out, w_out = _window_geometry(shape, kernel, stride, pad)
    cols = np.asarray(cols, dtype=DTYPE).reshape(c, kh, kw, n, h_out, w_out)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=DTYPE)
    h_span = stride * (h_out - 1) + 1
    w_span = stride * (w_out - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + h_span : stride, j : j + w_span : stride] += cols[
                :, i, j
            ].transpose(1, 0, 2, 3)
    out = out[:, :, pad : pad + h, pad : pad + w]
    return out if batched else out[0]


class Rng:
    """Seeded counter-based generator (Philox 4x64).

    The 128-bit Philox key is ``(seed, stream)``, so every (seed, stream)
    pair names an independent, platform-stable sequence.
    """

    def __init__(self, seed: int = 0, stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream})"

    def child(self, *ids: int) -> "Rng":
        """Generator on a stream derived from this one's stream and ``ids``."""
        stream = self.stream
        for i in ids:
            stream = (stream * 0x9E3779B97F4A7C15 + int(i) + 1) & 0xFFFFFFFFFFFFFFFF
        return Rng(self.seed, stream)

    def random(self, size=None):
        return self._gen.random(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def bernoulli(self, p, size):
        return self._gen.random(size) < p

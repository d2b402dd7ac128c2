"""Composite blocks expanded into primitive :class:`LayerNode` fragments.

Each builder takes the id the block should be known by and the id of its
input; the last node of the returned fragment carries the block id, so later
nodes can refer to the block as a whole.
"""
from __future__ import annotations

from dataclasses import dataclass

from ..errors import ShapeError
from .spec import LayerNode


def _conv(node_id, src, out, k, s=1, p=0):
    return LayerNode(node_id, "conv", {"out": out, "k": (k, k), "s": s, "p": p}, (src,))


def _relu(node_id, src):
    return LayerNode(node_id, "act", {"fn": "relu"}, (src,))


def build_vgg_stack(depth: int, channels: int, block_id: str, src: str) -> list[LayerNode]:
    """``depth`` 3x3 stride-1 pad-1 convolutions, each followed by ReLU."""
    if depth not in (2, 3):
        raise ValueError(f"vgg stack depth must be 2 or 3, got {depth}")
    nodes = []
    prev = src
    for i in range(1, depth + 1):
        conv_id = f"{block_id}.conv{i}"
        relu_id = block_id if i == depth else f"{block_id}.relu{i}"
        nodes += [_conv(conv_id, prev, channels, 3, 1, 1), _relu(relu_id, conv_id)]
        prev = relu_id
    return nodes


@dataclass(frozen=True)
class InceptionConfig:
    n1x1: int
    n3x3_reduce: int
    n3x3: int
    n5x5_reduce: int
    n5x5: int
    pool_proj: int
    mode: str = "reduced"

    def __post_init__(self):
        if self.mode not in ("naive", "reduced"):
            raise ValueError(f"inception mode must be 'naive' or 'reduced', got {self.mode!r}")
        counts = (self.n1x1, self.n3x3_reduce, self.n3x3, self.n5x5_reduce, self.n5x5, self.pool_proj)
        if min(counts) < 1:
            raise ValueError("inception channel counts must be >= 1")

    def out_channels(self, in_channels: int) -> int:
        pool = in_channels if self.mode == "naive" else self.pool_proj
        return self.n1x1 + self.n3x3 + self.n5x5 + pool


def build_inception(
    cfg: InceptionConfig, block_id: str, src: str, in_channels: int | None = None
) -> list[LayerNode]:
    """Four same-padded branches (1x1, 3x3, 5x5, 3x3 max-pool) concatenated on channels.

    In reduced mode 1x1 convolutions shrink the channel count before the
    3x3 and 5x5 filters and after the pooling branch.
    """
    if in_channels is not None and in_channels < 1:
        raise ShapeError(f"inception input must have >= 1 channels, got {in_channels}")
    b = block_id
    nodes = [_conv(f"{b}.1x1", src, cfg.n1x1, 1), _relu(f"{b}.1x1.relu", f"{b}.1x1")]
    if cfg.mode == "naive":
        nodes += [
            _conv(f"{b}.3x3", src, cfg.n3x3, 3, p=1),
            _relu(f"{b}.3x3.relu", f"{b}.3x3"),
            _conv(f"{b}.5x5", src, cfg.n5x5, 5, p=2),
            _relu(f"{b}.5x5.relu", f"{b}.5x5"),
            LayerNode(f"{b}.pool", "pool", {"mode": "max", "k": (3, 3), "s": 1, "p": 1}, (src,)),
        ]
        branches = [f"{b}.1x1.relu", f"{b}.3x3.relu", f"{b}.5x5.relu", f"{b}.pool"]
    else:
        nodes += [
            _conv(f"{b}.3x3r", src, cfg.n3x3_reduce, 1),
            _relu(f"{b}.3x3r.relu", f"{b}.3x3r"),
            _conv(f"{b}.3x3", f"{b}.3x3r.relu", cfg.n3x3, 3, p=1),
            _relu(f"{b}.3x3.relu", f"{b}.3x3"),
            _conv(f"{b}.5x5r", src, cfg.n5x5_reduce, 1),
            _relu(f"{b}.5x5r.relu", f"{b}.5x5r"),
            _conv(f"{b}.5x5", f"{b}.5x5r.relu", cfg.n5x5, 5, p=2),
            _relu(f"{b}.5x5.relu", f"{b}.5x5"),
            LayerNode(f"{b}.pool", "pool", {"mode": "max", "k": (3, 3), "s": 1, "p": 1}, (src,)),
            _conv(f"{b}.poolproj", f"{b}.pool", cfg.pool_proj, 1),
            _relu(f"{b}.poolproj.relu", f"{b}.poolproj"),
        ]
        branches = [f"{b}.1x1.relu", f"{b}.3x3.relu", f"{b}.5x5.relu", f"{b}.poolproj.relu"]
    nodes.append(LayerNode(b, "concat", {}, tuple(branches)))
    return nodes


@dataclass(frozen=True)
class ResidualConfig:
    """Residual block: ``relu(inner(f) + shortcut(f))``.

    ``inner`` is ``layers`` 3x3 convolutions with ReLU between them. The
    identity shortcut needs matching shapes; ``projection`` adds a 1x1
    convolution (stride ``stride``) on the shortcut path.
    """

    layers: int = 2
    out: int = 16
    shortcut: str = "identity"
    stride: int = 1
    in_channels: int | None = None

    def __post_init__(self):
        if self.layers not in (2, 3):
            raise ValueError(f"residual inner stack must have 2 or 3 layers, got {self.layers}")
        if self.shortcut not in ("identity", "projection"):
            raise ValueError(f"shortcut must be identity|projection, got {self.shortcut!r}")
        if self.shortcut == "identity" and self.stride != 1:
            raise ShapeError("identity shortcut cannot span a strided block; use projection")
        if (
            self.shortcut == "identity"
            and self.in_channels is not None
            and self.in_channels != self.out
        ):
            raise ShapeError(
                f"identity shortcut needs equal dimensions, got {self.in_channels} -> {self.out} channels"
            )


def build_residual_block(cfg: ResidualConfig, block_id: str, src: str) -> list[LayerNode]:
    b = block_id
    nodes = []
    prev = src
    for i in range(1, cfg.layers + 1):
        stride = cfg.stride if i == 1 else 1
        nodes.append(_conv(f"{b}.conv{i}", prev, cfg.out, 3, stride, 1))
        prev = f"{b}.conv{i}"
        if i < cfg.layers:
            nodes.append(_relu(f"{b}.relu{i}", prev))
            prev = f"{b}.relu{i}"
    shortcut = src
    if cfg.shortcut == "projection":
        nodes.append(_conv(f"{b}.proj", src, cfg.out, 1, cfg.stride, 0))
        shortcut = f"{b}.proj"
    nodes.append(LayerNode(f"{b}.sum", "add", {}, (prev, shortcut)))
    nodes.append(_relu(b, f"{b}.sum"))
    return nodes


def build_mlpconv(outs, kernel, stride, pad, block_id: str, src: str) -> list[LayerNode]:
    """First stage ``kernel``-sized, the rest 1x1, ReLU after every stage."""
    kh, kw = kernel
    nodes = []
    prev = src
    for i, out in enumerate(outs, start=1):
        conv_id = f"{block_id}.conv{i}"
        if i == 1:
            attrs = {"out": out, "k": (kh, kw), "s": stride, "p": pad}
        else:
            attrs = {"out": out, "k": (1, 1), "s": 1, "p": 0}
        relu_id = block_id if i == len(outs) else f"{block_id}.relu{i}"
        nodes += [LayerNode(conv_id, "conv", attrs, (prev,)), _relu(relu_id, conv_id)]
        prev = relu_id
    return nodes

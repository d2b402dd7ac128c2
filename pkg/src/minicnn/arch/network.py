"""Execute an :class:`ArchSpec` on a tape."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import layers as L
from ..autodiff import Node, Tape
from ..errors import ShapeError
from ..params import ParamStore
from ..tensor import Rng
from .spec import INPUT_ID, ArchSpec


@dataclass
class Forward:
    tape: Tape
    values: dict[str, Node]
    params: dict[str, Node]
    masks: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, node_id) -> Node:
        return self.values[node_id]


def logits_id(spec: ArchSpec) -> str:
    """The node a classification loss attaches to (input of a final softmax)."""
    out = spec.node(spec.output)
    return out.inputs[0] if out.kind == "softmax" else spec.output


def forward(
    spec: ArchSpec,
    params: ParamStore,
    x,
    tape: Tape | None = None,
    *,
    mode: str = "test",
    rng: Rng | None = None,
    until: str | None = None,
    masks: dict | None = None,
    input_grad: bool = False,
    leaves: dict | None = None,
) -> Forward:
    """Evaluate the graph up to ``until`` (default: the output node).

    Train-mode dropout draws its mask from ``rng.child(node index)`` unless a
    mask for that node is supplied in ``masks``. The input batch gets a
    gradient only when ``input_grad`` is set. ``leaves`` may supply
    ready-made parameter nodes on ``tape`` (used by gradient checking).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != tuple(spec.input_shape):
        raise ShapeError(f"input batch {x.shape} does not match spec input {spec.input_shape}")
    if tape is None:
        tape = Tape()
    target = until or spec.output
    needed = {n.id for n in spec.ancestors(target)} if target != INPUT_ID else set()
    values = {INPUT_ID: tape.leaf(x, name=None, requires_grad=input_grad)}
    leaves = dict(leaves or {})
    used_masks = {}

    def param(name):
        if name not in leaves:
            leaves[name] = tape.leaf(params[name], name=name)
        return leaves[name]

    for index, node in enumerate(spec.nodes):
        if node.id not in needed:
            continue
        a = node.attrs
        src = [values[s] for s in node.inputs]
        kind = node.kind
        if kind == "conv":
            conv = L.ConvParams(param(f"{node.id}.w"), param(f"{node.id}.b"), a["s"], a["p"])
            out = L.conv2d(src[0], conv)
        elif kind == "act":
            out = L.activation(a["fn"], src[0])
        elif kind == "pool":
            out = L.pool2d(a["mode"], src[0], a["k"], a["s"], a["p"])
        elif kind == "gap":
            out = L.global_avg_pool(src[0])
        elif kind == "dense":
            out = L.dense(src[0], param(f"{node.id}.w"), param(f"{node.id}.b"))
        elif kind == "dropout":
            cfg = L.DropoutConfig(a["p"], "train" if mode == "train" else "test")
            given = (masks or {}).get(node.id)
            if cfg.mode == "train" and given is None and rng is None:
                raise ValueError("train-mode forward with dropout needs an rng")
            drop_rng = rng.child(index) if rng is not None else None
            out, mask = L.dropout(src[0], cfg, drop_rng, mask=given)
            if mask is not None:
                used_masks[node.id] = mask
        elif kind == "concat":
            out = L.concat(src)
        elif kind == "add":
            out = tape.record("add", src)
        elif kind == "softmax":
            out = L.softmax(src[0])
        else:
            raise ValueError(f"unknown node kind {kind!r}")
        values[node.id] = out
    return Forward(tape, values, leaves, used_masks)


def predict_logits(spec: ArchSpec, params: ParamStore, x, batch_size: int = 256) -> np.ndarray:
    target = logits_id(spec)
    outs = [
        forward(spec, params, x[i : i + batch_size], until=target)[target].value
        for i in range(0, len(x), batch_size)
    ]
    return np.concatenate(outs, axis=0)


def predict_proba(spec: ArchSpec, params: ParamStore, x, batch_size: int = 256) -> np.ndarray:
    return L.softmax_array(predict_logits(spec, params, x, batch_size))


def activations(spec: ArchSpec, params: ParamStore, x, node_id: str, batch_size: int = 256) -> np.ndarray:
    """Test-mode values of ``node_id`` for a batch of inputs."""
    outs = [
        forward(spec, params, x[i : i + batch_size], until=node_id)[node_id].value
        for i in range(0, len(x), batch_size)
    ]
    return np.concatenate(outs, axis=0)

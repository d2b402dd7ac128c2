"""Static shape inference and cost accounting for :class:`ArchSpec` graphs."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from ..errors import SpecError
from ..tensor import conv_output_size
from .spec import INPUT_ID, ArchSpec, LayerNode


def _node_shape(node: LayerNode, in_shapes: list[tuple]) -> tuple:
    a = node.attrs
    kind = node.kind
    first = in_shapes[0]
    if kind in ("conv", "pool"):
        if len(first) != 3:
            raise SpecError(f"{kind} node {node.id!r} needs a (C,H,W) input, got {first}", node=node.id)
        c, h, w = first
        kh, kw = a["k"]
        h_out = conv_output_size(h, kh, a["s"], a["p"])
        w_out = conv_output_size(w, kw, a["s"], a["p"])
        if h_out < 1 or w_out < 1:
            raise SpecError(
                f"node {node.id!r}: kernel {kh}x{kw} s={a['s']} p={a['p']} on {h}x{w} gives empty output",
                node=node.id,
            )
        return (a["out"] if kind == "conv" else c, h_out, w_out)
    if kind == "gap":
        if len(first) != 3:
            raise SpecError(f"gap node {node.id!r} needs a (C,H,W) input, got {first}", node=node.id)
        return (first[0],)
    if kind == "dense":
        return (a["out"],)
    if kind in ("act", "dropout"):
        return first
    if kind == "softmax":
        if len(first) != 1:
            raise SpecError(f"softmax node {node.id!r} needs a vector input, got {first}", node=node.id)
        return first
    if kind == "add":
        if in_shapes[0] != in_shapes[1]:
            raise SpecError(
                f"add node {node.id!r} has mismatched inputs {in_shapes[0]} and {in_shapes[1]}",
                node=node.id,
            )
        return first
    if kind == "concat":
        if any(len(s) != 3 for s in in_shapes) or len({s[1:] for s in in_shapes}) != 1:
            raise SpecError(f"concat node {node.id!r} has incompatible inputs {in_shapes}", node=node.id)
        return (sum(s[0] for s in in_shapes),) + first[1:]
    raise SpecError(f"unknown kind {kind!r}", node=node.id)


def infer_shapes(spec: ArchSpec) -> dict[str, tuple]:
    """Output shape of every node (``input`` included), in definition order.

    Raises :class:`SpecError` naming the first node whose inputs do not fit.
    """
    if not spec.nodes:
        raise SpecError("empty spec")
    shapes = {INPUT_ID: tuple(spec.input_shape)}
    for node in spec.nodes:
        shapes[node.id] = _node_shape(node, [shapes[s] for s in node.inputs])
    return shapes


def param_shapes(spec: ArchSpec, shapes: dict | None = None) -> dict[str, tuple]:
    """Learnable tensor inventory: ``<node>.w`` and ``<node>.b`` per conv/dense node."""
    shapes = shapes or infer_shapes(spec)
    out = {}
    for node in spec.nodes:
        src = shapes[node.inputs[0]] if node.inputs else None
        if node.kind == "conv":
            kh, kw = node.attrs["k"]
            out[f"{node.id}.w"] = (node.attrs["out"], src[0], kh, kw)
            out[f"{node.id}.b"] = (node.attrs["out"],)
        elif node.kind == "dense":
            d = 1
            for n in src:
                d *= n
            out[f"{node.id}.w"] = (d, node.attrs["out"])
            out[f"{node.id}.b"] = (node.attrs["out"],)
    return out


@dataclass
class NodeReport:
    id: str
    kind: str
    shape: tuple
    weights: int
    biases: int
    macs: int
    rf: tuple[int, int]
    jump: tuple[int, int]

    @property
    def params(self) -> int:
        return self.weights + self.biases


@dataclass
class AnalysisReport:
    name: str
    nodes: list[NodeReport] = field(default_factory=list)
    merges: bool = False

    @property
    def total_params(self) -> int:
        return sum(n.params for n in self.nodes)

    @property
    def total_weights(self) -> int:
        return sum(n.weights for n in self.nodes)

    @property
    def total_macs(self) -> int:
        return sum(n.macs for n in self.nodes)

    @property
    def depth(self) -> int:
        return sum(1 for n in self.nodes if n.kind in ("conv", "dense"))

    def __getitem__(self, node_id) -> NodeReport:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def receptive_field(self, node_id) -> int:
        rf = self[node_id].rf
        return rf[0] if rf[0] == rf[1] else max(rf)

    def to_text(self) -> str:
        header = f"{'node':<24} {'kind':<8} {'output':<16} {'params':>13} {'MACs':>16} {'rf':>7}"
        lines = [
            f"# {self.name}: MACs count multiply-accumulates of conv/dense weights;"
            " biases, activations and pooling are excluded",
            header,
            "-" * len(header),
        ]
        for n in self.nodes:
            shape = "x".join(str(s) for s in n.shape)
            rf = f"{n.rf[0]}" if n.rf[0] == n.rf[1] else f"{n.rf[0]}x{n.rf[1]}"
            lines.append(
                f"{n.id:<24} {n.kind:<8} {shape:<16} {n.params:>13,d} {n.macs:>16,d} {rf:>7}"
            )
        lines.append("-" * len(header))
        lines.append(f"total parameters: {self.total_params:,d}")
        lines.append(f"total MACs: {self.total_macs:,d}")
        lines.append(f"parameter layers: {self.depth}")
        if self.merges:
            lines.append("note: at concat/add nodes the receptive field is the maximum over branches")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["node", "kind", "shape", "weights", "biases", "params", "macs", "rf_h", "rf_w"])
        for n in self.nodes:
            writer.writerow(
                [n.id, n.kind, "x".join(map(str, n.shape)), n.weights, n.biases, n.params, n.macs, *n.rf]
            )
        writer.writerow(["TOTAL", "", "", self.total_weights, self.total_params - self.total_weights,
                         self.total_params, self.total_macs, "", ""])
        writer.writerow(["DEPTH", "", "", "", "", self.depth, "", "", ""])
        return buf.getvalue()


def analyze(spec: ArchSpec) -> AnalysisReport:
    """Per-node parameters, MACs and effective receptive field.

    Receptive fields follow rf' = rf + (k - 1) * jump, jump' = jump * stride;
    global pooling and dense layers on a spatial map act as a kernel covering
    the whole map.
    """
    shapes = infer_shapes(spec)
    report = AnalysisReport(spec.name)
    rf = {INPUT_ID: ((1, 1), (1, 1))}
    for node in spec.nodes:
        src_shapes = [shapes[s] for s in node.inputs]
        src = src_shapes[0]
        (rh, rw), (jh, jw) = rf[node.inputs[0]]
        weights = biases = macs = 0
        a = node.attrs
        if node.kind in ("conv", "pool"):
            kh, kw = a["k"]
            rh, rw = rh + (kh - 1) * jh, rw + (kw - 1) * jw
            jh, jw = jh * a["s"], jw * a["s"]
            if node.kind == "conv":
                out_c, h_out, w_out = shapes[node.id]
                weights = out_c * src[0] * kh * kw
                biases = out_c
                macs = weights * h_out * w_out
        elif node.kind in ("gap", "dense") and len(src) == 3:
            rh, rw = rh + (src[1] - 1) * jh, rw + (src[2] - 1) * jw
        elif node.kind in ("add", "concat"):
            report.merges = True
            fields = [rf[s] for s in node.inputs]
            rh = max(f[0][0] for f in fields)
            rw = max(f[0][1] for f in fields)
            jh = max(f[1][0] for f in fields)
            jw = max(f[1][1] for f in fields)
        if node.kind == "dense":
            d = 1
            for n in src:
                d *= n
            weights = d * a["out"]
            biases = a["out"]
            macs = weights
        rf[node.id] = ((rh, rw), (jh, jw))
        report.nodes.append(
            NodeReport(node.id, node.kind, shapes[node.id], weights, biases, macs, (rh, rw), (jh, jw))
        )
    return report


@dataclass
class StackComparison:
    channels: int
    stack_weights: int  # three 3x3 convs, C -> C
    single_weights: int  # one 7x7 conv, C -> C
    stack_rf: int
    single_rf: int

    @property
    def extra(self) -> float:
        """Fractional weight overhead of the single large filter."""
        return self.single_weights / self.stack_weights - 1.0

    def to_text(self) -> str:
        c = self.channels
        return (
            f"three 3x3 convs, {c}->{c} channels: {self.stack_weights:,d} weights "
            f"(27C^2 = {27 * c * c:,d}), receptive field {self.stack_rf}\n"
            f"one 7x7 conv, {c}->{c} channels: {self.single_weights:,d} weights "
            f"(49C^2 = {49 * c * c:,d}), receptive field {self.single_rf}\n"
            f"the 7x7 filter needs {100 * self.extra:.0f}% more weights\n"
        )


def compare_stacks(channels: int, size: int = 16) -> StackComparison:
    """Weights and receptive field of a 3-deep 3x3 stack vs one 7x7 conv."""
    from .blocks import build_vgg_stack

    nodes = tuple(build_vgg_stack(3, channels, "stack", INPUT_ID))
    stack = ArchSpec("stack3x3", (channels, size, size), nodes, nodes[-1].id)
    single = ArchSpec(
        "single7x7",
        (channels, size, size),
        (LayerNode("c7", "conv", {"out": channels, "k": (7, 7), "s": 1, "p": 3}, (INPUT_ID,)),),
        "c7",
    )
    a, b = analyze(stack), analyze(single)
    return StackComparison(
        channels, a.total_weights, b.total_weights, a.receptive_field(stack.output), b.receptive_field("c7")
    )

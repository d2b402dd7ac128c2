"""Declarative network descriptions and their line-based text format.

Example::

    input 3x32x32
    node c1 conv out=16 k=3x3 s=1 p=1 from=input
    node r1 act relu from=c1
    node g gap from=r1
    node fc dense out=10 from=g
    node prob softmax from=fc
    output prob

Block macros (``vgg``, ``inception``, ``residual``, ``mlpconv``) expand into
primitive nodes at parse time; :func:`render` always writes the expanded form.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

from ..errors import SpecError

INPUT_ID = "input"

PRIMITIVE_KINDS = ("conv", "act", "pool", "gap", "dense", "dropout", "concat", "add", "softmax")
PARAMETRIC_KINDS = ("conv", "dense")

_ID_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.\-]*$")


@dataclass(frozen=True)
class LayerNode:
    id: str
    kind: str
    attrs: dict = field(default_factory=dict)
    inputs: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in PRIMITIVE_KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}", node=self.id)
        object.__setattr__(self, "inputs", tuple(self.inputs))


@dataclass(frozen=True)
class ArchSpec:
    name: str
    input_shape: tuple[int, int, int]
    nodes: tuple[LayerNode, ...]
    output: str

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        seen = {INPUT_ID}
        for node in self.nodes:
            if node.id in seen:
                raise SpecError(f"duplicate node id {node.id!r}", node=node.id)
            for src in node.inputs:
                if src not in seen:
                    raise SpecError(f"node {node.id!r} references undefined node {src!r}", node=node.id)
            seen.add(node.id)
        if self.output not in seen:
            raise SpecError(f"output node {self.output!r} is not defined", node=self.output)

    @property
    def node_map(self) -> dict[str, LayerNode]:
        return {n.id: n for n in self.nodes}

    def node(self, node_id: str) -> LayerNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def ancestors(self, node_id: str) -> list[LayerNode]:
        """Nodes needed to compute ``node_id``, in definition order."""
        nodes = self.node_map
        needed = set()
        stack = [node_id]
        while stack:
            nid = stack.pop()
            if nid == INPUT_ID or nid in needed:
                continue
            if nid not in nodes:
                raise KeyError(nid)
            needed.add(nid)
            stack.extend(nodes[nid].inputs)
        return [n for n in self.nodes if n.id in needed]

    def with_node(self, node_id: str, **attrs) -> "ArchSpec":
        """Copy with updated attributes on one node."""
        nodes = [
            replace(n, attrs={**n.attrs, **attrs}) if n.id == node_id else n for n in self.nodes
        ]
        if not any(n.id == node_id for n in self.nodes):
            raise KeyError(node_id)
        return replace(self, nodes=tuple(nodes))

    def text(self) -> str:
        return render(self)

    def hash(self) -> bytes:
        return spec_hash(render(self))


def spec_hash(text: str) -> bytes:
    return hashlib.sha256(text.encode("utf-8")).digest()


# -- rendering -----------------------------------------------------------------------


def _fmt_float(x: float) -> str:
    return repr(float(x))


def render_node(node: LayerNode) -> str:
    a = node.attrs
    parts = ["node", node.id, node.kind]
    if node.kind == "conv":
        kh, kw = a["k"]
        parts += [f"out={a['out']}", f"k={kh}x{kw}", f"s={a['s']}", f"p={a['p']}"]
    elif node.kind == "act":
        parts.append(a["fn"])
    elif node.kind == "pool":
        kh, kw = a["k"]
        parts += [a["mode"], f"k={kh}x{kw}", f"s={a['s']}", f"p={a['p']}"]
    elif node.kind == "dense":
        parts.append(f"out={a['out']}")
    elif node.kind == "dropout":
        parts.append(f"p={_fmt_float(a['p'])}")
    parts.append("from=" + ",".join(node.inputs))
    return " ".join(parts)


def render(spec: ArchSpec) -> str:
    c, h, w = spec.input_shape
    lines = [f"name {spec.name}", f"input {c}x{h}x{w}"]
    lines += [render_node(n) for n in spec.nodes]
    lines.append(f"output {spec.output}")
    return "\n".join(lines) + "\n"


# -- parsing -------------------------------------------------------------------------


def _int(value: str, key: str, line: int, minimum: int = 0) -> int:
    try:
        out = int(value)
    except ValueError:
        raise SpecError(f"{key}= expects an integer, got {value!r}", line=line) from None
    if out < minimum:
        raise SpecError(f"{key}= must be >= {minimum}, got {out}", line=line)
    return out


def _kernel(value: str, line: int) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+)(?:x(\d+))?", value)
    if not m:
        raise SpecError(f"kernel must look like 3x3, got {value!r}", line=line)
    kh = int(m.group(1))
    kw = int(m.group(2) or kh)
    if kh < 1 or kw < 1:
        raise SpecError(f"kernel sizes must be >= 1, got {value!r}", line=line)
    return kh, kw


def _split_tokens(tokens, line):
    positional, kv = [], {}
    for tok in tokens:
        if "=" in tok:
            key, _, value = tok.partition("=")
            if key in kv:
                raise SpecError(f"repeated key {key!r}", line=line)
            kv[key] = value
        else:
            positional.append(tok)
    return positional, kv


def _require(kv, keys, line, kind):
    missing = [k for k in keys if k not in kv]
    if missing:
        raise SpecError(f"{kind} node missing {', '.join(k + '=' for k in missing)}", line=line)


def _reject_extra(kv, allowed, line, kind):
    extra = sorted(set(kv) - set(allowed))
    if extra:
        raise SpecError(f"unexpected key(s) for {kind}: {', '.join(extra)}", line=line)


def _primitive(node_id, kind, positional, kv, sources, line) -> LayerNode:
    if kind == "conv":
        _require(kv, ("out", "k"), line, kind)
        _reject_extra(kv, ("out", "k", "s", "p"), line, kind)
        attrs = {
            "out": _int(kv["out"], "out", line, 1),
            "k": _kernel(kv["k"], line),
            "s": _int(kv.get("s", "1"), "s", line, 1),
            "p": _int(kv.get("p", "0"), "p", line, 0),
        }
    elif kind == "act":
        if len(positional) != 1 or positional[0] not in ("relu", "sigmoid", "tanh"):
            raise SpecError("act node needs one of relu|sigmoid|tanh", line=line)
        _reject_extra(kv, (), line, kind)
        attrs = {"fn": positional[0]}
    elif kind == "pool":
        if len(positional) != 1 or positional[0] not in ("max", "avg"):
            raise SpecError("pool node needs max|avg", line=line)
        _require(kv, ("k",), line, kind)
        _reject_extra(kv, ("k", "s", "p"), line, kind)
        k = _kernel(kv["k"], line)
        attrs = {
            "mode": positional[0],
            "k": k,
            "s": _int(kv.get("s", str(k[0])), "s", line, 1),
            "p": _int(kv.get("p", "0"), "p", line, 0),
        }
    elif kind == "dense":
        _require(kv, ("out",), line, kind)
        _reject_extra(kv, ("out",), line, kind)
        attrs = {"out": _int(kv["out"], "out", line, 1)}
    elif kind == "dropout":
        _reject_extra(kv, ("p",), line, kind)
        try:
            p = float(kv.get("p", "0.5"))
        except ValueError:
            raise SpecError(f"dropout p= must be a number, got {kv['p']!r}", line=line) from None
        if not 0.0 < p < 1.0:
            raise SpecError(f"dropout p must lie in (0, 1), got {p}", line=line)
        attrs = {"p": p}
    else:
        _reject_extra(kv, (), line, kind)
        attrs = {}
    if positional and kind not in ("act", "pool"):
        raise SpecError(f"unexpected token(s) {positional} for {kind}", line=line)
    if kind == "add" and len(sources) != 2:
        raise SpecError("add node needs exactly two inputs", line=line)
    if kind not in ("add", "concat") and len(sources) != 1:
        raise SpecError(f"{kind} node takes exactly one input", line=line)
    if kind == "concat" and len(sources) < 2:
        raise SpecError("concat node needs at least two inputs", line=line)
    return LayerNode(node_id, kind, attrs, tuple(sources))


def _macro(node_id, kind, positional, kv, sources, line) -> list[LayerNode]:
    from . import blocks

    if len(sources) != 1:
        raise SpecError(f"{kind} block takes exactly one input", line=line)
    src = sources[0]
    if positional:
        raise SpecError(f"unexpected token(s) {positional} for {kind}", line=line)
    if kind == "vgg":
        _require(kv, ("depth", "out"), line, kind)
        _reject_extra(kv, ("depth", "out"), line, kind)
        depth = _int(kv["depth"], "depth", line, 1)
        return blocks.build_vgg_stack(depth, _int(kv["out"], "out", line, 1), node_id, src)
    if kind == "inception":
        mode = kv.get("mode", "reduced")
        if mode not in ("naive", "reduced"):
            raise SpecError(f"inception mode must be naive|reduced, got {mode!r}", line=line)
        needed = ("n1", "n3", "n5") if mode == "naive" else ("n1", "r3", "n3", "r5", "n5", "pp")
        _require(kv, needed, line, kind)
        _reject_extra(kv, ("n1", "r3", "n3", "r5", "n5", "pp", "mode"), line, kind)
        vals = {k: _int(kv.get(k, "1"), k, line, 1) for k in ("n1", "r3", "n3", "r5", "n5", "pp")}
        cfg = blocks.InceptionConfig(
            vals["n1"], vals["r3"], vals["n3"], vals["r5"], vals["n5"], vals["pp"], mode
        )
        return blocks.build_inception(cfg, node_id, src)
    if kind == "residual":
        _require(kv, ("layers", "out"), line, kind)
        _reject_extra(kv, ("layers", "out", "shortcut", "s"), line, kind)
        try:
            cfg = blocks.ResidualConfig(
                layers=_int(kv["layers"], "layers", line, 1),
                out=_int(kv["out"], "out", line, 1),
                shortcut=kv.get("shortcut", "identity"),
                stride=_int(kv.get("s", "1"), "s", line, 1),
            )
        except ValueError as exc:
            raise SpecError(str(exc), line=line) from None
        return blocks.build_residual_block(cfg, node_id, src)
    if kind == "mlpconv":
        _require(kv, ("out", "k"), line, kind)
        _reject_extra(kv, ("out", "k", "s", "p"), line, kind)
        outs = [_int(v, "out", line, 1) for v in kv["out"].split(",")]
        return blocks.build_mlpconv(
            outs,
            _kernel(kv["k"], line),
            _int(kv.get("s", "1"), "s", line, 1),
            _int(kv.get("p", "0"), "p", line, 0),
            node_id,
            src,
        )
    raise SpecError(f"unknown layer kind {kind!r}", line=line)


MACRO_KINDS = ("vgg", "inception", "residual", "mlpconv")


def parse_archspec(text: str, name: str = "net") -> ArchSpec:
    """Parse the text format; raises :class:`SpecError` with line numbers."""
    input_shape = None
    output = None
    nodes: list[LayerNode] = []
    defined = {INPUT_ID: 0}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        head = tokens[0]
        if head == "name":
            if len(tokens) != 2:
                raise SpecError("name takes one token", line=lineno)
            name = tokens[1]
        elif head == "input":
            if input_shape is not None:
                raise SpecError("duplicate input line", line=lineno)
            m = re.fullmatch(r"(\d+)x(\d+)x(\d+)", tokens[1]) if len(tokens) == 2 else None
            if not m:
                raise SpecError("input must look like 'input <C>x<H>x<W>'", line=lineno)
            input_shape = tuple(int(g) for g in m.groups())
            if min(input_shape) < 1:
                raise SpecError("input dimensions must be >= 1", line=lineno)
        elif head == "output":
            if len(tokens) != 2:
                raise SpecError("output takes one node id", line=lineno)
            if output is not None:
                raise SpecError("duplicate output line", line=lineno)
            if tokens[1] not in defined:
                raise SpecError(f"output references undefined node {tokens[1]!r}", line=lineno, node=tokens[1])
            output = tokens[1]
        elif head == "node":
            if input_shape is None:
                raise SpecError("node before input line", line=lineno)
            if len(tokens) < 3:
                raise SpecError("node line needs an id and a kind", line=lineno)
            node_id, kind = tokens[1], tokens[2]
            if not _ID_RE.match(node_id) or node_id == INPUT_ID:
                raise SpecError(f"invalid node id {node_id!r}", line=lineno, node=node_id)
            positional, kv = _split_tokens(tokens[3:], lineno)
            if "from" not in kv:
                raise SpecError(f"node {node_id!r} missing from=", line=lineno, node=node_id)
            sources = [s for s in kv.pop("from").split(",") if s]
            for src in sources:
                if src not in defined:
                    raise SpecError(
                        f"node {node_id!r} references undefined node {src!r}", line=lineno, node=src
                    )
            if kind in MACRO_KINDS:
                new = _macro(node_id, kind, positional, kv, sources, lineno)
            elif kind in PRIMITIVE_KINDS:
                new = [_primitive(node_id, kind, positional, kv, sources, lineno)]
            else:
                raise SpecError(f"unknown layer kind {kind!r}", line=lineno, node=node_id)
            for n in new:
                if n.id in defined:
                    raise SpecError(f"duplicate node id {n.id!r}", line=lineno, node=n.id)
                defined[n.id] = lineno
            nodes.extend(new)
        else:
            raise SpecError(f"unknown directive {head!r}", line=lineno)
    if input_shape is None:
        raise SpecError("spec has no input line")
    if not nodes:
        raise SpecError("spec has no nodes")
    if output is None:
        raise SpecError("spec has no output line")
    return ArchSpec(name, input_shape, tuple(nodes), output)


def load_archspec(path) -> ArchSpec:
    path = Path(path)
    return parse_archspec(path.read_text(encoding="utf-8"), name=path.stem)


SPEC_DIR = Path(__file__).resolve().parent.parent / "specs"


def shipped_spec(name: str) -> ArchSpec:
    """Load one of the architecture files bundled with the package."""
    return load_archspec(SPEC_DIR / f"{name}.spec")


def shipped_spec_names() -> list[str]:
    return sorted(p.stem for p in SPEC_DIR.glob("*.spec"))

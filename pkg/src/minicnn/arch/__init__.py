"""Architecture descriptions, block builders, static analysis and execution."""
from .analyzer import AnalysisReport, analyze, infer_shapes, param_shapes
from .blocks import (
    InceptionConfig,
    ResidualConfig,
    build_inception,
    build_mlpconv,
    build_residual_block,
    build_vgg_stack,
)
from .network import activations, forward, logits_id, predict_logits, predict_proba
from .spec import (
    INPUT_ID,
    ArchSpec,
    LayerNode,
    load_archspec,
    parse_archspec,
    render,
    shipped_spec,
    shipped_spec_names,
    spec_hash,
)
